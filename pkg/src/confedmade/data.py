"""Dataset ingestion and task-sequence construction.

Labels exist only on :class:`LabeledImages` and are consumed by the scenario
builders to choose which rows go into which task; everything handed to training
is a :class:`BinaryDataset`, which has no label field.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .config import Hyperparams, ScenarioConfig, TaskSpec
from .exceptions import ConfigurationError, DataError, FormatError

log = logging.getLogger(__name__)

DATA_DIR_ENV = "CONFEDMADE_DATA_DIR"
SPLITS = ("train", "validation", "test")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def data_dir():
    """Default data directory (``$CONFEDMADE_DATA_DIR`` or ``./data``)."""
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


@dataclass
class BinaryDataset:
    X: np.ndarray
    splits: dict = field(default_factory=dict)
    provenance: str = ""
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.X)
        if X.ndim != 2:
            raise DataError(f"binary dataset must be 2-D, got shape {X.shape}")
        if X.size and not np.isin(X, (0, 1)).all():
            raise DataError("binary dataset contains entries outside {0, 1}")
        self.X = X.astype(np.uint8)
        n = X.shape[0]
        used = []
        for name, idx in self.splits.items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"split {name!r} indexes outside 0..{n - 1}")
            self.splits[name] = idx
            used.append(idx)
        if used:
            allidx = np.concatenate(used)
            if np.unique(allidx).size != allidx.size:
                raise DataError("dataset splits overlap")

    @property
    def n_samples(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    def split(self, name):
        if name not in self.splits:
            raise DataError(f"dataset {self.provenance!r} has no {name!r} split")
        return self.X[self.splits[name]]


@dataclass
class LabeledImages:
    """Raw images with labels, as read from an IDX pair."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "images"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    @property
    def classes(self):
        return sorted(int(k) for k in np.unique(self.labels))


def _open_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path):
    """Parse an IDX file (optionally gzip-compressed) into a uint8 array."""
    raw = _open_maybe_gzip(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    zero, dtype_code, ndim = struct.unpack_from(">HBB", raw, 0)
    magic = struct.unpack_from(">I", raw, 0)[0]
    if zero != 0 or dtype_code != 0x08 or magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    expected = int(np.prod(dims)) if dims else 0
    actual = len(raw) - header_len
    if actual < expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes but found {actual}",
            offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_len).reshape(dims)


def load_labeled_images(images_path, labels_path, name="mnist"):
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError(f"expected an image/label IDX pair, got shapes {images.shape} "
                          f"and {labels.shape}")
    return LabeledImages(images, labels, name)


def binarize(images, threshold=0.5):
    """Fixed-threshold binarization to flat uint8 rows; binary inputs pass through."""
    arr = np.asarray(images)
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
    if np.isin(flat, (0, 1)).all():
        return flat.astype(np.uint8)
    return (flat.astype(np.float64) / 255.0 > threshold).astype(np.uint8)


def load_binary_csv(path, schema=None):
    """Read comma-separated 0/1 rows into a :class:`BinaryDataset`.

    ``schema`` keys (all optional): ``name``, ``header`` (``True``/``False``;
    default auto-detect), ``splits`` (declared ``{"train": n, ...}`` sizes).
    Declared sizes that do not match the row count are recorded as a warning
    and the rows are split proportionally instead.
    """
    schema = dict(schema or {})
    name = schema.get("name", Path(path).stem)
    lines = Path(path).read_text().splitlines()
    rows = []
    header = schema.get("header")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if lineno == 1 and header is not False:
            if header is True or not all(c in ("0", "1") for c in cells):
                continue
        for col, c in enumerate(cells, start=1):
            if c not in ("0", "1"):
                raise DataError(f"{path}: row {lineno}, column {col}: {c!r} is not 0 or 1")
        rows.append([int(c) for c in cells])
    if rows and len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: rows have differing lengths")
    n_cols = len(rows[0]) if rows else 0
    if not rows and schema.get("n_features"):
        n_cols = int(schema["n_features"])
    X = np.array(rows, dtype=np.uint8).reshape(len(rows), n_cols)
    warnings = []
    declared = schema.get("splits")
    n = len(rows)
    splits = {}
    if declared:
        total = sum(int(declared.get(s, 0)) for s in SPLITS)
        if total == n:
            start = 0
            for s in SPLITS:
                k = int(declared.get(s, 0))
                splits[s] = np.arange(start, start + k)
                start += k
        else:
            msg = f"{name}: declared split sizes total {total} but file has {n} rows"
            log.warning(msg)
            warnings.append(msg)
            fractions = [int(declared.get(s, 0)) / total if total else 0 for s in SPLITS]
            splits = proportional_splits(np.arange(n), fractions)
    return BinaryDataset(X, splits, provenance=f"csv:{name}", warnings=warnings)


def proportional_splits(indices, fractions):
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.size
    bounds = np.floor(np.cumsum([0.0] + list(fractions)) * n + 1e-9).astype(int)
    bounds[-1] = min(bounds[-1], n)
    return {s: indices[bounds[i]:bounds[i + 1]] for i, s in enumerate(SPLITS)}


@dataclass
class BernoulliMixture:
    weights: np.ndarray
    probs: np.ndarray  # (n_components, D)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if self.weights.shape != (self.probs.shape[0],) or self.weights.min() < 0 \
                or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigurationError("mixture weights must be a probability vector, one per component")
        if self.probs.min() <= 0 or self.probs.max() >= 1:
            raise ConfigurationError("component probabilities must lie strictly inside (0, 1)")

    @classmethod
    def from_spec(cls, spec, n_features=None):
        if isinstance(spec, cls):
            return spec
        if spec.get("kind") == "separated":
            return cls.separated(n_features, spec.get("n_components", 2), spec.get("high", 0.9))
        return cls(spec["weights"], spec["probs"])

    @classmethod
    def separated(cls, n_features, n_components=2, high=0.9):
        """Components that each switch on a different contiguous block of bits."""
        probs = np.full((n_components, n_features), 1.0 - high)
        for k, block in enumerate(np.array_split(np.arange(n_features), n_components)):
            probs[k, block] = high
        return cls(np.full(n_components, 1.0 / n_components), probs)

    @property
    def n_features(self):
        return self.probs.shape[1]

    def sample(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return (rng.random((n, self.n_features)) < self.probs[comp]).astype(np.uint8)

    def nll(self, X):
        """Exact per-example negative log-likelihood."""
        X = np.asarray(X, dtype=np.float64)
        logp = X @ np.log(self.probs).T + (1.0 - X) @ np.log1p(-self.probs).T
        return -logsumexp(logp + np.log(self.weights), axis=1)

    def entropy(self, max_enumerate=22):
        """Exact entropy by enumeration for small D."""
        D = self.n_features
        if D > max_enumerate:
            raise ValueError(f"exact entropy needs D <= {max_enumerate}")
        total = 0.0
        chunk = 1 << 16
        for start in range(0, 1 << D, chunk):
            codes = np.arange(start, min(start + chunk, 1 << D))
            X = ((codes[:, None] >> np.arange(D)) & 1)
            nll = self.nll(X)
            total += float(np.sum(np.exp(-nll) * nll))
        return total


def synth_binary(rng, n, n_features, mixture=None, split=(0.8, 0.0, 0.2)):
    """Sample ``n`` rows from a Bernoulli mixture (default: two separated components)."""
    mix = BernoulliMixture.separated(n_features) if mixture is None \
        else BernoulliMixture.from_spec(mixture, n_features)
    if mix.n_features != n_features:
        raise ConfigurationError(f"mixture has {mix.n_features} features, expected {n_features}")
    X = mix.sample(rng, n)
    return BinaryDataset(X, proportional_splits(np.arange(n), split),
                         provenance=f"synthetic:bernoulli-mixture:{len(mix.weights)}")


# -- scenarios ---------------------------------------------------------------------

@dataclass
class Scenario:
    """A :class:`ScenarioConfig` plus the materialized per-client task data."""

    config: ScenarioConfig
    data: list  # data[client][task] -> BinaryDataset
    warnings: list = field(default_factory=list)

    @property
    def n_inputs(self):
        return self.data[0][0].n_features

    @property
    def n_clients(self):
        return self.config.n_clients

    @property
    def n_tasks(self):
        return self.config.n_tasks


SCENARIOS = ("A", "B", "C", "custom")


def _split_counts(n, split):
    if isinstance(split, dict):
        counts = [int(split.get(s, 0)) for s in SPLITS]
        if sum(counts) <= n:
            return counts
        split = [c / sum(counts) for c in counts]
    bounds = np.floor(np.cumsum([0.0] + list(split)) * n + 1e-9).astype(int)
    return [int(bounds[i + 1] - bounds[i]) for i in range(3)]


def _make_task(X, rng, split, samples, provenance, warnings):
    rows = rng.permutation(X.shape[0])
    if samples is not None:
        if samples > rows.size:
            msg = f"{provenance}: requested {samples} samples, only {rows.size} available"
            warnings.append(msg)
        rows = rows[:samples]
    X = X[rows]
    counts = _split_counts(X.shape[0], split)
    splits, start = {}, 0
    for s, k in zip(SPLITS, counts):
        splits[s] = np.arange(start, start + k)
        start += k
    return BinaryDataset(X, splits, provenance=provenance)


def _labeled_assignments(rng, n_clients, n_tasks, sources, caps):
    """Per client, pick a source per task and disjoint classes of it."""
    plan = []
    for c in range(n_clients):
        pools = {s: list(rng.permutation(sources[s].classes)) for s in sources}
        seq = []
        for t in range(n_tasks):
            avail = [s for s in sources if len(pools[s]) >= caps[s]]
            if not avail:
                raise ConfigurationError(
                    f"client {c} task {t}: not enough classes left for "
                    f"{n_tasks} tasks with classes per task {caps}")
            s = avail[int(rng.integers(len(avail)))] if len(avail) > 1 else avail[0]
            cls = tuple(sorted(int(k) for k in pools[s][:caps[s]]))
            pools[s] = pools[s][caps[s]:]
            seq.append((s, cls))
        plan.append(seq)
    return plan


def _materialize_labeled(rng, plan, sources, split, samples_per_task, threshold, warnings):
    """Partition each class's rows among every (client, task) that uses it."""
    users = {}
    for c, seq in enumerate(plan):
        for t, (s, classes) in enumerate(seq):
            for k in classes:
                users.setdefault((s, k), []).append((c, t))
    chunks = {}
    for (s, k), who in sorted(users.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        idx = np.flatnonzero(sources[s].labels == k)
        idx = idx[rng.permutation(idx.size)]
        for (c, t), part in zip(who, np.array_split(idx, len(who))):
            chunks.setdefault((c, t), []).append(part)
    data = []
    for c, seq in enumerate(plan):
        row = []
        for t, (s, classes) in enumerate(seq):
            idx = np.sort(np.concatenate(chunks[(c, t)]))
            X = binarize(sources[s].images[idx], threshold)
            row.append(_make_task(X, rng, split, samples_per_task,
                                  f"{s}:classes={list(classes)}:client={c}:task={t}", warnings))
        data.append(row)
    return data


def build_scenario(name, datasets, seed=0, *, n_clients=5, n_tasks=None, samples_per_task=None,
                   split=(0.7, 0.1, 0.2), classes_per_task=None, assignment=None,
                   binarize_threshold=0.5, rounds_per_task=50, epochs_per_round=1,
                   hyper=None, workers=1):
    """Build one of the task-sequence scenarios.

    ``A``: one labeled source (``datasets["mnist"]``), one random class per task.
    ``B``: a dict of :class:`BinaryDataset`; each task is one whole dataset.
    ``C``: labeled ``mnist`` and ``emnist`` sources; each task draws classes from
    one of them (1 digit or 13 letters by default).
    ``custom``: ``assignment[client][task] = (source, classes)`` given explicitly,
    e.g. for overlap-controlled attention experiments.
    """
    if name not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    warnings = []
    hyper = hyper or Hyperparams()
    if name in ("A", "C", "custom"):
        if name == "A":
            sources = {"mnist": datasets["mnist"]}
            caps = {"mnist": (classes_per_task or {}).get("mnist", 1)
                    if isinstance(classes_per_task, dict) else (classes_per_task or 1)}
            n_tasks = n_tasks or 5
            plan = _labeled_assignments(rng, n_clients, n_tasks, sources, caps)
        elif name == "C":
            sources = {"mnist": datasets["mnist"], "emnist": datasets["emnist"]}
            caps = {"mnist": 1, "emnist": 13}
            caps.update(classes_per_task or {})
            n_tasks = n_tasks or 5
            plan = _labeled_assignments(rng, n_clients, n_tasks, sources, caps)
        else:
            if assignment is None:
                raise ConfigurationError("custom scenario needs an explicit assignment")
            sources = dict(datasets)
            plan = [[(s, tuple(int(k) for k in cls)) for s, cls in seq] for seq in assignment]
            n_clients = len(plan)
            for seq in plan:
                for s, cls in seq:
                    if s not in sources:
                        raise ConfigurationError(f"assignment names unknown source {s!r}")
                    missing = set(cls) - set(sources[s].classes)
                    if missing:
                        raise ConfigurationError(f"source {s!r} has no classes {sorted(missing)}")
        data = _materialize_labeled(rng, plan, sources, split, samples_per_task,
                                    binarize_threshold, warnings)
        specs = [[TaskSpec(s, cls, *(d.splits[x].size for x in SPLITS))
                  for (s, cls), d in zip(seq, drow)] for seq, drow in zip(plan, data)]
    else:
        names = sorted(datasets)
        n_tasks = n_tasks or len(names)
        if n_tasks > len(names):
            raise ConfigurationError(f"{n_tasks} tasks requested but only {len(names)} datasets")
        width = max(datasets[k].n_features for k in names)
        padded = {}
        for k in names:
            X = datasets[k].X
            if X.shape[1] < width:
                warnings.append(f"{k}: padded from {X.shape[1]} to {width} features with zeros")
                X = np.pad(X, ((0, 0), (0, width - X.shape[1])))
            padded[k] = X
            warnings.extend(datasets[k].warnings)
        plan = [[names[i] for i in rng.permutation(len(names))[:n_tasks]] for _ in range(n_clients)]
        users = {}
        for c, seq in enumerate(plan):
            for t, k in enumerate(seq):
                users.setdefault(k, []).append((c, t))
        parts = {}
        for k in names:
            who = users.get(k, [])
            if not who:
                continue
            idx = rng.permutation(padded[k].shape[0])
            for ct, part in zip(who, np.array_split(idx, len(who))):
                parts[ct] = np.sort(part)
        data = [[_make_task(padded[k][parts[(c, t)]], rng, split, samples_per_task,
                            f"{k}:client={c}:task={t}", warnings)
                 for t, k in enumerate(seq)] for c, seq in enumerate(plan)]
        specs = [[TaskSpec(k, None, *(d.splits[x].size for x in SPLITS))
                  for k, d in zip(seq, drow)] for seq, drow in zip(plan, data)]
    config = ScenarioConfig(name=name, n_clients=n_clients, tasks=specs,
                            rounds_per_task=rounds_per_task, epochs_per_round=epochs_per_round,
                            seed=int(seed), hyper=hyper, workers=workers)
    for w in warnings:
        log.warning(w)
    return Scenario(config, data, warnings)


def scenario_from_arrays(tasks, seed=0, split=(0.8, 0.0, 0.2), name="arrays", **config_kw):
    """Wrap ``tasks[client][task]`` binary arrays into a :class:`Scenario`."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    warnings = []
    data = [[_make_task(binarize(np.asarray(X)), rng, split, None,
                        f"array:client={c}:task={t}", warnings)
             for t, X in enumerate(seq)] for c, seq in enumerate(tasks)]
    specs = [[TaskSpec(f"array-{c}-{t}", None, *(d.splits[x].size for x in SPLITS))
              for t, d in enumerate(row)] for c, row in enumerate(data)]
    config = ScenarioConfig(name=name, n_clients=len(data), tasks=specs, seed=int(seed),
                            **config_kw)
    return Scenario(config, data, warnings)
