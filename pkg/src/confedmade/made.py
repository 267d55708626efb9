"""Masked autoencoder for distribution estimation over binary vectors.

Parameter keys: ``W1..WL`` (hidden weights, shape ``(K_l, K_{l-1})``), ``b1..bL``,
``V`` (``(D, K_L)``), ``c`` (``(D,)``) and, with direct connections, ``D``
(``(D, D)``). Masks use the same keys as the weight matrices.

Orderings are rank vectors: ``ordering[d]`` is the autoregressive rank in
``1..D`` of input dimension ``d``; output ``d`` may only see inputs of strictly
lower rank.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataError, FormatError, UsageError, ValidationError
from .numeric import AdamState, adam_step

PROB_CLAMP = 1e-7

ACTIVATIONS = {
    "relu": (lambda a: np.maximum(a, 0.0), lambda a, h: (a > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda a, h: 1.0 - h * h),
}

RESAMPLE_CADENCES = ("round", "batch")


@dataclass(frozen=True)
class MadeConfig:
    n_inputs: int
    hidden_sizes: tuple = (64,)
    activation: str = "relu"
    direct_connection: bool = False
    order_agnostic: bool = False
    connectivity_agnostic: bool = False
    mask_seed: int = 0
    resample_every: str = "round"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(k) for k in self.hidden_sizes))
        if int(self.n_inputs) < 2:
            raise ConfigurationError(f"MADE needs at least 2 inputs, got {self.n_inputs}")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigurationError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        if self.resample_every not in RESAMPLE_CADENCES:
            raise ConfigurationError(
                f"resample_every must be one of {RESAMPLE_CADENCES}, got {self.resample_every!r}")

    @property
    def n_hidden_layers(self):
        return len(self.hidden_sizes)

    def weight_keys(self):
        keys = [f"W{l}" for l in range(1, self.n_hidden_layers + 1)] + ["V"]
        if self.direct_connection:
            keys.append("D")
        return keys

    def bias_keys(self):
        return [f"b{l}" for l in range(1, self.n_hidden_layers + 1)] + ["c"]

    def param_shapes(self):
        sizes = (self.n_inputs,) + self.hidden_sizes
        shapes = {}
        for l in range(1, self.n_hidden_layers + 1):
            shapes[f"W{l}"] = (sizes[l], sizes[l - 1])
            shapes[f"b{l}"] = (sizes[l],)
        shapes["V"] = (self.n_inputs, sizes[-1])
        shapes["c"] = (self.n_inputs,)
        if self.direct_connection:
            shapes["D"] = (self.n_inputs, self.n_inputs)
        return shapes

    def layer_groups(self):
        """Unit groups: one per hidden layer plus the output layer."""
        return [f"h{l}" for l in range(1, self.n_hidden_layers + 1)] + ["out"]

    def group_of(self, key):
        if key in ("V", "c", "D"):
            return "out"
        return f"h{key[1:]}"

    def group_size(self, group):
        if group == "out":
            return self.n_inputs
        return self.hidden_sizes[int(group[1:]) - 1]

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


def sample_assignments(rng, config: MadeConfig, ordering=None):
    """Draw ``(ordering, assignments)``.

    The ordering is a uniform permutation when order-agnostic training is on,
    otherwise the identity (or the supplied ``ordering``). Every hidden unit
    gets an integer drawn uniformly from ``1..D-1``.
    """
    D = int(config.n_inputs)
    if D < 2:
        raise ConfigurationError(f"MADE needs at least 2 inputs, got {D}")
    if ordering is None:
        if config.order_agnostic:
            ordering = rng.permutation(D) + 1
        else:
            ordering = np.arange(1, D + 1)
    ordering = np.asarray(ordering, dtype=np.int64)
    assignments = [rng.integers(1, D, size=k).astype(np.int64) for k in config.hidden_sizes]
    return ordering, assignments


def check_ordering(ordering, D):
    ordering = np.asarray(ordering, dtype=np.int64)
    if ordering.shape != (D,) or not np.array_equal(np.sort(ordering), np.arange(1, D + 1)):
        raise ValidationError(f"ordering must be a permutation of 1..{D}")
    return ordering


def build_masks(ordering, assignments, config: MadeConfig):
    """Binary connectivity masks (float64 0/1 arrays keyed like the weights)."""
    D = config.n_inputs
    ordering = check_ordering(ordering, D)
    if len(assignments) != config.n_hidden_layers:
        raise ValidationError(
            f"expected {config.n_hidden_layers} assignment vectors, got {len(assignments)}")
    masks = {}
    prev = ordering
    for l, (m, k) in enumerate(zip(assignments, config.hidden_sizes), start=1):
        m = np.asarray(m, dtype=np.int64)
        if m.shape != (k,):
            raise ValidationError(f"layer {l} assignments have shape {m.shape}, expected ({k},)")
        masks[f"W{l}"] = (m[:, None] >= prev[None, :]).astype(np.float64)
        prev = m
    masks["V"] = (ordering[:, None] > prev[None, :]).astype(np.float64)
    if config.direct_connection:
        masks["D"] = (ordering[:, None] > ordering[None, :]).astype(np.float64)
    return masks


def init_params(config: MadeConfig, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    for key, shape in config.param_shapes().items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            params[key] = rng.uniform(-bound, bound, size=shape)
        else:
            params[key] = np.zeros(shape)
    return params


def check_binary_input(X, D):
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != D:
        raise ValidationError(f"expected binary rows of length {D}, got shape {X.shape}")
    Xf = X.astype(np.float64)
    if not np.all((Xf == 0.0) | (Xf == 1.0)):
        raise ValidationError("input must be binary (entries in {0, 1})")
    return Xf


# -- functional core, shared with the decomposed client ---------------------------

def forward_pass(params, masks, X, config: MadeConfig):
    """Return ``(logits, cache)`` for a batch of float rows ``X``."""
    act, _ = ACTIVATIONS[config.activation]
    pre, hs = [], [X]
    h = X
    for l in range(1, config.n_hidden_layers + 1):
        a = h @ (params[f"W{l}"] * masks[f"W{l}"]).T + params[f"b{l}"]
        h = act(a)
        pre.append(a)
        hs.append(h)
    logits = h @ (params["V"] * masks["V"]).T + params["c"]
    if config.direct_connection:
        logits = logits + X @ (params["D"] * masks["D"]).T
    return logits, (pre, hs)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0:
        return sigmoid(z[None])[0]
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def nll_from_logits(logits, X):
    """Per-example NLL (nats) and d(sum NLL)/d(logits) under the probability clamp."""
    p = sigmoid(logits)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -(X * np.log(pc) + (1.0 - X) * np.log1p(-pc)).sum(axis=1)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dlogits = (p - X) * inside
    return nll, dlogits


def backward_pass(params, masks, cache, dlogits, config: MadeConfig, square=False):
    """Gradients w.r.t. the raw (pre-mask) parameters.

    With ``square=True`` returns the per-example squared gradients summed over
    the batch instead; each layer's per-example gradient is an outer product, so
    the sum of squares factorizes exactly.
    """
    _, dact = ACTIVATIONS[config.activation]
    pre, hs = cache
    X = hs[0]
    grads = {}

    def layer(key, delta, inp):
        if square:
            return ((delta * delta).T @ (inp * inp)) * masks[key]
        return (delta.T @ inp) * masks[key]

    def bias(delta):
        return (delta * delta).sum(axis=0) if square else delta.sum(axis=0)

    grads["V"] = layer("V", dlogits, hs[-1])
    grads["c"] = bias(dlogits)
    if config.direct_connection:
        grads["D"] = layer("D", dlogits, X)
    delta_h = dlogits @ (params["V"] * masks["V"])
    for l in range(config.n_hidden_layers, 0, -1):
        delta = delta_h * dact(pre[l - 1], hs[l])
        grads[f"W{l}"] = layer(f"W{l}", delta, hs[l - 1])
        grads[f"b{l}"] = bias(delta)
        if l > 1:
            delta_h = delta @ (params[f"W{l}"] * masks[f"W{l}"])
    return grads


def nll_and_grad(params, masks, X, config: MadeConfig):
    """Mean NLL over the batch and its gradient w.r.t. ``params``."""
    logits, cache = forward_pass(params, masks, X, config)
    nll, dlogits = nll_from_logits(logits, X)
    n = X.shape[0]
    grads = backward_pass(params, masks, cache, dlogits / n, config)
    return float(nll.mean()), grads


def iterate_minibatches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- model object -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"MADECKPT"
CHECKPOINT_VERSION = 1


@dataclass
class MadeModel:
    config: MadeConfig
    params: dict
    ordering: np.ndarray
    assignments: list
    masks: dict = field(default=None)
    canonical_ordering: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ordering = check_ordering(self.ordering, self.config.n_inputs)
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]
        if self.canonical_ordering is None:
            self.canonical_ordering = self.ordering.copy()
        self.masks = build_masks(self.ordering, self.assignments, self.config)

    @classmethod
    def create(cls, config: MadeConfig, rng=None, mask_rng=None):
        """Fresh model: weights from ``rng``, masks from ``mask_rng`` (default:
        a generator seeded with ``config.mask_seed``)."""
        if rng is None:
            rng = np.random.default_rng(0)
        if mask_rng is None:
            mask_rng = np.random.default_rng(config.mask_seed)
        ordering, assignments = sample_assignments(mask_rng, config)
        return cls(config, init_params(config, rng), ordering, assignments)

    @property
    def n_inputs(self):
        return self.config.n_inputs

    def rebuild_masks(self):
        self.masks = build_masks(self.ordering, self.assignments, self.config)

    def set_connectivity(self, ordering, assignments):
        self.ordering = check_ordering(ordering, self.n_inputs)
        self.assignments = [np.asarray(a, dtype=np.int64) for a in assignments]
        self.rebuild_masks()

    def resample_ordering(self, rng):
        if not self.config.order_agnostic:
            raise UsageError("resample_ordering requires order_agnostic=True")
        self.ordering = rng.permutation(self.n_inputs) + 1
        self.rebuild_masks()
        return self

    def resample_connectivity(self, rng):
        if not self.config.connectivity_agnostic:
            raise UsageError("resample_connectivity requires connectivity_agnostic=True")
        D = self.n_inputs
        self.assignments = [rng.integers(1, D, size=k).astype(np.int64)
                            for k in self.config.hidden_sizes]
        self.rebuild_masks()
        return self

    def eval_masks(self):
        """Masks under the canonical ordering (used for evaluation)."""
        if np.array_equal(self.ordering, self.canonical_ordering):
            return self.masks
        return build_masks(self.canonical_ordering, self.assignments, self.config)

    def forward(self, X, masks=None):
        """Conditional probabilities ``p(x_d = 1 | x_<d)`` for each row of ``X``."""
        Xf = check_binary_input(X, self.n_inputs)
        logits, _ = forward_pass(self.params, self.masks if masks is None else masks,
                                 Xf, self.config)
        out = sigmoid(logits)
        return out[0] if np.ndim(X) == 1 else out

    def nll(self, X, masks=None):
        """Per-example negative log-likelihood in nats."""
        Xf = check_binary_input(X, self.n_inputs)
        logits, _ = forward_pass(self.params, self.masks if masks is None else masks,
                                 Xf, self.config)
        nll, _ = nll_from_logits(logits, Xf)
        return nll

    def loss_and_grad(self, X):
        return nll_and_grad(self.params, self.masks, check_binary_input(X, self.n_inputs),
                            self.config)

    def sample(self, rng, n, masks=None):
        """Ancestral sampling: one forward pass per dimension, in rank order."""
        masks = self.masks if masks is None else masks
        ordering = self.ordering if masks is self.masks else self.canonical_ordering
        D = self.n_inputs
        X = np.zeros((int(n), D))
        for d in np.argsort(ordering, kind="stable"):
            logits, _ = forward_pass(self.params, masks, X, self.config)
            p = sigmoid(logits[:, d])
            X[:, d] = (rng.random(int(n)) < p).astype(np.float64)
        return X.astype(np.uint8)

    def copy(self):
        return MadeModel(self.config, {k: v.copy() for k, v in self.params.items()},
                         self.ordering.copy(), [a.copy() for a in self.assignments],
                         canonical_ordering=self.canonical_ordering.copy())

    # Checkpoint layout (all little-endian):
    #   8s  magic "MADECKPT" | u32 version | u32 header length n | n bytes UTF-8 JSON
    #   header {"config", "ordering", "canonical_ordering", "assignments",
    #           "params": [[key, shape], ...]}
    #   then each parameter block in header order as raw float64 '<f8', C order.
    def save(self, path):
        keys = list(self.config.param_shapes())
        header = {
            "config": self.config.to_dict(),
            "ordering": self.ordering.tolist(),
            "canonical_ordering": self.canonical_ordering.tolist(),
            "assignments": [a.tolist() for a in self.assignments],
            "params": [[k, list(self.params[k].shape)] for k in keys],
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
            fh.write(hb)
            for k in keys:
                fh.write(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC:
            raise FormatError("not a MADE checkpoint", offset=0)
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=8)
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        cfg = dict(header["config"])
        config = MadeConfig(**cfg)
        pos = 16 + hlen
        params = {}
        for key, shape in header["params"]:
            n = int(np.prod(shape)) * 8
            if pos + n > len(data):
                raise FormatError(f"truncated parameter block {key!r}", offset=pos)
            params[key] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=pos) \
                .reshape(shape).astype(np.float64)
            pos += n
        return cls(config, params, np.array(header["ordering"]), header["assignments"],
                   canonical_ordering=np.array(header["canonical_ordering"]))


def train_epoch(model: MadeModel, X, rng, state: AdamState, batch_size=32,
                penalties=(), mask_rng=None):
    """One pass of mini-batch Adam over ``X``; returns the mean batch loss.

    ``penalties`` are callables ``params -> (value, grads)`` added to the mean
    NLL (EWC, FedProx). ``mask_rng`` drives per-batch resampling when the model
    is configured for it.
    """
    Xf = np.asarray(X, dtype=np.float64)
    if Xf.shape[0] == 0:
        raise DataError("cannot train on an empty dataset")
    losses = []
    per_batch = model.config.resample_every == "batch" and mask_rng is not None
    for idx in iterate_minibatches(rng, Xf.shape[0], batch_size):
        if per_batch:
            resample(model, mask_rng)
        loss, grads = nll_and_grad(model.params, model.masks, Xf[idx], model.config)
        for pen in penalties:
            v, g = pen(model.params)
            loss += v
            for k, gk in g.items():
                grads[k] = grads[k] + gk
        model.params = adam_step(model.params, grads, state)
        losses.append(loss)
    return float(np.mean(losses))


def resample(model: MadeModel, rng):
    """Apply whichever agnostic resampling the model is configured for."""
    if model.config.order_agnostic:
        model.resample_ordering(rng)
    if model.config.connectivity_agnostic:
        model.resample_connectivity(rng)
