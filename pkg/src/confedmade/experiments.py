"""Experiment configs, the gradient-check suite and the mask ablation grids.

Experiment config JSON (all keys optional except ``scenario``)::

    {
      "scenario": "A" | "B" | "C" | "custom" | "synthetic",
      "data": {
        "mnist":  {"images": "<idx>", "labels": "<idx>"},
        "emnist": {"images": "<idx>", "labels": "<idx>"},
        "binary": {"<name>": {"path": "<csv>", "splits": {"train": n, ...}}}
      },
      "synthetic": {"n_tasks": 2, "n_samples": 1000, "n_features": 20,
                    "n_components": 2},
      "n_clients": 5, "n_tasks": 5, "samples_per_task": null,
      "split": [0.7, 0.1, 0.2], "classes_per_task": null,
      "assignment": [[["mnist", [3]], ...], ...],
      "rounds_per_task": 50, "epochs_per_round": 1, "workers": 1,
      "binarize_threshold": 0.5,
      "hyper": {...Hyperparams fields...}
    }

Relative data paths resolve against the config file's directory, then the
default data directory.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .baselines import ewc_penalty, estimate_fisher, fedprox_penalty
from .config import Hyperparams
from .data import (BernoulliMixture, build_scenario, data_dir, load_binary_csv,
                   load_labeled_images, scenario_from_arrays)
from .decomposition import (DecomposedClientParams, VARIANTS, flat_loss_fn, snapshot_task)
from .exceptions import ConfigurationError
from .made import MadeConfig, MadeModel, nll_and_grad
from .numeric import finite_diff_check
from .runner import run_scenario

CONFIG_KEYS = {"scenario", "data", "synthetic", "n_clients", "n_tasks", "samples_per_task",
               "split", "classes_per_task", "assignment", "rounds_per_task",
               "epochs_per_round", "workers", "binarize_threshold", "hyper"}


def load_config(path):
    path = Path(path)
    cfg = json.loads(path.read_text())
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config keys {unknown}; valid: {sorted(CONFIG_KEYS)}")
    cfg["_base"] = str(path.parent)
    return cfg


def _resolve(p, base):
    p = Path(p)
    if p.is_absolute() or (Path(base) / p).exists():
        return p if p.is_absolute() else Path(base) / p
    return data_dir() / p


def load_datasets(cfg):
    base = cfg.get("_base", ".")
    out = {}
    for name, spec in (cfg.get("data") or {}).items():
        if name == "binary":
            for k, s in spec.items():
                out[k] = load_binary_csv(_resolve(s["path"], base), {"name": k, **s})
        else:
            out[name] = load_labeled_images(_resolve(spec["images"], base),
                                            _resolve(spec["labels"], base), name)
    return out


def scenario_from_config(cfg, seed=None):
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    hyper = Hyperparams.from_dict(cfg.get("hyper", {}))
    common = dict(rounds_per_task=cfg.get("rounds_per_task", 50),
                  epochs_per_round=cfg.get("epochs_per_round", 1), hyper=hyper,
                  workers=cfg.get("workers", 1))
    name = cfg.get("scenario")
    if name == "synthetic":
        s = cfg.get("synthetic", {})
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        D = int(s.get("n_features", 20))
        n_tasks = int(s.get("n_tasks", cfg.get("n_tasks", 2)))
        tasks = []
        for _ in range(int(cfg.get("n_clients", 2))):
            seq = []
            for _ in range(n_tasks):
                mix = BernoulliMixture.separated(D, int(s.get("n_components", 2)),
                                                 float(rng.uniform(0.7, 0.95)))
                seq.append(mix.sample(rng, int(s.get("n_samples", 1000))))
            tasks.append(seq)
        split = tuple(cfg.get("split", (0.8, 0.0, 0.2)))
        return scenario_from_arrays(tasks, seed=seed, split=split, name="synthetic", **common)
    datasets = load_datasets(cfg)
    assignment = cfg.get("assignment")
    if assignment is not None:
        assignment = [[(s, tuple(cls)) for s, cls in seq] for seq in assignment]
    return build_scenario(
        name, datasets, seed, n_clients=cfg.get("n_clients", 5), n_tasks=cfg.get("n_tasks"),
        samples_per_task=cfg.get("samples_per_task"),
        split=tuple(cfg.get("split", (0.7, 0.1, 0.2))),
        classes_per_task=cfg.get("classes_per_task"), assignment=assignment,
        binarize_threshold=cfg.get("binarize_threshold", 0.5), **common)


# -- gradient checks ----------------------------------------------------------------

def _toy_decomposed(rng, D=5, hidden=(4,), direct=True):
    config = MadeConfig(D, hidden, "tanh", direct_connection=direct)
    model = MadeModel.create(config, rng, np.random.default_rng(int(rng.integers(1 << 30))))
    logits = {g: rng.normal(size=config.group_size(g)) for g in config.layer_groups()}
    base = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params.items()}
    dcp = DecomposedClientParams.initial(config, base, logits, lambda3=3.0,
                                         lambda1=0.01, lambda2=0.5)
    for k, a in dcp.adaptive[0].items():
        a += 0.3 * rng.normal(size=a.shape)
    snaps = [snapshot_task(dcp, 0.1)]
    kb = {(1, 0): {k: rng.normal(size=v.shape) for k, v in dcp.adaptive[0].items()}}
    dcp.new_task({k: v + 0.1 * rng.normal(size=v.shape) for k, v in dcp.base.items()},
                 [(1, 0)], alpha_init=0.1)
    for k, a in dcp.adaptive[1].items():
        a += 0.3 * rng.normal(size=a.shape)
    for s in dcp.alpha:
        dcp.alpha[s] = rng.normal(size=dcp.alpha[s].shape)
    X = (rng.random((7, D)) < 0.5).astype(np.float64)
    return dcp, model, snaps, kb, X


def gradcheck_suite(seed=0, perturbation=1e-5):
    """Max relative finite-difference error of every loss (dict name -> error)."""
    rng = np.random.default_rng(seed)
    out = {}
    config = MadeConfig(6, (5, 4), "tanh", direct_connection=True)
    model = MadeModel.create(config, rng)
    # random biases and an odd batch keep every true gradient away from exact zero
    model.params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params.items()}
    X = (rng.random((7, 6)) < 0.5).astype(np.float64)
    out["nll"] = finite_diff_check(lambda p: nll_and_grad(p, model.masks, X, config),
                                   model.params, perturbation)
    dcp, m2, snaps, kb, X2 = _toy_decomposed(rng)
    for variant in VARIANTS:
        fn = flat_loss_fn(dcp, X2, m2.masks, snaps, kb, variant)
        out[variant] = finite_diff_check(fn, dcp.flat(), perturbation)
    fisher = estimate_fisher(model, X)
    out["ewc"] = finite_diff_check(lambda p: ewc_penalty(p, fisher, 3.0),
                                   {k: v + 0.1 for k, v in model.params.items()}, perturbation)
    ref = {k: v + rng.normal(size=v.shape) for k, v in model.params.items()}
    out["fedprox"] = finite_diff_check(lambda p: fedprox_penalty(p, ref, 0.7), model.params,
                                       perturbation)
    out["n_parameters"] = {"nll": int(sum(v.size for v in model.params.values())),
                           "decomposed": int(sum(v.size for v in dcp.flat().values()))}
    return out


# -- mask ablations -----------------------------------------------------------------

ABLATION_VARIANTS = {
    "baseline": {},
    "dc": {"direct_connection": True},
    "ca": {"connectivity_agnostic": True},
    "oa": {"order_agnostic": True},
}


def ablate_masks(X, clients=(1, 2, 5), sync=("sync", "distinct"), variants=("baseline",),
                 rounds=10, hidden=64, seed=0, hyper=None, split=(0.8, 0.0, 0.2),
                 epochs_per_round=1, workers=1):
    """Federated-offline NLL grid over client counts, mask sync and MADE variants.

    ``X`` is a pooled binary matrix; it is dealt evenly to the clients. The NLL
    is that of the global model under each client's masks, on each client's
    held-out rows, averaged over clients.
    """
    hyper = hyper or Hyperparams()
    X = np.asarray(X)
    rows = []
    for C in clients:
        chunks = np.array_split(X[np.random.default_rng(seed).permutation(X.shape[0])], C)
        for var in variants:
            if var not in ABLATION_VARIANTS:
                raise ConfigurationError(
                    f"unknown ablation variant {var!r}; choose from {sorted(ABLATION_VARIANTS)}")
            for s in sync:
                h = hyper.with_(hidden_sizes=(int(hidden),), sync_masks=(s == "sync"),
                                direct_connection=False, connectivity_agnostic=False,
                                order_agnostic=False)
                h = h.with_(**ABLATION_VARIANTS[var])
                sc = scenario_from_arrays([[c] for c in chunks], seed=seed, split=split,
                                          name="ablation", rounds_per_task=rounds,
                                          epochs_per_round=epochs_per_round, hyper=h)
                rep = run_scenario(sc, "fed-offline", workers=workers)
                rows.append({"clients": int(C), "sync": s, "variant": var,
                             "nll": rep.final_nll})
    return rows
