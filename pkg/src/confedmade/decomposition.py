"""Base / task-adaptive parameter decomposition and its two training objectives.

A client's effective weights for its current task are

    W = B * sigmoid(m) + A_t + sum_{(i, j)} alpha_(i,j) * A_i^(j)

where ``sigmoid(m)`` is one gate per receiving unit (broadcast across that
unit's incoming weights) and ``alpha`` holds one scalar per knowledge-base
source and layer group. With the autoregressive masks supplied, every term is
multiplied by the mask (``compose_weights(..., masks=...)``); the MADE forward
pass masks its weights anyway, so both forms give the same network output.

Trainable tensors are exposed through a flat naming scheme used by Adam and
the gradient checker: ``B/<key>``, ``m/<group>``, ``A/<task>/<key>`` and
``alpha/<client>/<task>``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, ConsistencyError, NumericError
from .made import MadeConfig, backward_pass, forward_pass, nll_from_logits, sigmoid

VARIANTS = ("confedmade", "fedweit")


def init_task_adaptive(base, lambda3, keys=None):
    """New task-adaptive parameters ``B / lambda3``."""
    if not lambda3 > 0:
        raise ConfigurationError(f"lambda3 must be positive, got {lambda3}")
    keys = list(base) if keys is None else keys
    return {k: np.asarray(base[k], dtype=np.float64) / lambda3 for k in keys}


def threshold_mask(logits, cutoff):
    """Binary keep-mask: 1 where ``sigmoid(logit) > cutoff``."""
    if not 0.0 <= cutoff < 1.0:
        raise ConfigurationError(f"cutoff must lie in [0, 1), got {cutoff}")
    return (sigmoid(np.asarray(logits, dtype=np.float64)) > cutoff).astype(np.float64)


@dataclass
class DecomposedClientParams:
    config: MadeConfig
    base: dict
    mask_logits: dict
    adaptive: list = field(default_factory=list)
    alpha: dict = field(default_factory=dict)
    lambda1: float = 1e-4
    lambda2: float = 100.0
    lambda3: float = 100.0
    decompose_biases: bool = False

    @classmethod
    def initial(cls, config, base, mask_logits, lambda3=100.0, **kw):
        base = {k: np.array(v, dtype=np.float64) for k, v in base.items()}
        dcp = cls(config, base, {g: np.array(v, dtype=np.float64) for g, v in mask_logits.items()},
                  lambda3=lambda3, **kw)
        dcp.adaptive.append(init_task_adaptive(base, lambda3, dcp.decomposed_keys))
        return dcp

    @property
    def task(self):
        return len(self.adaptive) - 1

    @property
    def decomposed_keys(self):
        keys = self.config.weight_keys()
        if self.decompose_biases:
            keys = keys + self.config.bias_keys()
        return keys

    @property
    def groups(self):
        return self.config.layer_groups()

    def gates(self):
        return {g: sigmoid(v) for g, v in self.mask_logits.items()}

    def new_task(self, base, alpha_sources, alpha_init=0.1):
        """Start the next task: fresh ``A = B / lambda3`` and a new attention table."""
        self.base = {k: np.array(v, dtype=np.float64) for k, v in base.items()}
        self.adaptive.append(init_task_adaptive(self.base, self.lambda3, self.decomposed_keys))
        self.alpha = {src: np.full(len(self.groups), float(alpha_init)) for src in alpha_sources}

    # flat views used by the optimizer
    def flat(self, train_adaptive=True):
        out = {f"B/{k}": v for k, v in self.base.items()}
        out.update({f"m/{g}": v for g, v in self.mask_logits.items()})
        if train_adaptive:
            for j, a in enumerate(self.adaptive):
                out.update({f"A/{j}/{k}": v for k, v in a.items()})
        out.update({f"alpha/{i}/{j}": v for (i, j), v in self.alpha.items()})
        return out

    def set_flat(self, flat):
        for name, value in flat.items():
            kind, _, rest = name.partition("/")
            if kind == "B":
                self.base[rest] = value
            elif kind == "m":
                self.mask_logits[rest] = value
            elif kind == "A":
                j, _, k = rest.partition("/")
                self.adaptive[int(j)][k] = value
            elif kind == "alpha":
                i, _, j = rest.partition("/")
                self.alpha[(int(i), int(j))] = value
            else:
                raise KeyError(name)

    def copy(self):
        return DecomposedClientParams(
            self.config, {k: v.copy() for k, v in self.base.items()},
            {g: v.copy() for g, v in self.mask_logits.items()},
            [{k: v.copy() for k, v in a.items()} for a in self.adaptive],
            {s: v.copy() for s, v in self.alpha.items()},
            self.lambda1, self.lambda2, self.lambda3, self.decompose_biases)


@dataclass(frozen=True)
class FrozenTaskSnapshot:
    """State kept from a completed task for the drift penalty and its evaluation.

    ``gates`` are the unit gates with entries at or below the cutoff zeroed.
    """

    task: int
    gates: dict
    base: dict
    adaptive: dict
    alpha: dict


def snapshot_task(dcp: DecomposedClientParams, cutoff):
    gates = {g: sigmoid(v) * threshold_mask(v, cutoff) for g, v in dcp.mask_logits.items()}
    return FrozenTaskSnapshot(
        task=dcp.task,
        gates=gates,
        base={k: dcp.base[k].copy() for k in dcp.decomposed_keys},
        adaptive={k: v.copy() for k, v in dcp.adaptive[-1].items()},
        alpha={s: v.copy() for s, v in dcp.alpha.items()},
    )


def _gate_of(config, key, gates):
    if key in config.bias_keys():
        return None
    return gates[config.group_of(key)][:, None]


def _compose(config, base, gates, adaptive, alpha, kb, masks, dkeys):
    groups = config.layer_groups()
    missing = [s for s in alpha if s not in kb]
    if missing:
        raise ConsistencyError(f"attention refers to knowledge-base entries {missing} that are absent")
    W = {}
    for key, b in base.items():
        if key not in dkeys:
            W[key] = b
            continue
        g = _gate_of(config, key, gates)
        w = b * g if g is not None else b.copy()
        w = w + adaptive[key]
        gi = groups.index(config.group_of(key))
        for src, a in alpha.items():
            w = w + a[gi] * kb[src][key]
        if masks is not None and key in masks:
            w = w * masks[key]
        W[key] = w
    return W


def compose_weights(dcp: DecomposedClientParams, kb_entries, masks=None):
    """Effective parameters of the current task (masked form when ``masks`` given)."""
    return _compose(dcp.config, dcp.base, dcp.gates(), dcp.adaptive[-1], dcp.alpha,
                    kb_entries, masks, dcp.decomposed_keys)


def task_weights(dcp: DecomposedClientParams, snapshot: FrozenTaskSnapshot, kb_entries,
                 masks=None):
    """Effective parameters for a completed task, from its frozen snapshot."""
    return _compose(dcp.config, dcp.base, snapshot.gates, dcp.adaptive[snapshot.task],
                    snapshot.alpha, kb_entries, masks, dcp.decomposed_keys)


def decomposed_loss(dcp: DecomposedClientParams, X, masks, snapshots, kb_entries,
                    variant="confedmade", train_adaptive=True):
    """Loss, flat gradients and per-term values for one batch.

    ``variant="confedmade"`` masks the composition and the L1 penalty on the
    task-adaptive parameters with the autoregressive masks; ``"fedweit"``
    leaves both unmasked. The drift penalty is never masked.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown loss variant {variant!r}")
    if len(snapshots) != dcp.task:
        raise ConsistencyError(
            f"task {dcp.task} needs {dcp.task} snapshots of earlier tasks, got {len(snapshots)}")
    config = dcp.config
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    dkeys = dcp.decomposed_keys
    groups = config.layer_groups()
    gates = dcp.gates()
    t = dcp.task
    A_t = dcp.adaptive[t]
    use_mask = variant == "confedmade"

    W = _compose(config, dcp.base, gates, A_t, dcp.alpha, kb_entries,
                 masks if use_mask else None, dkeys)
    logits, cache = forward_pass(W, masks, X, config)
    nll, dlogits = nll_from_logits(logits, X)
    gW = backward_pass(W, masks, cache, dlogits / n, config)

    grads = {}
    dm = {g: np.zeros_like(v) for g, v in dcp.mask_logits.items()}
    dA = [{k: np.zeros_like(v) for k, v in a.items()} for a in dcp.adaptive]
    dalpha = {s: np.zeros(len(groups)) for s in dcp.alpha}
    for key in dcp.base:
        gk = gW[key]
        if key not in dkeys:
            grads[f"B/{key}"] = gk
            continue
        gate = _gate_of(config, key, gates)
        if gate is None:
            grads[f"B/{key}"] = gk.copy()
        else:
            grads[f"B/{key}"] = gk * gate
            dm[config.group_of(key)] += (gk * dcp.base[key]).sum(axis=1)
        dA[t][key] += gk
        gi = groups.index(config.group_of(key))
        for src in dcp.alpha:
            dalpha[src][gi] += float(np.sum(gk * kb_entries[src][key]))
    for g in dm:
        dm[g] *= gates[g] * (1.0 - gates[g])

    # sparsity: L1 of the gates and of every task-adaptive tensor
    l1 = sum(float(v.sum()) for v in gates.values())
    for g in dm:
        dm[g] += dcp.lambda1 * gates[g] * (1.0 - gates[g])
    for j, a in enumerate(dcp.adaptive):
        for key, v in a.items():
            M = masks.get(key) if (use_mask and masks is not None) else None
            vm = v * M if M is not None else v
            l1 += float(np.abs(vm).sum())
            if dcp.lambda1:
                dA[j][key] += dcp.lambda1 * np.sign(vm)

    # drift of earlier tasks' effective parameters
    drift = 0.0
    for snap in snapshots:
        i = snap.task
        for key in dkeys:
            gate = _gate_of(config, key, snap.gates)
            dB = dcp.base[key] - snap.base[key]
            r = (dB * gate if gate is not None else dB) + (dcp.adaptive[i][key] - snap.adaptive[key])
            drift += float(np.sum(r * r))
            g2 = 2.0 * dcp.lambda2 * r
            grads[f"B/{key}"] = grads[f"B/{key}"] + (g2 * gate if gate is not None else g2)
            dA[i][key] += g2

    nll_mean = float(nll.mean())
    loss = nll_mean + dcp.lambda1 * l1 + dcp.lambda2 * drift
    terms = {"nll": nll_mean, "l1": dcp.lambda1 * l1, "drift": dcp.lambda2 * drift}
    if not np.isfinite(loss):
        raise NumericError(f"non-finite decomposed loss {terms}", terms)

    for g, v in dm.items():
        grads[f"m/{g}"] = v
    if train_adaptive:
        for j, a in enumerate(dA):
            for key, v in a.items():
                grads[f"A/{j}/{key}"] = v
    for (i, j), v in dalpha.items():
        grads[f"alpha/{i}/{j}"] = v
    return loss, grads, terms


def confedmade_loss(dcp, X, masks, snapshots, kb_entries, train_adaptive=True):
    return decomposed_loss(dcp, X, masks, snapshots, kb_entries, "confedmade", train_adaptive)


def fedweit_loss(dcp, X, masks, snapshots, kb_entries, train_adaptive=True):
    return decomposed_loss(dcp, X, masks, snapshots, kb_entries, "fedweit", train_adaptive)


def flat_loss_fn(dcp, X, masks, snapshots, kb_entries, variant="confedmade"):
    """Adapter ``flat_params -> (loss, flat_grads)`` for :func:`finite_diff_check`."""
    def fn(flat):
        probe = dcp.copy()
        probe.set_flat(flat)
        loss, grads, _ = decomposed_loss(probe, X, masks, snapshots, kb_entries, variant)
        return loss, grads
    return fn
