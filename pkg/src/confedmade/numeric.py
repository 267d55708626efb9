"""Masked affine layers, Adam(W), and a central finite-difference gradient check.

A ``ParamSet`` is a plain ``dict[str, np.ndarray]`` of float64 arrays. Every
function here either is pure or mutates only the state object it is handed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .exceptions import DeterminismError, DimensionError, NumericError, ValidationError

ParamSet = dict  # dict[str, np.ndarray]


def check_binary_mask(M, name="mask"):
    M = np.asarray(M, dtype=np.float64)
    bad = ~((M == 0.0) | (M == 1.0))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"{name} entry {idx} = {M[idx]!r} is not in {{0, 1}}")
    return M


def _check_affine_shapes(x, W, M, b=None):
    if W.ndim != 2:
        raise DimensionError("weight matrix", "(rows, cols)", W.shape)
    if M.shape != W.shape:
        raise DimensionError("mask", W.shape, M.shape)
    if x.shape[-1] != W.shape[1]:
        raise DimensionError("input", (W.shape[1],), x.shape)
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError("bias", (W.shape[0],), b.shape)


def masked_affine_forward(x, W, M, b):
    """Return ``b + (W * M) @ x``.

    ``x`` may be a single vector or a batch of row vectors of shape
    ``(n, cols)``; the activation is left to the caller.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    M = check_binary_mask(M)
    _check_affine_shapes(x, W, M, b)
    return x @ (W * M).T + b


def masked_affine_backward(grad_out, x, W, M):
    """Gradients of ``b + (W * M) @ x`` given the upstream gradient.

    Returns ``(grad_W, grad_b, grad_x)``. ``grad_W`` is exactly zero wherever
    ``M`` is zero. Batched inputs sum the parameter gradients over rows.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    M = check_binary_mask(M)
    _check_affine_shapes(x, W, M)
    if grad_out.shape[-1] != W.shape[0] or grad_out.shape[:-1] != x.shape[:-1]:
        raise DimensionError("grad_out", x.shape[:-1] + (W.shape[0],), grad_out.shape)
    WM = W * M
    if x.ndim == 1:
        grad_W = np.outer(grad_out, x) * M
        grad_b = grad_out.copy()
    else:
        grad_W = (grad_out.T @ x) * M
        grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ WM
    return grad_W, grad_b, grad_x


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters for :func:`adam_step`.

    ``weight_decay`` is decoupled (AdamW); zero gives plain Adam.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        for k, p in params.items():
            state.m[k] = np.zeros_like(p, dtype=np.float64)
            state.v[k] = np.zeros_like(p, dtype=np.float64)
        return state

    def track(self, key, like):
        """Start tracking a new tensor (zero moments)."""
        self.m[key] = np.zeros_like(like, dtype=np.float64)
        self.v[key] = np.zeros_like(like, dtype=np.float64)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> ParamSet:
    """One bias-corrected Adam step; returns new arrays and advances ``state``."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise DimensionError("gradient keys", sorted(params), f"mismatch on {missing}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise DimensionError(f"gradient {k!r}", params[k].shape, g.shape)
        if k not in state.m or state.m[k].shape != g.shape:
            raise DimensionError(f"adam state {k!r}", g.shape,
                                 None if k not in state.m else state.m[k].shape)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {k!r}", {k: float("nan")})
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    inv_sqrt_c2 = 1.0 / np.sqrt(c2)
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m[k]
        v = state.v[k]
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # step = lr * (m / c1) / (sqrt(v / c2) + eps), evaluated in place
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        new = np.subtract(p, tmp)
        if state.weight_decay:
            np.multiply(p, state.lr * state.weight_decay, out=tmp)
            new -= tmp
        out[k] = new
    return out


def finite_diff_check(loss_fn: Callable, params: Mapping[str, np.ndarray],
                      perturbation: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``. The relative error of each coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss0, grads0 = loss_fn(params)
    loss1, grads1 = loss_fn(params)
    if not (loss0 == loss1 and all(np.array_equal(grads0[k], grads1[k]) for k in grads0)):
        raise DeterminismError("loss_fn returned different results for identical parameters")

    worst = 0.0
    for key, p in params.items():
        analytic = np.asarray(grads0[key], dtype=np.float64)
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + perturbation
            up, _ = loss_fn(params)
            flat[idx] = orig - perturbation
            down, _ = loss_fn(params)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * perturbation)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return float(worst)
