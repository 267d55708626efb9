"""Regularizers and single-learner helpers for the reference methods.

The sequence drivers (finetune, cumulative replay, EWC) are wired through
:func:`confedmade.runner.run_scenario`; the functions here work on a single
:class:`MadeModel` and are also usable on their own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError
from .made import (MadeModel, backward_pass, check_binary_input, forward_pass,
                   nll_from_logits, train_epoch)
from .numeric import AdamState


@dataclass(frozen=True)
class FisherDiagonal:
    values: dict
    reference: dict

    def __post_init__(self):
        for k, v in self.values.items():
            if k not in self.reference or self.reference[k].shape != v.shape:
                raise DimensionError(f"fisher {k!r}", v.shape,
                                     None if k not in self.reference else self.reference[k].shape)
            if np.any(v < 0):
                raise ValueError(f"fisher {k!r} has negative entries")


def estimate_fisher(model: MadeModel, X, batch_size=256):
    """Mean squared per-example NLL gradient over ``X`` at the current parameters."""
    X = check_binary_input(X, model.n_inputs)
    acc = {k: np.zeros_like(v) for k, v in model.params.items()}
    for start in range(0, X.shape[0], batch_size):
        xb = X[start:start + batch_size]
        logits, cache = forward_pass(model.params, model.masks, xb, model.config)
        _, dlogits = nll_from_logits(logits, xb)
        sq = backward_pass(model.params, model.masks, cache, dlogits, model.config, square=True)
        for k in acc:
            acc[k] += sq[k]
    n = max(X.shape[0], 1)
    return FisherDiagonal({k: v / n for k, v in acc.items()},
                          {k: v.copy() for k, v in model.params.items()})


def ewc_penalty(params, fisher: FisherDiagonal, lambda_ewc):
    """``(lambda/2) * sum F (theta - theta*)^2`` and its gradient."""
    value, grads = 0.0, {}
    for k, F in fisher.values.items():
        if params[k].shape != F.shape:
            raise DimensionError(f"parameter {k!r}", F.shape, params[k].shape)
        d = params[k] - fisher.reference[k]
        value += 0.5 * lambda_ewc * float(np.sum(F * d * d))
        grads[k] = lambda_ewc * F * d
    return value, grads


def fedprox_penalty(params, global_params, mu):
    """``(mu/2) * ||theta - W_G||^2`` and its gradient."""
    value, grads = 0.0, {}
    for k, g in global_params.items():
        if params[k].shape != g.shape:
            raise DimensionError(f"parameter {k!r}", g.shape, params[k].shape)
        d = params[k] - g
        value += 0.5 * mu * float(np.sum(d * d))
        grads[k] = mu * d
    return value, grads


def as_penalty(fn, *args):
    """Bind a penalty to the ``params -> (value, grads)`` form used by ``train_epoch``."""
    return lambda params: fn(params, *args)


def train_offline(model: MadeModel, X_train, rng, epochs=1, batch_size=32, lr=1e-3,
                  weight_decay=0.0, X_test=None):
    """Plain single-model training; returns ``(model, test NLL or None)``."""
    state = AdamState.for_params(model.params, lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        train_epoch(model, X_train, rng, state, batch_size)
    nll = None if X_test is None else float(model.nll(X_test, model.eval_masks()).mean())
    return model, nll
