"""Client-side learners: a plain MADE client and a decomposed client.

Both keep their own model, optimizer state and random stream and share no
mutable state with other clients, so they can train concurrently.
"""
from __future__ import annotations

import numpy as np

from .decomposition import (DecomposedClientParams, decomposed_loss, snapshot_task,
                            task_weights, threshold_mask)
from .exceptions import DataError
from .federation import Message, SparseTensor
from .made import (MadeConfig, MadeModel, backward_pass, forward_pass, iterate_minibatches,
                   nll_from_logits, resample, sample_assignments)
from .numeric import AdamState, adam_step
from .seeding import derive_seed


def round_seed(base_seed, config: MadeConfig, round_index):
    """Mask seed for a round: the base seed, or a fresh one per round under OA/CA."""
    agnostic = config.order_agnostic or config.connectivity_agnostic
    if not agnostic or round_index == 0:
        return int(base_seed)
    return derive_seed(base_seed, "round", int(round_index))


class _MaskedClient:
    def __init__(self, cid, config: MadeConfig, hyper, mask_seed, rng):
        self.cid = int(cid)
        self.config = config
        self.hyper = hyper
        self.base_seed = int(mask_seed)
        self.rng = rng
        ordering, assignments = sample_assignments(np.random.default_rng(self.base_seed), config)
        self.masks_model = MadeModel(config, {}, ordering, assignments)
        self.applied_seed = self.base_seed
        self.batch_rng = None

    @property
    def masks(self):
        return self.masks_model.masks

    def apply_seed(self, seed):
        """Rebuild masks from a round seed (no-op if already applied)."""
        if seed is None or seed == self.applied_seed:
            self._batch_stream(self.applied_seed)
            return
        resample(self.masks_model, np.random.default_rng(seed))
        self.applied_seed = int(seed)
        self._batch_stream(seed)

    def _batch_stream(self, seed):
        if self.config.resample_every == "batch" and (
                self.config.order_agnostic or self.config.connectivity_agnostic):
            self.batch_rng = np.random.default_rng(derive_seed(seed, "batch"))
        else:
            self.batch_rng = None

    def own_round_seed(self, round_index):
        return round_seed(self.base_seed, self.config, round_index)

    def _maybe_resample_batch(self):
        if self.batch_rng is not None:
            resample(self.masks_model, self.batch_rng)


class PlainClient(_MaskedClient):
    """MADE client trained on plain NLL plus optional penalties."""

    def __init__(self, cid, config, hyper, init_params, mask_seed, rng):
        super().__init__(cid, config, hyper, mask_seed, rng)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in init_params.items()}
        self.adam = AdamState.for_params(self.params, **hyper.adam_kwargs)

    @property
    def model(self):
        m = self.masks_model
        return MadeModel(self.config, self.params, m.ordering, m.assignments,
                         canonical_ordering=m.canonical_ordering)

    def receive(self, msg: Message):
        self.params = {k: v.copy() for k, v in msg.weights().items()}
        self.apply_seed(msg.seed)

    def train(self, X, epochs=1, penalties=()):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise DataError(f"client {self.cid} has no training data")
        losses = []
        for _ in range(epochs):
            for idx in iterate_minibatches(self.rng, X.shape[0], self.hyper.batch_size):
                self._maybe_resample_batch()
                xb = X[idx]
                logits, cache = forward_pass(self.params, self.masks, xb, self.config)
                nll, dl = nll_from_logits(logits, xb)
                grads = backward_pass(self.params, self.masks, cache, dl / xb.shape[0], self.config)
                loss = float(nll.mean())
                for pen in penalties:
                    v, g = pen(self.params)
                    loss += v
                    for k, gk in g.items():
                        grads[k] = grads[k] + gk
                self.params = adam_step(self.params, grads, self.adam)
                losses.append(loss)
        return float(np.mean(losses))

    def upload_message(self, round_index, task):
        tensors = {}
        for k, v in self.params.items():
            w = v * self.masks[k] if k in self.masks else v
            tensors[f"W/{k}"] = SparseTensor.from_dense(w)
        return Message("upload", round_index, task, self.cid, tensors)

    def evaluate(self, X, params=None):
        params = self.params if params is None else params
        m = self.masks_model
        model = MadeModel(self.config, params, m.ordering, m.assignments,
                          canonical_ordering=m.canonical_ordering)
        return float(model.nll(X, model.eval_masks()).mean())


class DecomposedClient(_MaskedClient):
    """Client holding base, gates, task-adaptive parameters and attention."""

    def __init__(self, cid, config, hyper, mask_seed, rng, variant="confedmade",
                 upload_made_mask=True):
        super().__init__(cid, config, hyper, mask_seed, rng)
        self.variant = variant
        self.upload_made_mask = upload_made_mask
        self.dcp = None
        self.snapshots = []
        self.kb = {}
        self.adam = None

    def _initial_logits(self):
        h = self.hyper
        out = {}
        for g in self.config.layer_groups():
            k = self.config.group_size(g)
            if h.mask_init == "uniform":
                u = self.rng.uniform(1e-3, 1.0 - 1e-3, size=k)
                out[g] = np.log(u) - np.log1p(-u)
            else:
                out[g] = np.full(k, float(h.mask_init_logit))
        return out

    def begin_task(self, task, base):
        h = self.hyper
        sources = sorted(s for s in self.kb if s[0] != self.cid)
        if self.dcp is None:
            self.dcp = DecomposedClientParams.initial(
                self.config, base, self._initial_logits(), lambda3=h.lambda3,
                lambda1=h.lambda1, lambda2=h.lambda2, decompose_biases=h.decompose_biases)
            self.dcp.alpha = {s: np.full(len(self.config.layer_groups()), h.alpha_init)
                              for s in sources}
        else:
            self.dcp.new_task(base, sources, h.alpha_init)
        if self.dcp.task != task:
            raise DataError(f"client {self.cid} expected task {self.dcp.task}, got {task}")
        self.adam = AdamState.for_params(self.dcp.flat(h.train_adaptive), **h.adam_kwargs)

    def receive(self, msg: Message, first_round_of_task):
        self.kb.update(msg.kb_entries())
        base = msg.weights()
        if first_round_of_task:
            self.begin_task(msg.task, base)
        else:
            self.dcp.base = {k: v.copy() for k, v in base.items()}
        self.apply_seed(msg.seed)

    def train(self, X, epochs=1):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise DataError(f"client {self.cid} has no training data")
        h = self.hyper
        losses = []
        for _ in range(epochs):
            for idx in iterate_minibatches(self.rng, X.shape[0], h.batch_size):
                self._maybe_resample_batch()
                loss, grads, _ = decomposed_loss(self.dcp, X[idx], self.masks, self.snapshots,
                                                 self.kb, self.variant, h.train_adaptive)
                flat = self.dcp.flat(h.train_adaptive)
                self.dcp.set_flat(adam_step(flat, grads, self.adam))
                losses.append(loss)
        return float(np.mean(losses))

    def upload_message(self, round_index, task):
        dcp = self.dcp
        tensors = {}
        for k, v in dcp.base.items():
            if k in self.config.weight_keys():
                keep = threshold_mask(dcp.mask_logits[self.config.group_of(k)],
                                      self.hyper.mask_cutoff)
                w = v * keep[:, None]
                if self.upload_made_mask:
                    w = w * self.masks[k]
            else:
                w = v
            tensors[f"W/{k}"] = SparseTensor.from_dense(w)
        return Message("upload", round_index, task, self.cid, tensors)

    def finish_task(self):
        """Sparsified adaptive parameters for the server; freezes a snapshot."""
        A = self.dcp.adaptive[-1]
        floor = self.hyper.kb_sparsity
        out = {k: np.where(np.abs(v) >= floor, v, 0.0) if floor > 0 else v.copy()
               for k, v in A.items()}
        self.snapshots.append(snapshot_task(self.dcp, self.hyper.mask_cutoff))
        return out

    def task_params(self, task):
        masks = self.masks_model.eval_masks() if self.variant == "confedmade" else None
        return task_weights(self.dcp, self.snapshots[task], self.kb, masks)

    def evaluate(self, X, task):
        m = self.masks_model
        model = MadeModel(self.config, self.task_params(task), m.ordering, m.assignments,
                          canonical_ordering=m.canonical_ordering)
        return float(model.nll(X, model.eval_masks()).mean())

    def alpha_rows(self, task):
        snap = self.snapshots[task]
        groups = self.config.layer_groups()
        return [{"client": self.cid, "task": task, "source_client": i, "source_task": j,
                 "layer": g, "value": float(v[gi])}
                for (i, j), v in sorted(snap.alpha.items()) for gi, g in enumerate(groups)]
