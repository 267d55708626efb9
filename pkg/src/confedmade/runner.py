"""Round/task engine: runs any registered method over a scenario.

Clients train concurrently within a round (thread pool); everything that
touches shared state (serialization, ledger, aggregation) happens afterwards in
client order, so results do not depend on the worker count.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .baselines import as_penalty, estimate_fisher, ewc_penalty, fedprox_penalty
from .clients import DecomposedClient, PlainClient, round_seed
from .exceptions import ConfedmadeError, DataError, ScenarioError
from .federation import (CLIENT_TO_SERVER, Channel, CommLedger, ServerState,
                         broadcast_round_start, fedavg_aggregate, finish_task)
from .made import MadeConfig, init_params
from .methods import resolve_method
from .metrics import LossMatrix, RunReport
from .seeding import derive_seed, stream


class _Pool:
    def __init__(self, workers):
        self.workers = max(1, int(workers or 1))
        self.executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self.executor is None:
            return [fn(x) for x in items]
        return list(self.executor.map(fn, items))

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()


def _guard(fn, task, round_index):
    def wrapped(c):
        try:
            return fn(c)
        except ScenarioError:
            raise
        except (ConfedmadeError, ValueError, FloatingPointError, KeyError) as exc:
            raise ScenarioError(exc, task, round_index, c) from exc
    return wrapped


def model_config(n_inputs, hyper, spec):
    return MadeConfig(n_inputs=n_inputs, hidden_sizes=hyper.hidden_sizes,
                      activation=hyper.activation, direct_connection=spec.direct_connection,
                      order_agnostic=spec.order_agnostic,
                      connectivity_agnostic=spec.connectivity_agnostic,
                      resample_every=hyper.resample_every)


def _split(scenario, name):
    out = []
    for c, row in enumerate(scenario.data):
        cells = []
        for t, d in enumerate(row):
            X = d.split(name).astype(np.float64)
            if name != "validation" and X.shape[0] == 0:
                raise DataError(f"client {c} task {t} has an empty {name!r} split")
            cells.append(X)
        out.append(cells)
    return out


class _Run:
    def __init__(self, scenario, method, workers, on_message):
        self.scenario = scenario
        self.cfg = scenario.config
        self.hyper = self.cfg.hyper
        self.seed = int(self.cfg.seed)
        self.spec = resolve_method(method, self.hyper)
        self.mconf = model_config(scenario.n_inputs, self.hyper, self.spec)
        self.init = init_params(self.mconf, stream(self.seed, "init"))
        self.base_mask_seed = derive_seed(self.seed, "mask")
        self.C = self.cfg.n_clients
        self.T = self.cfg.n_tasks
        self.R = self.cfg.rounds_per_task
        self.E = self.cfg.epochs_per_round
        self.train = _split(scenario, "train")
        self.test = _split(scenario, "test")
        self.ledger = CommLedger()
        self.channel = Channel(self.ledger, on_message)
        self.pool = _Pool(workers if workers is not None else self.cfg.workers)
        self.lm = LossMatrix(self.T)
        self.alpha = []

    def mask_seed(self, c):
        if self.spec.sync_masks or c == 0:
            return self.base_mask_seed
        return derive_seed(self.seed, "mask", c)

    def client_rng(self, c):
        return stream(self.seed, "client", c)

    def round_seeds(self, server):
        if not self.spec.sync_masks:
            return [None] * self.C
        return [round_seed(self.base_mask_seed, self.mconf, server.round)] * self.C

    def shapes(self):
        return [self.mconf.param_shapes()] * self.C

    def set_row(self, t, per_client):
        self.lm.set_row(t, np.mean(np.asarray(per_client, dtype=np.float64), axis=0))

    # -- drivers -------------------------------------------------------------------
    def run_fedavg(self, train, tasks, rounds):
        spec = self.spec
        server = ServerState({k: v.copy() for k, v in self.init.items()}, self.base_mask_seed)
        clients = [PlainClient(c, self.mconf, self.hyper, self.init, self.mask_seed(c),
                               self.client_rng(c)) for c in range(self.C)]
        rows = []
        for t in range(tasks):
            server.task = t
            for r in range(rounds):
                payloads = broadcast_round_start(server, self.channel, self.shapes(),
                                                 self.round_seeds(server), r == 0)
                rnd = server.round

                def work(c):
                    cl = clients[c]
                    cl.receive(payloads[c])
                    if not spec.sync_masks:
                        cl.apply_seed(cl.own_round_seed(rnd))
                    pens = ()
                    if spec.loss == "fedprox":
                        pens = (as_penalty(fedprox_penalty, payloads[c].weights(), self.hyper.mu),)
                    cl.train(train[c][t], self.E, pens)
                    return cl.upload_message(rnd, t)

                uploads = self.pool.map(_guard(work, t, rnd), range(self.C))
                received = [self.channel.send(CLIENT_TO_SERVER, u) for u in uploads]
                server.weights = fedavg_aggregate(received)
                server.round += 1
            rows.append(self.pool.map(
                _guard(lambda c: [clients[c].evaluate(self.test[c][i], server.weights)
                                  for i in range(min(t, self.T - 1) + 1)], t, server.round),
                range(self.C)))
        return server, clients, rows

    def run_joint(self):
        pooled = np.concatenate([X for row in self.train for X in row])
        total_rounds = self.T * self.R
        if self.spec.federated:
            if self.C > 1:
                pooled = pooled[stream(self.seed, "pool").permutation(pooled.shape[0])]
            chunks = np.array_split(pooled, self.C)
            train = [[chunks[c]] for c in range(self.C)]
            server, clients, _ = self.run_fedavg(train, 1, total_rounds)
            final = [[clients[c].evaluate(self.test[c][i], server.weights) for i in range(self.T)]
                     for c in range(self.C)]
        else:
            learner = PlainClient(0, self.mconf, self.hyper, self.init, self.base_mask_seed,
                                  self.client_rng(0))
            for r in range(total_rounds):
                learner.apply_seed(learner.own_round_seed(r))
                learner.train(pooled, self.E)
            final = [[learner.evaluate(self.test[c][i]) for i in range(self.T)]
                     for c in range(self.C)]
        mean = np.mean(np.asarray(final), axis=0)
        for t in range(self.T):
            self.lm.set_row(t, mean[:t + 1])

    def run_sequential(self):
        spec, hyper = self.spec, self.hyper

        def learn(c):
            cl = PlainClient(c, self.mconf, hyper, self.init, self.base_mask_seed,
                             self.client_rng(c))
            pens, rows, rnd = [], [], 0
            for t in range(self.T):
                X = np.concatenate(self.train[c][:t + 1]) if spec.replay else self.train[c][t]
                for _ in range(self.R):
                    try:
                        cl.apply_seed(cl.own_round_seed(rnd))
                        cl.train(X, self.E, pens)
                    except ConfedmadeError as exc:
                        raise ScenarioError(exc, t, rnd, c) from exc
                    rnd += 1
                if spec.loss == "ewc":
                    fisher = estimate_fisher(cl.model, self.train[c][t])
                    pens.append(as_penalty(ewc_penalty, fisher, hyper.lambda_ewc))
                rows.append([cl.evaluate(self.test[c][i]) for i in range(t + 1)])
            return rows

        results = self.pool.map(learn, range(self.C))
        for t in range(self.T):
            self.set_row(t, [results[c][t] for c in range(self.C)])

    def run_fedavg_sequence(self):
        _, _, rows = self.run_fedavg(self.train, self.T, self.R)
        for t, per_client in enumerate(rows):
            self.set_row(t, per_client)

    def run_decomposed(self):
        spec = self.spec
        server = ServerState({k: v.copy() for k, v in self.init.items()}, self.base_mask_seed)
        clients = [DecomposedClient(c, self.mconf, self.hyper, self.mask_seed(c),
                                    self.client_rng(c), variant=spec.loss,
                                    upload_made_mask=spec.upload_made_mask)
                   for c in range(self.C)]
        for t in range(self.T):
            server.task = t
            for r in range(self.R):
                payloads = broadcast_round_start(server, self.channel, self.shapes(),
                                                 self.round_seeds(server), r == 0)
                rnd = server.round

                def work(c):
                    cl = clients[c]
                    cl.receive(payloads[c], r == 0)
                    if not spec.sync_masks:
                        cl.apply_seed(cl.own_round_seed(rnd))
                    cl.train(self.train[c][t], self.E)
                    return cl.upload_message(rnd, t)

                uploads = self.pool.map(_guard(work, t, rnd), range(self.C))
                received = [self.channel.send(CLIENT_TO_SERVER, u) for u in uploads]
                server.weights = fedavg_aggregate(received)
                server.round += 1
            adaptive = self.pool.map(_guard(lambda c: clients[c].finish_task(), t, server.round),
                                     range(self.C))
            finish_task(server, self.channel, adaptive)
            rows = self.pool.map(
                _guard(lambda c: [clients[c].evaluate(self.test[c][i], i) for i in range(t + 1)],
                       t, server.round), range(self.C))
            self.set_row(t, rows)
            for cl in clients:
                self.alpha.extend(cl.alpha_rows(t))
        self.clients = clients
        self.server = server

    def execute(self):
        regime = self.spec.regime
        try:
            if regime == "joint":
                self.run_joint()
            elif regime == "sequential":
                self.run_sequential()
            elif regime == "fedavg":
                self.run_fedavg_sequence()
            else:
                self.run_decomposed()
        finally:
            self.pool.close()


def run_scenario(scenario, method, workers=None, on_message=None, return_state=False):
    """Run ``method`` on ``scenario`` and return a :class:`RunReport`.

    ``on_message(ledger_row, serialized_bytes)`` observes every transmission.
    With ``return_state=True`` returns ``(report, run)`` where ``run`` exposes
    the final clients and server for inspection.
    """
    started = time.perf_counter()
    run = _Run(scenario, method, workers, on_message)
    run.execute()
    report = RunReport(
        method=method, seed=run.seed, config=scenario.config.to_dict(),
        method_spec=run.spec.to_dict(), loss_matrix=run.lm, alpha=run.alpha,
        ledger=run.ledger.to_dict(), warnings=list(scenario.warnings),
        wall_clock={"seconds": time.perf_counter() - started, "workers": run.pool.workers},
        literal_forgetting=run.hyper.literal_forgetting)
    return (report, run) if return_state else report
