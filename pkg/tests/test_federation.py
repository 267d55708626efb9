import numpy as np
import pytest

from confedmade.clients import DecomposedClient, PlainClient
from confedmade.config import Hyperparams
from confedmade.data import scenario_from_arrays
from confedmade.exceptions import (AggregationError, DataError, FormatError, ProtocolError,
                                   TopologyError)
from confedmade.federation import (CLIENT_TO_SERVER, SERVER_TO_CLIENT, Channel, CommLedger,
                                   Message, ServerState, SparseTensor, broadcast_round_start,
                                   deserialize, fedavg_aggregate, finish_task, recount_nonzeros,
                                   serialize)
from confedmade.made import MadeConfig, init_params
from confedmade.runner import run_scenario

from conftest import random_binary


def small_config(D=6):
    return MadeConfig(D, (5,), direct_connection=True)


def test_sparse_tensor_round_trip_and_floor():
    a = np.array([[0.0, 1.5, -2e-7], [3.0, 0.0, 0.0]])
    t = SparseTensor.from_dense(a)
    assert t.nnz == 3
    np.testing.assert_array_equal(t.to_dense(), a)
    t2 = SparseTensor.from_dense(a, floor=1e-6)
    assert t2.nnz == 2
    np.testing.assert_array_equal(t2.to_dense(), np.where(np.abs(a) >= 1e-6, a, 0.0))


def test_serialize_round_trip_preserves_bits():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3))
    w[0, 0] = 0.0
    msg = Message("upload", 3, 1, 2, {"W/W1": SparseTensor.from_dense(w)}, seed=12345)
    back = deserialize(serialize(msg))
    assert (back.kind, back.round, back.task, back.client, back.seed) == ("upload", 3, 1, 2, 12345)
    np.testing.assert_array_equal(back.weights()["W1"], w)
    assert back.count() == 11 + 1


def test_deserialize_rejects_bad_magic_and_truncation():
    msg = Message("upload", 0, 0, 0, {"W/b1": SparseTensor.from_dense(np.ones(5))})
    blob = serialize(msg)
    with pytest.raises(FormatError):
        deserialize(b"XXXXX" + blob[5:])
    with pytest.raises(FormatError):
        deserialize(blob[:-8])


def test_fedavg_examples_and_dense_oracle():
    u = {"W1": np.array([[1.0, 2.0]]), "b1": np.array([3.0])}
    for k in (1, 2, 5):
        out = fedavg_aggregate([u] * k)
        for key in u:
            np.testing.assert_array_equal(out[key], u[key])
    out = fedavg_aggregate([{"w": np.array([0.0])}, {"w": np.array([2.0])}])
    assert out["w"][0] == 1.0

    rng = np.random.default_rng(3)
    dense = []
    msgs = []
    for c in range(4):
        w = rng.normal(size=(6, 5)) * (rng.random((6, 5)) < 0.5)
        dense.append(w)
        msgs.append(deserialize(serialize(Message("upload", 0, 0, c,
                                                  {"W/W1": SparseTensor.from_dense(w)}))))
    brute = sum(dense) / len(dense)
    np.testing.assert_allclose(fedavg_aggregate(msgs)["W1"], brute, rtol=0, atol=1e-15)


def test_fedavg_errors():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    with pytest.raises(AggregationError):
        fedavg_aggregate([{"w": np.zeros(2)}, {"w": np.zeros(3)}])
    with pytest.raises(AggregationError):
        fedavg_aggregate([{"w": np.zeros(2)}, {"v": np.zeros(2)}])


def test_broadcast_topology_error_and_kb_only_at_task_start():
    config = small_config()
    W = init_params(config, np.random.default_rng(0))
    server = ServerState(W, mask_seed=5)
    server.store(1, 0, {"W1": SparseTensor.from_dense(np.ones((5, 6)))})
    ch = Channel()
    bad = dict(config.param_shapes(), W1=(4, 6))
    with pytest.raises(TopologyError):
        broadcast_round_start(server, ch, [bad], [5], True)
    shapes = [config.param_shapes()] * 2
    first = broadcast_round_start(server, ch, shapes, [5, 5], True)
    # client 1 never receives its own entry; client 0 does
    assert (1, 0) in first[0].kb_entries()
    assert first[1].kb_entries() == {}
    later = broadcast_round_start(server, ch, shapes, [5, 5], False)
    assert all(m.kb_entries() == {} for m in later)
    assert ch.ledger.rows[0]["per_key"]["W1"] == 30 + SparseTensor.from_dense(W["W1"]).nnz
    assert ch.ledger.rows[0]["per_key"]["mask_seed"] == 1


def test_empty_kb_costs_nothing_and_duplicate_entry_is_rejected():
    config = small_config()
    server = ServerState(init_params(config, np.random.default_rng(0)), 5)
    ch = Channel()
    msgs = broadcast_round_start(server, ch, [config.param_shapes()], [None], True)
    assert not any(n.startswith("kb/") for n in msgs[0].tensors)
    assert ch.ledger.rows[0]["count"] == sum(
        int(np.count_nonzero(v)) for v in server.weights.values())
    zero = {k: np.zeros(s) for k, s in config.param_shapes().items()}
    finish_task(server, ch, [zero])
    assert ch.ledger.rows[-1]["count"] == 0
    assert all(t.indices.size == 0 for t in server.kb[(0, 0)].values())
    with pytest.raises(ProtocolError):
        finish_task(server, ch, [zero])


def test_ledger_totals_are_sums_of_rows():
    ledger = CommLedger()
    for r in range(3):
        for c in range(2):
            w = np.arange(4.0) * (r + c)
            ledger.record(SERVER_TO_CLIENT, Message("broadcast", r, r // 2, c,
                                                    {"W/w": SparseTensor.from_dense(w)}, seed=1))
            ledger.record(CLIENT_TO_SERVER, Message("upload", r, r // 2, c,
                                                    {"W/w": SparseTensor.from_dense(w)}))
    tot = ledger.totals()
    assert tot["total"] == sum(r["count"] for r in ledger.rows)
    assert tot["total"] == tot[SERVER_TO_CLIENT] + tot[CLIENT_TO_SERVER]
    assert sum(v[SERVER_TO_CLIENT] + v[CLIENT_TO_SERVER] for v in tot["per_task"].values()) \
        == tot["total"]


def _two_task_scenario(rng, C=2, D=8, n=60, method_hyper=None):
    tasks = [[random_binary(rng, n, D, p) for p in (0.3, 0.7)] for _ in range(C)]
    h = method_hyper or Hyperparams(hidden_sizes=(6,), batch_size=16)
    return scenario_from_arrays(tasks, seed=4, rounds_per_task=2, hyper=h)


@pytest.mark.parametrize("method", ["confedmade", "fedweit-made", "fedavg-made"])
def test_ledger_equals_recount_of_serialized_payloads(rng, method):
    sc = _two_task_scenario(rng)
    seen = []
    report = run_scenario(sc, method, on_message=lambda row, blob: seen.append((row, blob)))
    assert len(seen) == len(report.ledger["rows"])
    for row, blob in seen:
        assert row["count"] == recount_nonzeros(blob)
        assert row["count"] == sum(row["per_key"].values())
    assert report.ledger["totals"]["total"] == sum(recount_nonzeros(b) for _, b in seen)


def test_cost_decomposes_into_round_and_task_traffic(rng):
    sc = _two_task_scenario(rng)
    blobs = []
    report = run_scenario(sc, "confedmade", on_message=lambda row, b: blobs.append((row, b)))
    weights = kb = seeds = uploads = adaptive = 0
    for row, b in blobs:
        msg = deserialize(b)
        nnz = {n: t.nnz for n, t in msg.tensors.items()}
        if row["kind"] == "broadcast":
            weights += sum(v for n, v in nnz.items() if n.startswith("W/"))
            kb += sum(v for n, v in nnz.items() if n.startswith("kb/"))
            seeds += msg.seed is not None
            if any(n.startswith("kb/") for n in nnz):
                assert row["round"] % sc.config.rounds_per_task == 0
        elif row["kind"] == "upload":
            uploads += sum(nnz.values())
        else:
            adaptive += sum(nnz.values())
    assert kb > 0 and adaptive > 0
    assert weights + kb + seeds + uploads + adaptive == report.ledger["totals"]["total"]


def test_no_data_value_ever_appears_in_a_payload(rng):
    D = 8
    sentinel = np.array([1, 0, 1, 1, 0, 1, 0, 1], dtype=np.float64)
    tasks = [[random_binary(rng, 40, D) for _ in range(2)] for _ in range(2)]
    tasks[0][0][::3] = sentinel
    sc = scenario_from_arrays(tasks, seed=1, rounds_per_task=2,
                              hyper=Hyperparams(hidden_sizes=(6,), batch_size=16))
    blobs = []
    run_scenario(sc, "confedmade", on_message=lambda row, b: blobs.append(b))
    planted = [sentinel.astype("<f8").tobytes(), sentinel.astype(np.uint8).tobytes()]
    for b in blobs:
        msg = deserialize(b)
        assert all(n.split("/")[0] in ("W", "kb", "A") for n in msg.tensors)
        for p in planted:
            assert p not in b


def test_mask_seed_gives_identical_masks_on_every_client():
    config = small_config()
    h = Hyperparams(hidden_sizes=(5,))
    a = PlainClient(0, config, h, init_params(config, np.random.default_rng(0)), 77,
                    np.random.default_rng(1))
    b = PlainClient(1, config, h, init_params(config, np.random.default_rng(0)), 77,
                    np.random.default_rng(2))
    for k in a.masks:
        np.testing.assert_array_equal(a.masks[k], b.masks[k])


def test_zero_learning_rate_upload_equals_masked_received_weights(rng):
    config = small_config()
    h = Hyperparams(hidden_sizes=(5,), lr=0.0, weight_decay=0.0, mask_init="constant",
                    mask_init_logit=10.0)
    server = ServerState(init_params(config, np.random.default_rng(0)), 9)
    ch = Channel()
    msg = broadcast_round_start(server, ch, [config.param_shapes()], [9], True)[0]
    cl = DecomposedClient(0, config, h, 9, np.random.default_rng(1))
    cl.receive(msg, True)
    cl.train(random_binary(rng, 20, 6))
    up = cl.upload_message(0, 0).weights()
    for k, w in server.weights.items():
        expected = w * cl.masks[k] if k in cl.masks else w
        np.testing.assert_array_equal(up[k], expected)
        if k in cl.masks:
            assert np.count_nonzero(up[k]) <= np.count_nonzero(cl.masks[k])


def test_empty_local_dataset_is_a_data_error():
    config = small_config()
    h = Hyperparams(hidden_sizes=(5,))
    server = ServerState(init_params(config, np.random.default_rng(0)), 9)
    msg = broadcast_round_start(server, Channel(), [config.param_shapes()], [9], True)[0]
    cl = DecomposedClient(0, config, h, 9, np.random.default_rng(1))
    cl.receive(msg, True)
    with pytest.raises(DataError):
        cl.train(np.zeros((0, 6)))


def test_kb_holds_one_entry_per_client_and_task(rng):
    sc = _two_task_scenario(rng, C=3)
    _, run = run_scenario(sc, "confedmade", return_state=True)
    assert sorted(run.server.kb) == [(c, t) for c in range(3) for t in range(2)]
    assert all(len(cl.snapshots) == 2 for cl in run.clients)


def test_decomposed_training_loss_falls_over_rounds(mnist):
    from confedmade.data import binarize
    idx = np.flatnonzero(np.isin(mnist.labels, [0, 1, 7]))[:300]
    X = binarize(mnist.images[idx]).astype(np.float64)
    config = MadeConfig(784, (32,), direct_connection=True)
    h = Hyperparams(hidden_sizes=(32,))
    server = ServerState(init_params(config, np.random.default_rng(0)), 3)
    ch = Channel()
    cl = DecomposedClient(0, config, h, 3, np.random.default_rng(1))
    losses = []
    for r in range(6):
        server.round = r
        msg = broadcast_round_start(server, ch, [config.param_shapes()], [3], r == 0)[0]
        cl.receive(msg, r == 0)
        losses.append(cl.train(X))
        server.weights = fedavg_aggregate([ch.send(CLIENT_TO_SERVER, cl.upload_message(r, 0))])
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 4, losses
