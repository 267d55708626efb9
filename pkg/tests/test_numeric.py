import numpy as np
import pytest

from confedmade.exceptions import (DeterminismError, DimensionError, NumericError,
                                   ValidationError)
from confedmade.numeric import (AdamState, adam_step, finite_diff_check,
                                masked_affine_backward, masked_affine_forward)


def test_masked_affine_forward_hand_example():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    M = np.array([[1.0, 0.0], [1.0, 1.0]])
    out = masked_affine_forward(np.array([1.0, 1.0]), W, M, np.array([0.5, -1.0]))
    np.testing.assert_array_equal(out, [1.5, 6.0])


def test_all_zero_mask_gives_bias():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    out = masked_affine_forward(rng.normal(size=(5, 4)), W, np.zeros_like(W), b)
    np.testing.assert_array_equal(out, np.tile(b, (5, 1)))


def test_forward_rejects_bad_shapes_and_masks():
    W = np.ones((2, 3))
    with pytest.raises(DimensionError):
        masked_affine_forward(np.ones(4), W, np.ones((2, 3)), np.zeros(2))
    with pytest.raises(DimensionError):
        masked_affine_forward(np.ones(3), W, np.ones((3, 2)), np.zeros(2))
    with pytest.raises(ValidationError):
        masked_affine_forward(np.ones(3), W, np.full((2, 3), 0.5), np.zeros(2))


def test_backward_is_masked_and_matches_finite_differences():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 4))
    M = (rng.random((3, 4)) < 0.5).astype(float)
    x = rng.normal(size=(6, 4))
    b = rng.normal(size=3)
    target = rng.normal(size=(6, 3))

    def loss(p):
        out = masked_affine_forward(x, p["W"], M, p["b"])
        r = out - target
        gW, gb, _ = masked_affine_backward(r, x, p["W"], M)
        return 0.5 * float(np.sum(r * r)), {"W": gW, "b": gb}

    _, grads = loss({"W": W, "b": b})
    assert np.all(grads["W"][M == 0] == 0.0)
    assert finite_diff_check(loss, {"W": W, "b": b}, 1e-6) < 1e-5


def test_backward_input_gradient():
    rng = np.random.default_rng(2)
    W, M = rng.normal(size=(2, 3)), np.ones((2, 3))
    x = rng.normal(size=3)
    g = rng.normal(size=2)
    _, _, gx = masked_affine_backward(g, x, W, M)
    np.testing.assert_allclose(gx, W.T @ g)


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    state = AdamState.for_params(p, lr=0.01)
    new = adam_step(p, g, state)
    np.testing.assert_allclose(new["w"], p["w"] - 0.01 * np.sign(g["w"]), rtol=1e-6)
    assert state.t == 1


def test_adam_zero_gradient_is_noop_and_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    state = AdamState.for_params(p, lr=0.1)
    assert adam_step(p, {"w": np.zeros(1)}, state)["w"][0] == 2.0
    state = AdamState.for_params(p, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(adam_step(p, {"w": np.zeros(1)}, state)["w"], [2.0 - 0.1 * 0.5 * 2.0])


def test_adam_rejects_non_finite_and_mismatched_gradients():
    p = {"w": np.ones(2)}
    state = AdamState.for_params(p)
    with pytest.raises(NumericError, match="'w'"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, state)
    with pytest.raises(DimensionError):
        adam_step(p, {"v": np.ones(2)}, state)


def test_adam_descends_a_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    state = AdamState.for_params(p, lr=0.1)
    for _ in range(300):
        p = adam_step(p, {"w": p["w"]}, state)
    assert np.all(np.abs(p["w"]) < 0.1)


def test_finite_diff_check_quadratic_is_exact():
    p = {"a": np.array([1.0, -2.0, 0.5]), "b": np.array([[3.0]])}
    err = finite_diff_check(lambda q: (0.5 * sum(float(np.sum(v * v)) for v in q.values()),
                                       {k: v.copy() for k, v in q.items()}), p, 1e-4)
    assert err < 1e-8


def test_finite_diff_check_detects_wrong_gradient_and_nondeterminism():
    p = {"a": np.array([1.0])}
    assert finite_diff_check(lambda q: (float(q["a"][0] ** 2), {"a": q["a"].copy()}), p) > 0.4
    calls = iter(range(100))
    with pytest.raises(DeterminismError):
        finite_diff_check(lambda q: (float(next(calls)), {"a": np.zeros(1)}), p)


def test_masked_affine_spec_examples():
    np.testing.assert_array_equal(
        masked_affine_forward(np.array([1.0, 1.0]), np.array([[2.0, 3.0]]),
                              np.array([[1.0, 0.0]]), np.array([1.0])), [3.0])
    np.testing.assert_array_equal(
        masked_affine_forward(np.array([1.0, 2.0]), np.ones((2, 2)),
                              np.array([[1.0, 1.0], [0.0, 0.0]]), np.zeros(2)), [3.0, 0.0])
    gW, gb, gx = masked_affine_backward(np.array([2.0]), np.array([3.0]), np.array([[5.0]]),
                                        np.array([[1.0]]))
    assert gW[0, 0] == 6.0 and gb[0] == 2.0 and gx[0] == 10.0
    gW, _, gx = masked_affine_backward(np.ones(2), np.ones(3), np.ones((2, 3)), np.zeros((2, 3)))
    assert not gW.any() and not gx.any()


def test_adam_matches_hand_rolled_scalar_trace():
    p, g, lr = 1.0, 0.5, 0.001
    params = {"w": np.array([p])}
    state = AdamState.for_params(params, lr=lr)
    m = v = 0.0
    for t in (1, 2):
        params = adam_step(params, {"w": np.array([g])}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - lr * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        assert abs(params["w"][0] - p) < 1e-12
        if t == 1:
            assert abs(p - 0.999) < 1e-7
