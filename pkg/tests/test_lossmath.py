"""Loss values and gradients vs closed forms and naive finite differences."""

import math

import numpy as np
import pytest

from uvkit.errors import InputError
from uvkit.lossmath import (
    LossConfig,
    MaskPair,
    bce,
    combined,
    dice,
    finite_difference_gradients,
    gradient_check,
)


def naive_fd(loss_fn, y: np.ndarray, p: np.ndarray, i: int, h: float, clamp: float) -> float:
    """Central difference on component i, loss recomputed from scratch."""
    hi = p.copy()
    lo = p.copy()
    hi[i] += h
    lo[i] -= h
    f_hi = loss_fn(MaskPair(y, hi, clamp=clamp))[0]
    f_lo = loss_fn(MaskPair(y, lo, clamp=clamp))[0]
    return (f_hi - f_lo) / (2 * h)


# ---------------------------------------------------------------------------
# known values
# ---------------------------------------------------------------------------


def test_bce_known_values():
    value, grad = bce(MaskPair(np.array([1.0]), np.array([0.5])))
    assert value == pytest.approx(math.log(2.0), abs=1e-12)
    assert grad.tolist() == [pytest.approx(-2.0)]
    value, _ = bce(MaskPair(np.array([0.0]), np.array([0.5])))
    assert value == pytest.approx(math.log(2.0), abs=1e-12)
    # perfect prediction: loss collapses to the clamp floor
    value, _ = bce(MaskPair(np.array([1.0, 0.0]), np.array([1.0, 0.0])))
    assert value == pytest.approx(-math.log(1 - 1e-7), abs=1e-12)


def test_dice_known_values():
    # half overlap: |y| = 2, |p| = 2, intersection 1
    pair = MaskPair(np.array([1.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0, 1.0, 0.0]))
    value, _ = dice(pair)
    assert value == pytest.approx(0.5, abs=1e-6)
    # identical binary masks: loss ~ 0
    pair = MaskPair(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    value, _ = dice(pair)
    assert abs(value) < 1e-6
    # disjoint: loss ~ 1
    pair = MaskPair(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    value, _ = dice(pair)
    assert value == pytest.approx(1.0, abs=1e-6)


def test_combined_is_weighted_sum():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, 50).astype(float)
    p = rng.uniform(0.05, 0.95, 50)
    cfg = LossConfig()
    pair = MaskPair(y, p, clamp=cfg.clamp)
    total, grad = combined(pair, cfg)
    b, gb = bce(pair)
    d, gd = dice(pair, cfg.smoothing)
    assert total == pytest.approx(b + 0.01 * d, rel=1e-15)
    assert np.allclose(grad, gb + 0.01 * gd, rtol=1e-15)


def test_pair_validation():
    with pytest.raises(InputError):
        MaskPair(np.array([0.5]), np.array([0.5]))  # non-binary target
    with pytest.raises(InputError):
        MaskPair(np.array([1.0, 0.0]), np.array([0.5]))  # size mismatch
    with pytest.raises(InputError):
        MaskPair(np.array([]), np.array([]))
    with pytest.raises(InputError):
        MaskPair(np.array([1.0]), np.array([np.inf]))
    pair = MaskPair(np.array([1.0]), np.array([2.0]))  # clamped, not rejected
    assert pair.prediction[0] == 1.0 - 1e-7
    with pytest.raises(InputError):
        LossConfig(clamp=0.5)
    with pytest.raises(InputError):
        LossConfig(smoothing=0.0)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_analytic_gradients_match_naive_fd_spot_checks():
    """Independent oracle: per-component loss re-evaluation, no shared code
    with the vectorized finite-difference path."""
    rng = np.random.default_rng(7)
    cfg = LossConfig()
    for _ in range(5):
        y = rng.integers(0, 2, 30).astype(float)
        p = rng.uniform(0.05, 0.95, 30)
        pair = MaskPair(y, p, clamp=cfg.clamp)
        analytic = {
            "bce": bce(pair)[1],
            "dice": dice(pair, cfg.smoothing)[1],
            "combined": combined(pair, cfg)[1],
        }
        for i in rng.choice(30, size=6, replace=False):
            for name, fn in (
                ("bce", bce),
                ("dice", lambda q: dice(q, cfg.smoothing)),
                ("combined", lambda q: combined(q, cfg)),
            ):
                fd = naive_fd(fn, y, p, int(i), 1e-5, cfg.clamp)
                assert analytic[name][i] == pytest.approx(fd, rel=2e-4, abs=1e-9), (
                    f"{name}[{i}]"
                )


def test_vectorized_fd_equals_naive_fd():
    rng = np.random.default_rng(8)
    cfg = LossConfig()
    y = rng.integers(0, 2, 20).astype(float)
    p = rng.uniform(0.05, 0.95, 20)
    pair = MaskPair(y, p, clamp=cfg.clamp)
    vec = finite_difference_gradients(pair, cfg, h=1e-5)
    for i in range(20):
        for name, fn in (
            ("bce", bce),
            ("dice", lambda q: dice(q, cfg.smoothing)),
            ("combined", lambda q: combined(q, cfg)),
        ):
            naive = naive_fd(fn, y, p, i, 1e-5, cfg.clamp)
            assert vec[name][i] == pytest.approx(naive, rel=1e-6, abs=1e-12), f"{name}[{i}]"


def test_fd_rejects_predictions_at_the_clamp_edge():
    pair = MaskPair(np.array([1.0, 0.0]), np.array([1.0, 0.5]))
    with pytest.raises(InputError):
        finite_difference_gradients(pair, LossConfig(), h=1e-5)


def test_gradient_check_suite():
    worst = gradient_check(pairs=20, side=16, seed=3)
    assert set(worst) == {"bce", "dice", "combined"}
    for name, err in worst.items():
        assert err <= 1e-4, f"{name} worst rel error {err}"


def test_gradient_check_deterministic():
    a = gradient_check(pairs=5, side=8, seed=11)
    b = gradient_check(pairs=5, side=8, seed=11)
    assert a == b


def test_fsum_reduction_order_independence():
    """Loss of a permuted pair is bit-identical: reductions are exact."""
    rng = np.random.default_rng(9)
    y = rng.integers(0, 2, 200).astype(float)
    p = rng.uniform(0.01, 0.99, 200)
    perm = rng.permutation(200)
    cfg = LossConfig()
    for fn in (bce, lambda q: dice(q, cfg.smoothing), lambda q: combined(q, cfg)):
        v1 = fn(MaskPair(y, p))[0]
        v2 = fn(MaskPair(y[perm], p[perm]))[0]
        assert v1 == v2
