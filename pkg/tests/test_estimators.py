import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantrack.estimators import (
    EstimatorConfig,
    QuantileBank,
    QuantileTargets,
    Transform,
    Variant,
    apply_transform,
    dumiqe_additive_step,
    dumiqe_step,
    h_boundary,
    h_interior,
    invert_transform,
    mdumiqe_step,
    warmup_estimates,
)

Q3 = QuantileTargets((0.25, 0.5, 0.75))


def bank(variant, step, estimates, probs=(0.5,), **kw):
    return QuantileBank(QuantileTargets(tuple(probs)), estimates, EstimatorConfig(variant, step, **kw))


# --- single-step examples -----------------------------------------------------

def test_dumiqe_increase_and_decrease():
    assert dumiqe_step(bank("dumiqe", 0.1, [1.0]), 2.0).estimates[0] == pytest.approx(1.05, abs=1e-15)
    assert dumiqe_step(bank("dumiqe", 0.1, [1.0]), 0.5).estimates[0] == pytest.approx(0.95, abs=1e-15)


def test_dumiqe_tie_takes_decrease_branch():
    assert dumiqe_step(bank("dumiqe", 0.1, [1.0]), 1.0).estimates[0] == pytest.approx(0.95, abs=1e-15)


@pytest.mark.parametrize("x", [-3.0, 0.5, 1.0, 7.0])
def test_zero_step_is_identity(x):
    b = bank("dumiqe", 0.0, [1.0], probs=(0.3,))
    assert dumiqe_step(b, x).estimates[0] == 1.0
    b = bank("dumiqe-add", 0.0, [5.0], probs=(0.3,))
    assert dumiqe_additive_step(b, x).estimates[0] == 5.0
    b = QuantileBank(Q3, [1.0, 2.0, 4.0], EstimatorConfig("mdumiqe", 0.0))
    assert mdumiqe_step(b, x).estimates.tolist() == [1.0, 2.0, 4.0]


def test_additive_examples():
    b = bank("dumiqe-add", 0.2, [0.0], probs=(0.25,))
    assert dumiqe_additive_step(b, 1.0).estimates[0] == pytest.approx(0.05, abs=1e-15)
    b = bank("dumiqe-add", 0.2, [0.0], probs=(0.25,))
    assert dumiqe_additive_step(b, -1.0).estimates[0] == pytest.approx(-0.15, abs=1e-15)


def test_h_examples():
    assert h_interior([1, 2, 4], Q3, 1) == pytest.approx(0.8)
    assert h_boundary([1, 2, 4], Q3, 0) == pytest.approx(0.8)
    assert h_boundary([1, 2, 4], Q3, 2) == pytest.approx(1.0)
    assert h_interior([1, 1, 4], Q3, 1) == 0.0
    assert h_boundary([1, 1, 4], Q3, 0) == 0.0


@pytest.mark.parametrize("c", [1e-6, 0.37, 1.0, 250.0, 1e8])
def test_h_is_scale_invariant(c):
    assert h_interior([c, 2 * c, 4 * c], Q3, 1) == pytest.approx(0.8, rel=1e-14)


def test_h_errors():
    with pytest.raises(IndexError):
        h_interior([1, 2, 4], Q3, 0)
    with pytest.raises(IndexError):
        h_boundary([1, 2, 4], Q3, 1)
    with pytest.raises(ValueError):
        h_interior([1, 3, 2], Q3, 1)
    with pytest.raises(ValueError):
        h_boundary([1.0], QuantileTargets((0.5,)), 0)


def test_mdumiqe_example():
    b = QuantileBank(Q3, [1.0, 2.0, 4.0], EstimatorConfig("mdumiqe", 0.5))
    np.testing.assert_allclose(mdumiqe_step(b, 3.0).estimates, [1.1, 2.4, 3.5], rtol=1e-15)
    assert b.n == 1


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e5])
def test_mdumiqe_example_scaled(c):
    b = QuantileBank(Q3, [c, 2 * c, 4 * c], EstimatorConfig("mdumiqe", 0.5))
    np.testing.assert_allclose(mdumiqe_step(b, 3 * c).estimates, [1.1 * c, 2.4 * c, 3.5 * c], rtol=1e-14)


def test_mdumiqe_uses_pre_update_snapshot():
    # the update must not depend on the order in which estimates are written
    est = np.array([1.0, 1.3, 4.0, 4.2])
    probs = (0.1, 0.4, 0.6, 0.95)
    b = bank("mdumiqe", 0.7, est, probs=probs)
    b.update(2.0)
    t = QuantileTargets(probs)
    h = [h_boundary(est, t, 0), h_interior(est, t, 1), h_interior(est, t, 2), h_boundary(est, t, 3)]
    expected = [
        est[0] * (1 + 0.7 * h[0] * probs[0]),
        est[1] * (1 + 0.7 * h[1] * probs[1]),
        est[2] * (1 - 0.7 * h[2] * (1 - probs[2])),
        est[3] * (1 - 0.7 * h[3] * (1 - probs[3])),
    ]
    np.testing.assert_allclose(b.estimates, expected, rtol=1e-15)


def test_q_min_clamp():
    # lowest estimate far below its neighbour: the raw decrease factor is negative
    b = bank("mdumiqe", 0.9, [1e-3, 10.0], probs=(0.1, 0.9), q_min=1e-6)
    b.update(1e-4)
    assert b.estimates[0] == 1e-6
    assert b.is_monotone()


def test_gap_min_reseparates_ties():
    b = bank("mdumiqe", 0.5, [2.0, 2.0, 3.0], probs=(0.2, 0.5, 0.8), gap_min=1e-6)
    b.update(1.0)
    est = b.estimates
    assert est[1] > est[0]
    assert est[1] == pytest.approx(est[0] * (1 + 1e-6), rel=1e-15)
    tied = bank("mdumiqe", 0.5, [2.0, 2.0, 3.0], probs=(0.2, 0.5, 0.8))
    tied.update(1.0)
    assert tied.estimates[0] == tied.estimates[1]


# --- validation ---------------------------------------------------------------

def test_targets_validation():
    for probs in [(), (0.0, 0.5), (0.5, 1.0), (0.3, 0.3), (0.6, 0.2)]:
        with pytest.raises(ValueError):
            QuantileTargets(probs)


def test_config_validation():
    with pytest.raises(ValueError, match=r"\[0, 1\)"):
        EstimatorConfig("mdumiqe", 1.5)
    with pytest.raises(ValueError):
        EstimatorConfig("dumiqe", -0.1)
    with pytest.raises(ValueError):
        EstimatorConfig("dumiqe", math.nan)
    with pytest.raises(ValueError):
        EstimatorConfig("mdumiqe", 0.1, q_min=0.0)
    with pytest.raises(ValueError):
        EstimatorConfig("mdumiqe", 0.1, gap_min=-1.0)
    with pytest.raises(ValueError):
        EstimatorConfig("median-of-three", 0.1)
    assert EstimatorConfig("dumiqe-mult", 0.1).variant is Variant.DUMIQE


def test_bank_validation():
    with pytest.raises(ValueError, match="at least two"):
        bank("mdumiqe", 0.5, [1.0])
    with pytest.raises(ValueError, match="non-decreasing"):
        bank("mdumiqe", 0.5, [2.0, 1.0], probs=(0.2, 0.8))
    with pytest.raises(ValueError, match="positive"):
        bank("dumiqe", 0.1, [-1.0])
    with pytest.raises(ValueError, match="shape"):
        bank("dumiqe", 0.1, [1.0, 2.0])
    with pytest.raises(ValueError, match="non-positive"):
        bank("dumiqe", 3.0, [1.0])
    # the additive variant has no positivity requirement
    assert bank("dumiqe-add", 3.0, [-1.0]).estimates[0] == -1.0


def test_update_rejects_non_finite():
    b = bank("mdumiqe", 0.5, [1.0, 2.0], probs=(0.2, 0.8))
    for x in (math.nan, math.inf, -math.inf):
        with pytest.raises(ValueError):
            b.update(x)
    assert b.n == 0


def test_step_helpers_check_variant():
    with pytest.raises(ValueError):
        dumiqe_step(bank("dumiqe-add", 0.1, [1.0]), 1.0)
    with pytest.raises(ValueError):
        mdumiqe_step(bank("dumiqe", 0.1, [1.0]), 1.0)


# --- transforms & initialization ------------------------------------------------

def test_transform_examples():
    assert apply_transform(0.0, "exp") == 1.0
    assert invert_transform(1.0, "exp") == 0.0
    assert apply_transform(3.2, "identity") == 3.2
    assert invert_transform(apply_transform(-4.7, "exp"), "exp") == pytest.approx(-4.7, abs=1e-12)


def test_transform_errors():
    with pytest.raises(ValueError):
        apply_transform(-1.0, Transform.IDENTITY, require_positive=True)
    with pytest.raises(ValueError):
        apply_transform(0.0, Transform.IDENTITY, require_positive=True)
    with pytest.raises((ValueError, OverflowError)):
        apply_transform(1000.0, Transform.EXP)


def test_observe_applies_transform():
    b = QuantileBank.from_quantiles(Q3, [-1.0, 0.0, 1.0], EstimatorConfig("mdumiqe", 0.5, transform="exp"))
    np.testing.assert_allclose(b.quantiles(), [-1.0, 0.0, 1.0], atol=1e-15)
    b.observe(-5.0)
    assert np.all(b.quantiles() < [-1.0, 0.0, 1.0])


def test_warmup_nearest_rank_and_ties():
    est = warmup_estimates([5, 1, 3, 2, 4], Q3)
    assert est.tolist() == [2.0, 3.0, 4.0]
    tied = warmup_estimates([7.0] * 10, Q3)
    assert np.all(np.diff(tied) > 0)
    np.testing.assert_allclose(tied, 7.0, rtol=1e-8)
    with pytest.raises(ValueError):
        warmup_estimates([], Q3)


def test_copy_is_independent():
    b = QuantileBank(Q3, [1.0, 2.0, 4.0], EstimatorConfig("mdumiqe", 0.5))
    c = b.copy()
    c.update(10.0)
    assert b.estimates.tolist() == [1.0, 2.0, 4.0]
    assert c.n == 1 and b.n == 0


# --- properties -------------------------------------------------------------------

@st.composite
def mdumiqe_state(draw, max_k=9):
    k = draw(st.integers(2, max_k))
    probs = sorted(draw(st.lists(st.floats(0.01, 0.99), min_size=k, max_size=k, unique=True)))
    if any(b - a < 1e-6 for a, b in zip(probs, probs[1:])):
        probs = [0.05 + 0.9 * i / (k - 1) for i in range(k)]
    start = draw(st.floats(1e-3, 1e3))
    gaps = draw(st.lists(st.floats(0.0, 10.0), min_size=k - 1, max_size=k - 1))
    est = np.concatenate([[start], start + np.cumsum(np.array(gaps) * start)])
    beta = draw(st.floats(0.0, 0.999))
    xs = draw(st.lists(st.floats(1e-4, 1e5), min_size=1, max_size=30))
    return QuantileTargets(tuple(probs)), est, beta, xs


@settings(max_examples=300, deadline=None)
@given(mdumiqe_state())
def test_mdumiqe_monotone_and_gap_contracting(state):
    targets, est, beta, xs = state
    b = QuantileBank(targets, est, EstimatorConfig("mdumiqe", beta))
    for x in xs:
        before = b.estimates
        b.update(x)
        after = b.estimates
        assert np.all(np.diff(after) >= 0.0)
        assert np.all(after >= b.config.q_min)
        if np.all(after > b.config.q_min):
            tol = 1e-12 * np.maximum(before[1:], after[1:])
            assert np.all(np.diff(after) >= (1 - beta) * np.diff(before) - tol)


@settings(max_examples=200, deadline=None)
@given(mdumiqe_state(), st.sampled_from(["dumiqe", "dumiqe-add", "mdumiqe"]), st.data())
def test_sign_only_dependence(state, variant, data):
    targets, est, beta, xs = state
    step = beta if variant == "mdumiqe" else min(beta, 0.5)
    cfg = EstimatorConfig(variant, step)
    a = QuantileBank(targets, est, cfg)
    b = QuantileBank(targets, est, cfg)
    for x in xs:
        cur = a.estimates
        # pick any x' in the same cell of the partition induced by the estimates
        below = cur[cur < x]
        above = cur[cur >= x]
        lo = below.max() if below.size else cur.min() / 1e6
        hi = above.min() if above.size else cur.max() * 1e6
        u = data.draw(st.floats(0.0, 1.0))
        alt = hi if u == 1.0 or np.nextafter(lo, np.inf) >= hi else lo + u * (hi - lo)
        if alt <= lo:
            alt = np.nextafter(lo, np.inf)
        a.update(x)
        b.update(alt)
        assert a.estimates.tobytes() == b.estimates.tobytes()


@settings(max_examples=100, deadline=None)
@given(mdumiqe_state(max_k=5), st.sampled_from([1e-3, 3.7, 1e3]), st.sampled_from(["dumiqe", "mdumiqe"]))
def test_scale_equivariance(state, c, variant):
    targets, est, beta, xs = state
    step = beta if variant == "mdumiqe" else min(beta, 0.5)
    # the floor is absolute, so it has to scale with the data
    cfg = EstimatorConfig(variant, step)
    ref = QuantileBank(targets, est, cfg).update_many(xs)
    cfg_c = EstimatorConfig(variant, step, q_min=cfg.q_min * c)
    scaled = QuantileBank(targets, est * c, cfg_c).update_many([x * c for x in xs])
    np.testing.assert_allclose(scaled, ref * c, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(mdumiqe_state(max_k=5), st.floats(-1e3, 1e3))
def test_translation_equivariance(state, c):
    targets, est, beta, xs = state
    cfg = EstimatorConfig("dumiqe-add", beta)
    ref = QuantileBank(targets, est, cfg).update_many(xs)
    shifted = QuantileBank(targets, est + c, cfg).update_many([x + c for x in xs])
    scale = max(1.0, abs(c), float(np.max(np.abs(ref))))
    np.testing.assert_allclose(shifted, ref + c, rtol=0, atol=1e-12 * scale * len(xs))


@pytest.mark.parametrize("c", [2.0**-10, 2.0**10])
def test_power_of_two_scaling_is_exact_over_long_runs(c):
    # scaling by a power of two introduces no rounding, so trajectories agree bit for bit
    rng = np.random.default_rng(8)
    xs = rng.gamma(3.0, 2.0, 10_000)
    targets = QuantileTargets(tuple(0.1 * k for k in range(1, 10)))
    init = np.quantile(xs[:100], targets.probs)
    for variant, step in (("mdumiqe", 0.5), ("dumiqe", 0.05)):
        ref = QuantileBank(targets, init, EstimatorConfig(variant, step)).update_many(xs)
        cfg = EstimatorConfig(variant, step, q_min=1e-12 * c)
        np.testing.assert_array_equal(QuantileBank(targets, init * c, cfg).update_many(xs * c), ref * c)
