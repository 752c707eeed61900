import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtcn import numerics as nx
from cdtcn.metrics import DomainError, energy_snr, mix_at_snr, mix_components, neg_si_snr_loss, si_snr
from cdtcn.numerics import Tensor


def orthogonal_pair(rng, n, ratio_db):
    """Zero-mean x, d with <x, d> = 0 and ||x||^2/||d||^2 = 10^(ratio_db/10)."""
    x = rng.normal(size=n)
    x -= x.mean()
    d = rng.normal(size=n)
    d -= d.mean()
    d -= (d @ x) / (x @ x) * x
    d *= np.sqrt((x @ x) / (d @ d) / 10 ** (ratio_db / 10))
    return x, d


def test_identity_hits_clamp():
    s = np.random.default_rng(0).normal(size=100)
    assert si_snr(s, s) == 60.0


def test_scale_invariance_examples():
    rng = np.random.default_rng(1)
    s, e = rng.normal(size=200), rng.normal(size=200)
    assert si_snr(2 * s, s) == si_snr(s, s)
    base = si_snr(s + e, s)
    for a in (0.1, 1.0, 10.0):
        assert abs(si_snr(a * (s + e), s) - base) <= 1e-6


def test_orthogonal_component_exact():
    x, d = orthogonal_pair(np.random.default_rng(2), 500, 5.0)
    assert abs(si_snr(x + d, x) - 5.0) < 1e-9


def test_monotone_in_orthogonal_noise():
    x, d = orthogonal_pair(np.random.default_rng(3), 300, 0.0)
    vals = [si_snr(x + g * d, x) for g in (0.1, 0.3, 1.0, 3.0, 10.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_low_clamp():
    rng = np.random.default_rng(4)
    x, d = orthogonal_pair(rng, 300, 0.0)
    assert si_snr(x * 1e-6 + d, x) == -60.0


def test_zero_reference_is_domain_error():
    with pytest.raises(DomainError):
        si_snr(np.ones(10), np.zeros(10))


def test_length_mismatch():
    with pytest.raises(nx.DimensionError):
        si_snr(np.ones(10), np.ones(11))


def test_loss_matches_metric_below_clamp():
    rng = np.random.default_rng(5)
    s, e = rng.normal(size=128), rng.normal(size=128)
    loss = neg_si_snr_loss([Tensor(s + 0.5 * e)], [s])
    assert abs(float(loss.data) + si_snr(s + 0.5 * e, s)) < 1e-6


def test_loss_at_optimum_is_finite_and_below_ceiling():
    s = np.random.default_rng(6).normal(size=64)
    est = Tensor(s.copy(), requires_grad=True)
    loss = neg_si_snr_loss([est], [s])
    nx.backward(loss, [est])
    assert float(loss.data) <= -60.0
    assert np.all(np.isfinite(est.grad))


def test_loss_batch_mean():
    rng = np.random.default_rng(7)
    s, e = rng.normal(size=64), rng.normal(size=64)
    one = neg_si_snr_loss([Tensor(s + e)], [s])
    two = neg_si_snr_loss([Tensor(s + e), Tensor(s + e)], [s, s])
    assert float(one.data) == pytest.approx(float(two.data), abs=1e-12)


def test_loss_rejects_empty_batch():
    with pytest.raises(nx.DimensionError):
        neg_si_snr_loss([], [])


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
def test_loss_gradient_finite_differences(dtype, tol):
    rng = np.random.default_rng(8)
    s = rng.normal(size=64)
    est = Tensor((s + rng.normal(size=64)).astype(dtype))
    twin = None
    if dtype == np.float32:
        hi = Tensor(est.data.astype(np.float64))
        twin = (lambda v: neg_si_snr_loss([v], [s]), [hi])
    err = nx.grad_check(lambda v: neg_si_snr_loss([v], [s]), [est], eps=1e-4, stencil=4, twin=twin)
    assert err <= tol


def test_loss_decreases_moving_toward_reference():
    # Along start + t(s - start) the projection coefficient is (1 - t)a + t with
    # a = <start, s>/|s|^2 (zero-mean), so the decrease is strictly monotone
    # whenever a >= 0; for a < 0 it first passes through zero.
    rng = np.random.default_rng(9)
    ts = np.linspace(0.0, 0.95, 8)
    for _ in range(20):
        s, start = rng.normal(size=80), rng.normal(size=80)
        vals = [float(neg_si_snr_loss([Tensor(start + t * (s - start))], [s]).data) for t in ts]
        assert vals[-1] < vals[0]
        sc, stc = s - s.mean(), start - start.mean()
        if stc @ sc >= 0:
            assert all(a > b for a, b in zip(vals, vals[1:]))


# --- mixing ---------------------------------------------------------------


def test_unit_gain_at_zero_db():
    rng = np.random.default_rng(10)
    c = rng.normal(size=400)
    n = rng.normal(size=400)
    n *= np.sqrt(np.sum(c**2) / np.sum(n**2))
    _, g = mix_at_snr(c, n, 0.0, seed=0)
    assert g == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), snr=st.floats(-20, 30), extra=st.integers(0, 200))
def test_energy_snr_exact(seed, snr, extra):
    rng = np.random.default_rng(seed)
    c, n = rng.normal(size=300), rng.normal(size=300 + extra)
    mix, g, scaled = mix_components(c, n, snr, seed=seed)
    np.testing.assert_allclose(mix, c + scaled)
    assert abs(energy_snr(c, mix - c) - snr) <= 1e-9


def test_orthogonalized_noise_gives_exact_si_snr():
    x, d = orthogonal_pair(np.random.default_rng(11), 400, 0.0)
    mix, _ = mix_at_snr(x, d, 5.0, seed=0)
    assert abs(si_snr(mix, x) - 5.0) < 1e-9


def test_mix_is_seeded():
    rng = np.random.default_rng(12)
    c, n = rng.normal(size=100), rng.normal(size=300)
    a, _ = mix_at_snr(c, n, 5.0, seed=3)
    b, _ = mix_at_snr(c, n, 5.0, seed=3)
    np.testing.assert_array_equal(a, b)


def test_short_noise_rejected():
    with pytest.raises(nx.DimensionError):
        mix_at_snr(np.ones(10), np.ones(5), 0.0)


@pytest.mark.parametrize("which", ["clean", "noise"])
def test_silent_input_rejected(which):
    c, n = np.ones(10), np.ones(10)
    if which == "clean":
        c = np.zeros(10)
    else:
        n = np.zeros(10)
    with pytest.raises(DomainError):
        mix_at_snr(c, n, 0.0)
