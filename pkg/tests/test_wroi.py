"""Unit tests for WROIs, kernel synthesis, and the per-camera kernel cache."""

import math

import numpy as np
import pytest

from hyve import autodiff as ad
from hyve.autodiff import Variable, finite_difference_check
from hyve.errors import ContractError, DimensionError, InputError
from hyve.wroi import (DEFAULT_VARIANCE_FLOOR, GaussianWroiSet, HyveConvLayer,
                       KernelPrototypeBundle, extend_prototypes, gaussian_eval,
                       init_wrois, inverse_softplus, range_impact, softplus_variance,
                       synthesize_kernels)


def test_gaussian_eval_analytic():
    # peak value is 1 / sqrt(2 pi s2); computed independently of the library
    peak = gaussian_eval(700.0, 700.0, 24.0)
    assert abs(peak - 1.0 / math.sqrt(2.0 * math.pi * 24.0)) < 1e-15
    assert abs(peak - 0.08143375198381998) < 1e-15
    # one sigma away: peak * exp(-1/2)
    one_sigma = gaussian_eval(700.0 + math.sqrt(24.0), 700.0, 24.0)
    assert abs(one_sigma - peak * math.exp(-0.5)) < 1e-15


def test_gaussian_eval_integrates_to_one():
    x = np.linspace(300.0, 1100.0, 200001)
    total = np.trapezoid(gaussian_eval(x, 700.0, 24.0), x)
    assert abs(total - 1.0) < 1e-9


def test_gaussian_eval_rejects_bad_variance():
    with pytest.raises(InputError):
        gaussian_eval(1.0, 0.0, 0.0)
    with pytest.raises(InputError):
        gaussian_eval(1.0, 0.0, -2.0)


def test_softplus_variance_floor_for_extreme_raw():
    for raw in (-1e6, -50.0, 0.0, 50.0, 1e6):
        assert softplus_variance(raw) >= DEFAULT_VARIANCE_FLOOR


def test_inverse_softplus_round_trip():
    for y in (1e-4, 0.5, 24.0, 150.0, 900.0):
        raw = inverse_softplus(y)
        assert abs(np.logaddexp(0.0, raw) - y) < 1e-9 * max(1.0, y)
    with pytest.raises(InputError):
        inverse_softplus(0.0)


def test_init_wrois_identity():
    wrois = init_wrois(5, 400.0, 1000.0)
    np.testing.assert_allclose(wrois.means.value, [400.0, 550.0, 700.0, 850.0, 1000.0])
    np.testing.assert_allclose(wrois.variances(), np.full(5, 24.0), rtol=1e-12)


def test_init_wrois_single_is_midpoint():
    wrois = init_wrois(1, 400.0, 1000.0)
    np.testing.assert_allclose(wrois.means.value, [700.0])


def test_init_wrois_override_and_errors():
    wrois = init_wrois(5, 400.0, 1000.0, initial_variance=3600.0)
    np.testing.assert_allclose(wrois.variances(), np.full(5, 3600.0), rtol=1e-12)
    with pytest.raises(InputError):
        init_wrois(0, 400.0, 1000.0)
    with pytest.raises(InputError):
        init_wrois(3, 1000.0, 400.0)


def test_range_impact_matches_gaussian_eval():
    wrois = init_wrois(5, 400.0, 1000.0)
    lam = np.linspace(400.0, 1000.0, 17)
    ri = range_impact(lam, wrois).value
    means = wrois.means.value
    variances = wrois.variances()
    for i, x in enumerate(lam):
        for j in range(5):
            assert abs(ri[i, j] - gaussian_eval(x, means[j], variances[j])) < 1e-13


def test_range_impact_not_row_normalized():
    wrois = init_wrois(5, 400.0, 1000.0)
    ri = range_impact(np.array([475.0]), wrois).value
    assert not math.isclose(float(ri.sum()), 1.0, abs_tol=0.2)


def test_range_impact_gradcheck():
    wrois = init_wrois(3, 400.0, 1000.0, initial_variance=5000.0)
    lam = np.linspace(450.0, 950.0, 7)
    params = [wrois.means, wrois.raw_variances]
    err = finite_difference_check(
        lambda: ad.reduce_sum(range_impact(lam, wrois) ** 2.0), params)
    assert err < 1e-6


def test_extend_prototypes_oracle():
    rng = np.random.default_rng(0)
    bundle = KernelPrototypeBundle.initialize(3, 4, 3, 3, rng, extended=True)
    eff = extend_prototypes(bundle).value
    expected = (bundle.kp.value
                + bundle.alpha.value * bundle.kp_cout.value
                + bundle.beta.value * bundle.kp_conv.value)
    np.testing.assert_allclose(eff, expected, atol=1e-15)
    assert float(bundle.alpha.value) == 0.1
    assert float(bundle.beta.value) == 0.1


def test_extend_prototypes_requires_extended():
    rng = np.random.default_rng(0)
    plain = KernelPrototypeBundle.initialize(3, 4, 3, 3, rng, extended=False)
    with pytest.raises(ContractError):
        extend_prototypes(plain)


def test_synthesize_kernels_loop_oracle():
    rng = np.random.default_rng(1)
    wrois = init_wrois(4, 400.0, 1000.0)
    lam = np.linspace(420.0, 980.0, 9)
    ri = range_impact(lam, wrois)
    bundle = KernelPrototypeBundle.initialize(4, 3, 3, 3, rng, extended=True)
    out = synthesize_kernels(ri, bundle).value
    eff = extend_prototypes(bundle).value
    expected = np.zeros((9, 3, 3, 3))
    for c in range(9):
        for g in range(4):
            expected[c] += ri.value[c, g] * eff[g]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_synthesize_kernels_shape_error():
    rng = np.random.default_rng(2)
    bundle = KernelPrototypeBundle.initialize(4, 3, 3, 3, rng)
    with pytest.raises(DimensionError):
        synthesize_kernels(Variable(np.zeros((9, 5))), bundle)


def _layer(extended=True, g=3, c_out=2, seed=0, **kw):
    return HyveConvLayer(g, c_out, 3, 1, (400.0, 1000.0),
                         np.random.default_rng(seed), extended=extended, **kw)


def test_layer_forward_shape_and_channel_check():
    layer = _layer()
    lam = np.linspace(450.0, 950.0, 6)
    x = np.random.default_rng(3).normal(size=(2, 6, 8, 8))
    out = layer.forward(Variable(x), lam)
    assert out.shape == (2, 2, 8, 8)
    with pytest.raises(InputError):
        layer.forward(Variable(x), lam[:-1])  # 5 wavelengths for 6 channels


def test_layer_cache_hit_and_invalidation():
    layer = _layer(initial_variance=5000.0)
    lam = np.linspace(450.0, 950.0, 6)
    x = np.random.default_rng(4).normal(size=(1, 6, 8, 8))
    live = layer.forward(Variable(x), lam).value
    layer.freeze_kernels(lam)
    n_synth = layer.synth_count
    cached = layer.forward(Variable(x), lam).value
    assert layer.synth_count == n_synth  # served from the cache
    np.testing.assert_allclose(cached, live, atol=0.0)  # bit-identical
    # mutate a parameter: the cached entry must be dropped and re-synthesized
    layer.wrois.means.value = layer.wrois.means.value + 1.0
    layer.forward(Variable(x), lam)
    assert layer.synth_count == n_synth + 1
    assert layer.cached_cameras() == 0


def test_layer_cache_is_per_camera():
    layer = _layer(initial_variance=5000.0)
    lam_a = np.linspace(450.0, 950.0, 6)
    lam_b = np.linspace(420.0, 980.0, 8)
    layer.freeze_kernels(lam_a)
    layer.freeze_kernels(lam_b)
    assert layer.cached_cameras() == 2


def test_layer_gradcheck_through_synthesis():
    layer = _layer(g=2, c_out=2, initial_variance=20000.0)
    lam = np.linspace(450.0, 950.0, 4)
    x = Variable(np.random.default_rng(5).normal(size=(1, 4, 5, 5)))
    params = [p for _, p in layer.params()]

    def loss():
        return ad.reduce_sum(layer.forward(x, lam) ** 2.0)

    assert finite_difference_check(loss, params) < 1e-5


def test_snapshot_rows():
    layer = _layer(g=3)
    rows = layer.snapshot(7)
    assert len(rows) == 3
    assert rows[0][0] == 7 and rows[0][1] == 0
    assert rows[1][2] == 700.0  # middle mean of linspace(400, 1000, 3)
