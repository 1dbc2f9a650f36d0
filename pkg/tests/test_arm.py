import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armkit.arm import (
    ARMConfig,
    apply_arm,
    combine_filters,
    fixed_gaussian,
    init_arm_params,
    predict_coefficients,
)
from armkit.errors import ConfigurationError, DimensionError
from armkit.filter_bank import FilterBank, sample_bank
from armkit.gradcheck import grad_check
from armkit.tensor import Tensor, backward, parameter

from conftest import loop_depthwise, weighted_sum


def gaussian_only_bank(seed=0, n=8, k=3):
    return sample_bank(seed, n=n, k=k, dog_count=0)


def make(cfg, channels=4, seed=0):
    return init_arm_params(cfg, channels, np.random.default_rng(seed))


def softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def interior_tv(img, k):
    p = k // 2
    core = img[..., p:-p, p:-p] if p else img
    return np.abs(np.diff(core, axis=-1)).sum() + np.abs(np.diff(core, axis=-2)).sum()


# ---------------------------------------------------------------- config


def test_config_bank_presence_rule():
    with pytest.raises(ConfigurationError):
        ARMConfig("bank", bank=None)
    with pytest.raises(ConfigurationError):
        ARMConfig("gaussian", bank=sample_bank(0))
    with pytest.raises(ConfigurationError):
        ARMConfig("warp")
    with pytest.raises(ConfigurationError):
        ARMConfig("learnable", k=4)
    cfg = ARMConfig("bank", bank=sample_bank(0, k=5))
    assert cfg.k == 5 and cfg.n == 8


def test_learnable_init_near_isotropic_gaussian():
    params = make(ARMConfig("learnable"), channels=16)
    diff = params.learnable_kernels.data - fixed_gaussian(3)
    assert params.learnable_kernels.shape == (16, 3, 3)
    assert 0.005 < diff.std() < 0.015


# ---------------------------------------------------------------- coefficients


def test_zero_head_gives_uniform_coefficients(rng):
    cfg = ARMConfig.with_bank(n=8)
    params = make(cfg)
    params.coeff_weight.data[:] = 0.0
    phi = predict_coefficients(Tensor(rng.normal(size=(3, 4, 5, 5))), params, 8).data
    assert phi.shape == (3, 4, 8)
    assert np.all(phi == 1.0 / 8)


def test_coefficients_match_numpy_oracle(rng):
    cfg = ARMConfig.with_bank(n=6)
    params = make(cfg, channels=3)
    params.coeff_bias.data = rng.normal(size=18)
    x = rng.normal(size=(2, 3, 4, 4))
    pooled = x.mean(axis=(2, 3))
    logits = (pooled @ params.coeff_weight.data + params.coeff_bias.data).reshape(2, 3, 6)
    got = predict_coefficients(Tensor(x), params, 6).data
    assert np.allclose(got, softmax_np(logits), atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
def test_coefficients_on_simplex(seed, scale):
    rng = np.random.default_rng(seed)
    cfg = ARMConfig.with_bank(n=8)
    params = make(cfg, channels=3, seed=seed % 1000)
    params.coeff_weight.data = rng.normal(0, scale, params.coeff_weight.shape)
    phi = predict_coefficients(Tensor(rng.normal(size=(2, 3, 4, 4))), params, 8).data
    assert np.all(np.abs(phi.sum(-1) - 1.0) <= 1e-12)
    assert np.all(phi >= 0)


def test_coefficients_strictly_positive_for_moderate_logits(rng):
    params = make(ARMConfig.with_bank(n=8), channels=3)
    phi = predict_coefficients(Tensor(rng.normal(size=(2, 3, 4, 4))), params, 8).data
    assert np.all(phi > 0)


def test_coefficient_channel_mismatch():
    params = make(ARMConfig.with_bank(n=8), channels=4)
    with pytest.raises(DimensionError):
        predict_coefficients(Tensor(np.zeros((1, 3, 4, 4))), params, 8)


def test_coefficient_head_gradcheck(rng):
    params = make(ARMConfig.with_bank(n=4), channels=3)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    probe = rng.normal(size=(2, 3, 4))
    report = grad_check(lambda: weighted_sum(predict_coefficients(x, params, 4), probe),
                        [params.coeff_weight, params.coeff_bias], h=1e-6, tol=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------- combine


@pytest.mark.parametrize("k", [3, 5])
def test_one_hot_selects_atom_exactly(k):
    bank = sample_bank(4, n=8, k=k)
    stack = bank.stack()
    for j in range(bank.n):
        phi = np.zeros((1, 1, bank.n))
        phi[..., j] = 1.0
        assert np.array_equal(combine_filters(bank, Tensor(phi)).data[0, 0], stack[j])


def test_uniform_over_gaussian_bank_has_unit_sum():
    for seed in range(50):
        bank = gaussian_only_bank(seed)
        phi = np.full((2, 3, bank.n), 1.0 / bank.n)
        sums = combine_filters(bank, Tensor(phi)).data.sum(axis=(-1, -2))
        assert np.all(np.abs(sums - 1.0) <= 1e-9)


def test_mixed_bank_sum_equals_gaussian_mass(rng):
    bank = sample_bank(2, n=8, dog_count=3)
    gauss = np.array([a.kind == "gaussian" for a in bank.atoms])
    phi = softmax_np(rng.normal(size=(5, 4, 8)) * 3)
    sums = combine_filters(bank, Tensor(phi)).data.sum(axis=(-1, -2))
    assert np.allclose(sums, phi[..., gauss].sum(-1), atol=1e-12)


def test_combine_matches_explicit_sum(rng):
    bank = sample_bank(1, n=8, k=5)
    phi = softmax_np(rng.normal(size=(2, 3, 8)))
    expected = np.einsum("bcj,jxy->bcxy", phi, bank.stack())
    assert np.allclose(combine_filters(bank, Tensor(phi)).data, expected, atol=1e-15)


def test_combine_n_mismatch():
    with pytest.raises(DimensionError):
        combine_filters(sample_bank(0, n=8), Tensor(np.ones((1, 1, 4)) / 4))


# ---------------------------------------------------------------- apply


@pytest.mark.parametrize("variant", ["gaussian", "learnable", "bank"])
@pytest.mark.parametrize("modulation", [True, False])
def test_shape_preserved(rng, variant, modulation):
    cfg = ARMConfig.with_bank(use_external_modulation=modulation) if variant == "bank" \
        else ARMConfig(variant, use_external_modulation=modulation)
    x = Tensor(rng.normal(size=(2, 4, 6, 5)))
    assert apply_arm(x, cfg, make(cfg), training=True).shape == x.shape


def test_gaussian_variant_constant_interior_unchanged():
    cfg = ARMConfig("gaussian", use_external_modulation=False)
    x = np.full((1, 2, 6, 6), 3.5)
    out = apply_arm(Tensor(x), cfg, make(cfg, channels=2), training=False).data
    assert np.allclose(out[..., 1:-1, 1:-1], 3.5, atol=1e-14)
    assert out[0, 0, 0, 0] < 3.5  # zero padding at the border


def test_gaussian_variant_matches_loop_oracle(rng):
    cfg = ARMConfig("gaussian", use_external_modulation=False)
    x = rng.normal(size=(2, 3, 5, 6))
    out = apply_arm(Tensor(x), cfg, make(cfg, channels=3), training=False).data
    kernels = np.broadcast_to(fixed_gaussian(3), (3, 3, 3))
    assert np.allclose(out, loop_depthwise(x, kernels), atol=1e-13)


def test_bank_variant_one_hot_head_equals_single_atom(rng):
    bank = sample_bank(5)
    cfg = ARMConfig("bank", bank=bank, use_external_modulation=False)
    params = make(cfg, channels=3)
    j = 2
    params.coeff_weight.data[:] = 0.0
    bias = np.full((3, 8), -1e3)
    bias[:, j] = 0.0
    params.coeff_bias.data = bias.ravel()
    x = rng.normal(size=(2, 3, 6, 6))
    out = apply_arm(Tensor(x), cfg, params, training=False).data
    kernels = np.broadcast_to(bank.stack()[j], (3, 3, 3))
    assert np.allclose(out, loop_depthwise(x, kernels), atol=1e-13)


def test_bank_variant_per_sample_kernels_match_oracle(rng):
    bank = sample_bank(5, k=5)
    cfg = ARMConfig("bank", bank=bank, use_external_modulation=False)
    params = make(cfg, channels=2)
    params.coeff_weight.data = rng.normal(0, 2.0, params.coeff_weight.shape)
    x = rng.normal(size=(3, 2, 7, 7))
    phi = predict_coefficients(Tensor(x), params, 8).data
    kernels = np.einsum("bcj,jxy->bcxy", phi, bank.stack())
    out = apply_arm(Tensor(x), cfg, params, training=False).data
    assert np.allclose(out, loop_depthwise(x, kernels), atol=1e-13)


def test_impulse_spreads_when_gaussian_selected():
    bank = sample_bank(11)
    cfg = ARMConfig("bank", bank=bank, use_external_modulation=False)
    params = make(cfg, channels=1)
    params.coeff_weight.data[:] = 0.0
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    for j, atom in enumerate(bank.atoms):
        if atom.kind != "gaussian":
            continue
        bias = np.full(8, -1e3)
        bias[j] = 0.0
        params.coeff_bias.data = bias
        out = apply_arm(Tensor(x), cfg, params, training=False).data
        assert np.count_nonzero(np.abs(out) > 1e-12) == 9
        assert np.abs(out).max() < 1.0
        # cross-correlation oracle: the response is the flipped atom
        assert np.allclose(out[0, 0, 2:5, 2:5], atom.weights[::-1, ::-1], atol=1e-15)


def test_convex_hull_in_interior(rng):
    bank = gaussian_only_bank(3)
    cfg = ARMConfig("bank", bank=bank, use_external_modulation=False)
    params = make(cfg, channels=3)
    params.coeff_weight.data = rng.normal(0, 3.0, params.coeff_weight.shape)
    for _ in range(50):
        x = rng.uniform(-2, 5, size=(2, 3, 8, 8))
        out = apply_arm(Tensor(x), cfg, params, training=False).data[..., 1:-1, 1:-1]
        assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


def test_total_variation_not_increased(rng):
    bank = gaussian_only_bank(8)
    cfg = ARMConfig("bank", bank=bank, use_external_modulation=False)
    params = make(cfg, channels=2)
    params.coeff_weight.data = rng.normal(0, 3.0, params.coeff_weight.shape)
    for _ in range(100):
        x = rng.normal(size=(1, 2, 12, 12))
        out = apply_arm(Tensor(x), cfg, params, training=False).data
        # interior of the output only reads the input interior plus a one-pixel ring
        assert interior_tv(out, 3) <= interior_tv(x, 1) + 1e-12
        for c in range(2):
            assert interior_tv(out[0, c], 3) <= interior_tv(x[0, c], 1) + 1e-12


def test_modulation_applied_after_filtering(rng):
    cfg = ARMConfig("gaussian", use_external_modulation=True)
    params = make(cfg, channels=2)
    x = rng.normal(size=(4, 2, 5, 5))
    out = apply_arm(Tensor(x), cfg, params, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.all(params.modulation.running_var >= 0)


def test_too_small_map_rejected():
    cfg = ARMConfig.with_bank(k=5)
    with pytest.raises(ConfigurationError):
        apply_arm(Tensor(np.zeros((1, 4, 4, 4))), cfg, make(cfg), training=False)


def test_channel_mismatch_rejected():
    cfg = ARMConfig("gaussian")
    with pytest.raises(DimensionError):
        apply_arm(Tensor(np.zeros((1, 3, 4, 4))), cfg, make(cfg, channels=4), training=False)


@pytest.mark.parametrize("variant", ["gaussian", "learnable", "bank"])
@pytest.mark.parametrize("modulation", [True, False])
@pytest.mark.parametrize("training", [True, False])
def test_apply_arm_gradcheck(rng, variant, modulation, training):
    cfg = ARMConfig.with_bank(seed=3, n=4, dog_count=1, use_external_modulation=modulation) \
        if variant == "bank" else ARMConfig(variant, use_external_modulation=modulation)
    params = make(cfg, channels=3)
    if variant == "bank":
        params.coeff_weight.data = rng.normal(0, 1.0, params.coeff_weight.shape)
    if modulation:
        params.modulation.gamma.data = rng.normal(size=3)
        params.modulation.beta.data = rng.normal(size=3)
        params.modulation.running_var = rng.random(3) + 0.5
    x = parameter(rng.normal(size=(2, 3, 4, 5)))
    probe = rng.normal(size=x.shape)
    point = [x, *params.tensors().values()]
    report = grad_check(lambda: weighted_sum(apply_arm(x, cfg, params, training), probe),
                        point, h=1e-5, tol=1e-4)
    assert report.passed, report


@pytest.mark.parametrize("variant", ["gaussian", "learnable", "bank"])
def test_apply_arm_deterministic(rng, variant):
    cfg = ARMConfig.with_bank() if variant == "bank" else ARMConfig(variant)
    x = rng.normal(size=(2, 4, 6, 6))
    outs = []
    for _ in range(2):
        params = make(cfg, seed=9)
        outs.append(apply_arm(Tensor(x), cfg, params, training=True).data.tobytes())
    assert outs[0] == outs[1]


def test_gradients_reach_head_through_bank(rng):
    cfg = ARMConfig.with_bank(use_external_modulation=True)
    params = make(cfg)
    x = parameter(rng.normal(size=(2, 4, 6, 6)))
    grads = backward(weighted_sum(apply_arm(x, cfg, params, True), rng.normal(size=x.shape)))
    assert np.any(grads[params.coeff_weight] != 0)
    assert np.any(grads[x] != 0)


def test_filter_bank_from_custom_atoms():
    bank = sample_bank(0, n=4, dog_count=0)
    custom = FilterBank(bank.atoms[:2], seed=None)
    cfg = ARMConfig("bank", bank=custom)
    assert cfg.n == 2
