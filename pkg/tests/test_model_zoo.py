import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from pytest import approx, mark, raises

from IllusionLab.errors import ConfigError, DimensionMismatchError, UnknownSiteError
from IllusionLab.model_zoo import (
    ModelConfig,
    build_synthetic_model,
    canonical_rotated_toy_net,
    canonical_rotation,
    canonical_toy_net,
    feature_activation_gap,
    forward_with_cache,
    gelu,
    gelu_prime,
    illusory_direction,
    make_random_mlp,
    model_from_dict,
    model_to_dict,
    rotated_toy_forward,
    rotated_toy_patch,
    run_model,
    sample_examples,
    sample_labels,
    site_dim,
    toy_forward,
    toy_patch,
)
from IllusionLab.patching_engine import full_replace, rank1_edit, subspace_patch
from IllusionLab.tolerances import Sites

grid = np.arange(-5.0, 5.25, 0.5)


def test_toy_forward_is_identity():
    net = canonical_toy_net()
    h, y = toy_forward(net, 2.5)
    assert_allclose(h, [2.5, 0.0, 2.5])
    assert y == 2.5


@mark.parametrize("x", grid)
@mark.parametrize("x_prime", [-5.0, -0.5, 0.0, 3.0, 5.0])
def test_toy_illusory_patch_closed_form(x, x_prime):
    v = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    h, y = toy_patch(canonical_toy_net(), x, x_prime, v)
    assert_allclose(h, [(x + x_prime) / 2, (x_prime - x) / 2, x], atol=1e-12)
    assert abs(y - x_prime) < 1e-12


@mark.parametrize("x, x_prime", [(1.0, 3.0), (-4.0, 2.5), (0.0, -5.0)])
def test_toy_single_axis_patches(x, x_prime):
    net = canonical_toy_net()
    e1, e2, e3 = np.eye(3)
    assert toy_patch(net, x, x_prime, e3)[1] == approx(x_prime, abs=1e-12)
    assert toy_patch(net, x, x_prime, e1)[1] == approx(x, abs=1e-12)
    assert toy_patch(net, x, x_prime, e2)[1] == approx(x, abs=1e-12)


def test_canonical_rotation_is_orthogonal():
    R = canonical_rotation()
    assert_allclose(R @ R.T, np.eye(3), atol=1e-15)


@settings(max_examples=100)
@given(st.floats(min_value=-100, max_value=100, allow_nan=False))
def test_rotated_net_computes_identity(x):
    rotated = canonical_rotated_toy_net()
    assert abs(rotated_toy_forward(rotated, x)[1] - x) < 1e-12 * max(1.0, abs(x))
    assert abs(rotated_toy_forward(rotated, x)[1] - toy_forward(canonical_toy_net(), x)[1]) < 1e-12 * max(1.0, abs(x))


def test_rotated_roles_are_permuted():
    rotated = canonical_rotated_toy_net()
    readout = rotated.rotation @ rotated.base.w2
    assert abs(readout[1]) < 1e-15
    for x in grid:
        assert abs(rotated_toy_forward(rotated, x)[0][2]) < 1e-15
        assert rotated_toy_patch(rotated, x, 3.0, np.eye(3)[0])[1] == approx(3.0, abs=1e-12)
        assert rotated_toy_patch(rotated, x, 3.0, np.eye(3)[1])[1] == approx(x, abs=1e-12)


def test_gelu_and_derivative():
    assert gelu(0.0) == 0.0
    assert gelu(10.0) == approx(10.0)
    assert gelu_prime(0.0) == approx(0.5)
    x = np.linspace(-3, 3, 13)
    assert_allclose(gelu_prime(x), (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6, atol=1e-8)


def test_model_config_rejects_narrow_mlp():
    with raises(ConfigError):
        ModelConfig(d_resid=64, d_mlp=64)
    with raises(ConfigError):
        ModelConfig(c=0.0)


def test_random_mlp_output_norm():
    mlp = make_random_mlp(7, 16, 48, target_output_norm=5.0)
    inputs = np.random.default_rng(0).standard_normal((2000, 16))
    out = gelu(inputs @ mlp.W_in.T + mlp.b_in) @ mlp.W_out.T + mlp.b_out
    assert float(np.mean(np.linalg.norm(out, axis=1))) == approx(5.0, rel=0.1)
    assert np.linalg.matrix_rank(mlp.W_out) == 16


def test_random_mlp_unit_target_norm():
    mlp = make_random_mlp(11, 16, 64, target_output_norm=1.0)
    inputs = np.random.default_rng(0).standard_normal((2000, 16))
    out = gelu(inputs @ mlp.W_in.T + mlp.b_in) @ mlp.W_out.T + mlp.b_out
    assert 0.95 <= float(np.mean(np.linalg.norm(out, axis=1))) <= 1.05


def test_random_mlp_requires_expansion():
    with raises(DimensionMismatchError):
        make_random_mlp(0, 8, 8, 1.0)


def test_model_is_deterministic():
    a = build_synthetic_model(ModelConfig(d_resid=8, d_mlp=24, seed=9))
    b = build_synthetic_model(ModelConfig(d_resid=8, d_mlp=24, seed=9))
    assert_allclose(a.mlp.W_out, b.mlp.W_out, atol=0)
    assert_allclose(a.v_feat, b.v_feat, atol=0)


def test_feature_blind_mlp(model):
    gap = feature_activation_gap(model)
    assert np.linalg.norm(model.mlp.W_out @ gap) <= 1e-10 * np.linalg.norm(gap) * np.linalg.norm(model.mlp.W_out)
    delta = model.c * model.v_feat
    mean_out = (run_model(model, model.mu + delta).mlp_out + run_model(model, model.mu - delta).mlp_out) / 2
    assert abs(model.v_feat @ mean_out) < 1e-10
    assert np.linalg.matrix_rank(model.mlp.W_out) == model.d_resid


def test_clean_logit_difference_is_four(model):
    noise_free = run_model(model, np.vstack([model.mu + model.c * model.v_feat, model.mu - model.c * model.v_feat]))
    assert_allclose(noise_free.logitdiff, [4.0, -4.0], atol=1e-9)


def test_clean_logit_sign_matches_label(model):
    labels = sample_labels(2000, seed=5)
    clean = run_model(model, sample_examples(model, labels, 6))
    assert np.mean(np.sign(clean.logitdiff) == labels) >= 0.99


def test_illusory_direction_parts(model):
    v, v_disc, v_dorm = illusory_direction(model)
    assert np.linalg.norm(v) == approx(1.0)
    assert abs(v_disc @ v_dorm) < 1e-10
    assert np.linalg.norm(model.mlp.W_out @ v_disc) < 1e-10


def test_run_model_batches_match_single_rows(model):
    X = sample_examples(model, [1, -1, 1], seed=4)
    batch = run_model(model, X)
    for i in range(3):
        assert_allclose(run_model(model, X[i]).logits, batch.logits[i], atol=1e-12)


def test_forward_with_cache_interventions(model):
    x = sample_examples(model, [1], seed=2)[0]
    clean = forward_with_cache(model, x)
    same = forward_with_cache(model, x, full_replace(Sites.mlp_out, clean.mlp_out))
    assert_allclose(same.logits, clean.logits, atol=1e-12)

    no_op = forward_with_cache(model, x, rank1_edit(np.zeros(model.d_resid), np.ones(model.mlp.d_mlp)))
    assert_allclose(no_op.logits, clean.logits, atol=1e-12)

    v = np.eye(model.mlp.d_mlp)[0]
    self_patch = forward_with_cache(model, x, subspace_patch(Sites.mlp_post_act, v, clean.mlp_post_act))
    assert_allclose(self_patch.logits, clean.logits, atol=1e-12)


def test_forward_with_cache_rejects_wrong_site_dimension(model):
    x = sample_examples(model, [1], seed=2)[0]
    with raises(DimensionMismatchError):
        forward_with_cache(model, x, full_replace(Sites.mlp_post_act, np.zeros(model.d_resid)))
    with raises(DimensionMismatchError):
        forward_with_cache(model, np.zeros(3))


def test_unknown_site(model):
    with raises(UnknownSiteError):
        site_dim(model, "attn_out")
    with raises(UnknownSiteError):
        run_model(model, model.mu).site("attn_out")


def test_model_dict_replay(small_model):
    replayed = model_from_dict(json.loads(json.dumps(model_to_dict(small_model))))
    x = sample_examples(small_model, [1, -1], seed=0)
    assert_allclose(run_model(replayed, x).logits, run_model(small_model, x).logits, atol=0)
