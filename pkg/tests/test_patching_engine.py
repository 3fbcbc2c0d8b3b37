import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from pytest import mark, raises

from IllusionLab.errors import DimensionMismatchError, KernelCheckError, NotOrthonormalError, NotUnitVectorError
from IllusionLab.model_zoo import canonical_toy_net, forward_with_cache, illusory_direction, run_model, sample_examples
from IllusionLab.numerics import nullspace_basis, orthonormalize, unit
from IllusionLab.patching_engine import (
    apply_intervention,
    apply_rank1_edit,
    full_replace,
    illusory_contribution,
    patch_1d,
    patch_kd,
    rank1_edit,
    spec_from_dict,
    spec_to_dict,
    subspace_patch,
    zero_subspace,
    zero_subspace_intervention,
)
from IllusionLab.tolerances import Sites

seeds = st.integers(0, 2**32 - 1)


def test_patch_1d_toy_example():
    v = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    assert_allclose(patch_1d([1.0, 0.0, 1.0], [3.0, 0.0, 3.0], v), [2.0, 1.0, 1.0], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), seeds)
def test_patch_1d_projection_properties(d, seed):
    rng = np.random.default_rng(seed)
    base, source = rng.standard_normal(d), rng.standard_normal(d)
    v = unit(rng.standard_normal(d))
    result = patch_1d(base, source, v)
    assert abs(v @ result - v @ source) < 1e-10
    complement = np.eye(d) - np.outer(v, v)
    assert_allclose(complement @ result, complement @ base, atol=1e-10)


def test_patch_1d_self_patch_and_validation():
    base = np.array([1.0, 2.0, 3.0])
    assert_allclose(patch_1d(base, base, np.array([0.0, 0.6, 0.8])), base)
    with raises(NotUnitVectorError):
        patch_1d(base, base, np.array([1.0, 1.0, 0.0]))
    with raises(DimensionMismatchError):
        patch_1d(base, np.ones(2), np.array([1.0, 0.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(1, 4), seeds)
def test_patch_kd_properties(d, k, seed):
    k = min(k, d)
    rng = np.random.default_rng(seed)
    base, source = rng.standard_normal(d), rng.standard_normal(d)
    V = orthonormalize(rng.standard_normal((d, k)))
    once = patch_kd(base, source, V)
    assert_allclose(V.T @ once, V.T @ source, atol=1e-10)
    assert_allclose(patch_kd(once, source, V), once, atol=1e-10)
    if k == 1:
        assert_allclose(once, patch_1d(base, source, V[:, 0]), atol=1e-12)


def test_patch_kd_edge_bases(rng):
    base, source = rng.standard_normal(4), rng.standard_normal(4)
    assert_allclose(patch_kd(base, source, np.eye(4)), source, atol=1e-12)
    assert_allclose(patch_kd(base, source, np.zeros((4, 0))), base)
    with raises(NotOrthonormalError):
        patch_kd(base, source, np.ones((4, 2)))


def test_zero_subspace_keeps_norm_of_v():
    x = np.array([1.0, 2.0])
    assert_allclose(zero_subspace_intervention(x, np.array([1.0, 0.0])), [0.0, 2.0])
    assert_allclose(zero_subspace_intervention(x, np.array([2.0, 0.0])), [-3.0, 2.0])


def test_rank1_edit_shapes(rng):
    W = rng.standard_normal((3, 5))
    a, b = rng.standard_normal(3), rng.standard_normal(5)
    assert_allclose(apply_rank1_edit(W, a, b), W + np.outer(a, b))
    with raises(DimensionMismatchError):
        apply_rank1_edit(W, b, a)


def test_rank1_edit_must_target_mlp_out():
    spec = rank1_edit(np.ones(2), np.ones(3))
    assert spec.site == Sites.mlp_out
    with raises(ValueError):
        apply_intervention(np.ones(2), spec)


def test_toy_illusory_contribution():
    net = canonical_toy_net()
    h_base, h_source = net.w1 * 1.0, net.w1 * 3.0
    v = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    contribution = illusory_contribution(h_base, h_source, v, net.w2[None, :], v_disc=np.array([1.0, 0.0, 0.0]))
    assert_allclose(contribution, [2.0], atol=1e-12)


def test_illusory_contribution_closed_form(model):
    v, v_disc, v_dorm = illusory_direction(model)
    X = sample_examples(model, [1, -1], seed=8)
    acts = run_model(model, X).mlp_post_act
    # noise moves the dormant projection, so compare against the closed form with it pinned
    base = acts[0]
    source = acts[1] - (v_dorm @ (acts[1] - base)) * v_dorm
    contribution = illusory_contribution(base, source, v, model.mlp.W_out, v_disc)
    expected = 0.5 * (v_disc @ source - v_disc @ base) * (model.mlp.W_out @ v_dorm)
    assert_allclose(contribution, expected, atol=1e-10)
    assert_allclose(illusory_contribution(base, source, v, model.mlp.W_out), expected, atol=1e-10)
    assert_allclose(illusory_contribution(base, base, v, model.mlp.W_out, v_disc), 0.0, atol=1e-12)


def test_illusory_contribution_rejects_non_kernel_part(model):
    v, _, v_dorm = illusory_direction(model)
    with raises(KernelCheckError):
        illusory_contribution(np.zeros_like(v), np.ones_like(v), v, model.mlp.W_out, v_disc=v_dorm)


def test_kernel_patches_never_change_logits(model):
    N = nullspace_basis(model.mlp.W_out)
    rng = np.random.default_rng(77)
    for case in range(50):
        v = unit(N @ rng.standard_normal(N.shape[1]))
        base, source = sample_examples(model, rng.choice([-1, 1], size=2), seed=case)
        clean = forward_with_cache(model, base)
        u_source = run_model(model, source).mlp_post_act
        patched = forward_with_cache(model, base, subspace_patch(Sites.mlp_post_act, v, u_source))
        assert_allclose(patched.logits, clean.logits, atol=1e-10)


@mark.parametrize(
    "spec",
    [
        full_replace(Sites.mlp_out, [1.0, 2.0]),
        subspace_patch(Sites.resid_pre, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], [1.0, 2.0, 3.0]),
        zero_subspace(Sites.mlp_post_act, [0.5, 0.5], unit_constrained=False),
        rank1_edit([1.0, 2.0], [3.0, 4.0, 5.0]),
    ],
)
def test_spec_dict_replay(spec):
    replayed = spec_from_dict(json.loads(json.dumps(spec_to_dict(spec))))
    assert spec_to_dict(replayed) == spec_to_dict(spec)


def test_spec_validation():
    with raises(NotUnitVectorError):
        zero_subspace(Sites.mlp_post_act, [1.0, 1.0], unit_constrained=True)
    with raises(NotOrthonormalError):
        subspace_patch(Sites.resid_pre, [[1.0, 1.0], [0.0, 1.0]], [1.0, 1.0])
