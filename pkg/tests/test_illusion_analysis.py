import numpy as np
import scipy.stats
from numpy.testing import assert_allclose
from pytest import approx, mark, raises

from IllusionLab.das_optimizer import DasConfig, das_train_run, make_patch_pairs
from IllusionLab.errors import DegenerateInputError, KernelCheckError, NearZeroLogitDiffError, NotPositiveDefiniteError
from IllusionLab.illusion_analysis import (
    PatchOutcome,
    analyze_direction,
    analyze_subspace,
    cosine,
    fldd,
    interchange_accuracy,
    labelled_site_activations,
    optimal_angle_scan,
    patch_outcomes,
    projection_spread,
    reader_matrix,
    rewrite_score,
    spread_to_frame,
    summarize_fldd,
    variance_ratio,
)
from IllusionLab.model_zoo import illusory_direction, with_noise_scale
from IllusionLab.numerics import nullspace_basis, unit
from IllusionLab.tolerances import Sites


def _outcome(clean_ld, patched_ld):
    return PatchOutcome(
        clean_logits=np.array([clean_ld, 0.0]),
        patched_logits=np.array([patched_ld, 0.0]),
        clean_logitdiff=clean_ld,
        patched_logitdiff=patched_ld,
    )


@mark.parametrize("clean, patched, expected", [(4.0, 4.0, 0.0), (4.0, 0.0, 1.0), (4.0, -4.0, 2.0), (-2.0, -3.0, -0.5)])
def test_fldd_values(clean, patched, expected):
    assert fldd(clean, patched) == approx(expected)


def test_fldd_rejects_near_zero_clean():
    with raises(NearZeroLogitDiffError):
        fldd(1e-9, 1.0)


def test_summarize_fldd_counts_exclusions():
    summary = summarize_fldd([_outcome(4.0, 0.0), _outcome(4.0, 2.0), _outcome(0.0, 1.0)])
    assert summary.n_used == 2
    assert summary.n_excluded == 1
    assert summary.mean == approx(0.75)
    assert summary.median == approx(0.75)


def test_interchange_accuracy():
    outcomes = [_outcome(4.0, -1.0), _outcome(4.0, 1.0), _outcome(-4.0, 2.0), _outcome(-4.0, -2.0)]
    assert interchange_accuracy(outcomes) == approx(0.5)
    with raises(DegenerateInputError):
        interchange_accuracy([])


def test_rewrite_score():
    assert rewrite_score(0.2, 1.0) == approx(1.0)
    assert rewrite_score(0.2, 0.2) == 0.0
    with raises(DegenerateInputError):
        rewrite_score(1.0, 1.0)


def test_cosine():
    assert cosine([1.0, 0.0], [2.0, 0.0]) == 1.0
    assert cosine([1.0, 0.0], [0.0, 3.0]) == 0.0
    with raises(DegenerateInputError):
        cosine([0.0, 0.0], [1.0, 0.0])


def test_variance_ratio_of_matching_intervention(rng):
    W_out = rng.standard_normal((3, 6))
    v = unit(rng.standard_normal(6))
    sigma = np.eye(6)
    assert variance_ratio(v, W_out @ v, v, W_out, sigma) == approx(1.0)
    with raises(NotPositiveDefiniteError):
        variance_ratio(v, W_out @ v, v, W_out, -sigma)


def test_projection_spread(rng):
    acts = np.vstack([rng.standard_normal((30, 4)) + [3, 0, 0, 0], rng.standard_normal((30, 4)) - [3, 0, 0, 0]])
    labels = np.array([1] * 30 + [-1] * 30)
    spread = projection_spread(np.array([1.0, 0.0, 0.0, 0.0]), acts, labels)
    assert spread.classes[1].mean > 2 and spread.classes[-1].mean < -2
    assert spread.classes[1].count == 30
    assert spread.separation() > 3
    frame = spread_to_frame(spread)
    assert list(frame.columns) == ["label", "projection"]
    assert len(frame) == 60
    with raises(DegenerateInputError):
        projection_spread(np.array([1.0, 0.0, 0.0, 0.0]), acts[:30], labels[:30])


def test_reader_matrix(model):
    assert reader_matrix(model, Sites.mlp_post_act) is model.mlp.W_out
    assert reader_matrix(model, Sites.resid_pre) is model.unembed


def test_constructed_illusion_report(model, eval_pairs):
    v, _, _ = illusory_direction(model)
    report = analyze_direction(model, v, Sites.mlp_post_act, eval_pairs)
    assert report.norm_null == approx(1 / np.sqrt(2), abs=1e-9)
    assert report.norm_row == approx(1 / np.sqrt(2), abs=1e-9)
    assert abs(report.fldd_null) < 1e-6
    assert report.fldd_v > 0.5
    assert report.readout_shift["patched"] != approx(report.readout_shift["clean"])
    table = report.table()
    assert set(table["intervention"]) == {"v", "row", "null", "full_component"}


def test_das_mlp_direction_shows_the_illusion(model, das_mlp, eval_pairs):
    report = analyze_direction(model, das_mlp.V[:, 0], Sites.mlp_post_act, eval_pairs)
    assert report.fldd_v >= 0.8
    assert report.fldd_row <= 0.25 * report.fldd_v
    assert abs(report.fldd_null) < 1e-6
    assert abs(report.fldd_full_component) < 0.15
    assert report.norm_null >= 0.3
    assert report.interchange_acc_v > report.interchange_acc_row
    assert report.spread_null.separation() > report.spread_row.separation()


def test_das_resid_direction_is_faithful(model, das_resid, eval_pairs):
    v = das_resid.V[:, 0]
    assert abs(cosine(v, model.v_feat)) >= 0.9
    report = analyze_direction(model, v, Sites.resid_pre, eval_pairs)
    assert report.fldd_row >= 0.75 * report.fldd_v
    assert report.readout_shift is None


def test_direction_entirely_in_kernel_has_no_row(model, eval_pairs):
    N = nullspace_basis(model.mlp.W_out)
    report = analyze_direction(model, N[:, 0], Sites.mlp_post_act, eval_pairs)
    assert report.rows["row"] is None
    assert np.isnan(report.fldd_row)
    assert report.to_dict()["fldd_row"] is None
    assert abs(report.fldd_v) < 1e-6


def test_analyze_subspace(model, eval_pairs):
    v, v_disc, v_dorm = illusory_direction(model)
    V = np.column_stack([v, unit(v_disc - v_dorm)])
    report = analyze_subspace(model, V, Sites.mlp_post_act, eval_pairs)
    assert_allclose(report.null_norms, [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-9)
    assert abs(report.rows["null"].fldd.mean) < 1e-6
    assert set(report.table()["intervention"]) == {"subspace", "row", "null", "full_component"}


def test_angle_scan_peaks_at_quarter_turn(model):
    clean_model = with_noise_scale(model, 0.0)
    _, v_disc, v_dorm = illusory_direction(clean_model)
    pairs = make_patch_pairs(clean_model, 20, seed=3, opposite_only=True)
    angles = np.linspace(0.0, np.pi / 2, 41)
    scan = optimal_angle_scan(clean_model, v_disc, v_dorm, Sites.mlp_post_act, pairs, angles)
    assert abs(scan.best_angle - np.pi / 4) <= np.pi / 80
    assert np.corrcoef(scan.effects, np.cos(angles) * np.sin(angles))[0, 1] >= 0.999
    assert not scan.dormancy_violated


def test_angle_scan_flags_noisy_dormancy(model, eval_pairs):
    _, v_disc, v_dorm = illusory_direction(model)
    scan = optimal_angle_scan(model, v_disc, v_dorm, Sites.mlp_post_act, eval_pairs, [0.0, np.pi / 4])
    assert scan.dormancy_violated


def test_angle_scan_requires_kernel_direction(model, eval_pairs):
    _, v_disc, v_dorm = illusory_direction(model)
    with raises(KernelCheckError):
        optimal_angle_scan(model, v_dorm, v_disc, Sites.mlp_post_act, eval_pairs, [0.0])


def _expected_post_act(model, label):
    # E[gelu(z)] for z ~ N(m, s²) is m·Φ(m/r) + (s²/r)·φ(m/r) with r = √(1 + s²)
    m = model.mlp.W_in @ (model.mu + label * model.c * model.v_feat) + model.mlp.b_in
    s_sq = np.square(model.noise_scale * np.linalg.norm(model.mlp.W_in, axis=1))
    r = np.sqrt(1.0 + s_sq)
    return m * scipy.stats.norm.cdf(m / r) + s_sq / r * scipy.stats.norm.pdf(m / r)


def test_kernel_component_separates_classes_by_the_feature_gap(model, eval_pairs):
    _, v_disc, _ = illusory_direction(model)
    acts, labels = labelled_site_activations(model, eval_pairs, Sites.mlp_post_act)
    spread = projection_spread(v_disc, acts, labels)
    pos, neg = spread.classes[1], spread.classes[-1]
    expected = float(v_disc @ (_expected_post_act(model, 1) - _expected_post_act(model, -1)))
    standard_error = np.sqrt(pos.std**2 / pos.count + neg.std**2 / neg.count)
    assert abs((pos.mean - neg.mean) - expected) <= 3 * standard_error


def test_dormant_component_barely_separates_classes(model, eval_pairs):
    _, _, v_dorm = illusory_direction(model)
    acts, labels = labelled_site_activations(model, eval_pairs, Sites.mlp_post_act)
    assert projection_spread(v_dorm, acts, labels).separation() < 0.5


def test_random_mlp_is_unused_by_the_task(random_mlp_model):
    pairs = make_patch_pairs(random_mlp_model, 200, seed=12, opposite_only=True)
    outcomes = patch_outcomes(random_mlp_model, pairs, None, Sites.mlp_post_act, full_component=True)
    summary = summarize_fldd(outcomes)
    assert summary.n_used + summary.n_excluded == 200
    assert abs(summary.mean) < 0.15


@mark.slow
def test_random_mlp_das_direction_keeps_a_kernel_part(random_mlp_model):
    pairs = make_patch_pairs(random_mlp_model, 256, seed=11)
    run = das_train_run(random_mlp_model, pairs, DasConfig(seed=5, site=Sites.mlp_post_act))
    eval_pairs = make_patch_pairs(random_mlp_model, 200, seed=12, opposite_only=True)
    report = analyze_direction(random_mlp_model, run.V[:, 0], Sites.mlp_post_act, eval_pairs)
    assert abs(report.fldd_null) < 1e-6
    assert abs(report.fldd_full_component) < 0.15
    assert report.fldd_v > report.fldd_row
    assert report.norm_null >= 0.3
