from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import scipy.stats

from IllusionLab.das_optimizer import das_train_run, make_patch_pairs
from IllusionLab.errors import InstanceFailedError, LabError
from IllusionLab.illusion_analysis import (
    analyze_direction,
    analyze_subspace,
    cosine,
    optimal_angle_scan,
    spread_to_frame,
    variance_ratio,
)
from IllusionLab.lab_log import get_logger
from IllusionLab.model_zoo import (
    build_synthetic_model,
    canonical_rotated_toy_net,
    canonical_toy_net,
    illusory_direction,
    rotated_toy_forward,
    rotated_toy_patch,
    toy_forward,
    toy_patch,
    with_noise_scale,
)
from IllusionLab.numerics import unit
from IllusionLab.patching_engine import apply_rank1_edit, patch_1d
from IllusionLab.rome_bridge import (
    RomeRequest,
    edit_to_subspace,
    edit_vs_patch_model_comparison,
    gap_variance,
    model_covariance,
    monte_carlo_gap_variance,
    patch_to_edit,
    rewrite_score_comparison,
    rome_edit,
    round_trip,
)
from IllusionLab.separability_lab import (
    REFERENCE_PROBE_ACCURACY,
    REFERENCE_RESIDUAL_R2,
    distortion_regression,
    injected_direction_experiment,
    isometry_map,
    lemma_separability_check,
    residual_projection_regression,
    separable_clusters,
)
from IllusionLab.tolerances import Sites

logger = get_logger("scenarios")

EXACT_TOL = 1e-12


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class ScenarioOutcome:
    scenario: str
    checks: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def check(self, name, passed, /, **detail):
        self.checks.append(Check(name=name, passed=bool(passed), detail=detail))
        logger.info(f"[{'PASS' if passed else 'FAIL'}] {name}")

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "failures": self.failures(),
            "diagnostics": self.diagnostics,
        }


def _seeds(seed, count):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def _instance_seed(seed, suite_index, i):
    return int(np.random.SeedSequence([seed, suite_index, i]).generate_state(1)[0])


def _max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# toy network


def _toy_grid(config):
    count = int(np.floor((config.grid_max - config.grid_min) / config.grid_step + 1e-9)) + 1
    return np.round(config.grid_min + config.grid_step * np.arange(count), 12)


def _unrotated_toy_table(grid):
    net = canonical_toy_net()
    e1, e2, e3 = np.eye(3)
    v_illusory = (e1 + e2) / np.sqrt(2.0)
    records = []
    for x in grid:
        for x_prime in grid:
            records.append({
                "x": x,
                "x_prime": x_prime,
                "no_patch": toy_forward(net, x)[1],
                "e3_patch": toy_patch(net, x, x_prime, e3)[1],
                "v_illusory_patch": toy_patch(net, x, x_prime, v_illusory)[1],
                "e1_only": toy_patch(net, x, x_prime, e1)[1],
                "e2_only": toy_patch(net, x, x_prime, e2)[1],
            })
    return pd.DataFrame(records)


def _rotated_toy_table(grid):
    net = canonical_rotated_toy_net()
    d1, d2, d3 = np.eye(3)
    # e3 written in the rotated coordinates
    rotated_e3 = net.rotation @ np.array([0.0, 0.0, 1.0])
    records = []
    for x in grid:
        for x_prime in grid:
            records.append({
                "x": x,
                "x_prime": x_prime,
                "no_patch": rotated_toy_forward(net, x)[1],
                "d1_patch": rotated_toy_patch(net, x, x_prime, d1)[1],
                "rotated_e3_patch": rotated_toy_patch(net, x, x_prime, rotated_e3)[1],
                "d2_only": rotated_toy_patch(net, x, x_prime, d2)[1],
                "d3_only": rotated_toy_patch(net, x, x_prime, d3)[1],
            })
    return pd.DataFrame(records)


def run_toy(config, writer, plot=False):
    """
    Tabulate the toy network under each hidden-layer patch over a grid of (x, x') pairs
    :return: ScenarioOutcome
    """
    outcome = ScenarioOutcome(scenario="toy")
    grid = _toy_grid(config)
    table = _rotated_toy_table(grid) if config.rotated else _unrotated_toy_table(grid)
    writer.csv("toy_rotated_table.csv" if config.rotated else "toy_table.csv", table)

    x, x_prime = table["x"], table["x_prime"]
    outcome.check("identity function", _max_abs(table["no_patch"], x) < EXACT_TOL, max_error=_max_abs(table["no_patch"], x))
    if config.rotated:
        net = canonical_rotated_toy_net()
        readout = net.rotation @ net.base.w2
        hidden_d3 = [rotated_toy_forward(net, value)[0][2] for value in grid]
        outcome.check("d1 patch outputs x'", _max_abs(table["d1_patch"], x_prime) < EXACT_TOL)
        outcome.check("rotated e3 patch outputs x'", _max_abs(table["rotated_e3_patch"], x_prime) < EXACT_TOL)
        outcome.check("d2 only leaves x (disconnected)", _max_abs(table["d2_only"], x) < EXACT_TOL, readout_weight=float(readout[1]))
        outcome.check("d3 only leaves x (dormant)", _max_abs(table["d3_only"], x) < EXACT_TOL, max_activation=float(np.max(np.abs(hidden_d3))))
        outcome.check("rotated net agrees with the original", _max_abs([rotated_toy_forward(net, v)[1] for v in grid],
                                                                        [toy_forward(canonical_toy_net(), v)[1] for v in grid]) < EXACT_TOL)
    else:
        outcome.check("v_illusory patch outputs x'", _max_abs(table["v_illusory_patch"], x_prime) < EXACT_TOL,
                      max_error=_max_abs(table["v_illusory_patch"], x_prime))
        outcome.check("e3 patch outputs x'", _max_abs(table["e3_patch"], x_prime) < EXACT_TOL)
        outcome.check("e1 only leaves x (disconnected)", _max_abs(table["e1_only"], x) < EXACT_TOL)
        outcome.check("e2 only leaves x (dormant)", _max_abs(table["e2_only"], x) < EXACT_TOL)

    same = table[x == x_prime].drop(columns=["x", "x_prime"])
    outcome.check("x = x' rows are constant", float(np.max(np.ptp(same.to_numpy(), axis=1))) < EXACT_TOL)
    outcome.diagnostics["grid_points"] = int(grid.size)
    return outcome


# synthetic illusion


def run_illusion_synth(config, writer, plot=False):
    """
    Train DAS at each configured site of the canonical synthetic model and decompose what it finds
    :return: ScenarioOutcome
    """
    outcome = ScenarioOutcome(scenario="illusion-synth")
    train_seed, eval_seed, das_seed, scan_seed = _seeds(config.seed, 4)
    model = build_synthetic_model(replace(config.model, seed=config.seed))
    sign_rule = config.das.objective_sign_rule
    train_pairs = make_patch_pairs(model, config.pair_count, train_seed, sign_rule)
    eval_pairs = make_patch_pairs(model, config.eval_pair_count, eval_seed, sign_rule, opposite_only=True)

    tables, traces, spreads, reports = [], {}, {}, {}
    for site in config.sites:
        das = replace(config.das, seed=das_seed, site=site)
        run = das_train_run(model, train_pairs, das)
        traces[site] = run.trace
        writer.csv(f"das_trace_{site}.csv", run.trace)
        entry = {"initial_loss": run.initial_loss, "final_loss": run.final_loss, "basis": run.V}

        if das.subspace_dim > 1:
            subspace_report = analyze_subspace(model, run.V, site, eval_pairs)
            tables.append(subspace_report.table())
            entry["null_norms"] = subspace_report.null_norms
            reports[site] = entry
            continue

        v = run.V[:, 0]
        report = analyze_direction(model, v, site, eval_pairs)
        tables.append(report.table())
        entry.update(report.to_dict())
        if site in (Sites.resid_pre, Sites.resid_post):
            entry["cos_v_feat"] = cosine(v, model.v_feat)
        reports[site] = entry
        for part, spread in (("null", report.spread_null), ("row", report.spread_row)):
            if spread is not None:
                frame = spread_to_frame(spread)
                writer.csv(f"spread_{site}_{part}.csv", frame)
                spreads[f"{site} {part}"] = frame
        _site_checks(outcome, site, report, entry)

    writer.csv("illusion_table.csv", pd.concat(tables, ignore_index=True))

    scan = _angle_scan(model, config, scan_seed)
    writer.csv("angle_scan.csv", scan["frame"])
    outcome.check("angle scan peaks at pi/4", abs(scan["best_angle"] - np.pi / 4) <= np.pi / 80 + 1e-12,
                  best_angle=scan["best_angle"], correlation=scan["correlation"])
    outcome.check("angle scan follows cos·sin", scan["correlation"] >= 0.999, correlation=scan["correlation"])

    constructed = analyze_direction(model, illusory_direction(model)[0], Sites.mlp_post_act, eval_pairs)
    reports["constructed_illusion"] = constructed.to_dict()
    if config.random_mlp_comparison and config.model.feature_blind_mlp:
        reports["random_mlp"] = _random_mlp_comparison(config, writer, outcome, (train_seed, eval_seed, das_seed))
    writer.json("illusion_report.json", {"seed": config.seed, "sites": reports,
                                         "angle_scan": {k: scan[k] for k in ("best_angle", "correlation", "dormancy_violated")}})

    if plot:
        from Runner import plotting  # Only import if graphing is enabled

        for name, fig in (("das_trace.png", plotting.trace_figure(traces)),
                          ("projection_spreads.png", plotting.spread_figure(spreads, "Class-conditional projections")),
                          ("angle_scan.png", plotting.angle_scan_figure(scan["frame"]))):
            writer.figure(name, fig)
            plotting.close(fig)
    return outcome


def _site_checks(outcome, site, report, entry):
    if site == Sites.mlp_post_act:
        outcome.check("mlp site: FLDD of v at least 0.8", report.fldd_v >= 0.8, fldd_v=report.fldd_v)
        outcome.check("mlp site: rowspace part at most a quarter of v", report.fldd_row <= 0.25 * report.fldd_v,
                      fldd_row=report.fldd_row, fldd_v=report.fldd_v)
        outcome.check("mlp site: kernel part has no effect", abs(report.fldd_null) < 1e-6, fldd_null=report.fldd_null)
        outcome.check("mlp site: full MLP patch is weak", abs(report.fldd_full_component) < 0.15,
                      fldd_full_component=report.fldd_full_component)
        outcome.check("mlp site: kernel component norm at least 0.3", report.norm_null >= 0.3, norm_null=report.norm_null)
    elif site == Sites.resid_pre:
        outcome.check("resid site: recovers the feature direction", abs(entry["cos_v_feat"]) >= 0.9, cos_v_feat=entry["cos_v_feat"])
        outcome.check("resid site: rowspace part keeps three quarters", report.fldd_row >= 0.75 * report.fldd_v,
                      fldd_row=report.fldd_row, fldd_v=report.fldd_v)


def _random_mlp_comparison(config, writer, outcome, seeds):
    """
    Repeat the mlp_post_act analysis on the random-weights model, without projecting the class
    activation gap into ker W_out
    :param seeds: (train, eval, das) seeds shared with the canonical run
    :return: the report entry, with the row/v FLDD ratio
    """
    train_seed, eval_seed, das_seed = seeds
    model = build_synthetic_model(replace(config.model, seed=config.seed, feature_blind_mlp=False))
    sign_rule = config.das.objective_sign_rule
    train_pairs = make_patch_pairs(model, config.pair_count, train_seed, sign_rule)
    eval_pairs = make_patch_pairs(model, config.eval_pair_count, eval_seed, sign_rule, opposite_only=True)
    das = replace(config.das, seed=das_seed, site=Sites.mlp_post_act, subspace_dim=1)
    run = das_train_run(model, train_pairs, das)
    writer.csv("das_trace_random_mlp.csv", run.trace)

    report = analyze_direction(model, run.V[:, 0], Sites.mlp_post_act, eval_pairs)
    writer.csv("illusion_table_random_mlp.csv", report.table())
    entry = {"initial_loss": run.initial_loss, "final_loss": run.final_loss, "basis": run.V}
    entry.update(report.to_dict())
    entry["row_to_v_ratio"] = report.fldd_row / report.fldd_v if report.fldd_v else float("nan")
    outcome.check("random mlp: full MLP patch is weak", abs(report.fldd_full_component) < 0.15,
                  fldd_full_component=report.fldd_full_component, pairs=len(eval_pairs))
    outcome.diagnostics["random_mlp_row_to_v_ratio"] = entry["row_to_v_ratio"]
    logger.info(f"random MLP: FLDD row/v = {entry['row_to_v_ratio']:.3f}")
    return entry


def _angle_scan(model, config, seed):
    # dormancy holds exactly only without input noise
    clean_model = with_noise_scale(model, 0.0)
    _, v_disc, v_dorm = illusory_direction(clean_model)
    pairs = make_patch_pairs(clean_model, config.eval_pair_count, seed, config.das.objective_sign_rule, opposite_only=True)
    angles = np.linspace(0.0, np.pi / 2, config.angle_grid_steps + 1)
    scan = optimal_angle_scan(clean_model, v_disc, v_dorm, Sites.mlp_post_act, pairs, angles, strict=True)
    reference = np.cos(angles) * np.sin(angles)
    correlation = float(scipy.stats.pearsonr(scan.effects, reference)[0])
    return {
        "frame": pd.DataFrame({"angle": angles, "effect": scan.effects}),
        "best_angle": scan.best_angle,
        "correlation": correlation,
        "dormancy_violated": scan.dormancy_violated,
    }


# rank-1 edit bridge


def random_instance(seed, d_resid, d_mlp, max_condition):
    """Gaussian W_out and an SPD covariance whose condition number is drawn log-uniformly up to max_condition."""
    rng = np.random.default_rng(seed)
    W_out = rng.standard_normal((d_resid, d_mlp)) / np.sqrt(d_mlp)
    condition = 10 ** rng.uniform(0.0, np.log10(max_condition))
    Q = scipy.stats.ortho_group.rvs(d_mlp, random_state=rng)
    eigenvalues = np.logspace(0.0, -np.log10(condition), d_mlp)
    sigma = (Q * eigenvalues) @ Q.T
    return W_out, (sigma + sigma.T) / 2, rng


def _guarded(suite, seed, fn):
    try:
        return fn()
    except LabError as e:
        raise InstanceFailedError(suite, seed, e) from e


def _rome_instance(config, seed):
    W_out, sigma, rng = random_instance(seed, config.d_resid, config.d_mlp, config.max_condition)
    k = rng.standard_normal(config.d_mlp)
    v_target = rng.standard_normal(config.d_resid)
    edit = rome_edit(W_out, RomeRequest(k=k, v_target=v_target, sigma=sigma))
    achieved = apply_rank1_edit(W_out, edit.a, edit.b) @ k
    constraint = float(np.linalg.norm(achieved - v_target) / np.linalg.norm(v_target))

    # sine of the angle between Σb and k, free of the cancellation in arccos near 1
    sigma_b = sigma @ edit.b
    k_hat = k / np.linalg.norm(k)
    kkt_angle = float(np.arcsin(min(1.0, np.linalg.norm(sigma_b - (sigma_b @ k_hat) * k_hat) / np.linalg.norm(sigma_b))))

    base = float(edit.b @ sigma_b)
    xi = rng.standard_normal((config.perturbation_count, config.d_mlp)) * np.linalg.norm(edit.b)
    xi -= np.outer(xi @ k_hat, k_hat)
    # b + ξ keeps bᵀk = 1; its variance exceeds bᵀΣb by 2ξᵀΣb + ξᵀΣξ
    increase = 2 * xi @ sigma_b + np.einsum("ij,jk,ik->i", xi, sigma, xi)
    violations = int(np.sum(increase < -1e-9 * base))
    return {"seed": seed, "constraint_rel_error": constraint, "kkt_angle": kkt_angle, "violations": violations}


def _patch_instance(config, seed):
    W_out, sigma, rng = random_instance(seed, config.d_resid, config.d_mlp, config.max_condition)
    u_A = rng.standard_normal(config.d_mlp)
    u_B = rng.standard_normal(config.d_mlp)
    v = unit(rng.standard_normal(config.d_mlp))
    edit = patch_to_edit(u_A, u_B, v, W_out, sigma)
    via_edit = apply_rank1_edit(W_out, edit.a, edit.b) @ u_A
    via_patch = W_out @ patch_1d(u_A, u_B, v)
    return {"seed": seed, "rel_error": float(np.linalg.norm(via_edit - via_patch) / np.linalg.norm(via_patch))}


def _subspace_instance(config, seed):
    W_out, sigma, rng = random_instance(seed, config.d_resid, config.d_mlp, config.max_condition)
    v0 = unit(rng.standard_normal(config.d_mlp))
    approx = edit_to_subspace(W_out @ v0, -v0, W_out, sigma, config.alpha_sq_grid)
    return {"seed": seed, "abs_cos": abs(cosine(approx.v, v0)), "objective": approx.objective_value, "alpha": approx.alpha}


def _monte_carlo_rows(config, instance, seed):
    W_out, sigma, rng = random_instance(seed, config.d_resid, config.d_mlp, min(config.max_condition, 1e3))
    k = rng.standard_normal(config.d_mlp)
    edit = rome_edit(W_out, RomeRequest(k=k, v_target=rng.standard_normal(config.d_resid), sigma=sigma))
    approx = edit_to_subspace(edit.a, edit.b, W_out, sigma, config.alpha_sq_grid)
    rows = []
    for point in approx.curve:
        alpha = np.sqrt(point.alpha_sq)
        analytic = gap_variance(edit.a, edit.b, point.v, alpha, sigma)
        sampled = monte_carlo_gap_variance(edit.a, edit.b, point.v, W_out, sigma, config.monte_carlo_samples, seed + 1)
        rows.append({
            "instance": instance,
            "seed": seed,
            "alpha_sq": point.alpha_sq,
            "objective": point.objective_value,
            "analytic_gap_variance": analytic,
            "monte_carlo_gap_variance": sampled,
            "rel_error": abs(sampled - analytic) / analytic if analytic > 0 else abs(sampled),
            "cos_v_b": cosine(point.v, edit.b),
            "variance_ratio": variance_ratio(point.v, edit.a, edit.b, W_out, sigma),
            "constraint_violation": point.constraint_violation,
        })
    return rows


def run_rome_roundtrip(config, writer, plot=False):
    """
    Random-instance suites for the rank-1 edit closed form, the patch-to-edit map and its inverse,
    then the same bridges on the canonical synthetic model
    :return: ScenarioOutcome
    """
    outcome = ScenarioOutcome(scenario="rome-roundtrip")

    rome = [_guarded("rome_edit", s, lambda s=s: _rome_instance(config, s))
            for s in (_instance_seed(config.seed, 0, i) for i in range(config.rome_instances))]
    patch = [_guarded("patch_to_edit", s, lambda s=s: _patch_instance(config, s))
             for s in (_instance_seed(config.seed, 1, i) for i in range(config.patch_instances))]
    subspace = [_guarded("edit_to_subspace", s, lambda s=s: _subspace_instance(config, s))
                for s in (_instance_seed(config.seed, 2, i) for i in range(config.subspace_instances))]
    curve = []
    for i in range(config.monte_carlo_instances):
        s = _instance_seed(config.seed, 3, i)
        curve.extend(_guarded("monte_carlo", s, lambda s=s, i=i: _monte_carlo_rows(config, i, s)))
    curve = pd.DataFrame(curve)
    writer.csv("alpha_curve.csv", curve)

    max_constraint = max(r["constraint_rel_error"] for r in rome)
    max_angle = max(r["kkt_angle"] for r in rome)
    outcome.check("rome constraint holds", max_constraint <= 1e-8, max_rel_error=max_constraint)
    outcome.check("rome perturbations never lower the variance", sum(r["violations"] for r in rome) == 0,
                  violations=sum(r["violations"] for r in rome))
    outcome.check("sigma b is parallel to k", max_angle <= 1e-8, max_angle=max_angle)
    patch_passed = sum(r["rel_error"] <= 1e-9 for r in patch)
    outcome.check("patch_to_edit matches the patch", patch_passed == len(patch), passed=patch_passed, total=len(patch))
    median_cos = float(np.median([r["abs_cos"] for r in subspace]))
    max_objective = max(r["objective"] for r in subspace)
    outcome.check("exact construction recovered", median_cos >= 0.99, median_abs_cos=median_cos)
    outcome.check("exact construction objective vanishes", max_objective <= 1e-6, max_objective=max_objective)
    max_mc = float(curve["rel_error"].max())
    outcome.check("reduced objective matches Monte-Carlo", max_mc <= 0.02, max_rel_error=max_mc)

    model_results = _model_suite(config)
    outcome.check("model logits agree under patch and edit", model_results["max_logit_gap"] < 1e-9,
                  max_logit_gap=model_results["max_logit_gap"])
    outcome.check("round trip preserves the output direction", model_results["min_output_cos"] >= 1 - 1e-6,
                  min_output_cos=model_results["min_output_cos"])
    outcome.diagnostics["round_trip_median_abs_cos"] = model_results["median_round_trip_cos"]
    writer.csv("rewrite_scores.csv", model_results.pop("rewrite_scores"))

    writer.json("rome_roundtrip.json", {
        "seed": config.seed,
        "alpha_sq_grid": list(config.alpha_sq_grid),
        "rome_edit": rome,
        "patch_to_edit": patch,
        "edit_to_subspace": subspace,
        "model": model_results,
    })
    if plot:
        from Runner import plotting  # Only import if graphing is enabled

        fig = plotting.alpha_curve_figure(curve)
        writer.figure("alpha_curve.png", fig)
        plotting.close(fig)
    return outcome


def _model_suite(config):
    model = build_synthetic_model(replace(config.model, seed=config.seed))
    pair_seed, cov_seed = _seeds(config.seed, 2)
    pairs = make_patch_pairs(model, config.pair_count, pair_seed, opposite_only=True)
    sigma = model_covariance(model, config.covariance_samples, cov_seed)
    v, _, _ = illusory_direction(model)

    logit_gaps, round_trip_cos, output_cos, scores = [], [], [], []
    for pair in pairs:
        patched, edited = edit_vs_patch_model_comparison(model, pair, v, sigma)
        logit_gaps.append(_max_abs(patched, edited))
        v_prime, abs_cos, _ = round_trip(model, pair, v, sigma, config.alpha_sq_grid)
        round_trip_cos.append(abs_cos)
        output_cos.append(abs(cosine(model.mlp.W_out @ v_prime, model.mlp.W_out @ v)))
        comparison = rewrite_score_comparison(model, pair.base_input, sigma, alpha_sq_grid=config.alpha_sq_grid)
        scores.append({
            "target_class": comparison.target_class,
            "p_clean": comparison.p_clean,
            "rewrite_score_edit": comparison.rewrite_score_edit,
            "rewrite_score_subspace": comparison.rewrite_score_subspace,
            "rewrite_score_rowspace": comparison.rewrite_score_rowspace,
            "cos_v_b": comparison.cos_v_b,
            "variance_ratio": comparison.variance_ratio,
        })
    return {
        "max_logit_gap": max(logit_gaps),
        "round_trip_abs_cos": round_trip_cos,
        "median_round_trip_cos": float(np.median(round_trip_cos)),
        "min_output_cos": min(output_cos),
        "rewrite_scores": pd.DataFrame(scores),
    }


# separability


def run_separability(config, writer, plot=False):
    """
    Probe an injected direction through the MLP, regress the kernel geometry on the input geometry
    and check that separability survives scaled isometries
    :return: ScenarioOutcome
    """
    outcome = ScenarioOutcome(scenario="separability")
    probe_seed, distortion_seed, iso_seed, direction_seed, lemma_seed = _seeds(config.seed, 5)
    model = build_synthetic_model(replace(config.model, seed=config.seed))

    probes = injected_direction_experiment(model, config.z_values, config.n_per_z, probe_seed,
                                           lam=config.probe_lambda, steps=config.probe_steps, lr=config.probe_lr)
    probe_table = pd.DataFrame({
        "z": [p.z for p in probes],
        "accuracy": [p.accuracy for p in probes],
        "seed": [p.seed for p in probes],
        "reference_accuracy": [REFERENCE_PROBE_ACCURACY.get(p.z, np.nan) for p in probes],
    })
    writer.csv("probe_accuracy.csv", probe_table)
    ordered = probe_table.sort_values("z")["accuracy"].to_numpy()
    inversions = int(np.sum(np.diff(ordered) < 0))
    outcome.check("probe accuracy grows with z", inversions <= 1, inversions=inversions)
    outcome.check("probe training loss never increases",
                  all(np.all(np.diff(p.train_losses) <= 1e-12) for p in probes))

    fits = [("kernel_gelu", distortion_regression(model, config.n_examples, config.n_quadruples, distortion_seed))]
    isometry = distortion_regression(model, config.n_examples, config.n_quadruples, distortion_seed,
                                     feature_map=isometry_map(config.isometry_lambda, model.mlp.d_mlp, iso_seed))
    fits.append(("isometry", isometry))
    outcome.check("isometry slope recovered", abs(isometry.slope - config.isometry_lambda) <= 1e-8 * max(1.0, config.isometry_lambda),
                  slope=isometry.slope)
    outcome.check("isometry fit is exact", isometry.r_squared >= 1 - 1e-8, r_squared=isometry.r_squared)

    rng = np.random.default_rng(direction_seed)
    for j in range(config.regression_directions):
        direction = unit(rng.standard_normal(model.d_resid))
        fit = residual_projection_regression(model, direction, config.regression_n, config.ridge_lambda, seed=direction_seed + j)
        fits.append((f"residual_direction_{j}", fit))
    writer.csv("regression.csv", pd.DataFrame([
        {"tag": tag, "slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared, "n": fit.n}
        for tag, fit in fits
    ]))
    outcome.diagnostics["kernel_gelu_r_squared"] = fits[0][1].r_squared
    outcome.diagnostics["residual_r_squared"] = [fit.r_squared for tag, fit in fits if tag.startswith("residual")]
    outcome.diagnostics["reference_residual_r_squared"] = list(REFERENCE_RESIDUAL_R2)

    lemma_rows = []
    for j in range(config.lemma_datasets):
        seed = _instance_seed(lemma_seed, 0, j)
        points, labels = separable_clusters(config.lemma_points, config.lemma_dim, seed)
        check = lemma_separability_check(points, labels, config.lemma_lambda, seed + 1)
        lemma_rows.append({"dataset": j, "seed": seed, "n_points": check.n_points, "n_correct": check.n_correct,
                           "margin_gap": check.margin_gap, "required_gap": check.required_gap,
                           "support_size": check.support_size, "passed": check.passed})
    lemma = pd.DataFrame(lemma_rows, columns=["dataset", "seed", "n_points", "n_correct", "margin_gap",
                                              "required_gap", "support_size", "passed"])
    writer.csv("lemma.csv", lemma)
    outcome.check("separability carried through every isometry", bool(lemma["passed"].all()),
                  datasets=len(lemma), failed=int((~lemma["passed"].astype(bool)).sum()))

    if plot:
        from Runner import plotting  # Only import if graphing is enabled

        fig = plotting.probe_figure(probe_table)
        writer.figure("probe_accuracy.png", fig)
        plotting.close(fig)
    return outcome


SCENARIO_RUNNERS = {
    "toy": run_toy,
    "illusion-synth": run_illusion_synth,
    "rome-roundtrip": run_rome_roundtrip,
    "separability": run_separability,
}
