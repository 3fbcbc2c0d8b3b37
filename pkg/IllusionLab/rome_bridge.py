from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from IllusionLab.errors import DegenerateInputError, DimensionMismatchError, NotPositiveDefiniteError
from IllusionLab.illusion_analysis import cosine, rewrite_score, variance_ratio
from IllusionLab.lab_log import get_logger
from IllusionLab.model_zoo import forward_with_cache, run_model, sample_examples, sample_labels
from IllusionLab.numerics import (
    as_matrix,
    as_vector,
    decompose_against_kernel,
    nullspace_basis,
    pseudoinverse,
    require_unit,
    solve_spd,
    uncentered_covariance,
)
from IllusionLab.patching_engine import apply_rank1_edit, rank1_edit, subspace_patch, zero_subspace
from IllusionLab.tolerances import Sites

logger = get_logger("rome_bridge")

DEFAULT_ALPHA_SQ_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class Rank1Edit:
    a: np.ndarray
    b: np.ndarray

    def apply(self, W_out):
        return apply_rank1_edit(W_out, self.a, self.b)


@dataclass(frozen=True)
class RomeRequest:
    k: np.ndarray
    v_target: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class AlphaPoint:
    alpha_sq: float
    objective_value: float
    reduced_objective: float
    constraint_violation: float
    v: np.ndarray


@dataclass(frozen=True)
class SubspaceApproxResult:
    v: np.ndarray
    alpha: float
    objective_value: float
    constraint_violation: float
    curve: tuple = ()

    def to_dict(self):
        return {
            "v": self.v.tolist(),
            "alpha": self.alpha,
            "objective_value": self.objective_value,
            "constraint_violation": self.constraint_violation,
            "curve": [
                {
                    "alpha_sq": p.alpha_sq,
                    "objective_value": p.objective_value,
                    "reduced_objective": p.reduced_objective,
                    "constraint_violation": p.constraint_violation,
                }
                for p in self.curve
            ],
        }


def _sigma_solve(sigma, rhs):
    try:
        return solve_spd(sigma, rhs)
    except NotPositiveDefiniteError as e:
        raise NotPositiveDefiniteError(
            f"covariance is not positive definite ({e}); build it with uncentered_covariance and a positive ridge"
        ) from e


def _key_solution(sigma, key):
    # Σ⁻¹k / (kᵀΣ⁻¹k), the minimum-variance b with bᵀk = 1
    sigma_inv_key = _sigma_solve(sigma, key)
    scale = float(key @ sigma_inv_key)
    if scale <= 0.0:
        raise NotPositiveDefiniteError(f"kᵀΣ⁻¹k = {scale!r} is not positive")
    return sigma_inv_key / scale


def rome_edit(W_out, req):
    """
    Closed-form rank-1 update forcing W'k = v_target with the least contribution variance
    :param W_out: down-projection
    :param req: RomeRequest
    :return: Rank1Edit with a = v_target - W_out·k and b = Σ⁻¹k / (kᵀΣ⁻¹k)
    """
    W_out = as_matrix(W_out, "W_out")
    k = as_vector(req.k, "k")
    v_target = as_vector(req.v_target, "v_target")
    sigma = as_matrix(req.sigma, "sigma")
    if k.shape[0] != W_out.shape[1] or v_target.shape[0] != W_out.shape[0] or sigma.shape != (k.shape[0], k.shape[0]):
        raise DimensionMismatchError("key, value and covariance do not fit W_out")
    if not np.any(k):
        raise DegenerateInputError("the key must be non-zero")
    return Rank1Edit(a=v_target - W_out @ k, b=_key_solution(sigma, k))


def contribution_variance(edit, sigma):
    """Trace of the covariance of (bᵀx)·a for x with second moment Σ: ‖a‖²·bᵀΣb."""
    return float(edit.a @ edit.a) * float(edit.b @ sigma @ edit.b)


def patch_to_edit(u_A, u_B, v, W_out, sigma):
    """
    Rank-1 edit whose effect on activation u_A equals patching u_A along v with the value from u_B
    :param u_A: activation being patched
    :param u_B: activation supplying the value
    :param v: unit patch direction
    :param W_out: down-projection
    :param sigma: activation covariance
    :return: Rank1Edit
    """
    u_A, u_B, v = as_vector(u_A, "u_A"), as_vector(u_B, "u_B"), as_vector(v, "v")
    W_out = as_matrix(W_out, "W_out")
    require_unit(v)
    if not np.any(u_A):
        raise DegenerateInputError("u_A must be non-zero")
    a = float((u_B - u_A) @ v) * (W_out @ v)
    return Rank1Edit(a=a, b=_key_solution(as_matrix(sigma, "sigma"), u_A))


def edit_to_subspace(a, b, W_out, sigma, alpha_sq_grid=DEFAULT_ALPHA_SQ_GRID):
    """
    Zero-target subspace intervention v approximating the rank-1 edit (a, b) in distribution
    For each α² on the grid, v = α(W⁺a + w) with w ∈ ker W_out chosen to minimize the variance of
    the gap between the two interventions, ‖a‖²(b + αv)ᵀΣ(b + αv)
    :param a: edit output vector, non-zero
    :param b: edit key vector
    :param W_out: full-row-rank down-projection
    :param sigma: SPD activation covariance
    :param alpha_sq_grid: positive α² values, ties resolved toward the smaller one
    :return: SubspaceApproxResult with the whole per-α curve
    """
    a, b = as_vector(a, "a"), as_vector(b, "b")
    W_out, sigma = as_matrix(W_out, "W_out"), as_matrix(sigma, "sigma")
    if a.shape[0] != W_out.shape[0] or b.shape[0] != W_out.shape[1]:
        raise DimensionMismatchError(f"edit ({a.shape[0]}, {b.shape[0]}) does not fit W_out of shape {W_out.shape}")
    if not np.any(a):
        raise DegenerateInputError("a = 0 is a no-op edit with no subspace counterpart")
    grid = sorted(float(x) for x in alpha_sq_grid)
    if not grid or grid[0] <= 0:
        raise DegenerateInputError("alpha_sq_grid must be non-empty with positive values")

    W_pinv_a = pseudoinverse(W_out) @ a
    sigma_inv_Wt = _sigma_solve(sigma, W_out.T)
    gram = W_out @ sigma_inv_Wt
    gram = (gram + gram.T) / 2
    N = nullspace_basis(W_out)
    a_sq = float(a @ a)
    base_variance = float(b @ sigma @ b)

    curve = []
    for alpha_sq in grid:
        alpha = np.sqrt(alpha_sq)
        try:
            lam = solve_spd(gram, -2 * alpha_sq * (W_out @ b) - 2 * alpha_sq**2 * a)
        except NotPositiveDefiniteError as e:
            raise NotPositiveDefiniteError(f"W_out Σ⁻¹ W_outᵀ is not positive definite; W_out must have full row rank ({e})") from e
        w = -W_pinv_a - b / alpha_sq - sigma_inv_Wt @ lam / (2 * alpha_sq**2)
        violation = float(np.linalg.norm(W_out @ w))
        w = N @ (N.T @ w)
        z = W_pinv_a + w
        reduced = alpha_sq**2 * float(z @ sigma @ z) + 2 * alpha_sq * float(b @ sigma @ z)
        curve.append(
            AlphaPoint(
                alpha_sq=alpha_sq,
                objective_value=a_sq * (base_variance + reduced),
                reduced_objective=reduced,
                constraint_violation=violation,
                v=alpha * z,
            )
        )
        logger.debug(f"α² = {alpha_sq}: objective {a_sq * (base_variance + reduced):.6g}, violation {violation:.3e}")

    best = curve[0]
    for point in curve[1:]:
        if point.reduced_objective < best.reduced_objective:
            best = point
    return SubspaceApproxResult(
        v=best.v,
        alpha=float(np.sqrt(best.alpha_sq)),
        objective_value=best.objective_value,
        constraint_violation=best.constraint_violation,
        curve=tuple(curve),
    )


def gap_variance(a, b, v, alpha, sigma):
    """‖a‖²(b + αv)ᵀΣ(b + αv): trace variance of the rank-1 edit minus the subspace intervention."""
    gap = b + alpha * v
    return float(a @ a) * float(gap @ sigma @ gap)


def monte_carlo_gap_variance(a, b, v, W_out, sigma, n_samples, seed):
    """
    Sampled trace variance of (bᵀx)·a + (vᵀx)·W_out·v over x ~ N(0, Σ): the difference between the
    rank-1 edit's contribution and the zero-target intervention's contribution
    """
    rng = np.random.default_rng(seed)
    chol = scipy.linalg.cholesky(sigma, lower=True)
    x = rng.standard_normal((n_samples, sigma.shape[0])) @ chol.T
    contributions = np.outer(x @ b, a) + np.outer(x @ v, W_out @ v)
    return float(np.sum(np.var(contributions, axis=0)))


def monte_carlo_contribution_variance(a, b, sigma, n_samples, seed):
    rng = np.random.default_rng(seed)
    chol = scipy.linalg.cholesky(sigma, lower=True)
    x = rng.standard_normal((n_samples, sigma.shape[0])) @ chol.T
    return float(np.sum(np.var(np.outer(x @ b, a), axis=0)))


def model_covariance(model, n_samples, seed, ridge=None):
    """Uncentered covariance of mlp_post_act over examples of both classes."""
    resid = sample_examples(model, sample_labels(n_samples, seed), seed + 1)
    return uncentered_covariance(run_model(model, resid).mlp_post_act, ridge)


def edit_vs_patch_model_comparison(model, pair, v, sigma):
    """
    Logits of the base input under the activation patch along v and under the equivalent rank-1 edit
    :return: (logits_under_patch, logits_under_edit)
    """
    v = as_vector(v, "v")
    require_unit(v)
    u_A = run_model(model, pair.base_input).mlp_post_act
    u_B = run_model(model, pair.source_input).mlp_post_act
    patched = forward_with_cache(model, pair.base_input, subspace_patch(Sites.mlp_post_act, v, u_B))
    edit = patch_to_edit(u_A, u_B, v, model.mlp.W_out, sigma)
    edited = forward_with_cache(model, pair.base_input, rank1_edit(edit.a, edit.b))
    return patched.logits, edited.logits


def rowspace_intervention(x, v, W_out):
    """Zero-target intervention along the rowspace part of v only: x - (v_rowᵀx)·v_row."""
    _, v_row = decompose_against_kernel(v, W_out)
    x = as_vector(x, "x")
    return x - (v_row @ x) * v_row


@dataclass(frozen=True)
class RewriteComparison:
    target_class: int
    p_clean: float
    rewrite_score_edit: float
    rewrite_score_subspace: float
    rewrite_score_rowspace: float
    cos_v_b: float
    variance_ratio: float


def _class_probability(logits, target_class):
    return float(scipy.special.softmax(logits)[target_class])


def rewrite_score_comparison(model, base_input, sigma, target_scale=2.0, alpha_sq_grid=DEFAULT_ALPHA_SQ_GRID):
    """
    Push one example to the other class with a ROME edit keyed on its MLP activation, then score the
    edit, its subspace approximation and the rowspace-only part of that approximation
    :param base_input: resid_pre of the example to rewrite
    :param sigma: mlp_post_act covariance
    :param target_scale: how far past the clean logit difference the edited output aims, in units of it
    :return: RewriteComparison
    """
    clean = run_model(model, base_input)
    target_class = 1 - int(np.argmax(clean.logits))
    key = clean.mlp_post_act
    # move the MLP output along the read direction until the logit difference is reversed and scaled
    read = model.w_read / float(model.w_read @ model.w_read)
    v_target = clean.mlp_out - (1.0 + target_scale) * float(clean.logitdiff) * read
    edit = rome_edit(model.mlp.W_out, RomeRequest(k=key, v_target=v_target - model.mlp.b_out, sigma=sigma))
    approx = edit_to_subspace(edit.a, edit.b, model.mlp.W_out, sigma, alpha_sq_grid)

    p_clean = _class_probability(clean.logits, target_class)
    edited = forward_with_cache(model, base_input, rank1_edit(edit.a, edit.b))
    subspace = forward_with_cache(model, base_input, zero_subspace(Sites.mlp_post_act, approx.v))
    _, v_row = decompose_against_kernel(approx.v, model.mlp.W_out)
    rowspace = forward_with_cache(model, base_input, zero_subspace(Sites.mlp_post_act, v_row))
    return RewriteComparison(
        target_class=target_class,
        p_clean=p_clean,
        rewrite_score_edit=rewrite_score(p_clean, _class_probability(edited.logits, target_class)),
        rewrite_score_subspace=rewrite_score(p_clean, _class_probability(subspace.logits, target_class)),
        rewrite_score_rowspace=rewrite_score(p_clean, _class_probability(rowspace.logits, target_class)),
        cos_v_b=cosine(approx.v, edit.b),
        variance_ratio=variance_ratio(approx.v, edit.a, edit.b, model.mlp.W_out, sigma),
    )


def round_trip(model, pair, v, sigma, alpha_sq_grid=DEFAULT_ALPHA_SQ_GRID):
    """patch_to_edit followed by edit_to_subspace; returns (recovered v', |cos(v', v)|, SubspaceApproxResult)."""
    u_A = run_model(model, pair.base_input).mlp_post_act
    u_B = run_model(model, pair.source_input).mlp_post_act
    edit = patch_to_edit(u_A, u_B, v, model.mlp.W_out, sigma)
    approx = edit_to_subspace(edit.a, edit.b, model.mlp.W_out, sigma, alpha_sq_grid)
    return approx.v, abs(cosine(approx.v, v)), approx
