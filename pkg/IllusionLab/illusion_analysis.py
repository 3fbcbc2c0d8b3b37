from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
import scipy.linalg

from IllusionLab.errors import (
    DegenerateInputError,
    DimensionMismatchError,
    KernelCheckError,
    NearZeroLogitDiffError,
    NotPositiveDefiniteError,
)
from IllusionLab.lab_log import get_logger
from IllusionLab.model_zoo import run_model, site_dim
from IllusionLab.numerics import (
    as_matrix,
    as_vector,
    decompose_against_kernel,
    require_unit,
)
from IllusionLab.patching_engine import patch_rows
from IllusionLab.tolerances import Sites, Tolerances

logger = get_logger("illusion_analysis")


@dataclass(frozen=True)
class PatchOutcome:
    clean_logits: np.ndarray
    patched_logits: np.ndarray
    clean_logitdiff: float
    patched_logitdiff: float


@dataclass(frozen=True)
class FlddSummary:
    mean: float
    median: float
    n_used: int
    n_excluded: int


@dataclass(frozen=True)
class ClassProjection:
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class ProjectionSpread:
    classes: dict
    projections: np.ndarray
    labels: np.ndarray

    def separation(self):
        """|class mean gap| / pooled standard deviation for a two-class spread."""
        pos, neg = self.classes[1], self.classes[-1]
        pooled = np.sqrt(((pos.count - 1) * pos.std**2 + (neg.count - 1) * neg.std**2) / max(pos.count + neg.count - 2, 1))
        gap = abs(pos.mean - neg.mean)
        return float(gap / pooled) if pooled > 0 else (0.0 if gap == 0 else float("inf"))

    def to_dict(self):
        return {str(label): asdict(stats) for label, stats in sorted(self.classes.items())}


@dataclass(frozen=True)
class InterventionRow:
    fldd: FlddSummary
    interchange_accuracy: float


@dataclass(frozen=True)
class IllusionReport:
    site: str
    norm_null: float
    norm_row: float
    fldd_v: float
    fldd_row: float
    fldd_null: float
    fldd_full_component: float
    interchange_acc_v: float
    interchange_acc_row: float
    interchange_acc_null: float
    interchange_acc_full: float
    spread_null: ProjectionSpread
    spread_row: ProjectionSpread
    rows: dict
    readout_shift: dict = None

    def table(self):
        records = []
        for name, row in self.rows.items():
            if row is None:
                records.append({"site": self.site, "intervention": name, "fldd_mean": np.nan, "fldd_median": np.nan,
                                "interchange_accuracy": np.nan, "n_used": 0, "n_excluded": 0})
                continue
            records.append({"site": self.site, "intervention": name, "fldd_mean": row.fldd.mean,
                            "fldd_median": row.fldd.median, "interchange_accuracy": row.interchange_accuracy,
                            "n_used": row.fldd.n_used, "n_excluded": row.fldd.n_excluded})
        return pd.DataFrame(records)

    def to_dict(self):
        data = {
            "site": self.site,
            "norm_null": self.norm_null,
            "norm_row": self.norm_row,
            "fldd_v": self.fldd_v,
            "fldd_row": self.fldd_row,
            "fldd_null": self.fldd_null,
            "fldd_full_component": self.fldd_full_component,
            "interchange_acc_v": self.interchange_acc_v,
            "interchange_acc_row": self.interchange_acc_row,
            "interchange_acc_null": self.interchange_acc_null,
            "interchange_acc_full": self.interchange_acc_full,
            "spread_null": None if self.spread_null is None else self.spread_null.to_dict(),
            "spread_row": None if self.spread_row is None else self.spread_row.to_dict(),
            "readout_shift": self.readout_shift,
        }
        return _json_ready(data)


def _json_ready(value):
    # NaN marks an absent row and is written as null
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, float) and np.isnan(value):
        return None
    return value


def fldd(clean_logitdiff, patched_logitdiff, epsilon_ld=Tolerances.epsilon_ld):
    """
    Fractional logit difference decrease 1 - patched / clean
    :param epsilon_ld: |clean_logitdiff| must exceed this
    """
    if abs(clean_logitdiff) <= epsilon_ld:
        raise NearZeroLogitDiffError(f"clean logit difference {clean_logitdiff!r} is within {epsilon_ld} of zero")
    return 1.0 - patched_logitdiff / clean_logitdiff


def summarize_fldd(outcomes, epsilon_ld=Tolerances.epsilon_ld):
    """Mean and median of per-example FLDD, counting the examples excluded for a near-zero clean logit difference."""
    values = []
    excluded = 0
    for outcome in outcomes:
        try:
            values.append(fldd(outcome.clean_logitdiff, outcome.patched_logitdiff, epsilon_ld))
        except NearZeroLogitDiffError:
            excluded += 1
    if excluded:
        logger.warning(f"{excluded} of {len(outcomes)} examples excluded from FLDD (near-zero clean logit difference)")
    if not values:
        return FlddSummary(mean=float("nan"), median=float("nan"), n_used=0, n_excluded=excluded)
    return FlddSummary(mean=float(np.mean(values)), median=float(np.median(values)), n_used=len(values), n_excluded=excluded)


def flipped_class(outcome):
    """Interchange target for two classes: the class the clean run did not pick."""
    return 1 - int(np.argmax(outcome.clean_logits))


def interchange_accuracy(outcomes, flip_rule=flipped_class):
    """
    Fraction of patched runs whose argmax equals the interchange target
    :param outcomes: non-empty list of PatchOutcome
    :param flip_rule: PatchOutcome -> target class index
    """
    if not outcomes:
        raise DegenerateInputError("interchange accuracy needs at least one outcome")
    hits = sum(int(np.argmax(o.patched_logits)) == flip_rule(o) for o in outcomes)
    return hits / len(outcomes)


def rewrite_score(p_clean_target, p_intervened_target):
    if not 0.0 <= p_clean_target < 1.0:
        raise DegenerateInputError(f"rewrite score undefined for clean target probability {p_clean_target!r}")
    return (p_intervened_target - p_clean_target) / (1.0 - p_clean_target)


def cosine(u, v):
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def variance_ratio(v, a, b, W_out, sigma):
    """
    Trace variance of the zero-target intervention along v relative to the rank-1 edit (a, b)
    :return: (‖W_out v‖²·vᵀΣv) / (‖a‖²·bᵀΣb)
    """
    v, a, b = as_vector(v, "v"), as_vector(a, "a"), as_vector(b, "b")
    W_out, sigma = as_matrix(W_out, "W_out"), as_matrix(sigma, "sigma")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError("covariance must be positive definite") from e
    denominator = float(a @ a) * float(b @ sigma @ b)
    if denominator <= 0.0:
        raise DegenerateInputError("rank-1 edit introduces no variance")
    Wv = W_out @ v
    return float(Wv @ Wv) * float(v @ sigma @ v) / denominator


def reader_matrix(model, site):
    """Matrix that reads the site downstream: W_out for the MLP hidden layer, the unembedding elsewhere."""
    if site == Sites.mlp_post_act:
        return model.mlp.W_out
    site_dim(model, site)
    return model.unembed


def _stack_pairs(pairs):
    base_X = np.stack([p.base_input for p in pairs])
    source_X = np.stack([p.source_input for p in pairs])
    return base_X, source_X


def patch_outcomes(model, pairs, V, site, full_component=False):
    """
    Patch every pair along span(V) (or the whole site when full_component) and collect outcomes
    :return: list of PatchOutcome
    """
    if not pairs:
        raise DegenerateInputError("at least one evaluation pair is required")
    base_X, source_X = _stack_pairs(pairs)
    clean = run_model(model, base_X)
    source_act = run_model(model, source_X).site(site)
    if full_component:
        patched = run_model(model, base_X, site=site, transform=lambda act: source_act)
    else:
        patched = run_model(model, base_X, site=site, transform=lambda act: patch_rows(act, source_act, V))
    outcomes = []
    for i in range(len(pairs)):
        outcomes.append(
            PatchOutcome(
                clean_logits=clean.logits[i],
                patched_logits=patched.logits[i],
                clean_logitdiff=float(clean.logitdiff[i]),
                patched_logitdiff=float(patched.logitdiff[i]),
            )
        )
    return outcomes


def _intervention_row(model, pairs, V, site, full_component=False):
    outcomes = patch_outcomes(model, pairs, V, site, full_component)
    return InterventionRow(fldd=summarize_fldd(outcomes), interchange_accuracy=interchange_accuracy(outcomes))


def projection_spread(direction, activations, labels):
    """
    Class-conditional statistics of directionᵀ·activation
    :param direction: unit vector
    :param activations: one activation per row
    :param labels: ±1 label per row
    :return: ProjectionSpread
    """
    direction = as_vector(direction, "direction")
    activations = as_matrix(activations, "activations")
    labels = np.asarray(labels)
    if activations.shape[0] != len(labels):
        raise DimensionMismatchError(f"{activations.shape[0]} activations but {len(labels)} labels")
    if activations.shape[1] != direction.shape[0]:
        raise DimensionMismatchError(f"activations have dimension {activations.shape[1]} but direction has {direction.shape[0]}")
    require_unit(direction, "direction")
    projections = activations @ direction
    classes = {}
    for label in (-1, 1):
        mask = labels == label
        if not np.any(mask):
            raise DegenerateInputError(f"no activations with label {label}")
        values = projections[mask]
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        classes[label] = ClassProjection(mean=float(np.mean(values)), std=std, count=int(values.size))
    return ProjectionSpread(classes=classes, projections=projections, labels=labels.astype(int))


def spread_to_frame(spread):
    return pd.DataFrame({"label": spread.labels, "projection": spread.projections})


def labelled_site_activations(model, pairs, site):
    """Site activations of both sides of every pair, with their class labels."""
    base_X, source_X = _stack_pairs(pairs)
    labels = np.array([p.base_label for p in pairs] + [p.source_label for p in pairs])
    acts = run_model(model, np.vstack([base_X, source_X])).site(site)
    return acts, labels


def _readout_shift(model, pairs, v, site):
    # mean projection of the MLP output on the read direction, before and after the patch
    if site != Sites.mlp_post_act:
        return None
    base_X, source_X = _stack_pairs(pairs)
    clean = run_model(model, base_X)
    source_act = run_model(model, source_X).site(site)
    patched = run_model(model, base_X, site=site, transform=lambda act: patch_rows(act, source_act, v[:, None]))
    read = model.w_read / np.linalg.norm(model.w_read)
    return {"clean": float(np.mean(clean.mlp_out @ read)), "patched": float(np.mean(patched.mlp_out @ read))}


def analyze_direction(model, v, site, eval_pairs):
    """
    Decompose v against the reader's kernel and compare patch strength along v, its rowspace part,
    its kernel part and the whole component
    :param model: SyntheticPathwayModel
    :param v: unit direction at the site
    :param site: site name
    :param eval_pairs: held-out PatchPairs
    :return: IllusionReport
    """
    v = as_vector(v, "v")
    require_unit(v)
    if v.shape[0] != site_dim(model, site):
        raise DimensionMismatchError(f"v has dimension {v.shape[0]} but site {site} has {site_dim(model, site)}")
    v_null, v_row = decompose_against_kernel(v, reader_matrix(model, site))
    norm_null, norm_row = float(np.linalg.norm(v_null)), float(np.linalg.norm(v_row))

    rows = {"v": _intervention_row(model, eval_pairs, v[:, None], site)}
    rows["row"] = _intervention_row(model, eval_pairs, (v_row / norm_row)[:, None], site) if norm_row > Tolerances.zero_component else None
    rows["null"] = _intervention_row(model, eval_pairs, (v_null / norm_null)[:, None], site) if norm_null > Tolerances.zero_component else None
    rows["full_component"] = _intervention_row(model, eval_pairs, None, site, full_component=True)

    spread_null = spread_row = None
    if all(p.base_label is not None and p.source_label is not None for p in eval_pairs):
        acts, labels = labelled_site_activations(model, eval_pairs, site)
        if rows["null"] is not None:
            spread_null = projection_spread(v_null / norm_null, acts, labels)
        if rows["row"] is not None:
            spread_row = projection_spread(v_row / norm_row, acts, labels)

    def metric(name, attr):
        row = rows[name]
        if row is None:
            return float("nan")
        return row.fldd.mean if attr == "fldd" else row.interchange_accuracy

    report = IllusionReport(
        site=site,
        norm_null=norm_null,
        norm_row=norm_row,
        fldd_v=metric("v", "fldd"),
        fldd_row=metric("row", "fldd"),
        fldd_null=metric("null", "fldd"),
        fldd_full_component=metric("full_component", "fldd"),
        interchange_acc_v=metric("v", "acc"),
        interchange_acc_row=metric("row", "acc"),
        interchange_acc_null=metric("null", "acc"),
        interchange_acc_full=metric("full_component", "acc"),
        spread_null=spread_null,
        spread_row=spread_row,
        rows=rows,
        readout_shift=_readout_shift(model, eval_pairs, v, site),
    )
    logger.info(
        f"{site}: FLDD v={report.fldd_v:.3f} row={report.fldd_row:.3f} null={report.fldd_null:.3g} "
        f"full={report.fldd_full_component:.3f} (‖v_null‖={norm_null:.3f})"
    )
    return report


@dataclass(frozen=True)
class SubspaceReport:
    site: str
    null_norms: np.ndarray
    rows: dict

    def table(self):
        records = []
        for name, row in self.rows.items():
            records.append({"site": self.site, "intervention": name,
                            "fldd_mean": np.nan if row is None else row.fldd.mean,
                            "fldd_median": np.nan if row is None else row.fldd.median,
                            "interchange_accuracy": np.nan if row is None else row.interchange_accuracy})
        return pd.DataFrame(records)


def _span_basis(M):
    # orthonormal basis for the numerically nonzero part of span(M)
    keep = np.linalg.norm(M, axis=0) > Tolerances.zero_component
    if not np.any(keep):
        return None
    return scipy.linalg.orth(M[:, keep])


def analyze_subspace(model, V, site, eval_pairs):
    """
    k-dimensional counterpart of analyze_direction: every basis vector is split against the reader's
    kernel and the kernel parts and rowspace parts are patched as subspaces of their own
    :return: SubspaceReport
    """
    V = as_matrix(V, "V")
    reader = reader_matrix(model, site)
    nulls, row_parts = [], []
    for column in V.T:
        v_null, v_row = decompose_against_kernel(column, reader)
        nulls.append(v_null)
        row_parts.append(v_row)
    null_basis = _span_basis(np.column_stack(nulls))
    row_basis = _span_basis(np.column_stack(row_parts))
    rows = {
        "subspace": _intervention_row(model, eval_pairs, V, site),
        "row": None if row_basis is None else _intervention_row(model, eval_pairs, row_basis, site),
        "null": None if null_basis is None else _intervention_row(model, eval_pairs, null_basis, site),
        "full_component": _intervention_row(model, eval_pairs, None, site, full_component=True),
    }
    return SubspaceReport(site=site, null_norms=np.linalg.norm(np.column_stack(nulls), axis=0), rows=rows)


@dataclass(frozen=True)
class AngleScan:
    best_angle: float
    angles: np.ndarray
    effects: np.ndarray
    dormancy_violated: bool


def optimal_angle_scan(model, v_disc, v_dorm, site, eval_pairs, angle_grid, strict=True):
    """
    Patch along cos(α)·v_disc + sin(α)·v_dorm for every α and measure how far the dormant
    projection moves
    :param v_disc: unit direction in the reader's kernel
    :param v_dorm: unit direction orthogonal to v_disc
    :param angle_grid: angles in [0, π/2]
    :param strict: flag the scan when v_dorm projections are not constant over the pairs
    :return: AngleScan with the effect curve and its argmax
    """
    v_disc, v_dorm = as_vector(v_disc, "v_disc"), as_vector(v_dorm, "v_dorm")
    require_unit(v_disc, "v_disc")
    require_unit(v_dorm, "v_dorm")
    reader = reader_matrix(model, site)
    leak = float(np.linalg.norm(reader @ v_disc)) / max(float(np.linalg.norm(reader)), 1.0)
    if leak > Tolerances.kernel_check:
        raise KernelCheckError(f"v_disc is not in the reader's kernel (relative leak {leak:.3e})")
    if abs(float(v_disc @ v_dorm)) > 1e-8:
        raise KernelCheckError("v_dorm is not orthogonal to v_disc")
    angles = np.asarray(angle_grid, dtype=np.float64)
    if angles.size == 0 or np.any(angles < 0) or np.any(angles > np.pi / 2 + 1e-12):
        raise DegenerateInputError("angle grid must be a non-empty subset of [0, π/2]")

    base_X, source_X = _stack_pairs(eval_pairs)
    base_act = run_model(model, base_X).site(site)
    source_act = run_model(model, source_X).site(site)
    # pairs patched in opposite directions are aligned by their target sign
    orientation = np.array([p.target_logitdiff_sign for p in eval_pairs], dtype=np.float64)

    dormant_values = np.concatenate([base_act @ v_dorm, source_act @ v_dorm])
    violated = bool(np.ptp(dormant_values) > Tolerances.dormant_spread * max(1.0, float(np.max(np.abs(dormant_values)))))
    if strict and violated:
        logger.warning(f"v_dorm projections vary by {np.ptp(dormant_values):.3e}; dormancy assumption does not hold")

    effects = np.empty(angles.size)
    for i, alpha in enumerate(angles):
        v = np.cos(alpha) * v_disc + np.sin(alpha) * v_dorm
        patched = patch_rows(base_act, source_act, v[:, None])
        effects[i] = abs(float(np.mean(orientation * ((patched - base_act) @ v_dorm))))
    best = float(angles[int(np.argmax(effects))])
    logger.info(f"optimal angle scan at {site}: best α = {best:.4f}")
    return AngleScan(best_angle=best, angles=angles, effects=effects, dormancy_violated=strict and violated)
