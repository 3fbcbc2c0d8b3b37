from dataclasses import dataclass

import numpy as np
import scipy.special
import scipy.stats

from IllusionLab.errors import DegenerateInputError, DimensionMismatchError, NotSeparableError
from IllusionLab.lab_log import get_logger
from IllusionLab.model_zoo import gelu, run_model, sample_examples, sample_labels
from IllusionLab.numerics import as_matrix, as_vector, nullspace_basis, solve_spd, unit

logger = get_logger("separability_lab")

# probe accuracies and residual r² measured on a pretrained transformer, reported next to the synthetic ones
REFERENCE_PROBE_ACCURACY = {1e-4: 0.69, 1e-3: 0.83, 1e-2: 0.87, 1e-1: 0.996}
REFERENCE_RESIDUAL_R2 = (0.71, 0.17)


@dataclass(frozen=True)
class QuadrupleSample:
    a_val: float
    b_val: float
    indices: tuple = ()


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    r_squared: float
    n: int
    coefficients: np.ndarray = None


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    z: float
    seed: int
    train_losses: tuple = ()


@dataclass(frozen=True)
class LemmaCheck:
    n_points: int
    n_correct: int
    margin_gap: float
    required_gap: float
    alpha_sum: float
    support_size: int
    separator: np.ndarray = None
    transferred: np.ndarray = None

    @property
    def passed(self):
        return self.n_correct == self.n_points and self.margin_gap >= self.required_gap * (1 - 1e-9)


def sample_quadruple_products(X, Z, count, seed):
    """
    Inner products of difference vectors over random quadruples of distinct examples, in two spaces
    :param X: n x d matrix
    :param Z: n x d' matrix, rows aligned with X
    :param count: number of quadruples
    :param seed: integer seed
    :return: list of QuadrupleSample with a = (x_i - x_j)ᵀ(x_k - x_l) and b the same over Z
    """
    X, Z = as_matrix(X, "X"), as_matrix(Z, "Z")
    if X.shape[0] != Z.shape[0]:
        raise DimensionMismatchError(f"X has {X.shape[0]} rows but Z has {Z.shape[0]}")
    if X.shape[0] < 4:
        raise DegenerateInputError(f"need at least 4 examples, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        i, j, k, l = (int(x) for x in rng.choice(X.shape[0], size=4, replace=False))
        a_val = float((X[i] - X[j]) @ (X[k] - X[l]))
        b_val = float((Z[i] - Z[j]) @ (Z[k] - Z[l]))
        samples.append(QuadrupleSample(a_val=a_val, b_val=b_val, indices=(i, j, k, l)))
    return samples


def ridge_regression(x, y, lam=0.0):
    """
    One-predictor ridge fit y ≈ slope·x + intercept, the intercept left unpenalized
    :param lam: ridge penalty, 0 for ordinary least squares
    :return: RegressionFit with r² on the fitted data
    """
    x, y = as_vector(x, "x"), as_vector(y, "y")
    if x.shape != y.shape:
        raise DimensionMismatchError(f"x has {x.shape[0]} values but y has {y.shape[0]}")
    if x.shape[0] < 3:
        raise DegenerateInputError(f"need at least 3 points, got {x.shape[0]}")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    xc, yc = x - x.mean(), y - y.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise DegenerateInputError("predictor has zero variance")
    slope = float(xc @ yc) / (sxx + lam)
    intercept = float(y.mean() - slope * x.mean())
    ss_res = float(np.sum((y - slope * x - intercept) ** 2))
    ss_tot = float(yc @ yc)
    r_squared = 1.0 if ss_tot == 0.0 else float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))
    return RegressionFit(slope=slope, intercept=intercept, r_squared=r_squared, n=int(x.shape[0]))


def kernel_feature_map(model):
    """x' ↦ projection of gelu(x') onto ker W_out, the map whose geometry distortion_regression measures."""
    N = nullspace_basis(model.mlp.W_out)
    if N.shape[1] == 0:
        raise DegenerateInputError("W_out has a trivial kernel")

    def feature_map(pre_acts):
        return gelu(pre_acts) @ N

    return feature_map


def distortion_regression(model, n_examples, n_quadruples, seed, feature_map=None):
    """
    Regress kernel-space inner products of post-gelu differences on those of pre-gelu differences
    :param model: SyntheticPathwayModel
    :param n_examples: examples sampled from both classes
    :param n_quadruples: quadruples drawn for the regression
    :param seed: integer seed
    :param feature_map: replacement for the gelu-then-kernel map (self-tests)
    :return: RegressionFit of b on a
    """
    feature_map = kernel_feature_map(model) if feature_map is None else feature_map
    resid = sample_examples(model, sample_labels(n_examples, seed), seed + 1)
    X = run_model(model, resid).mlp_pre_act
    samples = sample_quadruple_products(X, feature_map(X), n_quadruples, seed + 2)
    fit = ridge_regression([s.a_val for s in samples], [s.b_val for s in samples], 0.0)
    logger.info(f"distortion regression: slope {fit.slope:.4f}, intercept {fit.intercept:.4f}, r² {fit.r_squared:.4f}")
    return fit


def isometry_map(scale, dim, seed):
    """f(x) = √scale·Q·x + t with a random orthogonal Q and shift t."""
    rng = np.random.default_rng(seed)
    Q = scipy.stats.ortho_group.rvs(dim, random_state=rng)
    t = rng.standard_normal(dim)

    def feature_map(X):
        return np.sqrt(scale) * X @ Q.T + t

    return feature_map


def _split(n, seed, train_fraction=0.8):
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return order[:cut], order[cut:]


def logistic_probe(features, labels, lam=1e-3, steps=2000, lr=0.1, seed=0):
    """
    L2-regularized logistic regression trained by batch gradient descent on a deterministic 80/20 split
    :param features: one example per row
    :param labels: ±1 per row
    :param lam: L2 penalty on the weights
    :param steps: gradient steps
    :param lr: step size, capped at 1/L for the standardized features so the loss never increases
    :param seed: split seed
    :return: ProbeResult with held-out accuracy and the training loss trace
    """
    features = as_matrix(features, "features")
    labels = np.asarray(labels, dtype=np.float64)
    if features.shape[0] != labels.shape[0]:
        raise DimensionMismatchError(f"{features.shape[0]} examples but {labels.shape[0]} labels")
    for label in (-1.0, 1.0):
        if np.sum(labels == label) < 2:
            raise DegenerateInputError(f"need at least 2 examples of class {int(label)}")

    train, test = _split(features.shape[0], seed)
    mean = features[train].mean(axis=0)
    std = features[train].std(axis=0)
    std[std == 0] = 1.0
    X = np.hstack([(features - mean) / std, np.ones((features.shape[0], 1))])
    X_train, y_train = X[train], labels[train]

    smoothness = float(np.linalg.norm(X_train, 2)) ** 2 / (4 * len(train)) + lam
    step = min(lr, 1.0 / smoothness)
    penalty = np.ones(X.shape[1])
    penalty[-1] = 0.0

    w = np.zeros(X.shape[1])
    losses = []
    for _ in range(steps):
        margins = y_train * (X_train @ w)
        losses.append(float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * lam * float(w[:-1] @ w[:-1])))
        grad = -(X_train.T @ (y_train * scipy.special.expit(-margins))) / len(train) + lam * penalty * w
        w -= step * grad

    predictions = np.where(X[test] @ w >= 0, 1.0, -1.0)
    accuracy = float(np.mean(predictions == labels[test])) if len(test) else float("nan")
    return ProbeResult(accuracy=accuracy, z=float("nan"), seed=seed, train_losses=tuple(losses))


def injected_direction_experiment(model, z_values, n_per_z, seed, lam=1e-3, steps=2000, lr=0.1):
    """
    Inject u' = u + y·z·‖u‖·v along a random unit v and probe the post-gelu features for y
    :param z_values: injection scales
    :param n_per_z: examples per scale
    :return: list of ProbeResult, one per z in the given order
    """
    results = []
    for index, z in enumerate(z_values):
        if z < 0:
            raise ValueError(f"injection scale must be non-negative, got {z}")
        z_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        rng = np.random.default_rng(z_seed)
        u = sample_examples(model, sample_labels(n_per_z, z_seed), z_seed + 1)
        v = unit(rng.standard_normal(model.d_resid))
        y = np.where(rng.random(n_per_z) < 0.5, -1.0, 1.0)
        u_injected = u + (y * z * np.linalg.norm(u, axis=1))[:, None] * v
        features = run_model(model, u_injected).mlp_post_act
        probe = logistic_probe(features, y, lam=lam, steps=steps, lr=lr, seed=z_seed)
        results.append(ProbeResult(accuracy=probe.accuracy, z=float(z), seed=z_seed, train_losses=probe.train_losses))
        logger.info(f"injected direction z={z:g}: probe accuracy {probe.accuracy:.3f}")
    return results


def _pair_margins(w, X_pos, X_neg):
    return (X_pos @ w)[:, None] - (X_neg @ w)[None, :]


def find_difference_separator(points, labels, max_iter=10000, margin_steps=2000, step=0.05):
    """
    Separator w = Σα_i x_i with Σα_i = 0, found by a perceptron over (positive, negative) pairs and
    then widened by projected subgradient steps on the smallest pair margin
    :return: coefficient vector α over the points, scaled so that every pair margin is at least 2
    """
    labels = np.asarray(labels)
    pos_idx, neg_idx = np.flatnonzero(labels == 1), np.flatnonzero(labels == -1)
    if pos_idx.size == 0 or neg_idx.size == 0:
        raise DegenerateInputError("both classes are required")
    X_pos, X_neg = points[pos_idx], points[neg_idx]

    alpha = np.zeros(points.shape[0])
    for _ in range(max_iter):
        margins = _pair_margins(points.T @ alpha, X_pos, X_neg)
        i, j = np.unravel_index(np.argmin(margins), margins.shape)
        if margins[i, j] > 0:
            break
        alpha[pos_idx[i]] += 1.0
        alpha[neg_idx[j]] -= 1.0
    else:
        raise NotSeparableError(f"perceptron found no separator in {max_iter} updates")

    alpha /= np.linalg.norm(points.T @ alpha)
    best_alpha, best_margin = alpha.copy(), float(np.min(_pair_margins(points.T @ alpha, X_pos, X_neg)))
    for _ in range(margin_steps):
        margins = _pair_margins(points.T @ alpha, X_pos, X_neg)
        i, j = np.unravel_index(np.argmin(margins), margins.shape)
        alpha[pos_idx[i]] += step
        alpha[neg_idx[j]] -= step
        norm = float(np.linalg.norm(points.T @ alpha))
        if norm > 1.0:
            alpha /= norm
        margin = float(np.min(_pair_margins(points.T @ alpha, X_pos, X_neg)))
        if margin > best_margin:
            best_alpha, best_margin = alpha.copy(), margin
    return best_alpha * (2.0 / best_margin)


def lemma_separability_check(points, labels, lambda_iso, seed, rotate=True, shift=True):
    """
    Carry a separator of the points over to their image under f(x) = √λ·Q·x + t by writing it as a
    cyclic sum of differences and mapping each difference through f
    :param points: n x d separable points
    :param labels: ±1 per point
    :param lambda_iso: λ > 0
    :param seed: integer seed for Q and t
    :param rotate: draw a random Q (identity otherwise)
    :param shift: draw a random t (zero otherwise)
    :return: LemmaCheck
    """
    points = as_matrix(points, "points")
    labels = np.asarray(labels)
    if lambda_iso <= 0:
        raise ValueError(f"lambda_iso must be positive, got {lambda_iso}")
    alpha = find_difference_separator(points, labels)
    alpha_sum = float(np.sum(alpha))
    if abs(alpha_sum) > 1e-9 * float(np.sum(np.abs(alpha))):
        raise NotSeparableError(f"separator coefficients do not sum to zero (Σα = {alpha_sum!r})")

    support = np.flatnonzero(alpha)
    beta = np.cumsum(alpha[support])
    successor = np.roll(support, -1)

    rng = np.random.default_rng(seed)
    d = points.shape[1]
    Q = scipy.stats.ortho_group.rvs(d, random_state=rng) if rotate else np.eye(d)
    t = rng.standard_normal(d) if shift else np.zeros(d)
    images = np.sqrt(lambda_iso) * points @ Q.T + t

    w_hat = beta @ (images[support] - images[successor])
    scores = images @ w_hat
    high = float(np.min(scores[labels == 1]))
    low = float(np.max(scores[labels == -1]))
    bias = -(high + low) / 2
    predictions = np.where(scores + bias > 0, 1, -1)
    check = LemmaCheck(
        n_points=int(points.shape[0]),
        n_correct=int(np.sum(predictions == labels)),
        margin_gap=high - low,
        required_gap=2.0 * lambda_iso,
        alpha_sum=alpha_sum,
        support_size=int(support.size),
        separator=points.T @ alpha,
        transferred=w_hat,
    )
    logger.debug(f"separability lemma: {check.n_correct}/{check.n_points} correct, gap {check.margin_gap:.4f} ≥ {check.required_gap:.4f}")
    return check


def separable_clusters(n, d, seed, gap=4.0):
    """Two Gaussian clusters pushed apart along a random direction and trimmed to be separable."""
    rng = np.random.default_rng(seed)
    direction = unit(rng.standard_normal(d))
    labels = np.where(np.arange(n) % 2 == 0, 1, -1)
    points = rng.standard_normal((n, d)) * 0.5 + np.outer(labels * gap / 2, direction)
    # clip the along-direction coordinate so the classes never overlap
    along = points @ direction
    along = np.where(labels == 1, np.maximum(along, 0.5), np.minimum(along, -0.5))
    points = points + np.outer(along - points @ direction, direction)
    return points, labels


def residual_projection_regression(model, direction, n, lam=1e-3, seed=0):
    """
    Ridge regression of directionᵀ·resid_pre on post-gelu MLP features, scored on a held-out 20%
    :return: RegressionFit whose slope is that of the held-out calibration line (truth on prediction)
        and whose r² is the held-out coefficient of determination, clipped at 0
    """
    direction = as_vector(direction, "direction")
    if n < 50:
        raise DegenerateInputError(f"need at least 50 examples, got {n}")
    resid = sample_examples(model, sample_labels(n, seed), seed + 1)
    features = run_model(model, resid).mlp_post_act
    response = resid @ direction
    if float(np.var(response)) == 0.0:
        raise DegenerateInputError("response has zero variance along this direction")

    train, test = _split(n, seed + 2)
    x_mean, y_mean = features[train].mean(axis=0), float(response[train].mean())
    Xc = features[train] - x_mean
    coef = solve_spd(Xc.T @ Xc + lam * np.eye(features.shape[1]), Xc.T @ (response[train] - y_mean))
    intercept = y_mean - float(x_mean @ coef)
    predicted = features[test] @ coef + intercept
    truth = response[test]
    ss_res = float(np.sum((truth - predicted) ** 2))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    r_squared = 0.0 if ss_tot == 0.0 else float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))
    calibration = ridge_regression(predicted, truth, 0.0) if float(np.var(predicted)) > 0 else None
    return RegressionFit(
        slope=calibration.slope if calibration else 0.0,
        intercept=intercept,
        r_squared=r_squared,
        n=int(len(test)),
        coefficients=coef,
    )
