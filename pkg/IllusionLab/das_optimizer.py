from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from IllusionLab.errors import ConfigError, DimensionMismatchError, DivergenceError
from IllusionLab.lab_log import get_logger
from IllusionLab.model_zoo import gelu_prime, run_model, sample_examples, site_dim
from IllusionLab.numerics import as_matrix, orthonormalize, require_orthonormal
from IllusionLab.tolerances import Sites

logger = get_logger("das_optimizer")

MAXIMIZE = "maximize"
MINIMIZE = "minimize"
SAME_LABEL = "same_label"
OPPOSITE_LABEL = "opposite_label"


def default_sign_rule():
    return {SAME_LABEL: MAXIMIZE, OPPOSITE_LABEL: MINIMIZE}


@dataclass(frozen=True)
class DasConfig:
    subspace_dim: int = 1
    learning_rate: float = 0.05
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    site: str = Sites.mlp_post_act
    objective_sign_rule: dict = field(default_factory=default_sign_rule)

    def __post_init__(self):
        if self.subspace_dim < 1:
            raise ConfigError(f"subspace_dim must be at least 1, got {self.subspace_dim}")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        # zero freezes the initialization; the experiment configs demand a positive rate
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.site not in Sites.all:
            raise ConfigError(f"unknown site {self.site!r}, expected one of {Sites.all}")
        for pair_type, goal in self.objective_sign_rule.items():
            if pair_type not in (SAME_LABEL, OPPOSITE_LABEL) or goal not in (MAXIMIZE, MINIMIZE):
                raise ConfigError(f"bad objective_sign_rule entry {pair_type!r}: {goal!r}")


@dataclass(frozen=True)
class PatchPair:
    base_input: np.ndarray
    source_input: np.ndarray
    target_logitdiff_sign: int
    base_label: int = None
    source_label: int = None

    def __post_init__(self):
        if self.base_input.shape != self.source_input.shape:
            raise DimensionMismatchError(f"pair inputs differ in shape: {self.base_input.shape} vs {self.source_input.shape}")
        if self.target_logitdiff_sign not in (-1, 1):
            raise ValueError(f"target_logitdiff_sign must be ±1, got {self.target_logitdiff_sign}")


@dataclass(frozen=True)
class DasRun:
    V: np.ndarray
    trace: pd.DataFrame
    initial_loss: float
    final_loss: float


def make_patch_pairs(model, n_pairs, seed, sign_rule=None, opposite_only=False):
    """
    Sample (base, source) example pairs, alternating same-label and opposite-label pairs
    :param model: SyntheticPathwayModel
    :param n_pairs: number of pairs
    :param seed: integer seed; evaluation sets should use a seed unseen in training
    :param sign_rule: pair type -> maximize / minimize the clean-sign logit difference
    :param opposite_only: only build opposite-label pairs (interchange evaluation)
    :return: list of PatchPair
    """
    sign_rule = default_sign_rule() if sign_rule is None else sign_rule
    label_seed, base_seed, source_seed = np.random.SeedSequence(seed).generate_state(3)
    rng = np.random.default_rng(int(label_seed))
    base_labels = np.where(rng.random(n_pairs) < 0.5, -1, 1)
    opposite = np.ones(n_pairs, dtype=bool) if opposite_only else (np.arange(n_pairs) % 2 == 1)
    source_labels = np.where(opposite, -base_labels, base_labels)

    base_X = sample_examples(model, base_labels, int(base_seed))
    source_X = sample_examples(model, source_labels, int(source_seed))
    pairs = []
    for i in range(n_pairs):
        goal = sign_rule[OPPOSITE_LABEL if opposite[i] else SAME_LABEL]
        sign = int(base_labels[i]) if goal == MAXIMIZE else -int(base_labels[i])
        pairs.append(
            PatchPair(
                base_input=base_X[i],
                source_input=source_X[i],
                target_logitdiff_sign=sign,
                base_label=int(base_labels[i]),
                source_label=int(source_labels[i]),
            )
        )
    return pairs


class _PairBatch:
    """Clean activations of a set of pairs at one site, computed once and reused every step."""

    def __init__(self, model, pairs, site):
        if not pairs:
            raise ValueError("at least one patch pair is required")
        site_dim(model, site)
        self.model = model
        self.site = site
        self.base_X = np.stack([p.base_input for p in pairs])
        if self.base_X.shape[1] != model.d_resid:
            raise DimensionMismatchError(f"pair inputs have dimension {self.base_X.shape[1]}, model expects {model.d_resid}")
        self.signs = np.array([p.target_logitdiff_sign for p in pairs], dtype=np.float64)
        self.base_act = run_model(model, self.base_X).site(site)
        source_act = run_model(model, np.stack([p.source_input for p in pairs])).site(site)
        self.delta = source_act - self.base_act

    def __len__(self):
        return len(self.signs)

    def subset(self, idx):
        batch = object.__new__(_PairBatch)
        batch.model, batch.site = self.model, self.site
        batch.base_X, batch.signs = self.base_X[idx], self.signs[idx]
        batch.base_act, batch.delta = self.base_act[idx], self.delta[idx]
        return batch

    def losses(self, V):
        return self._evaluate(V, want_grad=False)[0]

    def loss_and_grad(self, V):
        return self._evaluate(V, want_grad=True)

    def _evaluate(self, V, want_grad):
        coeff = self.delta @ V
        patched = run_model(self.model, self.base_X, site=self.site, transform=lambda act: act + coeff @ V.T)
        losses = -self.signs * patched.logitdiff
        if not want_grad:
            return losses, None
        loss_site_grad = -self.signs[:, None] * logitdiff_site_gradient(self.model, patched, self.site)
        grad = (loss_site_grad.T @ coeff + self.delta.T @ (loss_site_grad @ V)) / len(self)
        return losses, grad


def logitdiff_site_gradient(model, cache, site):
    """
    Gradient of logits[0] - logits[1] with respect to the activation at a site
    :param cache: ActivationCache of the (patched) run, batch rows
    :return: one gradient row per cache row
    """
    n = cache.logits.shape[0]
    w = model.w_read
    if site in (Sites.resid_post, Sites.mlp_out):
        return np.tile(w, (n, 1))
    upstream = w @ model.mlp.W_out
    if site == Sites.mlp_post_act:
        return np.tile(upstream, (n, 1))
    # resid_pre feeds both the skip connection and the MLP
    return w + (gelu_prime(cache.mlp_pre_act) * upstream) @ model.mlp.W_in


def _check_basis(model, V, site, validate):
    V = as_matrix(V, "V")
    if V.shape[0] != site_dim(model, site):
        raise DimensionMismatchError(f"V has {V.shape[0]} rows but site {site} has dimension {site_dim(model, site)}")
    if validate:
        require_orthonormal(V)
    return V


def das_loss(model, pair, V, site, validate=True):
    """
    Loss of a single interchange along span(V): -target_logitdiff_sign x patched logit difference
    :param validate: check orthonormality of V (finite-difference probes switch it off)
    """
    V = _check_basis(model, V, site, validate)
    return float(_PairBatch(model, [pair], site).losses(V)[0])


def das_grad(model, pair, V, site):
    V = _check_basis(model, V, site, validate=True)
    return _PairBatch(model, [pair], site).loss_and_grad(V)[1]


def finite_difference_grad(loss_fn, V, step=1e-5):
    grad = np.zeros_like(V)
    for index in np.ndindex(*V.shape):
        bump = np.zeros_like(V)
        bump[index] = step
        grad[index] = (loss_fn(V + bump) - loss_fn(V - bump)) / (2 * step)
    return grad


def das_train_run(model, pairs, config):
    """
    Gradient descent over V with a QR retraction after every step
    :param model: SyntheticPathwayModel
    :param pairs: training PatchPairs
    :param config: DasConfig
    :return: DasRun holding the lowest-mean-loss iterate and the (step, mean_loss) trace
    """
    batch = _PairBatch(model, pairs, config.site)
    rng = np.random.default_rng(config.seed)
    V = orthonormalize(rng.standard_normal((site_dim(model, config.site), config.subspace_dim)))
    initial_loss = float(np.mean(batch.losses(V)))
    trace = [(0, initial_loss)]
    if config.learning_rate == 0:
        logger.info("DAS learning rate is 0, returning the initialization")
        return DasRun(V=V, trace=pd.DataFrame(trace, columns=["step", "mean_loss"]), initial_loss=initial_loss, final_loss=initial_loss)

    best_V, best_loss = V, initial_loss
    batch_size = min(config.batch_size, len(batch))
    for step in range(1, config.steps + 1):
        idx = np.sort(rng.choice(len(batch), size=batch_size, replace=False))
        _, grad = batch.subset(idx).loss_and_grad(V)
        V = orthonormalize(V - config.learning_rate * grad)
        mean_loss = float(np.mean(batch.losses(V)))
        if not np.isfinite(mean_loss):
            raise DivergenceError(step, mean_loss)
        trace.append((step, mean_loss))
        if mean_loss < best_loss:
            best_V, best_loss = V, mean_loss
        if step % 50 == 0:
            logger.debug(f"DAS {config.site} step {step}: mean loss {mean_loss:.6f}")

    logger.info(f"DAS at {config.site} finished: mean loss {initial_loss:.4f} -> {best_loss:.4f}")
    return DasRun(V=best_V, trace=pd.DataFrame(trace, columns=["step", "mean_loss"]), initial_loss=initial_loss, final_loss=best_loss)


def das_train(model, pairs, config, trace_path=None):
    """
    Train a subspace and return its orthonormal basis
    :param trace_path: optional CSV path receiving the (step, mean_loss) trace
    """
    run = das_train_run(model, pairs, config)
    if trace_path is not None:
        run.trace.to_csv(trace_path, index=False, float_format="%.17g")
    return run.V
