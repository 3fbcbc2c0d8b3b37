from dataclasses import dataclass, replace

import numpy as np
import scipy.special

from IllusionLab.errors import ConfigError, DimensionMismatchError, UnknownSiteError
from IllusionLab.lab_log import get_logger
from IllusionLab.numerics import as_matrix, as_vector, pseudoinverse, unit
from IllusionLab.patching_engine import RANK1_EDIT, apply_intervention, apply_rank1_edit, patch_1d
from IllusionLab.tolerances import Sites

logger = get_logger("model_zoo")

OUTPUT_NORM_SAMPLES = 256


# toy network: one input, a 3-unit linear hidden layer, one output


@dataclass(frozen=True)
class ToyNet:
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class RotatedToyNet:
    rotation: np.ndarray
    base: ToyNet


def canonical_toy_net():
    return ToyNet(w1=np.array([1.0, 0.0, 1.0]), w2=np.array([0.0, 2.0, 1.0]))


def canonical_rotation():
    """Rows d1, d2, d3: d1 plays the faithful role, d2 the disconnected one, d3 the dormant one."""
    return np.array(
        [
            [1.0, 1.0, 0.0] / np.sqrt(2.0),
            [-1.0, 1.0, -2.0] / np.sqrt(6.0),
            [-1.0, 1.0, 1.0] / np.sqrt(3.0),
        ]
    )


def canonical_rotated_toy_net():
    return RotatedToyNet(rotation=canonical_rotation(), base=canonical_toy_net())


def toy_forward(net, x):
    h = net.w1 * float(x)
    return h, float(net.w2 @ h)


def rotated_toy_forward(net, x):
    h_rotated = net.rotation @ net.base.w1 * float(x)
    return h_rotated, float((net.rotation @ net.base.w2) @ h_rotated)


def toy_patch(net, x_base, x_source, v):
    """
    Patch the hidden layer along v from the run on x_source into the run on x_base
    :return: (patched hidden vector, output)
    """
    h_base, _ = toy_forward(net, x_base)
    h_source, _ = toy_forward(net, x_source)
    h = patch_1d(h_base, h_source, v)
    return h, float(net.w2 @ h)


def rotated_toy_patch(net, x_base, x_source, v):
    """Same as toy_patch but v is expressed in the rotated hidden coordinates."""
    h_base, _ = rotated_toy_forward(net, x_base)
    h_source, _ = rotated_toy_forward(net, x_source)
    h = patch_1d(h_base, h_source, v)
    return h, float((net.rotation @ net.base.w2) @ h)


# synthetic residual pathway model


@dataclass(frozen=True)
class MlpLayer:
    W_in: np.ndarray
    b_in: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @property
    def d_resid(self):
        return self.W_in.shape[1]

    @property
    def d_mlp(self):
        return self.W_in.shape[0]


@dataclass(frozen=True)
class SyntheticPathwayModel:
    d_resid: int
    mlp: MlpLayer
    mu: np.ndarray
    v_feat: np.ndarray
    c: float
    noise_scale: float
    unembed: np.ndarray
    seed: int = None

    @property
    def w_read(self):
        """Direction whose projection the logit difference reads."""
        return self.unembed[0] - self.unembed[1]


@dataclass(frozen=True)
class ActivationCache:
    resid_pre: np.ndarray
    mlp_pre_act: np.ndarray
    mlp_post_act: np.ndarray
    mlp_out: np.ndarray
    resid_post: np.ndarray
    logits: np.ndarray

    @property
    def logitdiff(self):
        return self.logits[..., 0] - self.logits[..., 1]

    def site(self, name):
        if name not in Sites.all:
            raise UnknownSiteError(f"unknown site {name!r}, expected one of {Sites.all}")
        return getattr(self, name)


@dataclass(frozen=True)
class ModelConfig:
    d_resid: int = 64
    d_mlp: int = 256
    c: float = 2.0
    noise_scale: float = 0.1
    target_output_norm: float = 5.0
    feature_blind_mlp: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_mlp <= self.d_resid:
            raise ConfigError(f"d_mlp ({self.d_mlp}) must exceed d_resid ({self.d_resid})")
        if self.c <= 0:
            raise ConfigError(f"c must be positive, got {self.c}")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be non-negative, got {self.noise_scale}")
        if self.target_output_norm <= 0:
            raise ConfigError(f"target_output_norm must be positive, got {self.target_output_norm}")


def gelu(x):
    """Exact gelu x·Φ(x)."""
    return x * scipy.special.ndtr(x)


def gelu_prime(x):
    return scipy.special.ndtr(x) + x * np.exp(-0.5 * np.square(x)) / np.sqrt(2.0 * np.pi)


def make_random_mlp(seed, d_resid, d_mlp, target_output_norm):
    """
    Gaussian MLP with the down-projection rescaled to a target mean output norm
    :param seed: integer seed
    :param d_resid: residual width
    :param d_mlp: hidden width, larger than d_resid
    :param target_output_norm: mean ‖mlp_out‖ over standard normal residual inputs
    :return: MlpLayer
    """
    if d_mlp <= d_resid:
        raise DimensionMismatchError(f"d_mlp ({d_mlp}) must exceed d_resid ({d_resid})")
    if target_output_norm <= 0:
        raise ValueError(f"target_output_norm must be positive, got {target_output_norm}")
    rng = np.random.default_rng(seed)
    W_in = rng.standard_normal((d_mlp, d_resid)) / np.sqrt(d_resid)
    b_in = rng.standard_normal(d_mlp) / np.sqrt(d_resid)
    W_out = rng.standard_normal((d_resid, d_mlp)) / np.sqrt(d_mlp)
    b_out = rng.standard_normal(d_resid) / np.sqrt(d_mlp)

    inputs = rng.standard_normal((OUTPUT_NORM_SAMPLES, d_resid))
    outputs = gelu(inputs @ W_in.T + b_in) @ W_out.T + b_out
    scale = target_output_norm / float(np.mean(np.linalg.norm(outputs, axis=1)))
    logger.debug(f"MLP output rescale factor {scale:.4f}")
    return MlpLayer(W_in=W_in, b_in=b_in, W_out=W_out * scale, b_out=b_out * scale)


def _run_mlp(mlp, resid_pre):
    pre = resid_pre @ mlp.W_in.T + mlp.b_in
    post = gelu(pre)
    return pre, post, post @ mlp.W_out.T + mlp.b_out


def feature_activation_gap(model):
    """Noise-free post-activation difference between the +1 and -1 class means."""
    delta = model.c * model.v_feat
    _, post_pos, _ = _run_mlp(model.mlp, model.mu + delta)
    _, post_neg, _ = _run_mlp(model.mlp, model.mu - delta)
    return post_pos - post_neg


def _make_feature_blind(model):
    # put the class-induced activation change in ker W_out, then recentre the readout
    mlp = model.mlp
    gap_dir = unit(feature_activation_gap(model), "feature activation gap")
    W_out = mlp.W_out - np.outer(mlp.W_out @ gap_dir, gap_dir)
    mlp = replace(mlp, W_out=W_out)

    delta = model.c * model.v_feat
    mean_out = (_run_mlp(mlp, model.mu + delta)[2] + _run_mlp(mlp, model.mu - delta)[2]) / 2
    b_out = mlp.b_out - model.v_feat * float(model.v_feat @ mean_out)
    return replace(model, mlp=replace(mlp, b_out=b_out))


def build_synthetic_model(config):
    """
    Canonical residual pathway: a feature written along v_feat, an MLP in the middle, and an
    unembedding reading the same direction
    :param config: ModelConfig
    :return: SyntheticPathwayModel
    """
    mlp_seed, direction_seed = np.random.SeedSequence(config.seed).generate_state(2)
    rng = np.random.default_rng(int(direction_seed))
    v_feat = unit(rng.standard_normal(config.d_resid))
    mu = rng.standard_normal(config.d_resid)
    mu -= v_feat * float(v_feat @ mu)

    model = SyntheticPathwayModel(
        d_resid=config.d_resid,
        mlp=make_random_mlp(int(mlp_seed), config.d_resid, config.d_mlp, config.target_output_norm),
        mu=mu,
        v_feat=v_feat,
        c=float(config.c),
        noise_scale=float(config.noise_scale),
        unembed=np.vstack([v_feat, -v_feat]),
        seed=config.seed,
    )
    if config.feature_blind_mlp:
        model = _make_feature_blind(model)
    logger.info(f"Built synthetic model d_resid={config.d_resid} d_mlp={config.d_mlp} seed={config.seed}")
    return model


def with_noise_scale(model, noise_scale):
    return replace(model, noise_scale=float(noise_scale))


def illusory_direction(model):
    """
    The constructed illusion at mlp_post_act
    :return: (v, v_disc, v_dorm) with v_disc ∈ ker W_out carrying the feature and v_dorm the
        rowspace direction that writes along the read direction
    """
    v_disc = unit(feature_activation_gap(model), "feature activation gap")
    v_dorm = unit(pseudoinverse(model.mlp.W_out) @ model.w_read, "dormant direction")
    return (v_disc + v_dorm) / np.sqrt(2.0), v_disc, v_dorm


def sample_examples(model, labels, seed):
    """
    resid_pre rows mu + label·c·v_feat + noise, one row per label
    :param labels: sequence of ±1
    :param seed: integer seed for the noise
    """
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("labels must be ±1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(labels), model.d_resid)) * model.noise_scale
    return model.mu + np.outer(labels * model.c, model.v_feat) + noise


def sample_example(model, label, seed):
    return sample_examples(model, [label], seed)[0]


def sample_labels(n, seed):
    rng = np.random.default_rng(seed)
    return np.where(rng.random(n) < 0.5, -1, 1)


def site_dim(model, site):
    if site in (Sites.resid_pre, Sites.mlp_out, Sites.resid_post):
        return model.d_resid
    if site == Sites.mlp_post_act:
        return model.mlp.d_mlp
    raise UnknownSiteError(f"unknown site {site!r}, expected one of {Sites.all}")


def run_model(model, resid_pre, site=None, transform=None, W_out=None):
    """
    Forward pass over one resid_pre vector or a batch of rows, optionally rewriting one site
    :param site: name of the site to rewrite
    :param transform: callable mapping the clean site activation to its replacement
    :param W_out: optional replacement down-projection
    :return: ActivationCache with arrays shaped like the input
    """
    if site is not None and site not in Sites.all:
        raise UnknownSiteError(f"unknown site {site!r}, expected one of {Sites.all}")
    mlp = model.mlp if W_out is None else replace(model.mlp, W_out=W_out)

    def at(name, value):
        return transform(value) if name == site else value

    resid_pre = at(Sites.resid_pre, resid_pre)
    pre = resid_pre @ mlp.W_in.T + mlp.b_in
    post = at(Sites.mlp_post_act, gelu(pre))
    mlp_out = at(Sites.mlp_out, post @ mlp.W_out.T + mlp.b_out)
    resid_post = at(Sites.resid_post, resid_pre + mlp_out)
    return ActivationCache(
        resid_pre=resid_pre,
        mlp_pre_act=pre,
        mlp_post_act=post,
        mlp_out=mlp_out,
        resid_post=resid_post,
        logits=resid_post @ model.unembed.T,
    )


def forward_with_cache(model, resid_pre, intervention=None):
    """
    Run the model on one resid_pre vector
    :param intervention: optional InterventionSpec applied at its site before propagation
    :return: ActivationCache
    """
    resid_pre = as_vector(resid_pre, "resid_pre")
    if resid_pre.shape[0] != model.d_resid:
        raise DimensionMismatchError(f"resid_pre has dimension {resid_pre.shape[0]}, model expects {model.d_resid}")
    if intervention is None:
        return run_model(model, resid_pre)
    if intervention.site not in Sites.all:
        raise UnknownSiteError(f"unknown site {intervention.site!r}, expected one of {Sites.all}")
    if intervention.kind == RANK1_EDIT:
        W_edit = apply_rank1_edit(model.mlp.W_out, intervention.a, intervention.b)
        return run_model(model, resid_pre, W_out=W_edit)

    dim = site_dim(model, intervention.site)
    if intervention.dim != dim:
        raise DimensionMismatchError(f"intervention has dimension {intervention.dim} but site {intervention.site} has {dim}")
    return run_model(model, resid_pre, site=intervention.site, transform=lambda act: apply_intervention(act, intervention))


def model_to_dict(model):
    return {
        "d_resid": model.d_resid,
        "mlp": {
            "W_in": model.mlp.W_in.tolist(),
            "b_in": model.mlp.b_in.tolist(),
            "W_out": model.mlp.W_out.tolist(),
            "b_out": model.mlp.b_out.tolist(),
        },
        "mu": model.mu.tolist(),
        "v_feat": model.v_feat.tolist(),
        "c": model.c,
        "noise_scale": model.noise_scale,
        "unembed": model.unembed.tolist(),
        "seed": model.seed,
    }


def model_from_dict(data):
    mlp = data["mlp"]
    return SyntheticPathwayModel(
        d_resid=int(data["d_resid"]),
        mlp=MlpLayer(
            W_in=as_matrix(mlp["W_in"], "W_in"),
            b_in=as_vector(mlp["b_in"], "b_in"),
            W_out=as_matrix(mlp["W_out"], "W_out"),
            b_out=as_vector(mlp["b_out"], "b_out"),
        ),
        mu=as_vector(data["mu"], "mu"),
        v_feat=as_vector(data["v_feat"], "v_feat"),
        c=float(data["c"]),
        noise_scale=float(data["noise_scale"]),
        unembed=as_matrix(data["unembed"], "unembed"),
        seed=data.get("seed"),
    )
