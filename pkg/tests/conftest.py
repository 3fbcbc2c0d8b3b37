import numpy as np
from pytest import fixture

from IllusionLab.das_optimizer import DasConfig, das_train_run, make_patch_pairs
from IllusionLab.model_zoo import ModelConfig, build_synthetic_model
from IllusionLab.tolerances import Sites


@fixture(scope="session")
def model():
    return build_synthetic_model(ModelConfig(seed=0))


@fixture(scope="session")
def random_mlp_model():
    return build_synthetic_model(ModelConfig(seed=0, feature_blind_mlp=False))


@fixture(scope="session")
def small_model():
    return build_synthetic_model(ModelConfig(d_resid=8, d_mlp=24, seed=3))


@fixture(scope="session")
def train_pairs(model):
    return make_patch_pairs(model, 256, seed=11)


@fixture(scope="session")
def eval_pairs(model):
    return make_patch_pairs(model, 200, seed=12, opposite_only=True)


@fixture(scope="session")
def das_mlp(model, train_pairs):
    return das_train_run(model, train_pairs, DasConfig(seed=5, site=Sites.mlp_post_act))


@fixture(scope="session")
def das_resid(model, train_pairs):
    return das_train_run(model, train_pairs, DasConfig(seed=5, site=Sites.resid_pre))


@fixture
def rng():
    return np.random.default_rng(1234)
