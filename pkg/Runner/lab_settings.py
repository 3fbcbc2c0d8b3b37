import dataclasses
import json
import os
from dataclasses import dataclass, field

from IllusionLab.das_optimizer import MAXIMIZE, MINIMIZE, OPPOSITE_LABEL, SAME_LABEL, DasConfig, default_sign_rule
from IllusionLab.errors import ConfigError
from IllusionLab.model_zoo import ModelConfig
from IllusionLab.tolerances import Sites

SETTINGS_FILE = "lab-settings.json"
file_path = os.path.dirname(os.path.realpath(__file__))

# model and DAS seeds and the DAS site come from the scenario, never from the nested blocks
MODEL_KEYS = ("d_resid", "d_mlp", "c", "noise_scale", "target_output_norm", "feature_blind_mlp")
DAS_KEYS = ("subspace_dim", "learning_rate", "steps", "batch_size", "objective_sign_rule")


def _load_settings():
    path = os.path.join(file_path, SETTINGS_FILE)
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@dataclass(frozen=True)
class ToyConfig:
    scenario: str = "toy"
    seed: int = 0
    grid_min: float = -5.0
    grid_max: float = 5.0
    grid_step: float = 0.5
    rotated: bool = False
    output_dir: str = "results/toy"

    def validate(self):
        if self.grid_step <= 0:
            raise ConfigError(f"grid_step must be positive, got {self.grid_step}")
        if self.grid_max < self.grid_min:
            raise ConfigError(f"grid_max ({self.grid_max}) is below grid_min ({self.grid_min})")


@dataclass(frozen=True)
class IllusionSynthConfig:
    scenario: str = "illusion-synth"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    das: DasConfig = field(default_factory=DasConfig)
    sites: tuple = (Sites.mlp_post_act, Sites.resid_pre)
    pair_count: int = 256
    eval_pair_count: int = 200
    angle_grid_steps: int = 40
    random_mlp_comparison: bool = True
    output_dir: str = "results/illusion-synth"

    def validate(self):
        if self.pair_count < 1:
            raise ConfigError("pair_count must be at least 1")
        if self.eval_pair_count < 1:
            raise ConfigError("eval_pair_count must be at least 1")
        if self.das.learning_rate <= 0:
            raise ConfigError(f"das.learning_rate must be positive, got {self.das.learning_rate}")
        if self.angle_grid_steps < 2:
            raise ConfigError("angle_grid_steps must be at least 2")
        if not self.sites:
            raise ConfigError("sites must name at least one site")
        for site in self.sites:
            if site not in Sites.all:
                raise ConfigError(f"unknown site {site!r}, expected one of {Sites.all}")


@dataclass(frozen=True)
class RomeRoundtripConfig:
    scenario: str = "rome-roundtrip"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    alpha_sq_grid: tuple = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
    d_resid: int = 16
    d_mlp: int = 64
    max_condition: float = 1e6
    rome_instances: int = 100
    perturbation_count: int = 1000
    patch_instances: int = 50
    subspace_instances: int = 50
    monte_carlo_instances: int = 3
    monte_carlo_samples: int = 100000
    pair_count: int = 20
    covariance_samples: int = 4096
    output_dir: str = "results/rome-roundtrip"

    def validate(self):
        if not self.alpha_sq_grid:
            raise ConfigError("alpha_sq_grid must not be empty")
        if any(x <= 0 for x in self.alpha_sq_grid):
            raise ConfigError("alpha_sq_grid values must be positive")
        if self.d_mlp <= self.d_resid:
            raise ConfigError(f"d_mlp ({self.d_mlp}) must exceed d_resid ({self.d_resid})")
        if self.max_condition < 1:
            raise ConfigError(f"max_condition must be at least 1, got {self.max_condition}")
        for name in ("rome_instances", "patch_instances", "subspace_instances", "monte_carlo_instances", "pair_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.monte_carlo_samples < 2 or self.covariance_samples < 2:
            raise ConfigError("sample counts must be at least 2")
        if self.perturbation_count < 0:
            raise ConfigError("perturbation_count must be non-negative")


@dataclass(frozen=True)
class SeparabilityConfig:
    scenario: str = "separability"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    z_values: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    n_per_z: int = 2000
    probe_lambda: float = 1e-3
    probe_steps: int = 2000
    probe_lr: float = 0.1
    n_examples: int = 512
    n_quadruples: int = 250
    isometry_lambda: float = 0.25
    regression_directions: int = 5
    regression_n: int = 2000
    ridge_lambda: float = 1e-3
    lemma_datasets: int = 20
    lemma_points: int = 100
    lemma_dim: int = 8
    lemma_lambda: float = 0.25
    output_dir: str = "results/separability"

    def validate(self):
        if not self.z_values:
            raise ConfigError("z_values must not be empty")
        if any(z < 0 for z in self.z_values):
            raise ConfigError("z_values must be non-negative")
        if self.n_per_z < 10:
            raise ConfigError("n_per_z must be at least 10")
        if self.probe_lr <= 0 or self.probe_steps < 1:
            raise ConfigError("probe_lr must be positive and probe_steps at least 1")
        if self.probe_lambda < 0 or self.ridge_lambda < 0:
            raise ConfigError("penalties must be non-negative")
        if self.n_examples < 4 or self.n_quadruples < 3:
            raise ConfigError("need at least 4 examples and 3 quadruples")
        if self.isometry_lambda <= 0 or self.lemma_lambda <= 0:
            raise ConfigError("isometry scales must be positive")
        if self.regression_n < 50:
            raise ConfigError("regression_n must be at least 50")
        if self.lemma_points < 2 or self.lemma_dim < 1 or self.lemma_datasets < 0 or self.regression_directions < 0:
            raise ConfigError("lemma and regression counts are out of range")


SCENARIOS = {
    "toy": ToyConfig,
    "illusion-synth": IllusionSynthConfig,
    "rome-roundtrip": RomeRoundtripConfig,
    "separability": SeparabilityConfig,
}


def _coerce(key, value, default):
    # JSON types checked against the dataclass default; ints are accepted where floats are expected
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        if default and isinstance(default[0], float):
            return tuple(_coerce(f"{key}[]", x, 0.0) for x in value)
        return tuple(value)
    return value


def _build_nested(key, data, cls, allowed, overrides):
    if not isinstance(data, dict):
        raise ConfigError(f"{key} must be an object, got {data!r}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {key}: {', '.join(unknown)}")
    defaults = cls()
    values = {}
    for name in allowed:
        if name not in data:
            continue
        if name == "objective_sign_rule":
            values[name] = _sign_rule(data[name])
        else:
            values[name] = _coerce(f"{key}.{name}", data[name], getattr(defaults, name))
    try:
        return cls(**values, **overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {key}: {e}") from e


def _sign_rule(data):
    if not isinstance(data, dict):
        raise ConfigError(f"das.objective_sign_rule must be an object, got {data!r}")
    rule = default_sign_rule()
    for pair_type, goal in data.items():
        if pair_type not in (SAME_LABEL, OPPOSITE_LABEL) or goal not in (MAXIMIZE, MINIMIZE):
            raise ConfigError(f"bad das.objective_sign_rule entry {pair_type!r}: {goal!r}")
        rule[pair_type] = goal
    return rule


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != "objective_sign_rule":
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_config(scenario, data):
    """
    Build a validated scenario config from a JSON object
    :param scenario: scenario name
    :param data: parsed JSON; missing keys fall back to the defaults in lab-settings.json
    :return: the scenario's config dataclass
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}, expected one of {', '.join(SCENARIOS)}")
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    cls = SCENARIOS[scenario]
    data = _merge(_load_settings().get(scenario, {}), data)

    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown keys for {scenario}: {', '.join(unknown)}")
    if data.get("scenario", scenario) != scenario:
        raise ConfigError(f"config is for scenario {data['scenario']!r}, not {scenario!r}")

    defaults = cls()
    values = {}
    for name in names:
        if name not in data or name == "scenario":
            continue
        if name == "model":
            values[name] = _build_nested("model", data[name], ModelConfig, MODEL_KEYS, {})
        elif name == "das":
            values[name] = _build_nested("das", data[name], DasConfig, DAS_KEYS, {})
        else:
            values[name] = _coerce(name, data[name], getattr(defaults, name))
    config = cls(**values)
    config.validate()
    return config


def load_config(scenario, path=None, seed=None, output_dir=None):
    """
    Read a scenario config file and apply the command-line overrides
    :param path: JSON config path, or None for the defaults alone
    :param seed: overrides the config seed
    :param output_dir: overrides the config output_dir
    """
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    return parse_config(scenario, data)


def config_to_dict(config):
    """JSON-ready form of a config, nested blocks limited to their file keys."""
    data = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name == "model":
            value = {key: getattr(value, key) for key in MODEL_KEYS}
        elif f.name == "das":
            value = {key: getattr(value, key) for key in DAS_KEYS}
            value["objective_sign_rule"] = dict(value["objective_sign_rule"])
        elif isinstance(value, tuple):
            value = list(value)
        data[f.name] = value
    return data


def default_config(scenario):
    return config_to_dict(parse_config(scenario, {}))
