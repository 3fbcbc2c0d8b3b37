import json
import os
import subprocess
import sys

import pandas as pd
from pytest import mark

from Runner.lab_main import EXIT_CONFIG, EXIT_FAILED, EXIT_PASSED, main
from Runner.lab_settings import config_to_dict, load_config
from Runner.results import MANIFEST_FILE, SUMMARY_FILE

SMALL_MODEL = {"d_resid": 8, "d_mlp": 24}


def _write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def _read(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_toy_run_writes_everything_in_the_manifest(tmp_path):
    out = tmp_path / "toy"
    assert main(["toy", "--out", str(out)]) == EXIT_PASSED
    manifest = _read(out / MANIFEST_FILE)
    assert manifest["exit_code"] == EXIT_PASSED
    assert manifest["scenario"] == "toy"
    assert {"config.json", SUMMARY_FILE, "run.log", "toy_table.csv"} <= set(manifest["files"])
    for name in manifest["files"]:
        assert (out / name).exists()
    table = pd.read_csv(out / "toy_table.csv")
    assert len(table) == 21 * 21
    assert _read(out / SUMMARY_FILE)["passed"] is True


def test_rotated_toy_run(tmp_path):
    out = tmp_path / "rotated"
    assert main(["toy", "--config", _write_config(tmp_path, {"rotated": True}), "--out", str(out)]) == EXIT_PASSED
    assert {"d1_patch", "rotated_e3_patch", "d2_only", "d3_only"} <= set(pd.read_csv(out / "toy_rotated_table.csv").columns)


def test_toy_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "toy"
    assert main(["toy", "--out", str(out), "--seed", "3"]) == EXIT_PASSED
    first = {name: (out / name).read_bytes() for name in ("toy_table.csv", "config.json", SUMMARY_FILE)}
    assert main(["toy", "--out", str(out), "--seed", "3"]) == EXIT_PASSED
    for name, content in first.items():
        assert (out / name).read_bytes() == content


@mark.parametrize("scenario", ["toy", "illusion-synth", "rome-roundtrip", "separability"])
def test_defaults_are_accepted_back(tmp_path, capsys, scenario):
    assert main(["defaults", scenario]) == EXIT_PASSED
    printed = json.loads(capsys.readouterr().out)
    assert printed["scenario"] == scenario
    path = _write_config(tmp_path, printed)
    assert config_to_dict(load_config(scenario, path)) == printed


@mark.parametrize(
    "scenario, data",
    [
        ("toy", {"grid_size": 3}),
        ("illusion-synth", {"pair_count": 0}),
        ("illusion-synth", {"das": {"learning_rate": 0.0}}),
        ("illusion-synth", {"das": {"seed": 4}}),
        ("illusion-synth", {"sites": ["attn"]}),
        ("rome-roundtrip", {"alpha_sq_grid": []}),
        ("rome-roundtrip", {"alpha_sq_grid": [0.1, -1.0]}),
        ("separability", {"z_values": "small"}),
        ("toy", {"scenario": "separability"}),
    ],
)
def test_bad_configs_exit_with_config_error(tmp_path, scenario, data):
    path = _write_config(tmp_path, data)
    assert main([scenario, "--config", path, "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert not (tmp_path / "out" / MANIFEST_FILE).exists()


def test_unreadable_config_exits_with_config_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    assert main(["toy", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert main(["toy", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


@mark.parametrize("data", [[1], "toy", 3])
def test_non_object_config_with_overrides_exits_with_config_error(tmp_path, data):
    path = _write_config(tmp_path, data)
    out = str(tmp_path / "out")
    assert main(["toy", "--config", path, "--seed", "4", "--out", out]) == EXIT_CONFIG
    assert main(["toy", "--config", path]) == EXIT_CONFIG


def test_small_separability_run(tmp_path):
    config = {
        "model": SMALL_MODEL,
        "z_values": [0.01, 0.1],
        "n_per_z": 200,
        "probe_steps": 200,
        "n_examples": 64,
        "n_quadruples": 30,
        "regression_directions": 1,
        "regression_n": 200,
        "lemma_datasets": 2,
        "lemma_points": 20,
        "lemma_dim": 3,
    }
    out = tmp_path / "sep"
    code = main(["separability", "--config", _write_config(tmp_path, config), "--out", str(out), "--plot"])
    assert code in (EXIT_PASSED, EXIT_FAILED)
    for name in ("probe_accuracy.csv", "regression.csv", "lemma.csv", SUMMARY_FILE, MANIFEST_FILE, "probe_accuracy.png"):
        assert (out / name).exists()
    checks = {c["name"]: c["passed"] for c in _read(out / SUMMARY_FILE)["checks"]}
    assert checks["isometry slope recovered"]
    assert checks["isometry fit is exact"]
    assert checks["separability carried through every isometry"]
    assert set(pd.read_csv(out / "regression.csv")["tag"]) == {"kernel_gelu", "isometry", "residual_direction_0"}


@mark.slow
def test_small_rome_roundtrip_run(tmp_path):
    config = {
        "model": SMALL_MODEL,
        "d_resid": 4,
        "d_mlp": 12,
        "rome_instances": 3,
        "perturbation_count": 50,
        "patch_instances": 3,
        "subspace_instances": 3,
        "monte_carlo_instances": 1,
        "monte_carlo_samples": 20000,
        "pair_count": 2,
        "covariance_samples": 512,
    }
    out = tmp_path / "rome"
    code = main(["rome-roundtrip", "--config", _write_config(tmp_path, config), "--out", str(out)])
    assert code in (EXIT_PASSED, EXIT_FAILED)
    for name in ("alpha_curve.csv", "rewrite_scores.csv", "rome_roundtrip.json"):
        assert (out / name).exists()
    checks = {c["name"]: c["passed"] for c in _read(out / SUMMARY_FILE)["checks"]}
    assert checks["rome constraint holds"]
    assert checks["patch_to_edit matches the patch"]
    assert _read(out / MANIFEST_FILE)["exit_code"] == code


def test_runner_import_leaves_matplotlib_unloaded():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    code = "import sys, Runner.lab_main; print('matplotlib' in sys.modules)"
    result = subprocess.run([sys.executable, "-c", code], cwd=root, capture_output=True, text=True, check=True)
    assert result.stdout.strip() == "False"


@mark.slow
def test_small_illusion_run_includes_the_random_mlp_comparison(tmp_path):
    config = {
        "model": SMALL_MODEL,
        "das": {"steps": 50},
        "pair_count": 32,
        "eval_pair_count": 20,
        "angle_grid_steps": 8,
    }
    out = tmp_path / "illusion"
    code = main(["illusion-synth", "--config", _write_config(tmp_path, config), "--out", str(out)])
    assert code in (EXIT_PASSED, EXIT_FAILED)
    for name in ("illusion_table_random_mlp.csv", "das_trace_random_mlp.csv", "illusion_report.json"):
        assert (out / name).exists()
    assert "row_to_v_ratio" in _read(out / "illusion_report.json")["sites"]["random_mlp"]
    checks = {c["name"] for c in _read(out / SUMMARY_FILE)["checks"]}
    assert "random mlp: full MLP patch is weak" in checks
