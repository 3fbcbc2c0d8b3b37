import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

import IllusionLab
from IllusionLab.lab_log import get_logger

logger = get_logger("results")

MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"


def to_plain(value):
    """numpy scalars and arrays to Python values, NaN and infinities to null."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_plain(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps(data):
    return json.dumps(to_plain(data), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_hash(config_dict):
    canonical = json.dumps(to_plain(config_dict), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


@dataclass
class RunManifest:
    scenario: str
    config_hash: str
    artifact_version: str
    started_at: str
    finished_at: str = None
    exit_code: int = None
    files: list = field(default_factory=list)


class ResultWriter:
    """Writes every artifact of one run into its output directory and remembers what it wrote."""

    def __init__(self, output_dir):
        self.output_dir = output_dir
        os.makedirs(output_dir, exist_ok=True)
        self.files = []

    def path(self, name):
        return os.path.join(self.output_dir, name)

    def _record(self, name):
        if name not in self.files:
            self.files.append(name)

    def csv(self, name, frame):
        frame.to_csv(self.path(name), index=False, float_format="%.17g", encoding="utf-8", lineterminator="\n")
        self._record(name)
        logger.debug(f"wrote {name} ({len(frame)} rows)")

    def json(self, name, data):
        _atomic_write(self.path(name), dumps(data))
        self._record(name)

    def text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        self._record(name)

    def figure(self, name, fig):
        fig.savefig(self.path(name), dpi=120)
        self._record(name)

    def manifest(self, manifest):
        manifest.files = sorted(self.files)
        _atomic_write(self.path(MANIFEST_FILE), dumps(asdict(manifest)))


def start_manifest(scenario, config_dict):
    return RunManifest(
        scenario=scenario,
        config_hash=config_hash(config_dict),
        artifact_version=IllusionLab.__version__,
        started_at=now(),
    )


def now():
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
