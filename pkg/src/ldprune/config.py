"""Experiment configuration: YAML schema, defaults, overrides and hashing.

Schema (every section and key optional; unknown keys are errors)::

    seed: 0                 # weight init, sampling and training seeds
    deterministic: false
    output_dir: runs
    unet:      {UNetSpec fields}
    scheduler: {SchedulerConfig fields}
    dataset:   {DatasetConfig fields}
    teacher:   {lr, batch_size, iterations}
    prune:     {k, conditions, n_gen, combinator, min_cost_fraction, adapter_init}
    kd:        {KDConfig fields except seed, plus optional preset: t2i|uig|uag}
    eval:      {n_samples, seed, n_warmup, n_measured, diag}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import DatasetConfig
from .diffusion import SchedulerConfig
from .distill import KDConfig, TeacherConfig
from .graph import UNetSpec
from .prune import PruneConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_samples: int = 16
    seed: int = 1000
    n_warmup: int = 20
    n_measured: int = 100
    diag: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = False
    output_dir: str = "runs"
    unet: UNetSpec = field(default_factory=UNetSpec)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # the master seed drives every stochastic stage except the dataset
        self.teacher.seed = self.seed
        self.kd.seed = self.seed
        self.prune.base_seed = self.seed

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "deterministic": self.deterministic, "output_dir": self.output_dir}
        for name in _SECTIONS:
            section = getattr(self, name)
            d[name] = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
        return d

    # --- hashing -------------------------------------------------------------

    def _hash(self, keys) -> str:
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        """Identifies the whole experiment."""
        return self._hash(["seed", "unet", "scheduler", "dataset", "teacher", "prune", "kd", "eval"])

    def stage_hash(self, stage: str) -> str:
        """Hash of the sections an artifact of ``stage`` depends on."""
        keys = {
            "teacher": ["seed", "unet", "dataset", "teacher"],
            "score": ["seed", "unet", "dataset", "teacher", "scheduler", "prune"],
            "finetune": ["seed", "unet", "dataset", "teacher", "scheduler", "prune", "kd"],
        }[stage]
        return self._hash(keys)

    def run_dir(self) -> Path:
        """One directory per teacher, so later stages with other settings share it."""
        return Path(self.output_dir) / self.stage_hash("teacher")


_SECTIONS = {
    "unet": UNetSpec,
    "scheduler": SchedulerConfig,
    "dataset": DatasetConfig,
    "teacher": TeacherConfig,
    "prune": PruneConfig,
    "kd": KDConfig,
    "eval": EvalConfig,
}
_SCALARS = {"seed": int, "deterministic": bool, "output_dir": str}
_HIDDEN = {"teacher": {"seed"}, "kd": {"seed"}, "prune": {"base_seed"}}


def _line_of(node, path: list[str]) -> int | None:
    for key in path:
        if not isinstance(node, yaml.MappingNode):
            return None
        for k, v in node.value:
            if k.value == key:
                node = v
                line = k.start_mark.line + 1
                break
        else:
            return None
    return line


def _build(data: dict, source: str, root) -> ExperimentConfig:
    def fail(msg, path):
        line = _line_of(root, path) if root is not None else None
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {msg}")

    if not isinstance(data, dict):
        fail("top level must be a mapping", [])
    kwargs = {}
    for key, value in data.items():
        if key in _SCALARS:
            kwargs[key] = value
            continue
        cls = _SECTIONS.get(key)
        if cls is None:
            fail(f"unknown key {key!r}", [key])
        value = dict(value or {})
        if key == "kd" and "preset" in value:
            preset = value.pop("preset")
            try:
                kwargs[key] = KDConfig.preset(preset, **value)
            except (TypeError, ValueError) as exc:
                fail(str(exc), [key, "preset"])
            continue
        allowed = {f.name for f in fields(cls)} - _HIDDEN.get(key, set())
        for sub in value:
            if sub not in allowed:
                fail(f"unknown key {key}.{sub}", [key, sub])
        try:
            kwargs[key] = cls(**value)
        except (TypeError, ValueError) as exc:
            fail(f"invalid {key} section: {exc}", [key])
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``path`` (YAML) and apply dotted-key ``overrides`` on top.

    Precedence is override > file > built-in default.
    """
    data, root, source = {}, None, "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            root = yaml.compose(text)
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark else str(path)
            raise ConfigError(f"{where}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[leaf] = value
    return _build(data, source, root)


def dump_config(cfg: ExperimentConfig, path) -> None:
    d = cfg.to_dict()
    for section, hidden in _HIDDEN.items():
        for h in hidden:
            d[section].pop(h, None)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True))
