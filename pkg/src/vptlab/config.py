"""Experiment configuration: flat ``section.key = value`` files with command-line overrides.

Every key has a default, so an empty file is a valid configuration. Lines
starting with ``#`` are comments. List values are comma separated.

    backbone.d_model = 64
    train.vpt_epochs = 8
    tune.tau_grid = 0.8, 1.0, 1.3
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from vptlab.backbone.model import BackboneConfig
from vptlab.decode import DecodeConfig
from vptlab.errors import UsageError
from vptlab.select import SelectionConfig
from vptlab.vpt.model import VPTConfig


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class CorpusSection:
    n_examples: int = 2860
    refs_min: int = 4
    refs_max: int = 5
    opener_bias: float = 0.6
    path: str = ""  # an existing split directory; generated from run.seed when empty


@dataclass
class BackboneSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    dropout_rate: float = 0.2

    def model_config(self, vocab_size: int) -> BackboneConfig:
        return BackboneConfig(vocab_size=vocab_size, **dataclasses.asdict(self))


@dataclass
class TrainSection:
    backbone_epochs: int = 8
    vpt_epochs: int = 16
    batch_size: int = 32
    backbone_lr: float = 1e-3
    vpt_lr: float = 3e-3


@dataclass
class PoolSection:
    n_candidates: int = 100
    per_latent: str = "beam"  # or "greedy"
    per_latent_beam: int = 4
    tau: float = 1.0


@dataclass
class TuneSection:
    enabled: bool = True
    n_valid: int = 100
    tau_grid: tuple[float, ...] = (0.7, 1.0, 1.3)
    temperature_grid: tuple[float, ...] = (0.7, 1.0, 1.3)
    sbs_temperature_grid: tuple[float, ...] = (1.0, 1.5)
    dbs_lambda_grid: tuple[float, ...] = (0.5, 2.0)
    # beta/alpha ratios; inf selects on diversity alone
    beta_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0, math.inf)


@dataclass
class EvalSection:
    n_test: int = 0  # 0 means the whole test split
    u_values: tuple[int, ...] = (10, 20)
    distinct_mode: str = "set"
    collapse_diagnostic: bool = True
    collapse_epochs: int = 4  # collapse shows early; a short run keeps the pipeline within budget
    latent_pairs: int = 50


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    train: TrainSection = field(default_factory=TrainSection)
    vpt: VPTConfig = field(default_factory=VPTConfig)
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(dbs_groups=5, beam_width=10))
    select: SelectionConfig = field(default_factory=SelectionConfig)
    pool: PoolSection = field(default_factory=PoolSection)
    tune: TuneSection = field(default_factory=TuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        """Plain JSON-safe dict; infinite grid values become the string "inf"."""

        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean(dataclasses.asdict(self))

    def validate(self) -> None:
        """Re-run every section's own checks plus the cross-field ones."""
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            post = getattr(section, "__post_init__", None)
            try:
                if post:
                    post()
            except ValueError as exc:
                raise UsageError(f"[{f.name}] {exc}") from exc
        if self.pool.per_latent not in ("beam", "greedy"):
            raise UsageError("pool.per_latent must be 'beam' or 'greedy'")
        if self.eval.distinct_mode not in ("set", "average"):
            raise UsageError("eval.distinct_mode must be 'set' or 'average'")
        if not 1 <= self.corpus.refs_min <= self.corpus.refs_max:
            raise UsageError("need 1 <= corpus.refs_min <= corpus.refs_max")
        if self.corpus.path and not Path(self.corpus.path).is_dir():
            raise UsageError(f"corpus.path {self.corpus.path!r} is not a directory")
        if min(self.train.backbone_epochs, self.train.vpt_epochs, self.train.batch_size, self.eval.collapse_epochs) < 1:
            raise UsageError("epochs and batch size must be positive")
        if any(not r >= 0 for r in self.tune.beta_grid):
            raise UsageError("tune.beta_grid ratios must be non-negative")
        if self.pool.n_candidates < max(self.eval.u_values):
            raise UsageError("pool.n_candidates must be at least the largest U")


def _coerce(raw: str, current: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else float
            return tuple(kind(part.strip()) for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {key}") from None


def set_value(cfg: ExperimentConfig, key: str, raw: str) -> None:
    """Assign ``section.name`` from its text form, coerced to the default's type."""
    section_name, _, name = key.strip().partition(".")
    section = getattr(cfg, section_name, None)
    if section is None or not dataclasses.is_dataclass(section) or not name:
        raise UsageError(f"unknown config key {key!r}")
    if name not in {f.name for f in dataclasses.fields(section)}:
        raise UsageError(f"unknown config key {key!r}")
    setattr(section, name, _coerce(raw, getattr(section, name), key))


def parse_config(text: str, overrides: list[str] | tuple[str, ...] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        set_value(cfg, key, raw)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        set_value(cfg, key, raw)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | tuple[str, ...] = ()) -> ExperimentConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def _render(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def dumps_config(cfg: ExperimentConfig) -> str:
    """Serialize to the file format; ``parse_config(dumps_config(c))`` reproduces ``c``."""
    lines = []
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        for sf in dataclasses.fields(section):
            lines.append(f"{f.name}.{sf.name} = {_render(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"
