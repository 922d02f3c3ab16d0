"""Flat JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError, DomainError
from .model import ModelConfig
from .moe import build_schedule
from .training import STAGES, StageConfig, default_stage

__all__ = ["RunConfig", "load_config", "CONFIG_KEYS"]


@dataclass(frozen=True)
class RunConfig:
    # randomness: every stream is derived from this root by label
    seed: int = 0
    # model geometry
    layers: int = 8
    d_model: int = 16
    d_hidden: int = 64
    d_vis: int = 48
    n_heads: int = 2
    vocab: int = 64
    # MoE settings
    num_experts: int = 4
    top_k: int = 2
    schedule: str = "interval(4)"
    alpha: float = 0.01
    noise_scale: float = 0.01
    # synergy tokens and mock teachers
    synergy_tokens: int = 4
    temporal_dim: int = 12
    spatial_dim: int = 10
    # stages
    stages: tuple[str, ...] = STAGES
    steps_stage_1_1: int = 100
    steps_stage_1_2: int = 100
    steps_stage_2_1: int = 500
    steps_stage_2_2: int = 100
    lr_stage_1_1: float | None = None  # None keeps the per-stage default
    lr_stage_1_2: float | None = None
    lr_stage_2_1: float | None = None
    lr_stage_2_2: float | None = None
    lr_scale: float = 1.0
    phase_a_fraction: float = 0.3
    # data
    batch_size: int = 8
    pool_size: int = 64
    instruction_mix: float = 0.5
    csqa_path: str | None = None
    csqa_cap: int = 8
    log_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_vis=self.d_vis, d_model=self.d_model, d_hidden=self.d_hidden, n_heads=self.n_heads,
            vocab=self.vocab, total_layers=self.layers, schedule=self.schedule, num_experts=self.num_experts,
            top_k=self.top_k, synergy_tokens=self.synergy_tokens, temporal_dim=self.temporal_dim,
            spatial_dim=self.spatial_dim,
        )

    def stage_config(self, name: str) -> StageConfig:
        base = default_stage(name, steps=getattr(self, f"steps_{name}"))
        lr = getattr(self, f"lr_{name}")
        return default_stage(
            name, steps=base.steps, lr=(base.lr if lr is None else lr) * self.lr_scale,
            phase_a_fraction=self.phase_a_fraction,
        )

    def validate(self, need_csqa: bool = True) -> None:
        """Check every downstream precondition before any work starts."""
        try:
            self.model_config()
            build_schedule(self.layers, self.schedule)
            order = [STAGES.index(s) if s in STAGES else -1 for s in self.stages]
            if -1 in order:
                bad = [s for s in self.stages if s not in STAGES]
                raise ConfigError(f"unknown stage(s) {bad}; expected a subset of {list(STAGES)}")
            if order != sorted(set(order)):
                raise ConfigError(f"stages must be listed once each, in order {list(STAGES)}")
            for s in self.stages:
                self.stage_config(s)
            if not self.lr_scale > 0:
                raise ConfigError("lr_scale must be > 0")
            if not self.alpha >= 0:
                raise ConfigError("alpha must be >= 0")
            if self.noise_scale < 0:
                raise ConfigError("noise_scale must be >= 0")
            if self.batch_size < 1 or self.pool_size < 1:
                raise ConfigError("batch_size and pool_size must be >= 1")
            if not 0 <= self.instruction_mix <= 1:
                raise ConfigError("instruction_mix must lie in [0, 1]")
            if self.csqa_cap < 1 or self.log_every < 1:
                raise ConfigError("csqa_cap and log_every must be >= 1")
            if self.vocab < 3:
                raise ConfigError("vocab must leave room for BOS, SEP and at least one word")
            if need_csqa and "stage_2_2" in self.stages:
                if not self.csqa_path:
                    raise ConfigError(
                        "stage_2_2 needs CSQA data: set csqa_path (or pass --csqa) to a JSONL file "
                        "written by the gen-csqa command"
                    )
                if not Path(self.csqa_path).is_file():
                    raise ConfigError(f"csqa_path {self.csqa_path!r} does not exist; create it with gen-csqa")
        except ConfigError:
            raise
        except DomainError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kw = {}
        for f in fields(cls):
            if f.name in doc:
                v = doc[f.name]
                default = f.default
                if default is None:
                    kind = str if f.name == "csqa_path" else (int, float)
                    if v is not None and (isinstance(v, bool) or not isinstance(v, kind)):
                        raise ConfigError(f"config key {f.name!r} has invalid value {v!r}")
                    kw[f.name] = float(v) if v is not None and kind != str else v
                elif f.name == "stages":
                    kw[f.name] = v
                elif isinstance(default, int) and not isinstance(v, bool) and isinstance(v, (int, float)) and float(v).is_integer():
                    kw[f.name] = int(v)
                elif isinstance(default, float) and isinstance(v, (int, float)) and not isinstance(v, bool):
                    kw[f.name] = float(v)
                elif isinstance(default, str) and isinstance(v, str):
                    kw[f.name] = v
                else:
                    raise ConfigError(f"config key {f.name!r} has invalid value {v!r}")
        if "stages" in kw and not (isinstance(kw["stages"], (list, tuple)) and all(isinstance(s, str) for s in kw["stages"])):
            raise ConfigError("stages must be a list of stage names")
        return cls(**kw)


CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))


def load_config(path: str | Path | None) -> RunConfig:
    """Read a flat JSON config; ``json.JSONDecodeError`` propagates with its location."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(doc)
