"""Experiment configuration: JSON schema, dotted overrides and cross-field validation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .model import OBJECTIVES, ModelConfig
from .objectives import check_flags
from .text import TextConfig
from .training import StageConfig
from .vision import ConfigError, VisionConfig


@dataclass
class DataSpec:
    temporal_pairs: int = 512
    spatial_pairs: int = 512
    image_pairs: int = 512
    colors: int = 4
    temporal_frames: int = 2
    spatial_frames: int = 4
    size: int = 16
    noise: float = 0.0
    mix_ratio: float = 0.0
    seed: int = 0
    eval_temporal: int = 12
    eval_spatial: int = 48

    def validate(self) -> None:
        if self.temporal_pairs % 2 or self.eval_temporal % 2:
            raise ConfigError("temporal corpora hold mirror couples; sizes must be even")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ConfigError("mix_ratio must lie in [0, 1]")
        if self.mix_ratio > 0 and self.image_pairs < 1:
            raise ConfigError("mix_ratio > 0 needs image pairs")
        if self.temporal_frames < 2:
            raise ConfigError("temporal videos need at least 2 frames")


@dataclass
class EvalSpec:
    rerank_k: int = 128
    rerank: bool = True
    frames: int | None = None
    inference_frames: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    qa_max_len: int = 4
    qa_epochs: int = 30
    qa_train_items: int = 256

    def validate(self) -> None:
        if self.rerank_k < 1:
            raise ConfigError("rerank_k must be >= 1")
        if any(m < 1 for m in self.inference_frames):
            raise ConfigError("inference frame counts must be >= 1")


@dataclass
class LadderSpec:
    mvm: bool = False
    sweep_train_frames: int = 4
    sweep_inference_frames: list[int] = field(default_factory=lambda: [2, 4, 8])


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSpec = field(default_factory=DataSpec)
    stages: list[StageConfig] = field(default_factory=lambda: [StageConfig(batch_size=16, lr=5e-4)])
    eval: EvalSpec = field(default_factory=EvalSpec)
    ladder: LadderSpec = field(default_factory=LadderSpec)
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> None:
        """Cross-field checks; raises ConfigError before any work is done."""
        self.model.validate()
        self.data.validate()
        self.eval.validate()
        if not self.stages:
            raise ConfigError("at least one training stage is required")
        prev = 0
        for i, st in enumerate(self.stages):
            try:
                st.validate()
            except ValueError as exc:
                raise ConfigError(f"stage {i}: {exc}") from exc
            if st.frames < prev:
                raise ConfigError(f"stage {i}: frame count {st.frames} decreases from {prev}")
            prev = st.frames
            unknown = set(st.objectives) - set(OBJECTIVES)
            if unknown:
                raise ConfigError(f"stage {i}: unknown objectives {sorted(unknown)}")
            check_flags(st.objectives, self.model.text.fusion_mode)
            if "MVM" in st.objectives and "MVM" not in self.model.objectives:
                raise ConfigError(f"stage {i}: MVM enabled but the model has no MVM head")
        if self.model.vision.num_frames > self.stages[0].frames:
            raise ConfigError("model num_frames exceeds the first stage's frame count")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "stages": [dict(asdict(s), objectives=list(s.objectives)) for s in self.stages],
            "eval": asdict(self.eval),
            "ladder": asdict(self.ladder),
            "seed": self.seed,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            stages = [StageConfig(**dict(s, objectives=tuple(s.get("objectives", StageConfig.objectives))))
                      for s in d.get("stages", [asdict(StageConfig(batch_size=16, lr=5e-4))])]
            return cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                data=DataSpec(**d.get("data", {})),
                stages=stages,
                eval=EvalSpec(**d.get("eval", {})),
                ladder=LadderSpec(**d.get("ladder", {})),
                seed=d.get("seed", 0),
                out=d.get("out", "runs/default"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with the global seed fanned out to model init and data generation."""
        out = copy.deepcopy(self)
        out.seed = seed
        out.model.seed = seed
        out.data.seed = seed
        return out


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments to a nested config dict (values parsed as JSON when possible)."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = d
        for k in parts[:-1]:
            if isinstance(node, list):
                k = int(k)
                node = node[k]
                continue
            if k not in node or not isinstance(node[k], (dict, list)):
                raise ConfigError(f"override path {key!r} does not exist")
            node = node[k]
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_value(raw)
        else:
            if last not in node:
                raise ConfigError(f"override path {key!r} does not exist")
            node[last] = _parse_value(raw)
    return d


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    d = ExperimentConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        d = _merge(d, user)
    d = apply_overrides(d, overrides or [])
    cfg = ExperimentConfig.from_dict(d)
    cfg.validate()
    return cfg


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v)
        else:
            out[k] = v
    return out


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2))
    return path


def schema() -> dict:
    """Published JSON schema of the experiment configuration (types of every leaf)."""

    def describe(obj) -> dict:
        out = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if hasattr(v, "__dataclass_fields__"):
                out[f.name] = {"type": "object", "properties": describe(v)}
            elif isinstance(v, list) and v and hasattr(v[0], "__dataclass_fields__"):
                out[f.name] = {"type": "array", "items": {"type": "object", "properties": describe(v[0])}}
            else:
                out[f.name] = {"type": _json_type(v), "default": list(v) if isinstance(v, tuple) else v}
        return out

    return {"type": "object", "properties": describe(ExperimentConfig())}


def _json_type(v) -> str:
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, (list, tuple)):
        return "array"
    return "null"


__all__ = ["ExperimentConfig", "DataSpec", "EvalSpec", "LadderSpec", "load_config", "apply_overrides",
           "save_config", "schema", "VisionConfig", "TextConfig"]
