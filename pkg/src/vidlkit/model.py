"""Model configuration and the dual-encoder + fusion container."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import torch

from . import layers as L
from . import text as T
from . import vision as V
from .autodiff import ParamStore
from .text import TextConfig
from .vision import ConfigError, VisionConfig

OBJECTIVES = ("VTC", "VTM", "MLM", "MVM")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    objectives: tuple[str, ...] = ("VTC", "VTM", "MLM")
    mlm_ratio: float = 0.5
    mvm_ratio: float = 0.75
    codebook_size: int = 16
    temperature: float = 0.07
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        self.vision.validate()
        self.text.validate()
        unknown = set(self.objectives) - set(OBJECTIVES)
        if unknown:
            raise ConfigError(f"unknown objectives {sorted(unknown)}")
        if self.text.fusion_mode == "None":
            for obj in ("VTM", "MLM"):
                if obj in self.objectives:
                    raise ConfigError(f"{obj} requires a fusion mode other than None")
        if self.vision.dim != self.text.dim:
            raise ConfigError("vision and text dims must match for cross-attention")
        if self.mlm_ratio not in (0.15, 0.5, 0.75):
            raise ConfigError(f"mlm_ratio must be one of 0.15, 0.5, 0.75 (got {self.mlm_ratio})")
        if not 0.0 < self.mvm_ratio < 1.0:
            raise ConfigError("mvm_ratio must lie in (0, 1)")
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least 2 codes")
        if not 0.001 <= self.temperature <= 0.5:
            raise ConfigError("temperature must lie in [0.001, 0.5]")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objectives"] = list(self.objectives)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        vis = VisionConfig(**d.pop("vision", {}))
        txt = TextConfig(**d.pop("text", {}))
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        if "objectives" in d:
            d["objectives"] = tuple(d["objectives"])
        return cls(vision=vis, text=txt, **d)


def config_diff(a: ModelConfig, b: ModelConfig, prefix: str = "") -> list[str]:
    """Dotted names of fields that differ between two configs."""
    da, db = a.to_dict(), b.to_dict()
    out = []

    def walk(x, y, path):
        if isinstance(x, dict) and isinstance(y, dict):
            for k in sorted(set(x) | set(y)):
                walk(x.get(k), y.get(k), f"{path}{k}.")
        elif x != y:
            out.append(path.rstrip("."))

    walk(da, db, prefix)
    return out


def init_params(cfg: ModelConfig) -> ParamStore:
    cfg.validate()
    dtype, seed = cfg.torch_dtype, cfg.seed
    store = ParamStore()
    V.init_params(store, cfg.vision, seed, dtype, fusion_layers=cfg.text.fusion_layers if cfg.text.video_fusion else 0)
    T.init_params(store, cfg.text, cfg.vision.proj_dim, seed, dtype)
    d = cfg.text.dim
    if cfg.text.fusion_mode != "None":
        L.init_linear(store, "vtm_head", d, 1, seed, dtype)
        L.init_linear(store, "mlm_head", d, cfg.text.vocab_size, seed, dtype)
    if "MVM" in cfg.objectives:
        L.init_linear(store, "mvm_head", d, cfg.codebook_size, seed, dtype)
    store.set("temp", torch.tensor(cfg.temperature, dtype=dtype))
    return store


class VideoTextModel:
    """Configuration plus parameters; all forward methods are pure given ``params``."""

    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, codebook=None):
        cfg.validate()
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        self.codebook = codebook

    @property
    def vcfg(self) -> VisionConfig:
        return self.cfg.vision

    @property
    def tcfg(self) -> TextConfig:
        return self.cfg.text

    def with_params(self, params: ParamStore) -> "VideoTextModel":
        m = VideoTextModel.__new__(VideoTextModel)
        m.cfg, m.params, m.codebook = self.cfg, params, self.codebook
        return m

    def clone(self) -> "VideoTextModel":
        return VideoTextModel(copy.deepcopy(self.cfg), self.params.clone(), self.codebook)

    def encode_video(self, videos, image: bool = False, patch_mask=None, params=None):
        p = self.params if params is None else params
        return V.encode_video(p, self.vcfg, videos, bypass_temporal=image, patch_mask=patch_mask)

    def encode_text(self, ids, mask, params=None):
        p = self.params if params is None else params
        return T.encode_text(p, self.tcfg, ids, mask)

    def fuse(self, text_states, mask, video_states, image: bool = False, params=None):
        p = self.params if params is None else params
        return T.fuse(p, self.tcfg, self.vcfg, text_states, mask, video_states, image=image)

    def temperature(self, params=None):
        p = self.params if params is None else params
        return p["temp"]

    def clamp_temperature(self) -> None:
        with torch.no_grad():
            self.params["temp"].clamp_(0.001, 0.5)

    def vtm_logits(self, video_states, text_states, mask, image: bool = False, params=None):
        p = self.params if params is None else params
        fused = self.fuse(text_states, mask, video_states, image=image, params=p)
        return T.vtm_logit(p, fused)

    def set_num_frames(self, n: int) -> None:
        """Resize the temporal position table: zero-pad when growing."""
        pos = self.params["vision.temporal_pos"]
        if n > pos.shape[0]:
            self.params["vision.temporal_pos"] = V.extend_temporal_pos(pos, n)
        elif n < pos.shape[0]:
            raise ValueError("frame count may not decrease")
        self.vcfg.num_frames = n

    def interpolate_frames(self, n: int) -> "VideoTextModel":
        """Copy of the model with temporal positions linearly resampled to ``n`` rows."""
        m = self.clone()
        pos = m.params["vision.temporal_pos"]
        if n != pos.shape[0]:
            if pos.shape[0] == 1:
                # no interpolation axis: fall back to zero padding
                m.params["vision.temporal_pos"] = V.extend_temporal_pos(pos, n)
            else:
                m.params["vision.temporal_pos"] = V.interp_temporal_pos(pos, n)
        m.cfg.vision.num_frames = n
        return m


def build_model(cfg: ModelConfig) -> VideoTextModel:
    return VideoTextModel(cfg)


def parameter_count(params: ParamStore) -> int:
    return params.num_values()


__all__ = ["ModelConfig", "VideoTextModel", "build_model", "init_params", "config_diff", "OBJECTIVES"]
