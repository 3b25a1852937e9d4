"""Patch-based video encoder with selectable temporal modelling.

Token states are carried as (B, T, N1, D): batch, frame, per-frame token (index 0 is
the frame's classification token), channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import autodiff as ad
from . import layers as L
from .autodiff import ParamStore, trunc_normal

TEMPORAL_MODES = ("MP", "L-TA", "TC", "TA", "TA-P", "WA")
# modes whose temporal sub-block sits inside every layer, before spatial attention
IN_LAYER_MODES = ("TC", "TA", "TA-P", "WA")


class ConfigError(ValueError):
    pass


@dataclass
class VisionConfig:
    image_size: int = 16
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    layers: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    temporal_mode: str = "TA"
    window: int | None = None
    prompts: int = 4
    tc_hidden: int = 384
    late_layers: int = 2
    num_frames: int = 4
    proj_dim: int = 64
    zero_init_temporal: bool = False

    def validate(self) -> None:
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"unknown temporal_mode {self.temporal_mode!r}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.temporal_mode == "WA":
            if self.window is None:
                raise ConfigError("WA requires a window size")
            if not 1 <= self.window <= self.grid:
                raise ConfigError(f"window {self.window} outside [1, {self.grid}]")
        if self.prompts < 1:
            raise ConfigError("prompt count must be >= 1")
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


# ---------------------------------------------------------------- parameters


def layer_names(cfg: VisionConfig, extra_fusion_layers: int = 0) -> list[str]:
    return [f"vision.layers.{i}" for i in range(cfg.layers + extra_fusion_layers)]


def init_params(
    store: ParamStore, cfg: VisionConfig, seed: int, dtype=torch.float32, fusion_layers: int = 0
) -> None:
    """Add vision parameters; ``fusion_layers`` extra layers carry cross-attention (T2V)."""
    cfg.validate()
    d, zero_t = cfg.dim, cfg.zero_init_temporal
    patch_in = cfg.patch_size * cfg.patch_size * cfg.channels
    L.init_linear(store, "vision.patch", patch_in, d, seed, dtype)
    store.set("vision.cls", trunc_normal((d,), seed, "vision.cls", dtype=dtype))
    store.set("vision.mask_token", trunc_normal((d,), seed, "vision.mask_token", dtype=dtype))
    tpos = torch.zeros(cfg.num_frames, d, dtype=dtype) if zero_t else trunc_normal(
        (cfg.num_frames, d), seed, "vision.temporal_pos", dtype=dtype
    )
    store.set("vision.temporal_pos", tpos)
    g = cfg.grid
    n_rel = (2 * g - 1) ** 2 + 3
    for i, name in enumerate(layer_names(cfg, fusion_layers)):
        store.set(name + ".rel_bias", torch.zeros(cfg.heads, n_rel, dtype=dtype))
        _init_temporal(store, cfg, name, seed, dtype)
        L.init_norm(store, name + ".norm1", d, dtype)
        L.init_attention(store, name + ".attn", d, seed, dtype)
        if i >= cfg.layers:
            L.init_norm(store, name + ".normx", d, dtype)
            L.init_attention(store, name + ".xattn", d, seed, dtype)
        L.init_norm(store, name + ".norm2", d, dtype)
        L.init_mlp(store, name + ".mlp", d, d * cfg.mlp_ratio, seed, dtype)
    if cfg.temporal_mode == "L-TA":
        for j in range(cfg.late_layers):
            name = f"vision.late.{j}"
            L.init_norm(store, name + ".norm1", d, dtype)
            L.init_attention(store, name + ".attn", d, seed, dtype, zero_out=zero_t)
            L.init_norm(store, name + ".norm2", d, dtype)
            L.init_mlp(store, name + ".mlp", d, d * cfg.mlp_ratio, seed, dtype)
            if zero_t:
                store.set(name + ".mlp.fc2.w", torch.zeros(d * cfg.mlp_ratio, d, dtype=dtype))
    if cfg.temporal_mode == "TA-P":
        store.set(
            "vision.prompts",
            trunc_normal((cfg.prompts, d), seed, "vision.prompts", dtype=dtype),
        )
    L.init_norm(store, "vision.norm", d, dtype)
    if fusion_layers:
        L.init_norm(store, "vision.fusion_norm", d, dtype)
    L.init_linear(store, "vision.proj", d, cfg.proj_dim, seed, dtype)


def _init_temporal(store: ParamStore, cfg: VisionConfig, name: str, seed: int, dtype) -> None:
    d, mode, zero = cfg.dim, cfg.temporal_mode, cfg.zero_init_temporal
    t = name + ".temporal"
    if mode in ("TA", "TA-P", "WA"):
        L.init_norm(store, t + ".norm", d, dtype)
        L.init_attention(store, t + ".attn", d, seed, dtype, zero_out=zero)
    elif mode == "TC":
        L.init_norm(store, t + ".norm", d, dtype)
        L.init_linear(store, t + ".down", d, cfg.tc_hidden, seed, dtype)
        store.set(t + ".conv.w", trunc_normal((cfg.tc_hidden, 3), seed, t + ".conv.w", dtype=dtype))
        store.set(t + ".conv.b", torch.zeros(cfg.tc_hidden, dtype=dtype))
        L.init_linear(store, t + ".up", cfg.tc_hidden, d, seed, dtype, zero=zero)


def is_temporal_param(name: str) -> bool:
    return (
        ".temporal." in name
        or name.startswith("vision.late.")
        or name in ("vision.prompts", "vision.temporal_pos")
    )


# ---------------------------------------------------------------- positional embeddings


def extend_temporal_pos(pos: torch.Tensor, target: int) -> torch.Tensor:
    """Zero-pad a (T, D) temporal position table to ``target`` rows."""
    t = pos.shape[0]
    if target <= t:
        raise ValueError(f"target {target} must exceed current frame count {t}")
    pad = torch.zeros(target - t, pos.shape[1], dtype=pos.dtype)
    return torch.cat([pos.detach(), pad], dim=0)


def interp_temporal_pos(pos: torch.Tensor, target: int) -> torch.Tensor:
    """Linearly resample a (T, D) table to ``target`` rows; endpoints are kept exactly."""
    t = pos.shape[0]
    if t < 2:
        raise ValueError("interpolation needs at least 2 source rows")
    if target < 2:
        raise ValueError("interpolation target must be >= 2")
    pos = pos.detach()
    if target == t:
        return pos.clone()
    out = torch.empty(target, pos.shape[1], dtype=pos.dtype)
    for i in range(target):
        x = i * (t - 1) / (target - 1)
        lo = min(int(np.floor(x)), t - 2)
        w = x - lo
        if w == 0.0:
            out[i] = pos[lo]
        elif w == 1.0:
            out[i] = pos[lo + 1]
        else:
            out[i] = (1 - w) * pos[lo] + w * pos[lo + 1]
    return out


def interp_spatial_bias(table: torch.Tensor, old_grid: int, new_grid: int) -> torch.Tensor:
    """Bilinearly resize a (heads, (2g-1)^2 + 3) relative-bias table to a new grid."""
    heads = table.shape[0]
    side_old, side_new = 2 * old_grid - 1, 2 * new_grid - 1
    rel = table[:, : side_old * side_old].reshape(1, heads, side_old, side_old)
    rel = F.interpolate(rel.detach(), size=(side_new, side_new), mode="bilinear", align_corners=True)
    return torch.cat([rel.reshape(heads, -1), table[:, side_old * side_old :].detach()], dim=1)


def _rel_index(grid: int) -> torch.Tensor:
    n = grid * grid
    side = 2 * grid - 1
    rows, cols = np.divmod(np.arange(n), grid)
    dr = rows[:, None] - rows[None, :] + grid - 1
    dc = cols[:, None] - cols[None, :] + grid - 1
    idx = np.empty((n + 1, n + 1), dtype=np.int64)
    idx[1:, 1:] = dr * side + dc
    base = side * side
    idx[0, 1:] = base
    idx[1:, 0] = base + 1
    idx[0, 0] = base + 2
    return torch.from_numpy(idx.reshape(-1))


def spatial_bias(p: ParamStore, name: str, cfg: VisionConfig, extra: int = 0):
    """(heads, N1, N1) additive bias; ``extra`` trailing prompt tokens get zero bias."""
    n1 = cfg.num_patches + 1
    bias = ad.reshape(ad.take(p[name + ".rel_bias"], _rel_index(cfg.grid), dim=1), cfg.heads, n1, n1)
    if extra:
        dtype = bias.dtype
        bias = ad.concat([bias, torch.zeros(cfg.heads, n1, extra, dtype=dtype)], dim=2)
        bias = ad.concat([bias, torch.zeros(cfg.heads, extra, n1 + extra, dtype=dtype)], dim=1)
    return bias


# ---------------------------------------------------------------- patchify


def as_batch(video) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(video)) if not isinstance(video, torch.Tensor) else video
    if v.dim() == 4:
        v = v.unsqueeze(0)
    if v.dim() != 5:
        raise ValueError(f"expected (T,H,W,C) or (B,T,H,W,C) video, got shape {tuple(v.shape)}")
    return v


def patchify(video, cfg: VisionConfig, p: ParamStore, patch_mask=None, add_temporal_pos: bool | None = None):
    """Video (B,T,H,W,C) -> tokens (B,T,N+1,D).

    ``patch_mask`` (B,T,N) of 0/1 replaces masked patch embeddings by the learned
    mask token.
    """
    v = as_batch(video)
    b, t, h, w, c = v.shape
    ps = cfg.patch_size
    if h % ps or w % ps:
        raise ConfigError(f"frame size {h}x{w} not divisible by patch size {ps}")
    if c != cfg.channels:
        raise ConfigError(f"expected {cfg.channels} channels, got {c}")
    dtype = p["vision.patch.w"].dtype
    v = v.to(dtype)
    gh, gw = h // ps, w // ps
    x = v.reshape(b, t, gh, ps, gw, ps, c).permute(0, 1, 2, 4, 3, 5, 6).reshape(b, t, gh * gw, ps * ps * c)
    x = L.linear(p, "vision.patch", x)
    if patch_mask is not None:
        m = torch.as_tensor(patch_mask, dtype=dtype)[..., None]
        x = ad.add(ad.mul(x, 1.0 - m), ad.mul(ad.broadcast_to(p["vision.mask_token"], *x.shape), m))
    cls = ad.broadcast_to(ad.reshape(p["vision.cls"], 1, 1, 1, cfg.dim), b, t, 1, cfg.dim)
    x = ad.concat([cls, x], dim=2)
    if add_temporal_pos is None:
        add_temporal_pos = cfg.temporal_mode != "MP"
    if add_temporal_pos:
        rows = p["vision.temporal_pos"].shape[0]
        if t > rows:
            raise ConfigError(f"{t} frames but temporal position table has {rows} rows")
        pos = ad.take(p["vision.temporal_pos"], torch.arange(t), dim=0)
        x = ad.add(x, ad.reshape(pos, 1, t, 1, cfg.dim))
    return x


# ---------------------------------------------------------------- temporal sub-blocks


def _wa_bias(cfg: VisionConfig, t: int, n1: int, dtype) -> torch.Tensor:
    g, k = cfg.grid, cfg.window
    groups = np.empty(n1, dtype=np.int64)
    groups[0] = -1
    rows, cols = np.divmod(np.arange(n1 - 1), g)
    groups[1:] = (rows // k) * g + (cols // k)
    groups = np.tile(groups, t)
    allowed = groups[:, None] == groups[None, :]
    return torch.from_numpy(np.where(allowed, 0.0, L.NEG_INF)).to(dtype)


def temporal_block(p: ParamStore, name: str, cfg: VisionConfig, x):
    mode = cfg.temporal_mode
    t_name = name + ".temporal"
    b, t, n1, d = x.shape
    L.note_block("temporal")
    if mode == "TA":
        y = ad.reshape(ad.transpose(x, 0, 2, 1, 3), b * n1, t, d)
        y = L.attention(p, t_name + ".attn", L.norm(p, t_name + ".norm", y), heads=cfg.heads, tag="temporal")
        return ad.add(x, ad.transpose(ad.reshape(y, b, n1, t, d), 0, 2, 1, 3))
    if mode == "WA":
        if cfg.window > cfg.grid:
            raise ConfigError(f"window {cfg.window} exceeds grid extent {cfg.grid}")
        y = ad.reshape(x, b, t * n1, d)
        bias = _wa_bias(cfg, t, n1, x.dtype)
        y = L.attention(p, t_name + ".attn", L.norm(p, t_name + ".norm", y), heads=cfg.heads, bias=bias, tag="temporal")
        return ad.add(x, ad.reshape(y, b, t, n1, d))
    if mode == "TA-P":
        n_img = n1 - cfg.prompts
        img = ad.slice(x, 2, 0, n_img)
        pr = ad.reshape(ad.slice(x, 2, n_img, n1), b, t * cfg.prompts, d)
        y = L.attention(p, t_name + ".attn", L.norm(p, t_name + ".norm", pr), heads=cfg.heads, tag="temporal")
        pr = ad.add(pr, y)
        return ad.concat([img, ad.reshape(pr, b, t, cfg.prompts, d)], dim=2)
    if mode == "TC":
        y = ad.transpose(L.norm(p, t_name + ".norm", x), 0, 2, 1, 3)
        y = L.linear(p, t_name + ".down", y)
        y = ad.gelu(ad.temporal_conv(y, p[t_name + ".conv.w"], p[t_name + ".conv.b"]))
        y = L.linear(p, t_name + ".up", y)
        return ad.add(x, ad.transpose(y, 0, 2, 1, 3))
    raise ConfigError(f"mode {mode} has no in-layer temporal block")


def block_sequence(cfg: VisionConfig, fused: bool = False, image: bool = False) -> list[str]:
    """Order of residual sub-blocks inside one vision layer."""
    seq = []
    if cfg.temporal_mode in IN_LAYER_MODES and not image:
        seq.append("temporal")
    seq.append("spatial")
    if fused:
        seq.append("cross")
    seq.append("mlp")
    return seq


def vision_layer(p, name, cfg: VisionConfig, x, image=False, context=None, context_bias=None, prompts=0):
    b, t, n1, d = x.shape
    for block in block_sequence(cfg, fused=context is not None, image=image):
        if block == "temporal":
            if cfg.temporal_mode == "TA-P" and not prompts:
                continue
            x = temporal_block(p, name, cfg, x)
        elif block == "spatial":
            L.note_block("spatial")
            y = ad.reshape(L.norm(p, name + ".norm1", x), b * t, n1, d)
            bias = spatial_bias(p, name, cfg, extra=prompts)
            y = L.attention(p, name + ".attn", y, heads=cfg.heads, bias=bias, tag="spatial")
            x = ad.add(x, ad.reshape(y, b, t, n1, d))
        elif block == "cross":
            L.note_block("cross")
            y = ad.reshape(L.norm(p, name + ".normx", x), b, t * n1, d)
            y = L.attention(p, name + ".xattn", y, context=context, heads=cfg.heads, bias=context_bias, tag="cross_t2v")
            x = ad.add(x, ad.reshape(y, b, t, n1, d))
        else:
            L.note_block("mlp")
            x = ad.add(x, L.mlp(p, name + ".mlp", L.norm(p, name + ".norm2", x)))
    return x


def _late_layers(p, cfg: VisionConfig, cls):
    b, t, d = cls.shape
    for j in range(cfg.late_layers):
        name = f"vision.late.{j}"
        L.note_block("late")
        cls = ad.add(cls, L.attention(p, name + ".attn", L.norm(p, name + ".norm1", cls), heads=cfg.heads, tag="late"))
        cls = ad.add(cls, L.mlp(p, name + ".mlp", L.norm(p, name + ".norm2", cls)))
    return cls


# ---------------------------------------------------------------- encoders


def encode_tokens(p: ParamStore, cfg: VisionConfig, video, bypass_temporal: bool = False, patch_mask=None):
    """Run the unimodal encoder; returns normalised token states (B,T,N+1,D)."""
    x = patchify(video, cfg, p, patch_mask=patch_mask)
    b, t, n1, d = x.shape
    prompts = 0
    if cfg.temporal_mode == "TA-P" and not bypass_temporal:
        prompts = cfg.prompts
        pr = ad.broadcast_to(ad.reshape(p["vision.prompts"], 1, 1, prompts, d), b, t, prompts, d)
        if p["vision.temporal_pos"].shape[0] >= t:
            pos = ad.take(p["vision.temporal_pos"], torch.arange(t), dim=0)
            pr = ad.add(pr, ad.reshape(pos, 1, t, 1, d))
        x = ad.concat([x, pr], dim=2)
    for i in range(cfg.layers):
        x = vision_layer(p, f"vision.layers.{i}", cfg, x, image=bypass_temporal, prompts=prompts)
    if prompts:
        x = ad.slice(x, 2, 0, n1)
    if cfg.temporal_mode == "L-TA" and not bypass_temporal:
        cls = _late_layers(p, cfg, ad.reshape(ad.slice(x, 2, 0, 1), b, t, d))
        x = ad.concat([ad.reshape(cls, b, t, 1, d), ad.slice(x, 2, 1, n1)], dim=2)
    return L.norm(p, "vision.norm", x)


def readout(p: ParamStore, states, proj: str = "vision.proj"):
    """Mean of per-frame classification tokens, projected and L2-normalised."""
    b, t, n1, d = states.shape
    cls = ad.mean(ad.reshape(ad.slice(states, 2, 0, 1), b, t, d), dim=1)
    return ad.l2_normalize(L.linear(p, proj, cls), -1)


def encode_video(p: ParamStore, cfg: VisionConfig, video, bypass_temporal: bool = False, patch_mask=None):
    states = encode_tokens(p, cfg, video, bypass_temporal=bypass_temporal, patch_mask=patch_mask)
    return states, readout(p, states)


def encode_image(p: ParamStore, cfg: VisionConfig, image):
    v = as_batch(image)
    if v.shape[1] != 1:
        raise ValueError(f"images must have exactly one frame, got {v.shape[1]}")
    return encode_video(p, cfg, v, bypass_temporal=True)


def fuse_video(p: ParamStore, cfg: VisionConfig, states, text_states, text_mask, m: int, image=False):
    """T2V fusion: run the last ``m`` vision layers with cross-attention to the text."""
    bias = L.key_padding_bias(text_mask, states.dtype)
    x = states
    for j in range(m):
        x = vision_layer(p, f"vision.layers.{cfg.layers + j}", cfg, x, image=image or cfg.temporal_mode == "TA-P",
                         context=text_states, context_bias=bias)
    return L.norm(p, "vision.fusion_norm", x)
