"""Tokenizer, unimodal text encoder, cross-modal fusion wirings and the VTM/MLM heads."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import layers as L
from . import vision as V
from .autodiff import ParamStore, trunc_normal
from .vision import ConfigError, VisionConfig

PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")
FUSION_MODES = ("None", "V2T", "T2V", "B")


class Vocabulary:
    """Bidirectional token/id map with the four reserved ids first."""

    def __init__(self, words: Iterable[str] = ()):
        self.tokens: list[str] = list(SPECIAL_TOKENS)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self._ids:
            self._ids[word] = len(self.tokens)
            self.tokens.append(word)
        return self._ids[word]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        return self._ids[word]

    def word(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        if tuple(lines[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: first four lines must be {SPECIAL_TOKENS}")
        if len(set(lines)) != len(lines):
            raise ValueError(f"{path}: duplicate tokens")
        return cls(lines[4:])

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i > MASK)


@dataclass
class TokenSeq:
    ids: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def tokenize(text: str, vocab: Vocabulary, pad_to: int | None = None) -> TokenSeq:
    words = text.split()
    unknown = [w for w in words if w not in vocab]
    if unknown:
        raise KeyError(f"out-of-vocabulary words: {', '.join(unknown)}")
    ids = [CLS] + [vocab.id(w) for w in words] + [SEP]
    n = len(ids)
    if pad_to is not None:
        if pad_to < n:
            raise ValueError(f"sequence of {n} tokens longer than pad length {pad_to}")
        ids += [PAD] * (pad_to - n)
    mask = np.zeros(len(ids), dtype=np.int64)
    mask[:n] = 1
    return TokenSeq(np.asarray(ids, dtype=np.int64), mask)


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary, pad_to: int | None = None):
    """Tokenize and pad to the batch maximum; returns (ids, mask) int64 tensors (B, S)."""
    seqs = [tokenize(t, vocab) for t in texts]
    width = max(len(s.ids) for s in seqs) if pad_to is None else pad_to
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros_like(ids)
    for i, s in enumerate(seqs):
        if len(s.ids) > width:
            raise ValueError(f"caption {texts[i]!r} longer than {width} tokens")
        ids[i, : len(s.ids)] = s.ids
        mask[i, : len(s.ids)] = 1
    return torch.from_numpy(ids), torch.from_numpy(mask)


@dataclass
class TextConfig:
    vocab_size: int = 64
    dim: int = 64
    unimodal_layers: int = 3
    fusion_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 32
    fusion_mode: str = "V2T"

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.fusion_mode != "None" and self.fusion_layers < 1:
            raise ConfigError("fusion requires at least one fusion layer")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def text_fusion(self) -> bool:
        return self.fusion_mode in ("V2T", "B")

    @property
    def video_fusion(self) -> bool:
        return self.fusion_mode in ("T2V", "B")


def init_params(store: ParamStore, cfg: TextConfig, proj_dim: int, seed: int, dtype=torch.float32) -> None:
    cfg.validate()
    d = cfg.dim
    store.set("text.tok_emb", trunc_normal((cfg.vocab_size, d), seed, "text.tok_emb", dtype=dtype))
    store.set("text.pos_emb", trunc_normal((cfg.max_len, d), seed, "text.pos_emb", dtype=dtype))
    L.init_norm(store, "text.emb_norm", d, dtype)
    n_total = cfg.unimodal_layers + (cfg.fusion_layers if cfg.text_fusion else 0)
    for i in range(n_total):
        init_text_layer(store, f"text.layers.{i}", cfg, seed, dtype, cross=i >= cfg.unimodal_layers)
    L.init_norm(store, "text.norm", d, dtype)
    if cfg.text_fusion:
        L.init_norm(store, "text.fusion_norm", d, dtype)
    L.init_linear(store, "text.proj", d, proj_dim, seed, dtype)


def init_text_layer(store, name, cfg: TextConfig, seed, dtype, cross: bool) -> None:
    d = cfg.dim
    L.init_norm(store, name + ".norm1", d, dtype)
    L.init_attention(store, name + ".attn", d, seed, dtype)
    if cross:
        L.init_norm(store, name + ".normx", d, dtype)
        L.init_attention(store, name + ".xattn", d, seed, dtype)
    L.init_norm(store, name + ".norm2", d, dtype)
    L.init_mlp(store, name + ".mlp", d, d * cfg.mlp_ratio, seed, dtype)


def text_layer(p, name, heads, x, self_bias, context=None, context_bias=None, tag="cross_v2t"):
    """Self-attention -> (cross-attention) -> MLP, each pre-normed with a residual."""
    L.note_block("self")
    x = ad.add(x, L.attention(p, name + ".attn", L.norm(p, name + ".norm1", x), heads=heads, bias=self_bias, tag="text_self"))
    if context is not None:
        L.note_block("cross")
        y = L.attention(p, name + ".xattn", L.norm(p, name + ".normx", x), context=context, heads=heads,
                        bias=context_bias, tag=tag)
        x = ad.add(x, y)
    L.note_block("mlp")
    return ad.add(x, L.mlp(p, name + ".mlp", L.norm(p, name + ".norm2", x)))


def embed_tokens(p: ParamStore, ids):
    ids = torch.as_tensor(ids, dtype=torch.long)
    b, s = ids.shape
    pos = p["text.pos_emb"]
    if s > pos.shape[0]:
        raise ValueError(f"sequence length {s} exceeds max_len {pos.shape[0]}")
    x = ad.add(ad.embedding(p["text.tok_emb"], ids), ad.slice(pos, 0, 0, s))
    return L.norm(p, "text.emb_norm", x)


def encode_text(p: ParamStore, cfg: TextConfig, ids, mask):
    """Unimodal text pass; returns (token states (B,S,D), unit-norm embedding)."""
    x = embed_tokens(p, ids)
    bias = L.key_padding_bias(torch.as_tensor(mask), x.dtype)
    for i in range(cfg.unimodal_layers):
        x = text_layer(p, f"text.layers.{i}", cfg.heads, x, bias)
    x = L.norm(p, "text.norm", x)
    b, s, d = x.shape
    cls = ad.reshape(ad.slice(x, 1, 0, 1), b, d)
    return x, ad.l2_normalize(L.linear(p, "text.proj", cls), -1)


@dataclass
class FusedStates:
    text: torch.Tensor
    video: torch.Tensor | None
    cls: torch.Tensor


def _flat_video(states):
    b, t, n1, d = states.shape
    return ad.reshape(states, b, t * n1, d)


def fuse(p: ParamStore, tcfg: TextConfig, vcfg: VisionConfig, text_states, text_mask, video_states,
         mode: str | None = None, image: bool = False) -> FusedStates:
    """Cross-modal fusion in the configured wiring.

    V2T: text queries attend to all video tokens in each fusion layer.
    T2V: video tokens attend to the text in the last vision layers.
    B:   both directions per layer, each reading the other's layer input.
    """
    mode = tcfg.fusion_mode if mode is None else mode
    if mode != tcfg.fusion_mode:
        raise ConfigError(f"fusion mode {mode!r} does not match configured {tcfg.fusion_mode!r}")
    text_mask = torch.as_tensor(text_mask)
    b, s, d = text_states.shape
    self_bias = L.key_padding_bias(text_mask, text_states.dtype)
    text_cls = lambda x: ad.reshape(ad.slice(x, 1, 0, 1), b, d)  # noqa: E731
    if mode == "None":
        return FusedStates(text_states, None, text_cls(text_states))
    x_t, x_v = text_states, video_states
    m = tcfg.fusion_layers
    xbias = L.key_padding_bias(text_mask, text_states.dtype)
    v_image = image or vcfg.temporal_mode == "TA-P"
    for j in range(m):
        t_name = f"text.layers.{tcfg.unimodal_layers + j}"
        v_name = f"vision.layers.{vcfg.layers + j}"
        if mode == "V2T":
            x_t = text_layer(p, t_name, tcfg.heads, x_t, self_bias, context=_flat_video(video_states))
        elif mode == "T2V":
            x_v = V.vision_layer(p, v_name, vcfg, x_v, image=v_image, context=x_t, context_bias=xbias)
        else:
            new_t = text_layer(p, t_name, tcfg.heads, x_t, self_bias, context=_flat_video(x_v))
            x_v = V.vision_layer(p, v_name, vcfg, x_v, image=v_image, context=x_t, context_bias=xbias)
            x_t = new_t
    if mode in ("V2T", "B"):
        x_t = L.norm(p, "text.fusion_norm", x_t)
    if mode in ("T2V", "B"):
        x_v = L.norm(p, "vision.fusion_norm", x_v)
    if mode == "T2V":
        bv, t, n1, _ = x_v.shape
        cls = ad.mean(ad.reshape(ad.slice(x_v, 2, 0, 1), bv, t, d), dim=1)
        return FusedStates(x_t, x_v, cls)
    return FusedStates(x_t, x_v if mode == "B" else None, text_cls(x_t))


def vtm_logit(p: ParamStore, fused: FusedStates):
    out = L.linear(p, "vtm_head", fused.cls)
    return ad.reshape(out, out.shape[0])


def mlm_logits(p: ParamStore, text_states, positions):
    """Vocabulary logits at flat positions ``b * S + s`` of fused text states (B,S,D)."""
    b, s, d = text_states.shape
    positions = torch.as_tensor(positions, dtype=torch.long).reshape(-1)
    if positions.numel() and (int(positions.min()) < 0 or int(positions.max()) >= b * s):
        raise IndexError(f"masked position out of range for {b}x{s} tokens")
    picked = ad.take(ad.reshape(text_states, b * s, d), positions, dim=0)
    return L.linear(p, "mlm_head", picked)
