"""Transformer building blocks expressed in the primitive set."""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field

import torch

from . import autodiff as ad
from .autodiff import ParamStore, trunc_normal

NEG_INF = -1e9


@dataclass
class Recorder:
    """Collects attention arrays produced while active (for shape and mask audits)."""

    keep_values: bool = False
    events: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    values: dict[str, list[torch.Tensor]] = field(default_factory=dict)
    blocks: list[str] = field(default_factory=list)

    def shapes(self, tag: str) -> list[tuple[int, ...]]:
        return [s for t, s in self.events if t == tag]


_recorder: contextvars.ContextVar[Recorder | None] = contextvars.ContextVar("recorder", default=None)


@contextlib.contextmanager
def recording(keep_values: bool = False):
    rec = Recorder(keep_values=keep_values)
    token = _recorder.set(rec)
    try:
        yield rec
    finally:
        _recorder.reset(token)


def note_block(name: str) -> None:
    rec = _recorder.get()
    if rec is not None:
        rec.blocks.append(name)


def _note(tag: str, arr: torch.Tensor) -> None:
    rec = _recorder.get()
    if rec is not None:
        rec.events.append((tag, tuple(arr.shape)))
        if rec.keep_values:
            rec.values.setdefault(tag, []).append(arr.detach())


# ---------------------------------------------------------------- init helpers


def init_linear(store: ParamStore, name: str, d_in: int, d_out: int, seed: int, dtype, zero=False):
    w = torch.zeros(d_in, d_out, dtype=dtype) if zero else trunc_normal((d_in, d_out), seed, name + ".w", dtype=dtype)
    store.set(name + ".w", w)
    store.set(name + ".b", torch.zeros(d_out, dtype=dtype))


def init_norm(store: ParamStore, name: str, dim: int, dtype):
    store.set(name + ".gamma", torch.ones(dim, dtype=dtype))
    store.set(name + ".beta", torch.zeros(dim, dtype=dtype))


def init_attention(store: ParamStore, name: str, dim: int, seed: int, dtype, zero_out=False):
    init_linear(store, name + ".q", dim, dim, seed, dtype)
    init_linear(store, name + ".k", dim, dim, seed, dtype)
    init_linear(store, name + ".v", dim, dim, seed, dtype)
    init_linear(store, name + ".o", dim, dim, seed, dtype, zero=zero_out)


def init_mlp(store: ParamStore, name: str, dim: int, hidden: int, seed: int, dtype):
    init_linear(store, name + ".fc1", dim, hidden, seed, dtype)
    init_linear(store, name + ".fc2", hidden, dim, seed, dtype)


# ---------------------------------------------------------------- forward pieces


def linear(p: ParamStore, name: str, x):
    return ad.add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])


def norm(p: ParamStore, name: str, x):
    return ad.layer_norm(x, p[name + ".gamma"], p[name + ".beta"])


def mlp(p: ParamStore, name: str, x):
    return linear(p, name + ".fc2", ad.gelu(linear(p, name + ".fc1", x)))


def _split_heads(x, heads: int):
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, b, n, heads, d // heads), 0, 2, 1, 3)


def attention(p: ParamStore, name: str, x, context=None, heads: int = 4, bias=None, tag: str = "self"):
    """Multi-head attention of queries ``x`` (B, N, D) over ``context`` (B, M, D).

    ``bias`` is an additive logit bias broadcastable to (B, heads, N, M); masking is
    expressed as a large negative bias.
    """
    context = x if context is None else context
    b, n, d = x.shape
    m = context.shape[1]
    q = _split_heads(linear(p, name + ".q", x), heads)
    k = _split_heads(linear(p, name + ".k", context), heads)
    v = _split_heads(linear(p, name + ".v", context), heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, 0, 1, 3, 2)), 1.0 / math.sqrt(d // heads))
    if bias is not None:
        scores = ad.add(scores, bias)
    _note(tag, scores)
    probs = ad.softmax(scores, -1)
    rec = _recorder.get()
    if rec is not None and rec.keep_values:
        rec.values.setdefault(tag + ".probs", []).append(probs.detach())
    out = ad.reshape(ad.transpose(ad.matmul(probs, v), 0, 2, 1, 3), b, n, d)
    return linear(p, name + ".o", out)


def key_padding_bias(mask: torch.Tensor, dtype) -> torch.Tensor:
    """(B, M) 1/0 key mask -> additive bias (B, 1, 1, M)."""
    return ((1.0 - mask.to(dtype)) * NEG_INF)[:, None, None, :]
