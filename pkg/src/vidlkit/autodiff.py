"""Differentiable-array substrate.

Model code never calls torch directly on differentiable data; it goes through the
primitives defined here.  Each primitive checks its output for NaN/Inf and raises
``NonFiniteError`` naming itself.  Inside :func:`forward_backward` (strict mode) a
torch function mode rejects any torch call on a gradient-carrying tensor made
outside a registered primitive, so an unknown operation fails as soon as it is
built into the graph rather than silently producing gradients.
"""

from __future__ import annotations

import builtins
import contextlib
import functools
import math
import threading
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

__all__ = [
    "PRIMITIVES",
    "NonFiniteError",
    "UnknownPrimitiveError",
    "ShapeError",
    "ParamStore",
    "GradReport",
    "forward_backward",
    "grad_check",
    "derived_seed",
]

PRIMITIVES = frozenset(
    {
        "matmul",
        "add",
        "mul",
        "div",
        "layer_norm",
        "softmax",
        "gelu",
        "embedding",
        "take",
        "temporal_conv",
        "reshape",
        "transpose",
        "broadcast_to",
        "slice",
        "concat",
        "mean",
        "sum",
        "l2_normalize",
        "cross_entropy",
    }
)


class NonFiniteError(FloatingPointError):
    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive '{primitive}'")
        self.primitive = primitive


class UnknownPrimitiveError(TypeError):
    pass


class ShapeError(ValueError):
    pass


_state = threading.local()


def _depth() -> int:
    return getattr(_state, "depth", 0)


def _check_finite() -> bool:
    return getattr(_state, "check_finite", True)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev = _check_finite()
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


def primitive(name: str) -> Callable:
    """Register ``fn`` as primitive ``name``; only names in PRIMITIVES are accepted."""
    if name not in PRIMITIVES:
        raise UnknownPrimitiveError(f"'{name}' is not a declared primitive")

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            _state.depth = _depth() + 1
            try:
                try:
                    out = fn(*args, **kwargs)
                except RuntimeError as exc:
                    # torch reports shape mismatches as RuntimeError
                    raise ShapeError(f"{name}: {exc}") from exc
                if _check_finite() and out.is_floating_point() and not torch.isfinite(out.detach()).all():
                    raise NonFiniteError(name)
            finally:
                _state.depth -= 1
            return out

        wrapper.primitive_name = name
        return wrapper

    return deco


_PASSTHROUGH = {
    "__get__",
    "size",
    "dim",
    "numel",
    "__len__",
    "item",
    "tolist",
    "detach",
    "__repr__",
    "__format__",
    "requires_grad_",
    "is_floating_point",
    "numpy",
    "clone",
    "__float__",
    "__int__",
    "__bool__",
}


class _StrictMode(TorchFunctionMode):
    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if _depth() == 0 and getattr(func, "__name__", "") not in _PASSTHROUGH:
            flat = list(args) + list(kwargs.values())
            if any(isinstance(a, torch.Tensor) and a.requires_grad for a in flat):
                raise UnknownPrimitiveError(
                    f"operation '{getattr(func, '__name__', func)}' is not a registered primitive"
                )
        return func(*args, **kwargs)


# ---------------------------------------------------------------- primitives


@primitive("matmul")
def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise RuntimeError(f"inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


@primitive("add")
def add(a, b):
    return torch.add(a, b)


@primitive("mul")
def mul(a, b):
    return torch.mul(a, b)


@primitive("div")
def div(a, b):
    return torch.div(a, b)


@primitive("layer_norm")
def layer_norm(x, gamma, beta, eps: float = 1e-6):
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


@primitive("softmax")
def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


@primitive("gelu")
def gelu(x):
    return F.gelu(x)


@primitive("embedding")
def embedding(table, ids):
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise RuntimeError(f"ids out of range for table of {table.shape[0]} rows")
    return F.embedding(ids, table)


@primitive("take")
def take(x, index, dim: int = 0):
    """Select entries of ``x`` along ``dim`` at integer ``index`` (1-D)."""
    index = torch.as_tensor(index, dtype=torch.long)
    n = x.shape[dim]
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= n):
        raise RuntimeError(f"index out of range for extent {n}")
    return torch.index_select(x, dim, index)


@primitive("temporal_conv")
def temporal_conv(x, weight, bias):
    """Depthwise 1-D convolution over axis -2 of ``x`` (..., T, C), zero padded."""
    *lead, t, c = x.shape
    k = weight.shape[1]
    if weight.shape[0] != c:
        raise RuntimeError(f"conv weight has {weight.shape[0]} channels, input {c}")
    y = x.reshape(-1, t, c).transpose(1, 2)
    y = F.conv1d(y, weight.unsqueeze(1), bias, padding=k // 2, groups=c)
    return y.transpose(1, 2).reshape(*lead, t, c)


@primitive("reshape")
def reshape(x, *shape):
    return x.reshape(*shape)


@primitive("transpose")
def transpose(x, *dims):
    return x.permute(*dims)


@primitive("broadcast_to")
def broadcast_to(x, *shape):
    return x.expand(*shape)


@primitive("slice")
def slice_(x, dim: int, start: int, stop: int):
    return x.narrow(dim, start, stop - start)


@primitive("concat")
def concat(xs, dim: int = 0):
    return torch.cat(list(xs), dim=dim)


@primitive("mean")
def mean(x, dim=None, keepdim: bool = False):
    if dim is None:
        return x.mean()
    return x.mean(dim=dim, keepdim=keepdim)


@primitive("sum")
def sum_(x, dim=None, keepdim: bool = False):
    if dim is None:
        return x.sum()
    return x.sum(dim=dim, keepdim=keepdim)


slice = slice_  # noqa: A001
sum = sum_  # noqa: A001


@primitive("l2_normalize")
def l2_normalize(x, dim: int = -1, eps: float = 1e-12):
    return F.normalize(x, dim=dim, eps=eps)


@primitive("cross_entropy")
def cross_entropy(logits, target):
    """Mean cross-entropy of ``logits`` (N, K) against integer targets (N,)."""
    target = torch.as_tensor(target, dtype=torch.long)
    if logits.shape[0] != target.shape[0]:
        raise RuntimeError(f"{logits.shape[0]} rows of logits vs {target.shape[0]} targets")
    return F.cross_entropy(logits, target)


# ---------------------------------------------------------------- parameters


def derived_seed(seed: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{name}".encode())


class ParamStore:
    """Ordered name -> tensor map with a per-entry trainable flag."""

    def __init__(self, items=(), trainable: Mapping[str, bool] | None = None):
        self._data: OrderedDict[str, torch.Tensor] = OrderedDict()
        self._trainable: dict[str, bool] = {}
        for name, value in dict(items).items() if isinstance(items, Mapping) else items:
            self.set(name, value, True if trainable is None else trainable.get(name, True))

    def set(self, name: str, value: torch.Tensor, trainable: bool = True) -> None:
        if not isinstance(value, torch.Tensor):
            value = torch.as_tensor(value)
        self._data[name] = value
        self._trainable[name] = trainable

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._data[name]
        except KeyError:
            raise KeyError(f"no parameter named '{name}'") from None

    def __setitem__(self, name: str, value: torch.Tensor) -> None:
        self.set(name, value, self._trainable.get(name, True))

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def values(self):
        return self._data.values()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self._data if self._trainable[n]]

    def with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self._data if n.startswith(prefix)]

    def num_values(self) -> int:
        return builtins.sum(t.numel() for t in self._data.values())

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamStore":
        out = ParamStore()
        for n, t in self._data.items():
            out.set(n, fn(t), self._trainable[n])
        return out

    def clone(self) -> "ParamStore":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return self.map(lambda t: t.detach().to(dtype, copy=True))

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.num_values()} values)"


def trunc_normal(shape, seed: int, name: str, std: float = 0.02, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(derived_seed(seed, name))
    out = torch.empty(shape, dtype=torch.float64)
    torch.nn.init.trunc_normal_(out, std=std, a=-2 * std, b=2 * std, generator=gen)
    return out.to(dtype)


# ---------------------------------------------------------------- evaluation


LossFn = Callable[[ParamStore, Mapping], torch.Tensor]


def _leaf_params(params: ParamStore) -> ParamStore:
    return params.map(lambda t: t.detach().requires_grad_(t.is_floating_point()))


def forward_backward(
    fn: LossFn, params: ParamStore, inputs: Mapping | None = None, strict: bool = True
) -> tuple[float, ParamStore]:
    """Evaluate scalar ``fn(params, inputs)`` and its gradient for every trainable parameter."""
    inputs = inputs if inputs is not None else {}
    leaves = ParamStore()
    for n, t in params.items():
        grad = params.is_trainable(n) and t.is_floating_point()
        leaves.set(n, t.detach().requires_grad_(grad), params.is_trainable(n))
    names = leaves.trainable_names()
    ctx = _StrictMode() if strict else contextlib.nullcontext()
    with ctx:
        loss = fn(leaves, inputs)
    if loss.dim() != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NonFiniteError("loss")
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    out = ParamStore()
    for n, g in zip(names, grads):
        out.set(n, torch.zeros_like(leaves[n]) if g is None else g.detach())
    return float(loss.detach()), out


@dataclass
class GradReport:
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)
    flagged: list[tuple[str, tuple]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tol:g}"]
        for n, err in self.max_rel_err.items():
            lines.append(f"  {n}: {err:.3e} at {self.worst_index[n]}")
        if self.flagged:
            lines.append(f"  flagged (non-differentiable): {len(self.flagged)} coordinates")
        return "\n".join(lines)


EPS_ABS = 1e-8


def relative_error(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), EPS_ABS)


def grad_check(
    fn: LossFn,
    params: ParamStore,
    inputs: Mapping | None = None,
    eps: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    analytic: ParamStore | None = None,
    order: int = 2,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``max_coords`` caps the number of perturbed coordinates per parameter (chosen
    with a fixed-seed RNG).  A coordinate whose one-sided slopes disagree by more
    than the two-sided tolerance sits on a kink; it is flagged and excluded.
    ``analytic`` overrides the gradient under test.  ``order=4`` uses the
    five-point central stencil, which tolerates a larger ``eps`` and so keeps
    round-off low on coordinates whose true gradient is zero.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    inputs = inputs if inputs is not None else {}
    params = params.to(torch.float64)
    if params.num_values() > 100_000 and max_coords is None:
        raise ValueError("too many parameters for exhaustive checking; pass max_coords")
    if analytic is None:
        _, analytic = forward_backward(fn, params, inputs)
    rng = np.random.default_rng(seed)
    report = GradReport(tol=tol)

    def evaluate(p: ParamStore) -> float:
        # per-primitive checks are redundant here: a non-finite input reaches the loss
        with torch.no_grad(), finite_checks(False):
            val = float(fn(p, inputs))
        if not math.isfinite(val):
            raise NonFiniteError("loss")
        return val

    def shifted(flat, c, orig, h) -> float:
        flat[c] = orig + h
        return evaluate(params)

    f0 = evaluate(params)
    for name in params.trainable_names():
        base = params[name]
        flat = base.reshape(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            coords = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
        worst, worst_at = 0.0, ()
        g = analytic[name].reshape(-1)
        for c in coords:
            orig = float(flat[c])
            fp, fm = shifted(flat, c, orig, eps), shifted(flat, c, orig, -eps)
            if order == 4:
                fp2, fm2 = shifted(flat, c, orig, 2 * eps), shifted(flat, c, orig, -2 * eps)
                fd = (8 * (fp - fm) - (fp2 - fm2)) / (12 * eps)
            else:
                fd = (fp - fm) / (2 * eps)
            flat[c] = orig
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            idx = tuple(int(i) for i in np.unravel_index(int(c), tuple(base.shape)))
            if relative_error(fwd, bwd) > 0.5 and abs(fwd - bwd) > 1e-3:
                report.flagged.append((name, idx))
                continue
            err = relative_error(float(g[c]), fd)
            if err >= worst:
                worst, worst_at = err, idx
        report.max_rel_err[name] = worst
        report.worst_index[name] = worst_at
    return report
