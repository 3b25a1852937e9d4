"""Optimisation loop, frame curricula and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .autodiff import ParamStore, forward_backward
from .data import JointBatcher
from .model import ModelConfig, VideoTextModel, config_diff
from .objectives import Codebook, RngStreams, total_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass
class StageConfig:
    frames: int = 4
    epochs: float = 10
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 1
    batch_size: int = 32
    objectives: tuple[str, ...] = ("VTC", "VTM", "MLM")
    weight_decay: float = 0.02

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("stage frame count must be >= 1")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup longer than the stage")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (contrastive negatives)")

    def total_steps(self, steps_per_epoch: int) -> int:
        return max(1, int(round(self.epochs * steps_per_epoch)))

    def warmup_steps(self, steps_per_epoch: int) -> int:
        return int(round(self.warmup_epochs * steps_per_epoch))


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def decays(name: str, tensor: torch.Tensor) -> bool:
    """Weight decay applies to matrices only; gains, biases and the temperature are exempt."""
    return tensor.dim() >= 2 and not name.endswith("rel_bias")


def adamw_step(params: ParamStore, grads: ParamStore, state: OptimState, lr: float, wd: float = 0.02,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, decay_filter=decays) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    state.step += 1
    t = state.step
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            if wd and (decay_filter is None or decay_filter(name, p)):
                p.mul_(1 - lr * wd)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float) -> float:
    """Linear warmup from 0, then cosine decay reaching ``min_lr`` at the final step."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    last = total_steps - 1
    if last <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (last - warmup_steps))
    if progress == 1.0:
        return min_lr
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- stage loop


@dataclass
class StepRecord:
    step: int
    lr: float
    losses: dict[str, float]
    modality: str


class Trainer:
    """Runs one stage; holds everything needed to stop and resume bit-exactly."""

    def __init__(self, model: VideoTextModel, batcher: JointBatcher, stage: StageConfig, seed: int,
                 optim: OptimState | None = None):
        stage.validate()
        self.model = model
        self.batcher = batcher
        self.stage = stage
        self.rngs = RngStreams(seed)
        self.optim = optim or OptimState()
        self.step = 0
        self.log: list[StepRecord] = []
        batcher.frames = stage.frames

    @property
    def total_steps(self) -> int:
        return self.stage.total_steps(self.batcher.steps_per_epoch)

    @property
    def warmup_steps(self) -> int:
        return self.stage.warmup_steps(self.batcher.steps_per_epoch)

    def train_step(self) -> StepRecord:
        batch = next(self.batcher)
        holder = {}

        def fn(p, _inputs):
            br = total_loss(self.model, batch, self.stage.objectives, self.rngs, params=p)
            holder["br"] = br
            return br.total

        try:
            _, grads = forward_backward(fn, self.model.params, strict=False)
        except FloatingPointError as exc:
            raise TrainingDiverged(self.step, str(exc)) from exc
        lr = lr_at(self.step, self.total_steps, self.warmup_steps, self.stage.lr, self.stage.min_lr)
        adamw_step(self.model.params, grads, self.optim, lr, self.stage.weight_decay)
        self.model.clamp_temperature()
        rec = StepRecord(self.step, lr, holder["br"].as_floats(), batch.modality)
        self.log.append(rec)
        self.step += 1
        return rec

    def run(self, until: int | None = None) -> list[StepRecord]:
        stop = self.total_steps if until is None else min(until, self.total_steps)
        while self.step < stop:
            rec = self.train_step()
            if rec.step % 50 == 0:
                log.debug("step %d lr %.2e loss %.4f", rec.step, rec.lr, rec.losses["total"])
        return self.log

    def state(self) -> dict:
        return {"step": self.step, "rngs": self.rngs.state(), "batcher": self.batcher.state(),
                "stage": _jsonable(asdict(self.stage))}

    def set_state(self, state: dict) -> None:
        self.step = state["step"]
        self.rngs.set_state(state["rngs"])
        self.batcher.set_state(state["batcher"])


def run_stage(model: VideoTextModel, batcher: JointBatcher, stage: StageConfig, seed: int = 0):
    """Train ``model`` in place for one stage; returns (model, per-step log)."""
    model.set_num_frames(max(stage.frames, model.params["vision.temporal_pos"].shape[0]))
    trainer = Trainer(model, batcher, stage, seed)
    trainer.run()
    return model, trainer.log


def run_curriculum(model: VideoTextModel, stages: Sequence[StageConfig],
                   batcher_factory: Callable[[StageConfig], JointBatcher], seed: int = 0,
                   on_stage_start: Callable[[int, VideoTextModel], None] | None = None):
    """Consecutive stages with non-decreasing frame counts.

    When the frame count grows, the temporal position table is zero-padded; every
    other parameter carries over unchanged.
    """
    frames = [s.frames for s in stages]
    if any(b < a for a, b in zip(frames, frames[1:])):
        raise ValueError(f"curriculum frame counts must not decrease: {frames}")
    logs = []
    for i, stage in enumerate(stages):
        rows = model.params["vision.temporal_pos"].shape[0]
        if stage.frames > rows:
            model.set_num_frames(stage.frames)
        if on_stage_start is not None:
            on_stage_start(i, model)
        _, stage_log = run_stage(model, batcher_factory(stage), stage, seed=seed + i)
        logs.append(stage_log)
    return model, logs


# ---------------------------------------------------------------- checkpoints


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    return x


_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}
_NAME_DTYPES = {v: k for k, v in _DTYPE_NAMES.items()}


def save_checkpoint(model: VideoTextModel, path, optim: OptimState | None = None, record: dict | None = None) -> Path:
    """Write config.json, manifest.txt, weights.bin and state.json under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, torch.Tensor]] = list(model.params.items())
    if optim is not None:
        tensors += [(f"optim.m.{n}", t) for n, t in optim.m.items()]
        tensors += [(f"optim.v.{n}", t) for n, t in optim.v.items()]
    if model.codebook is not None and model.codebook.fitted:
        tensors.append(("codebook.centroids", torch.from_numpy(model.codebook.centroids)))
    lines, offset = [], 0
    with open(root / "weights.bin", "wb") as fh:
        for name, t in tensors:
            arr = t.detach().contiguous().numpy()
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            shape = ",".join(str(s) for s in arr.shape) or "-"
            lines.append(f"{name} {_DTYPE_NAMES[t.dtype]} {shape} {offset} {len(raw)}")
            fh.write(raw)
            offset += len(raw)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    (root / "config.json").write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True))
    state = {"seed": model.cfg.seed, "optim_step": optim.step if optim else None,
             "codebook_patch_size": model.codebook.patch_size if model.codebook is not None else None,
             "trainable": {n: model.params.is_trainable(n) for n in model.params}}
    state.update(_jsonable(record or {}))
    (root / "state.json").write_text(json.dumps(state))
    return root


def _read_manifest(root: Path) -> list[tuple[str, str, tuple[int, ...], int, int]]:
    entries = []
    for k, line in enumerate((root / "manifest.txt").read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise CheckpointError(f"manifest line {k + 1} malformed: {line!r}")
        name, dtype, shape, off, length = parts
        if dtype not in _NAME_DTYPES:
            raise CheckpointError(f"manifest line {k + 1}: unknown dtype {dtype}")
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        entries.append((name, dtype, dims, int(off), int(length)))
    return entries


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return (model, optim state or None, state record); bit-exact inverse of save."""
    root = Path(path)
    cfg = ModelConfig.from_dict(json.loads((root / "config.json").read_text()))
    if expected is not None:
        diff = config_diff(expected, cfg)
        if diff:
            raise CheckpointError(f"checkpoint config differs in: {', '.join(diff)}")
    entries = _read_manifest(root)
    blob = (root / "weights.bin").read_bytes()
    end = 0
    for name, _dtype, _dims, off, length in sorted(entries, key=lambda e: e[3]):
        if off < end:
            raise CheckpointError(f"overlapping blob ranges at {name}")
        end = off + length
    if end != len(blob):
        raise CheckpointError(f"weights.bin holds {len(blob)} bytes, manifest describes {end}")
    state = json.loads((root / "state.json").read_text())
    trainable = state.get("trainable", {})
    params, optim, centroids = ParamStore(), None, None
    for name, dtype, dims, off, length in entries:
        np_dtype = np.dtype({"float32": "<f4", "float64": "<f8", "int64": "<i8"}[dtype])
        count = int(np.prod(dims)) if dims else 1
        if count * np_dtype.itemsize != length:
            raise CheckpointError(f"{name}: byte length {length} does not match shape {dims}")
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=off).reshape(dims).copy()
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
        if name.startswith("optim."):
            optim = optim or OptimState(step=state.get("optim_step") or 0)
            kind, pname = name[6], name[8:]
            (optim.m if kind == "m" else optim.v)[pname] = t
        elif name == "codebook.centroids":
            centroids = arr
        else:
            params.set(name, t, trainable.get(name, True))
    codebook = None
    if centroids is not None:
        codebook = Codebook.from_centroids(centroids, state.get("codebook_patch_size") or cfg.vision.patch_size)
    return VideoTextModel(cfg, params, codebook), optim, state


def save_trainer(trainer: Trainer, path) -> Path:
    """Checkpoint a stage mid-run: parameters, optimizer moments and every rng/batcher position."""
    return save_checkpoint(trainer.model, path, trainer.optim, record={"trainer": trainer.state()})


def resume_trainer(path, batcher: JointBatcher, expected: ModelConfig | None = None) -> Trainer:
    """Rebuild a Trainer from ``save_trainer`` output; continuing it matches the uninterrupted run."""
    model, optim, state = load_checkpoint(path, expected)
    if "trainer" not in state:
        raise CheckpointError(f"{path}: checkpoint holds no trainer state")
    ts = state["trainer"]
    stage = StageConfig(**dict(ts["stage"], objectives=tuple(ts["stage"]["objectives"])))
    trainer = Trainer(model, batcher, stage, state.get("seed", 0), optim or OptimState())
    trainer.set_state(ts)
    return trainer
