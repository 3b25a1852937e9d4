"""End-to-end experiment steps shared by the command line, the ablation ladder and the estimator."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import GradReport, ParamStore, grad_check
from .config import ExperimentConfig
from .data import (Corpus, JointBatcher, build_vocabulary, gen_image_corpus, gen_qa_items, gen_spatial_corpus,
                   gen_temporal_corpus, make_batch, merge)
from .evaluation import RerankConfig, infer_frames, mirror_discrimination, retrieval_eval
from .model import ModelConfig, VideoTextModel
from .objectives import (Codebook, MaskPlan, caption_duplicates, mine_hard_negatives, mlm_loss, mvm_loss,
                         plan_text_mask, plan_video_mask, similarity, vtc_loss, vtm_loss)
from .text import TextConfig, Vocabulary
from .training import StageConfig, run_curriculum
from .vision import ConfigError, VisionConfig

log = logging.getLogger(__name__)


@dataclass
class Corpora:
    train_temporal: Corpus
    train_spatial: Corpus
    images: Corpus
    eval_temporal: Corpus
    eval_spatial: Corpus
    vocab: Vocabulary

    @property
    def train_video(self) -> Corpus:
        return merge(self.train_spatial, self.train_temporal)


def build_corpora(cfg: ExperimentConfig) -> Corpora:
    d = cfg.data
    common = dict(size=d.size, noise=d.noise, colors=d.colors)
    tt = gen_temporal_corpus(d.temporal_pairs, frames=d.temporal_frames, seed=d.seed, **common)
    ts = gen_spatial_corpus(d.spatial_pairs, seed=d.seed, frames=d.spatial_frames, **common)
    im = gen_image_corpus(d.image_pairs, seed=d.seed, **common)
    et = gen_temporal_corpus(d.eval_temporal, frames=d.temporal_frames, seed=d.seed + 7919, unique=True, **common)
    es = gen_spatial_corpus(d.eval_spatial, seed=d.seed + 7919, frames=d.spatial_frames, unique=True, **common)
    vocab = build_vocabulary(tt, ts, im, et, es)
    if len(vocab) > cfg.model.text.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens but model.text.vocab_size is {cfg.model.text.vocab_size}")
    return Corpora(tt, ts, im, et, es, vocab)


def fit_codebook(cfg: ModelConfig, corpora: Corpora) -> Codebook:
    videos = [p.visual for p in corpora.train_video]
    return Codebook(cfg.codebook_size, cfg.vision.patch_size, seed=cfg.seed).fit(videos)


def new_model(cfg: ExperimentConfig, corpora: Corpora) -> VideoTextModel:
    mcfg = replace(cfg.model, vision=replace(cfg.model.vision, num_frames=cfg.stages[0].frames))
    codebook = fit_codebook(mcfg, corpora) if "MVM" in mcfg.objectives else None
    return VideoTextModel(mcfg, codebook=codebook)


def pretrain(cfg: ExperimentConfig, corpora: Corpora | None = None, model: VideoTextModel | None = None):
    """Train through every configured stage; returns (model, per-stage logs)."""
    cfg.validate()
    corpora = corpora or build_corpora(cfg)
    model = model or new_model(cfg, corpora)
    if "MVM" in cfg.model.objectives and model.codebook is None:
        model.codebook = fit_codebook(model.cfg, corpora)
    images = corpora.images if cfg.data.mix_ratio > 0 else None
    video = corpora.train_video if cfg.data.mix_ratio < 1 else None

    def factory(stage: StageConfig) -> JointBatcher:
        return JointBatcher(images, video, stage.batch_size, cfg.data.mix_ratio, cfg.seed, corpora.vocab, stage.frames)

    return run_curriculum(model, cfg.stages, factory, seed=cfg.seed)


def evaluate(model: VideoTextModel, corpora: Corpora, cfg: ExperimentConfig, frames: int | None = None) -> dict[str, float]:
    """Retrieval on the spatial and temporal evaluation sets plus their average."""
    rcfg = RerankConfig(cfg.eval.rerank_k, cfg.eval.rerank)
    frames = frames or cfg.eval.frames or model.params["vision.temporal_pos"].shape[0]
    out: dict[str, float] = {}
    results = {}
    for name, corpus in (("spatial", corpora.eval_spatial), ("temporal", corpora.eval_temporal)):
        res = infer_frames(model, corpus, corpora.vocab, frames, rcfg)
        results[name] = res
        out.update(res.metrics(prefix=f"{name}."))
    for k in ("R@1", "R@5", "R@10", "Avg"):
        out[f"combined.{k}"] = (out[f"spatial.{k}"] + out[f"temporal.{k}"]) / 2
    resized = model if frames == model.params["vision.temporal_pos"].shape[0] or frames == 1 else model.interpolate_frames(frames)
    out["temporal.mirror"] = mirror_discrimination(resized, corpora.eval_temporal, corpora.vocab, frames)
    return out


# ---------------------------------------------------------------- gradient suite


def tiny_config(dim: int = 16, temporal_mode: str = "TA", fusion_mode: str = "V2T",
                objectives=("VTC", "VTM", "MLM", "MVM"), vocab_size: int = 40, seed: int = 0) -> ModelConfig:
    heads = 2 if dim % 4 else 4
    vis = VisionConfig(image_size=16, patch_size=8, dim=dim, layers=2, heads=heads, temporal_mode=temporal_mode,
                       window=1 if temporal_mode == "WA" else None, tc_hidden=8, late_layers=1, prompts=2,
                       num_frames=2, proj_dim=dim)
    txt = TextConfig(vocab_size=vocab_size, dim=dim, unimodal_layers=1, fusion_layers=1, heads=heads, max_len=16,
                     fusion_mode=fusion_mode)
    return ModelConfig(vis, txt, objectives=tuple(objectives), codebook_size=4, seed=seed, dtype="float64")


@dataclass
class FrozenBatch:
    """A batch plus every random draw its losses need, fixed so the loss is a pure function."""

    videos: torch.Tensor
    ids: torch.Tensor
    mask: torch.Tensor
    negatives: tuple
    plan: MaskPlan
    patch_mask: np.ndarray
    targets: np.ndarray


def freeze_batch(model: VideoTextModel, batch, seed: int = 0) -> FrozenBatch:
    rng = np.random.default_rng(seed)
    videos = batch.videos.to(torch.float64)
    with torch.no_grad():
        _, v = model.encode_video(videos)
        _, t = model.encode_text(batch.ids, batch.mask)
    negatives = mine_hard_negatives(similarity(v, t), rng, caption_duplicates(batch.captions))
    plan = plan_text_mask(batch.ids, 0.5, rng, model.tcfg.vocab_size)
    b, tt = videos.shape[:2]
    pm = plan_video_mask(b, tt, model.vcfg.num_patches, 0.75, rng)
    targets = model.codebook.quantize(videos) if model.codebook is not None else np.zeros((b, tt, model.vcfg.num_patches), dtype=np.int64)
    return FrozenBatch(videos, batch.ids, batch.mask, negatives, plan, pm, targets)


def loss_fn(model: VideoTextModel, fb: FrozenBatch, which: tuple[str, ...]):
    """Closure over a frozen batch computing the sum of the named losses."""

    def fn(p: ParamStore, _inputs=None):
        v_states, v_emb = model.encode_video(fb.videos, params=p)
        t_states, t_emb = model.encode_text(fb.ids, fb.mask, params=p)
        parts = []
        if "VTC" in which:
            parts.append(vtc_loss(v_emb, t_emb, model.temperature(p)))
        if "VTM" in which:
            parts.append(vtm_loss(model, p, v_states, t_states, fb.mask, fb.negatives))
        if "MLM" in which:
            m_states, _ = model.encode_text(torch.from_numpy(fb.plan.masked_ids), fb.mask, params=p)
            fused = model.fuse(m_states, fb.mask, v_states, params=p)
            parts.append(mlm_loss(p, fused.text, fb.plan))
        if "MVM" in which:
            m_states, _ = model.encode_video(fb.videos, patch_mask=fb.patch_mask, params=p)
            parts.append(mvm_loss(p, m_states, fb.patch_mask, fb.targets))
        total = parts[0]
        for x in parts[1:]:
            total = ad.add(total, x)
        return total

    return fn


def _jitter(params: ParamStore, seed: int, scale: float) -> ParamStore:
    """Move away from the near-symmetric initial point so gradients are well above round-off."""
    gen = torch.Generator().manual_seed(seed)
    return params.map(lambda t: t + scale * torch.randn(t.shape, generator=gen, dtype=t.dtype) if t.dim() else t)


def gradient_suite(dim: int = 16, tol: float = 1e-4, max_coords: int = 4, batch: int = 4,
                   seed: int = 0) -> list[tuple[str, GradReport]]:
    """Finite-difference checks of every loss and of each temporal and fusion variant."""
    if batch < 2 or batch % 2:
        raise ValueError("gradient suite batch must be even and >= 2")
    half = batch // 2
    corpus = merge(gen_spatial_corpus(half, seed=seed, frames=2), gen_temporal_corpus(half + half % 2, seed=seed))
    corpus = corpus.subset(range(batch))
    vocab = build_vocabulary(corpus)
    b = make_batch(list(corpus), vocab, frames=2)
    cases: list[tuple[str, dict, tuple[str, ...]]] = []
    for loss in ("VTC", "VTM", "MLM", "MVM"):
        cases.append((f"loss/{loss}", {}, (loss,)))
    cases.append(("loss/total", {}, ("VTC", "VTM", "MLM", "MVM")))
    for mode in ("MP", "L-TA", "TC", "TA", "TA-P", "WA"):
        cases.append((f"temporal/{mode}", {"temporal_mode": mode}, ("VTC", "VTM", "MLM")))
    for fusion in ("V2T", "T2V", "B"):
        cases.append((f"fusion/{fusion}", {"fusion_mode": fusion}, ("VTC", "VTM", "MLM")))
    cases.append(("fusion/None", {"fusion_mode": "None", "objectives": ("VTC",)}, ("VTC",)))
    out = []
    for name, kw, which in cases:
        cfg = tiny_config(dim=dim, vocab_size=max(len(vocab), 8), seed=seed, **kw)
        codebook = None
        if "MVM" in cfg.objectives:
            codebook = Codebook(cfg.codebook_size, cfg.vision.patch_size, seed=seed).fit([p.visual for p in corpus])
        model = VideoTextModel(cfg, codebook=codebook)
        model = model.with_params(_jitter(model.params, seed + 1, 0.1))
        fb = freeze_batch(model, b, seed)
        rep = grad_check(loss_fn(model, fb, which), model.params, eps=1e-3, tol=tol, max_coords=max_coords,
                         seed=seed, order=4)
        out.append((name, rep))
    return out


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    return res, time.perf_counter() - t0


def qa_sets(corpora: Corpora):
    """(train items, eval items) for open-ended QA built from the generated corpora."""
    return gen_qa_items(corpora.train_video), gen_qa_items(merge(corpora.eval_spatial, corpora.eval_temporal))
