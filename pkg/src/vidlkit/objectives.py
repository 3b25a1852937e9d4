"""Pretraining losses (VTC, VTM, MLM, MVM) and their masking / mining machinery."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from . import layers as L
from . import text as T
from .autodiff import derived_seed
from .vision import ConfigError, as_batch

MASK_ACTIONS = ("mask", "random", "keep")
MASK_SPLIT = (0.8, 0.1, 0.1)


class RngStreams:
    """Independent numpy generators per purpose, all derived from one seed."""

    NAMES = ("init", "data", "text_mask", "video_mask", "negatives", "batching", "frames")

    def __init__(self, seed: int):
        self.seed = seed
        self._gens = {n: np.random.default_rng(derived_seed(seed, n)) for n in self.NAMES}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._gens[name]

    def state(self) -> dict:
        return {n: g.bit_generator.state for n, g in self._gens.items()}

    def set_state(self, state: dict) -> None:
        for n, s in state.items():
            self._gens[n].bit_generator.state = s


# ---------------------------------------------------------------- VTC


def similarity(video_emb, text_emb):
    """(B,D) x (N,D) unit vectors -> (B,N) cosine similarity, video rows / text columns."""
    return ad.matmul(video_emb, ad.transpose(text_emb, 1, 0))


def vtc_loss(video_emb, text_emb, temperature):
    """Symmetric contrastive cross-entropy, averaged over both retrieval directions."""
    if float(temperature.detach()) <= 0:
        raise ValueError("temperature must be positive")
    b = video_emb.shape[0]
    logits = ad.div(similarity(video_emb, text_emb), temperature)
    target = torch.arange(b)
    v2t = ad.cross_entropy(logits, target)
    t2v = ad.cross_entropy(ad.transpose(logits, 1, 0), target)
    return ad.mul(ad.add(v2t, t2v), 0.5)


# ---------------------------------------------------------------- VTM


def _sample_offdiag(scores: np.ndarray, rng: np.random.Generator, exclude: np.ndarray | None = None) -> np.ndarray:
    b = scores.shape[0]
    out = np.empty(b, dtype=np.int64)
    for i in range(b):
        banned = np.zeros(b, dtype=bool) if exclude is None else exclude[i].copy()
        banned[i] = True
        if banned.all():
            # every candidate is a duplicate of the anchor; fall back to plain off-diagonal
            banned[:] = False
            banned[i] = True
        s = np.where(banned, -np.inf, scores[i].astype(np.float64))
        w = np.exp(s - s[~banned].max())
        out[i] = rng.choice(b, p=w / w.sum())
    return out


def mine_hard_negatives(sim, rng: np.random.Generator, duplicates=None):
    """Sample one negative per anchor with probability softmax(similarity) off the diagonal.

    ``duplicates`` (B,B) marks pairs that also match (e.g. identical captions); they
    are not sampled as negatives unless nothing else is left.
    Returns (negative video index per text, negative text index per video).
    """
    sim = np.asarray(sim.detach() if isinstance(sim, torch.Tensor) else sim, dtype=np.float64)
    if sim.shape[0] < 2:
        raise ValueError("hard negative mining needs a batch of at least 2")
    dup = None if duplicates is None else np.asarray(duplicates, dtype=bool)
    neg_video = _sample_offdiag(sim.T, rng, dup)
    neg_text = _sample_offdiag(sim, rng, dup)
    return neg_video, neg_text


def caption_duplicates(captions) -> np.ndarray:
    caps = np.asarray(list(captions), dtype=object)
    return caps[:, None] == caps[None, :]


def binary_cross_entropy(logits, labels):
    """Mean BCE with logits, written as two-class cross-entropy over [0, logit]."""
    zeros = torch.zeros_like(logits.detach())
    two = ad.concat([ad.reshape(zeros, -1, 1), ad.reshape(logits, -1, 1)], dim=1)
    return ad.cross_entropy(two, torch.as_tensor(labels, dtype=torch.long))


def vtm_loss(model, params, video_states, text_states, mask, negatives, image: bool = False):
    """BCE over B positives and 2B mined negatives (text with hard video, video with hard text)."""
    neg_video, neg_text = negatives
    b = video_states.shape[0]
    vids = ad.concat([video_states, ad.take(video_states, neg_video, 0), video_states], dim=0)
    txts = ad.concat([text_states, text_states, ad.take(text_states, neg_text, 0)], dim=0)
    mask = torch.as_tensor(mask)
    masks = torch.cat([mask, mask, mask[torch.as_tensor(neg_text)]], dim=0)
    logits = model.vtm_logits(vids, txts, masks, image=image, params=params)
    labels = torch.cat([torch.ones(b), torch.zeros(2 * b)]).long()
    return binary_cross_entropy(logits, labels)


# ---------------------------------------------------------------- MLM


@dataclass
class MaskPlan:
    positions: np.ndarray  # (K, 2) rows of (batch, position)
    actions: list[str]
    labels: np.ndarray  # original ids at positions
    masked_ids: np.ndarray  # ids after applying the actions

    def __len__(self) -> int:
        return len(self.labels)

    def flat_positions(self, seq_len: int) -> np.ndarray:
        return self.positions[:, 0] * seq_len + self.positions[:, 1]


def plan_text_mask(ids, ratio: float, rng: np.random.Generator, vocab_size: int) -> MaskPlan:
    """BERT-style masking: each ordinary token is selected with probability ``ratio``;
    selected tokens become [MASK] (80%), a random ordinary token (10%) or stay (10%)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    eligible = ids > T.MASK
    pick = (rng.random(ids.shape) < ratio) & eligible
    positions = np.argwhere(pick)
    labels = ids[pick]
    u = rng.random(len(labels))
    random_ids = rng.integers(T.MASK + 1, vocab_size, size=len(labels))
    masked = ids.copy()
    actions = []
    for k, (b, s) in enumerate(positions):
        if u[k] < MASK_SPLIT[0]:
            masked[b, s] = T.MASK
            actions.append("mask")
        elif u[k] < MASK_SPLIT[0] + MASK_SPLIT[1]:
            masked[b, s] = random_ids[k]
            actions.append("random")
        else:
            actions.append("keep")
    return MaskPlan(positions.reshape(-1, 2), actions, labels, masked)


def mlm_loss(params, fused_text_states, plan: MaskPlan):
    if len(plan) == 0:
        return torch.zeros((), dtype=fused_text_states.dtype)
    seq_len = fused_text_states.shape[1]
    logits = T.mlm_logits(params, fused_text_states, plan.flat_positions(seq_len))
    return ad.cross_entropy(logits, torch.from_numpy(plan.labels))


# ---------------------------------------------------------------- MVM


def patch_means(video, patch_size: int) -> np.ndarray:
    """(B,T,H,W,C) -> (B,T,N,C) mean colour per patch."""
    v = as_batch(video).detach().to(torch.float64).numpy() if isinstance(video, torch.Tensor) else np.asarray(
        as_batch(video), dtype=np.float64
    )
    b, t, h, w, c = v.shape
    ps = patch_size
    g = v.reshape(b, t, h // ps, ps, w // ps, ps, c).mean(axis=(3, 5))
    return g.reshape(b, t, -1, c)


class Codebook:
    """Nearest-centroid quantizer over per-patch mean colour.

    Stands in for a learned visual tokenizer; anything with ``fit``/``quantize``
    and ``size`` can replace it.
    """

    def __init__(self, size: int = 16, patch_size: int = 8, seed: int = 0):
        self.size = size
        self.patch_size = patch_size
        self.seed = seed
        self.centroids: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.centroids is not None

    def fit(self, videos, samples: int = 1024) -> "Codebook":
        from sklearn.cluster import KMeans

        feats = np.concatenate([patch_means(v, self.patch_size).reshape(-1, 3) for v in videos])
        rng = np.random.default_rng(self.seed)
        if len(feats) > samples:
            feats = feats[rng.choice(len(feats), size=samples, replace=False)]
        uniq = np.unique(np.round(feats, 6), axis=0)
        k = min(self.size, len(uniq))
        if k < 2:
            raise ValueError("need at least two distinct patch colours to fit a codebook")
        km = KMeans(n_clusters=k, n_init=4, random_state=self.seed).fit(uniq)
        self.centroids = np.asarray(km.cluster_centers_, dtype=np.float64)
        self.size = k
        return self

    @classmethod
    def from_centroids(cls, centroids, patch_size: int) -> "Codebook":
        cb = cls(len(centroids), patch_size)
        cb.centroids = np.asarray(centroids, dtype=np.float64)
        return cb

    def quantize(self, video) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("codebook has not been fitted")
        m = patch_means(video, self.patch_size)
        d = ((m[..., None, :] - self.centroids) ** 2).sum(-1)
        return d.argmin(-1)


def quantize_patches(video, codebook: Codebook) -> np.ndarray:
    return codebook.quantize(video)


def masked_count(eligible: int, ratio: float) -> int:
    return int(np.floor(ratio * eligible + 0.5))


def plan_video_mask(batch: int, frames: int, patches: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """(B,T,N) 0/1 mask with exactly round(ratio * T*N) patches set per video.

    Classification tokens are not part of the N patch axis, so never masked.
    """
    eligible = frames * patches
    k = masked_count(eligible, ratio)
    out = np.zeros((batch, eligible), dtype=np.int64)
    for b in range(batch):
        out[b, rng.choice(eligible, size=k, replace=False)] = 1
    return out.reshape(batch, frames, patches)


def mvm_loss(params, states, patch_mask, targets):
    """Cross-entropy over codebook ids at masked patch positions of (B,T,N+1,D) states."""
    b, t, n1, d = states.shape
    patch_states = ad.reshape(ad.slice(states, 2, 1, n1), b * t * (n1 - 1), d)
    where = np.flatnonzero(np.asarray(patch_mask).reshape(-1))
    picked = ad.take(patch_states, where, dim=0)
    logits = L.linear(params, "mvm_head", picked)
    return ad.cross_entropy(logits, torch.from_numpy(np.asarray(targets).reshape(-1)[where]))


# ---------------------------------------------------------------- total


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(self.components)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out

    def __getattr__(self, name):
        comps = self.__dict__.get("components", {})
        if name.upper() in comps:
            return comps[name.upper()]
        raise AttributeError(name)


def check_flags(flags, fusion_mode: str) -> tuple[str, ...]:
    flags = tuple(f for f in ("VTC", "VTM", "MLM", "MVM") if f in set(flags))
    if fusion_mode == "None" and ("MLM" in flags or "VTM" in flags):
        raise ConfigError("VTM/MLM require a fusion mode other than None")
    if not flags:
        raise ConfigError("at least one objective must be enabled")
    return flags


def total_loss(model, batch, flags, rngs: RngStreams, params=None) -> LossBreakdown:
    """Unweighted sum of the enabled objectives on one single-modality batch."""
    p = model.params if params is None else params
    flags = check_flags(flags, model.tcfg.fusion_mode)
    image = batch.modality == "image"
    videos = batch.videos
    ids, mask = batch.ids, batch.mask
    video_states, v_emb = model.encode_video(videos, image=image, params=p)
    text_states, t_emb = model.encode_text(ids, mask, params=p)
    comps: dict[str, torch.Tensor] = {}
    if "VTC" in flags:
        comps["VTC"] = vtc_loss(v_emb, t_emb, model.temperature(p))
    if "VTM" in flags:
        sim = similarity(v_emb.detach(), t_emb.detach())
        dup = caption_duplicates(batch.captions) if getattr(batch, "captions", None) else None
        negatives = mine_hard_negatives(sim, rngs["negatives"], dup)
        comps["VTM"] = vtm_loss(model, p, video_states, text_states, mask, negatives, image=image)
    if "MLM" in flags:
        plan = plan_text_mask(ids, model.cfg.mlm_ratio, rngs["text_mask"], model.tcfg.vocab_size)
        m_states, _ = model.encode_text(torch.from_numpy(plan.masked_ids), mask, params=p)
        fused = model.fuse(m_states, mask, video_states, image=image, params=p)
        comps["MLM"] = mlm_loss(p, fused.text, plan)
    if "MVM" in flags and not image:
        if model.codebook is None:
            raise RuntimeError("MVM enabled but the model has no fitted codebook")
        v = as_batch(videos)
        b, t = v.shape[:2]
        n = model.vcfg.num_patches
        pm = plan_video_mask(b, t, n, model.cfg.mvm_ratio, rngs["video_mask"])
        targets = model.codebook.quantize(v)
        m_states, _ = model.encode_video(v, image=False, patch_mask=pm, params=p)
        comps["MVM"] = mvm_loss(p, m_states, pm, targets)
    total = None
    for v in comps.values():
        total = v if total is None else ad.add(total, v)
    return LossBreakdown(total, comps)
