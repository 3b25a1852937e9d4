"""Retrieval with two-stage reranking, recall metrics, QA decoding and more-frame inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import layers as L
from . import text as T
from .autodiff import ParamStore
from .data import Corpus, QAItem, sample_frames
from .model import VideoTextModel
from .text import CLS, PAD, SEP, Vocabulary, tokenize_batch
from .training import OptimState, adamw_step, lr_at

SIM_WEIGHT = 0.3
VTM_WEIGHT = 0.7
TIE_TOL = 1e-6


@dataclass
class RerankConfig:
    k: int = 128
    rerank: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("rerank candidate count K must be >= 1")


@dataclass
class RetrievalResult:
    r1: float
    r5: float
    r10: float
    median_rank: float
    ranks: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def avg(self) -> float:
        return (self.r1 + self.r5 + self.r10) / 3.0

    def metrics(self, prefix: str = "") -> dict[str, float]:
        return {f"{prefix}R@1": self.r1, f"{prefix}R@5": self.r5, f"{prefix}R@10": self.r10,
                f"{prefix}Avg": self.avg, f"{prefix}MedR": self.median_rank}

    @classmethod
    def from_ranks(cls, ranks) -> "RetrievalResult":
        ranks = np.asarray(ranks, dtype=np.int64)
        return cls(recall_at(ranks, 1), recall_at(ranks, 5), recall_at(ranks, 10), float(np.median(ranks)), ranks)


def recall_at(ranks, k: int) -> float:
    """Percentage of 1-based ranks that are <= k."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks given")
    return 100.0 * float(np.count_nonzero(ranks <= k)) / ranks.size


# ---------------------------------------------------------------- ranking core


def stage_one_order(sim: np.ndarray) -> np.ndarray:
    """Per-row candidate order by descending score; ties keep the lower index first."""
    return np.argsort(-np.asarray(sim), axis=1, kind="stable")


def rerank_order(sim: np.ndarray, score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 cfg: RerankConfig) -> np.ndarray:
    """Two-stage ordering of columns for each row of ``sim``.

    ``score_fn(rows, cols)`` returns matching logits for the given (query, candidate)
    index pairs.  The top-min(K, N) stage-one candidates are re-sorted by that logit;
    the tail keeps its stage-one order.
    """
    order = stage_one_order(sim)
    if not cfg.rerank:
        return order
    n_q, n_c = order.shape
    k = min(cfg.k, n_c)
    if k == 1:
        return order
    rows = np.repeat(np.arange(n_q), k)
    cols = order[:, :k].reshape(-1)
    logits = np.asarray(score_fn(rows, cols), dtype=np.float64).reshape(n_q, k)
    head = np.take_along_axis(order[:, :k], np.argsort(-logits, axis=1, kind="stable"), axis=1)
    return np.concatenate([head, order[:, k:]], axis=1)


def ranks_of_truth(order: np.ndarray, truth: np.ndarray | None = None) -> np.ndarray:
    truth = np.arange(order.shape[0]) if truth is None else np.asarray(truth)
    return np.argmax(order == truth[:, None], axis=1) + 1


# ---------------------------------------------------------------- encoding


@dataclass
class EncodedCorpus:
    video_states: torch.Tensor
    video_emb: torch.Tensor
    text_states: torch.Tensor
    text_emb: torch.Tensor
    text_mask: torch.Tensor
    image: bool


def encode_corpus(model: VideoTextModel, corpus: Corpus, vocab: Vocabulary, frames: int,
                  chunk: int = 64) -> EncodedCorpus:
    if len(corpus) == 0:
        raise ValueError("empty evaluation corpus")
    image = all(p.modality == "image" for p in corpus)
    t = 1 if image else frames
    videos = np.stack([sample_frames(p.visual, t, "eval") for p in corpus]).astype(np.float32)
    ids, mask = tokenize_batch(corpus.captions, vocab)
    dtype = model.cfg.torch_dtype
    vs, ve, ts, te = [], [], [], []
    with torch.no_grad():
        for i in range(0, len(corpus), chunk):
            s, e = model.encode_video(torch.from_numpy(videos[i : i + chunk]).to(dtype), image=image)
            vs.append(s)
            ve.append(e)
            s, e = model.encode_text(ids[i : i + chunk], mask[i : i + chunk])
            ts.append(s)
            te.append(e)
    return EncodedCorpus(torch.cat(vs), torch.cat(ve), torch.cat(ts), torch.cat(te), mask, image)


def pair_logits(model: VideoTextModel, enc: EncodedCorpus, rows: np.ndarray, cols: np.ndarray,
                chunk: int = 256) -> np.ndarray:
    """VTM logits for (text row, video col) index pairs."""
    out = []
    with torch.no_grad():
        for i in range(0, len(rows), chunk):
            r = torch.as_tensor(rows[i : i + chunk], dtype=torch.long)
            c = torch.as_tensor(cols[i : i + chunk], dtype=torch.long)
            logit = model.vtm_logits(enc.video_states[c], enc.text_states[r], enc.text_mask[r], image=enc.image)
            out.append(logit.double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def similarity_matrix(enc: EncodedCorpus) -> np.ndarray:
    """Raw cosine similarity, texts x videos."""
    return (enc.text_emb @ enc.video_emb.T).double().numpy()


def retrieval_eval(model: VideoTextModel, corpus: Corpus, vocab: Vocabulary, cfg: RerankConfig | None = None,
                   frames: int | None = None) -> RetrievalResult:
    """Text-to-video retrieval; text i's ground truth is video i."""
    cfg = cfg or RerankConfig()
    frames = model.vcfg.num_frames if frames is None else frames
    enc = encode_corpus(model, corpus, vocab, frames)
    sim = similarity_matrix(enc)
    use_rerank = cfg.rerank and model.tcfg.fusion_mode != "None"
    cfg = RerankConfig(cfg.k, use_rerank)
    order = rerank_order(sim, lambda r, c: pair_logits(model, enc, r, c), cfg)
    return RetrievalResult.from_ranks(ranks_of_truth(order))


def mirror_discrimination(model: VideoTextModel, corpus: Corpus, vocab: Vocabulary, frames: int | None = None,
                          use_vtm: bool = False) -> float:
    """Percent of captions scoring their own video above its frame-reversed twin.

    Mirror couples sit at adjacent positions (2k, 2k+1); scores within ``TIE_TOL``
    count as half a success.
    """
    if len(corpus) % 2:
        raise ValueError("mirror corpus must hold couples")
    frames = model.vcfg.num_frames if frames is None else frames
    enc = encode_corpus(model, corpus, vocab, frames)
    n = len(corpus)
    own = np.arange(n)
    twin = own ^ 1
    if use_vtm and model.tcfg.fusion_mode != "None":
        s_own, s_twin = pair_logits(model, enc, own, own), pair_logits(model, enc, own, twin)
    else:
        sim = similarity_matrix(enc)
        s_own, s_twin = sim[own, own], sim[own, twin]
    diff = s_own - s_twin
    wins = np.where(np.abs(diff) <= TIE_TOL, 0.5, (diff > 0).astype(np.float64))
    return 100.0 * float(wins.mean())


def infer_frames(model: VideoTextModel, corpus: Corpus, vocab: Vocabulary, m: int,
                 cfg: RerankConfig | None = None) -> RetrievalResult:
    """Evaluate with ``m`` frames after resampling the temporal position table to ``m`` rows."""
    if m < 1:
        raise ValueError("inference frame count must be >= 1")
    rows = model.params["vision.temporal_pos"].shape[0]
    resized = model if m == 1 or m == rows else model.interpolate_frames(m)
    return retrieval_eval(resized, corpus, vocab, cfg, frames=m)


# ---------------------------------------------------------------- metrics files


def write_metrics(path, metrics: dict[str, float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}\t{v:.6f}\n" for k, v in metrics.items()))
    return path


def read_metrics(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("\t")
            out[k] = float(v)
    return out


def format_report(metrics: dict[str, float]) -> str:
    width = max(len(k) for k in metrics)
    return "\n".join(f"{k.ljust(width)}  {v:6.1f}" for k, v in metrics.items()) + "\n"


# ---------------------------------------------------------------- multiple choice


def ensemble_scores(sims, vtm_probs) -> np.ndarray:
    return SIM_WEIGHT * np.asarray(sims, dtype=np.float64) + VTM_WEIGHT * np.asarray(vtm_probs, dtype=np.float64)


def mc_choice(sims, vtm_logits) -> tuple[int, np.ndarray]:
    probs = 1.0 / (1.0 + np.exp(-np.asarray(vtm_logits, dtype=np.float64)))
    scores = ensemble_scores(sims, probs)
    return int(np.argmax(scores)), scores


def mc_score(model: VideoTextModel, video: np.ndarray, question: str, candidates: Sequence[str],
             vocab: Vocabulary, frames: int | None = None) -> tuple[int, np.ndarray]:
    """Pick the candidate answer whose question+answer sentence best matches the video."""
    if len(candidates) < 2:
        raise ValueError("multiple choice needs at least two candidates")
    if model.tcfg.fusion_mode == "None":
        raise ValueError("multiple-choice scoring needs a fusion stack for VTM")
    frames = model.vcfg.num_frames if frames is None else frames
    m = len(candidates)
    clip = sample_frames(np.asarray(video), frames, "eval")[None].astype(np.float32)
    ids, mask = tokenize_batch([f"{question} {a}" for a in candidates], vocab)
    with torch.no_grad():
        v_states, v_emb = model.encode_video(torch.from_numpy(clip).to(model.cfg.torch_dtype))
        t_states, t_emb = model.encode_text(ids, mask)
        sims = (t_emb @ v_emb[0]).double().numpy()
        reps = v_states.expand(m, *v_states.shape[1:])
        logits = model.vtm_logits(reps, t_states, mask).double().numpy()
    return mc_choice(sims, logits)


# ---------------------------------------------------------------- open-ended QA


@dataclass
class QAConfig:
    answers: list[str] = field(default_factory=list)
    max_len: int = 4
    frames: int = 4
    constrained: bool = True

    def validate(self) -> None:
        if self.constrained and not self.answers:
            raise ValueError("constrained decoding needs a non-empty answer vocabulary")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def decoder_source_layers(model: VideoTextModel) -> list[str]:
    if not model.tcfg.text_fusion:
        raise ValueError("QA decoding needs a text-side (V2T or B) fusion stack to copy")
    n_u = model.tcfg.unimodal_layers
    return [f"text.layers.{n_u + j}" for j in range(model.tcfg.fusion_layers)]


def attach_decoder(model: VideoTextModel) -> VideoTextModel:
    """Copy of ``model`` with a decoder initialised from its text-side fusion layers."""
    out = model.clone()
    p = out.params
    for j, src in enumerate(decoder_source_layers(model)):
        for name in p.with_prefix(src + "."):
            p.set(f"decoder.layers.{j}" + name[len(src):], p[name].detach().clone())
    for part in ("gamma", "beta"):
        p.set(f"decoder.norm.{part}", p[f"text.fusion_norm.{part}"].detach().clone())
    for part in ("w", "b"):
        p.set(f"decoder.head.{part}", p[f"mlm_head.{part}"].detach().clone())
    return out


def causal_bias(s: int, dtype) -> torch.Tensor:
    return torch.triu(torch.full((s, s), L.NEG_INF, dtype=dtype), diagonal=1)[None, None]


def encode_question(model: VideoTextModel, videos, ids, mask, params=None) -> T.FusedStates:
    p = model.params if params is None else params
    v_states, _ = model.encode_video(videos, params=p)
    t_states, _ = model.encode_text(ids, mask, params=p)
    return model.fuse(t_states, mask, v_states, params=p)


def decoder_logits(model: VideoTextModel, p: ParamStore, context, context_mask, ids, mask):
    """Next-token logits (B, S, V) for decoder inputs ``ids`` attending to ``context``."""
    x = T.embed_tokens(p, ids)
    s = x.shape[1]
    self_bias = ad.add(causal_bias(s, x.dtype), L.key_padding_bias(torch.as_tensor(mask), x.dtype))
    cbias = L.key_padding_bias(torch.as_tensor(context_mask), x.dtype)
    j = 0
    while f"decoder.layers.{j}.norm1.gamma" in p:
        x = T.text_layer(p, f"decoder.layers.{j}", model.tcfg.heads, x, self_bias, context=context,
                         context_bias=cbias, tag="decoder_cross")
        j += 1
    x = L.norm(p, "decoder.norm", x)
    return L.linear(p, "decoder.head", x)


def _shift(ans_ids, ans_mask):
    inputs, targets = ans_ids[:, :-1], ans_ids[:, 1:]
    return inputs, ans_mask[:, :-1], targets, ans_mask[:, 1:]


def qa_loss(model: VideoTextModel, p: ParamStore, videos, q_ids, q_mask, a_ids, a_mask):
    """Mean token cross-entropy of the answer under teacher forcing."""
    fused = encode_question(model, videos, q_ids, q_mask, params=p)
    inp, inp_mask, tgt, tgt_mask = _shift(a_ids, a_mask)
    logits = decoder_logits(model, p, fused.text, q_mask, inp, inp_mask)
    b, s, v = logits.shape
    flat = torch.nonzero(tgt_mask.reshape(-1)).reshape(-1)
    picked = ad.take(ad.reshape(logits, b * s, v), flat, dim=0)
    return ad.cross_entropy(picked, tgt.reshape(-1)[flat])


def finetune_qa(model: VideoTextModel, items: Sequence[QAItem], vocab: Vocabulary, epochs: int = 30,
                lr: float = 1e-3, batch_size: int = 8, frames: int = 4, seed: int = 0) -> list[float]:
    """Train encoders and decoder jointly on QA items (in place); returns per-step losses."""
    rng = np.random.default_rng(seed)
    steps_per_epoch = int(np.ceil(len(items) / batch_size))
    total = epochs * steps_per_epoch
    optim, losses, step = OptimState(), [], 0
    for _ in range(epochs):
        order = rng.permutation(len(items))
        for i in range(0, len(items), batch_size):
            chunk = [items[k] for k in order[i : i + batch_size]]
            videos = torch.from_numpy(np.stack([sample_frames(it.video, frames, "train", rng) for it in chunk]))
            q_ids, q_mask = tokenize_batch([it.question for it in chunk], vocab)
            a_ids, a_mask = tokenize_batch([it.answer for it in chunk], vocab)
            videos = videos.to(model.cfg.torch_dtype)
            loss, grads = ad.forward_backward(
                lambda p, _: qa_loss(model, p, videos, q_ids, q_mask, a_ids, a_mask), model.params, strict=False)
            adamw_step(model.params, grads, optim, lr_at(step, total, steps_per_epoch, lr, lr * 0.01))
            losses.append(loss)
            step += 1
    return losses


class AnswerTrie:
    """Prefix tree over answer token sequences (each terminated by [SEP])."""

    def __init__(self, sequences: Sequence[Sequence[int]]):
        self.root: dict = {}
        for seq in sequences:
            node = self.root
            for tok in seq:
                node = node.setdefault(int(tok), {})

    def allowed(self, prefix: Sequence[int]) -> list[int]:
        node = self.root
        for tok in prefix:
            node = node.get(int(tok))
            if node is None:
                return []
        return sorted(node)


def qa_generate(model: VideoTextModel, video: np.ndarray, question: str, cfg: QAConfig,
                vocab: Vocabulary) -> str:
    """Greedy decoding from [CLS]; stops at [SEP] or ``max_len`` tokens."""
    cfg.validate()
    if "decoder.layers.0.norm1.gamma" not in model.params:
        raise ValueError("model has no QA decoder; call attach_decoder first")
    trie = None
    max_len = cfg.max_len
    if cfg.constrained:
        seqs = [[vocab.id(w) for w in a.split()] + [SEP] for a in cfg.answers]
        trie = AnswerTrie(seqs)
        max_len = max(max_len, max(len(s) for s in seqs))
    clip = torch.from_numpy(sample_frames(np.asarray(video), cfg.frames, "eval")[None].astype(np.float32))
    q_ids, q_mask = tokenize_batch([question], vocab)
    out: list[int] = []
    with torch.no_grad():
        fused = encode_question(model, clip.to(model.cfg.torch_dtype), q_ids, q_mask)
        for _ in range(max_len):
            ids = torch.tensor([[CLS] + out], dtype=torch.long)
            logits = decoder_logits(model, model.params, fused.text, q_mask, ids, torch.ones_like(ids))[0, -1]
            logits = logits.double().clone()
            if trie is not None:
                allowed = trie.allowed(out)
                blocked = torch.ones_like(logits, dtype=torch.bool)
                blocked[allowed] = False
                logits[blocked] = -np.inf
            else:
                logits[[PAD, CLS]] = -np.inf
            tok = int(torch.argmax(logits))
            if tok == SEP:
                break
            out.append(tok)
    return vocab.decode(out)


def qa_accuracy(model: VideoTextModel, items: Sequence[QAItem], cfg: QAConfig, vocab: Vocabulary) -> float:
    hits = [qa_generate(model, it.video, it.question, cfg, vocab) == it.answer for it in items]
    return 100.0 * float(np.mean(hits))
