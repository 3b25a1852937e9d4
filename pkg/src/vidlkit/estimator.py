"""scikit-learn style wrapper: fit on (videos, captions), transform videos to embeddings, score retrieval."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Corpus, JointBatcher, Pair, build_vocabulary, make_batch
from .evaluation import RerankConfig, retrieval_eval
from .model import ModelConfig, VideoTextModel
from .text import TextConfig, tokenize_batch
from .training import StageConfig, run_stage
from .vision import VisionConfig


def _as_videos(X) -> np.ndarray:
    if isinstance(X, (list, tuple)):
        shapes = {np.shape(v) for v in X}
        if len(shapes) != 1:
            raise ValueError(f"all videos must share one shape, got {sorted(shapes)}")
        X = np.stack([np.asarray(v) for v in X])
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:  # a batch of still images
        X = X[:, None]
    if X.ndim != 5 or X.shape[-1] != 3:
        raise ValueError(f"expected videos shaped (n, T, H, W, 3), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError("frames must be square")
    if not np.isfinite(X).all():
        raise ValueError("videos contain non-finite values")
    return X


def _as_captions(y, n: int | None = None) -> list[str]:
    y = [str(c) for c in y]
    if n is not None and len(y) != n:
        raise ValueError(f"got {n} videos but {len(y)} captions")
    if any(not c.split() for c in y):
        raise ValueError("captions must be non-empty")
    return y


class VideoTextRetriever(BaseEstimator):
    """Dual-encoder video-text model trained with the configured objectives."""

    def __init__(self, temporal_mode="TA", fusion_mode="None", objectives=("VTC",), frames=4, dim=64, layers=3,
                 epochs=10.0, batch_size=16, lr=5e-4, rerank_k=128, seed=0):
        self.temporal_mode = temporal_mode
        self.fusion_mode = fusion_mode
        self.objectives = objectives
        self.frames = frames
        self.dim = dim
        self.layers = layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.rerank_k = rerank_k
        self.seed = seed

    def _corpus(self, X: np.ndarray, y: list[str]) -> Corpus:
        return Corpus([Pair(i, v, c) for i, (v, c) in enumerate(zip(X, y))], self.seed)

    def fit(self, X, y):
        X = _as_videos(X)
        y = _as_captions(y, len(X))
        if len(X) < 2:
            raise ValueError("need at least two pairs to train contrastively")
        corpus = self._corpus(X, y)
        self.vocab_ = build_vocabulary(corpus)
        size = X.shape[2]
        patch = 8 if size % 8 == 0 else size
        cfg = ModelConfig(
            vision=VisionConfig(image_size=size, patch_size=patch, dim=self.dim, layers=self.layers,
                                temporal_mode=self.temporal_mode, window=1 if self.temporal_mode == "WA" else None,
                                num_frames=self.frames, proj_dim=self.dim),
            text=TextConfig(vocab_size=max(len(self.vocab_), 8), dim=self.dim, unimodal_layers=self.layers,
                            fusion_mode=self.fusion_mode),
            objectives=tuple(self.objectives), seed=self.seed,
        )
        cfg.validate()
        stage = StageConfig(frames=self.frames, epochs=self.epochs, lr=self.lr, batch_size=min(self.batch_size, len(X)),
                            objectives=tuple(self.objectives), warmup_epochs=min(1, self.epochs))
        self.model_ = VideoTextModel(cfg)
        batcher = JointBatcher(None, corpus, stage.batch_size, 0.0, self.seed, self.vocab_, self.frames)
        _, records = run_stage(self.model_, batcher, stage, self.seed)
        self.loss_curve_ = [r.losses["total"] for r in records]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        """Unit-norm video embeddings, one row per video."""
        check_is_fitted(self, "model_")
        X = _as_videos(X)
        pairs = [Pair(i, v, "[PAD]") for i, v in enumerate(X)]
        batch = make_batch(pairs, self.vocab_, self.frames)
        with torch.no_grad():
            _, emb = self.model_.encode_video(batch.videos.to(self.model_.cfg.torch_dtype))
        return emb.double().numpy()

    def embed_text(self, captions) -> np.ndarray:
        check_is_fitted(self, "model_")
        captions = _as_captions(captions)
        unknown = {w for c in captions for w in c.split() if w not in self.vocab_}
        if unknown:
            raise ValueError(f"captions use words unseen during fit: {sorted(unknown)}")
        ids, mask = tokenize_batch(captions, self.vocab_)
        with torch.no_grad():
            _, emb = self.model_.encode_text(ids, mask)
        return emb.double().numpy()

    def predict(self, X, captions) -> np.ndarray:
        """Index of the best-matching video in ``X`` for every caption (first stage only)."""
        sim = self.embed_text(captions) @ self.transform(X).T
        return np.argmax(sim, axis=1)

    def score(self, X, y) -> float:
        """Averaged R@{1,5,10} of text-to-video retrieval over the given pairs."""
        check_is_fitted(self, "model_")
        X = _as_videos(X)
        y = _as_captions(y, len(X))
        res = retrieval_eval(self.model_, self._corpus(X, y), self.vocab_, RerankConfig(self.rerank_k), self.frames)
        return res.avg
