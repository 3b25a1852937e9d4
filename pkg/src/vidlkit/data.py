"""Deterministic synthetic video/image-text corpora, frame sampling and batching."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .autodiff import derived_seed
from .text import Vocabulary, tokenize_batch

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
QUADRANTS = ("top left", "top right", "bottom left", "bottom right")
SHAPES = ("square", "ring", "bar")
FILLER_WORDS = ("then", "a", "at", "top", "bottom", "left", "right", "and")
QA_WORDS = ("what", "color", "is", "first", "last", "where", "the", "shape", "which", "it")


@dataclass
class Pair:
    id: int
    visual: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    caption: str
    modality: str = "video"
    task: str = "spatial"

    @property
    def frames(self) -> int:
        return self.visual.shape[0]


@dataclass
class Corpus:
    pairs: list[Pair]
    seed: int
    spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> Pair:
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    @property
    def captions(self) -> list[str]:
        return [p.caption for p in self.pairs]

    def words(self) -> list[str]:
        seen = dict.fromkeys(w for p in self.pairs for w in p.caption.split())
        return list(seen)

    def subset(self, idx: Sequence[int]) -> "Corpus":
        return Corpus([self.pairs[i] for i in idx], self.seed, dict(self.spec))

    def concatenated_captions(self) -> "Corpus":
        """Paragraph-style queries: every caption doubled, as two halves of one long query."""
        pairs = [Pair(p.id, p.visual, f"{p.caption} and {p.caption}", p.modality, p.task) for p in self.pairs]
        return Corpus(pairs, self.seed, dict(self.spec, concatenated=True))

    def export(self, directory) -> Path:
        """Write ``captions.tsv`` and one binary frame blob per pair."""
        root = Path(directory)
        (root / "frames").mkdir(parents=True, exist_ok=True)
        lines = []
        for p in self.pairs:
            lines.append(f"{p.id}\t{p.caption}\t{p.modality}")
            write_frames(root / "frames" / f"{p.id}.bin", p.visual)
        (root / "captions.tsv").write_text("\n".join(lines) + "\n")
        return root

    @classmethod
    def load(cls, directory, seed: int = -1) -> "Corpus":
        root = Path(directory)
        pairs = []
        for line in (root / "captions.tsv").read_text().splitlines():
            if not line.strip():
                continue
            pid, caption, modality = line.split("\t")
            visual = read_frames(root / "frames" / f"{pid}.bin")
            pairs.append(Pair(int(pid), visual, caption, modality))
        return cls(pairs, seed, {"loaded_from": str(root)})


def write_frames(path, video: np.ndarray) -> None:
    v = np.ascontiguousarray(video, dtype="<f4")
    if v.ndim != 4:
        raise ValueError("frame blobs hold (T, H, W, C) arrays")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4i", *v.shape))
        fh.write(v.tobytes())


def read_frames(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack("<4i", raw[:16])
    n = int(np.prod(shape))
    if len(raw) != 16 + 4 * n:
        raise ValueError(f"{path}: expected {n} float32 values, found {(len(raw) - 16) // 4}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(shape).astype(np.float32)


def _palette(colors: int) -> list[str]:
    if not 2 <= colors <= len(PALETTE):
        raise ValueError(f"colors must be in [2, {len(PALETTE)}]")
    return list(PALETTE)[:colors]


def _noisy(frame: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise <= 0:
        return frame.astype(np.float32)
    return np.clip(frame + rng.normal(0.0, noise, frame.shape), 0.0, 1.0).astype(np.float32)


def solid_frame(color: str, size: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(PALETTE[color], dtype=np.float32), (size, size, 3)).copy()


# ---------------------------------------------------------------- temporal corpus


def _color_sequences(names: list[str], frames: int) -> list[tuple[str, ...]]:
    """All non-palindromic sequences with distinct neighbours, mirror pairs adjacent."""
    out, seen = [], set()
    for seq in itertools.product(names, repeat=frames):
        if any(a == b for a, b in zip(seq, seq[1:])) or seq == seq[::-1] or seq in seen:
            continue
        out += [seq, seq[::-1]]
        seen.update((seq, seq[::-1]))
    return out


def gen_temporal_corpus(
    n: int,
    colors: int = 4,
    frames: int = 2,
    seed: int = 0,
    size: int = 16,
    noise: float = 0.0,
    unique: bool = False,
) -> Corpus:
    """Solid-colour frame sequences captioned "c1 then c2 ...".

    Pairs come in mirror couples (ids 2k, 2k+1): the second is the first with its
    frames and caption reversed.  ``unique`` draws distinct sequences only.
    """
    if n % 2:
        raise ValueError("temporal corpora hold mirror couples; n must be even")
    if frames < 2:
        raise ValueError("temporal videos need at least 2 frames")
    names = _palette(colors)
    rng = np.random.default_rng(derived_seed(seed, "temporal"))
    couples = []
    if unique:
        seqs = _color_sequences(names, frames)
        if n > len(seqs):
            raise ValueError(f"only {len(seqs)} distinct sequences for colors={colors}, frames={frames}")
        order = rng.permutation(len(seqs) // 2)[: n // 2]
        couples = [seqs[2 * k] for k in order]
    else:
        while len(couples) < n // 2:
            seq = [names[rng.integers(colors)]]
            while len(seq) < frames:
                c = names[rng.integers(colors)]
                if c != seq[-1]:
                    seq.append(c)
            if seq != seq[::-1]:
                couples.append(tuple(seq))
    pairs = []
    for k, seq in enumerate(couples):
        frames_ = np.stack([_noisy(solid_frame(c, size), noise, rng) for c in seq])
        pairs.append(Pair(2 * k, frames_, " then ".join(seq), "video", "temporal"))
        pairs.append(Pair(2 * k + 1, frames_[::-1].copy(), " then ".join(seq[::-1]), "video", "temporal"))
    spec = dict(kind="temporal", n=n, colors=colors, frames=frames, size=size, noise=noise, unique=unique)
    return Corpus(pairs, seed, spec)


# ---------------------------------------------------------------- spatial / image corpora


def draw_shape(canvas: np.ndarray, color: str, shape: str, quadrant: str) -> None:
    size = canvas.shape[0]
    h = size // 2
    r0 = 0 if quadrant.startswith("top") else h
    c0 = 0 if quadrant.endswith("left") else h
    rgb = np.asarray(PALETTE[color], dtype=np.float32)
    m = max(1, h // 8)
    block = np.zeros((h, h), dtype=bool)
    if shape == "square":
        block[m : h - m, m : h - m] = True
    elif shape == "ring":
        block[m : h - m, m : h - m] = True
        block[2 * m + 1 : h - 2 * m - 1, 2 * m + 1 : h - 2 * m - 1] = False
    elif shape == "bar":
        block[m : h - m, h // 2 - m : h // 2 + m] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    region = canvas[r0 : r0 + h, c0 : c0 + h]
    region[block] = rgb


AMP = 0.4


def background(size: int, kind: str = "ramp") -> np.ndarray:
    """Canvas backdrop; the ramp makes absolute location visible in pixel content."""
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    if kind == "ramp":
        r = np.linspace(0.0, 1.0, size, dtype=np.float32)
        canvas += AMP * (0.5 * r[:, None, None] + r[None, :, None])
    elif kind != "none":
        raise ValueError(f"unknown background {kind!r}")
    return canvas


def _spatial_items(names, shapes) -> list[tuple[str, str, str]]:
    return [(c, s, q) for c in names for s in shapes for q in QUADRANTS]


def gen_spatial_corpus(
    n: int,
    seed: int = 0,
    frames: int = 4,
    size: int = 16,
    colors: int = 4,
    shapes: Sequence[str] = SHAPES,
    noise: float = 0.0,
    unique: bool = False,
    modality: str = "video",
    backdrop: str = "ramp",
) -> Corpus:
    """One coloured shape in one quadrant, repeated over every frame.

    Captions read "<color> <shape> at <quadrant>".
    """
    names = _palette(colors)
    items = _spatial_items(names, list(shapes))
    rng = np.random.default_rng(derived_seed(seed, f"spatial-{modality}"))
    if unique:
        if n > len(items):
            raise ValueError(f"only {len(items)} distinct spatial items")
        chosen = [items[k] for k in rng.permutation(len(items))[:n]]
    else:
        chosen = [items[k] for k in rng.integers(len(items), size=n)]
    pairs = []
    for i, (c, s, q) in enumerate(chosen):
        canvas = background(size, backdrop)
        draw_shape(canvas, c, s, q)
        frame = _noisy(canvas, noise, rng)
        visual = np.repeat(frame[None], frames, axis=0)
        pairs.append(Pair(i, visual, f"{c} {s} at {q}", modality, "spatial"))
    spec = dict(kind="spatial", n=n, frames=frames, size=size, colors=colors, shapes=list(shapes),
                noise=noise, unique=unique, modality=modality, backdrop=backdrop)
    return Corpus(pairs, seed, spec)


def gen_image_corpus(n: int, seed: int = 0, **kwargs) -> Corpus:
    kwargs.pop("frames", None)
    c = gen_spatial_corpus(n, seed=seed, frames=1, modality="image", **kwargs)
    c.spec["kind"] = "image"
    return c


def build_vocabulary(*corpora: Corpus, extra: Sequence[str] = ()) -> Vocabulary:
    """Vocabulary covering every palette colour, shape and caption word."""
    words = list(PALETTE) + list(SHAPES) + list(FILLER_WORDS) + list(QA_WORDS) + list(extra)
    for c in corpora:
        words += c.words()
    return Vocabulary(dict.fromkeys(words))


@dataclass
class QAItem:
    video: np.ndarray
    question: str
    answer: str


def gen_qa_items(corpus: Corpus) -> list[QAItem]:
    """Question/answer triples read off each pair's generating attributes."""
    items = []
    for p in corpus:
        words = p.caption.split()
        if p.task == "temporal":
            seq = p.caption.split(" then ")
            items.append(QAItem(p.visual, "what color is first", seq[0]))
            items.append(QAItem(p.visual, "what color is last", seq[-1]))
        else:
            color, shape, where = words[0], words[1], " ".join(words[3:])
            items.append(QAItem(p.visual, "what color is the shape", color))
            items.append(QAItem(p.visual, "where is the shape", where))
            items.append(QAItem(p.visual, "which shape is it", shape))
    return items


def qa_answers(items: Sequence[QAItem]) -> list[str]:
    return list(dict.fromkeys(it.answer for it in items))


# ---------------------------------------------------------------- frame sampling


def frame_indices(source: int, target: int, phase: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Segment-based frame choice: one frame per equal segment of the source clip.

    eval takes each segment's centre (floor), train a uniformly random frame in it.
    """
    if target < 1:
        raise ValueError("target frame count must be >= 1")
    if phase not in ("train", "eval"):
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    k = np.arange(target)
    if phase == "eval":
        u = np.full(target, 0.5)
    else:
        if rng is None:
            raise ValueError("train-phase sampling needs an rng")
        u = rng.random(target)
    idx = np.floor((k + u) * source / target).astype(np.int64)
    return np.clip(idx, 0, source - 1)


def sample_frames(video: np.ndarray, target: int, phase: str = "eval", rng: np.random.Generator | None = None):
    return video[frame_indices(video.shape[0], target, phase, rng)]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    videos: torch.Tensor  # (B, T, H, W, C)
    ids: torch.Tensor  # (B, S)
    mask: torch.Tensor  # (B, S)
    modality: str
    pair_ids: list[int]
    captions: list[str]

    def __len__(self) -> int:
        return len(self.pair_ids)


def make_batch(pairs: Sequence[Pair], vocab: Vocabulary, frames: int, phase: str = "eval",
               rng: np.random.Generator | None = None) -> Batch:
    modalities = {p.modality for p in pairs}
    if len(modalities) != 1:
        raise ValueError("batches must hold a single modality")
    modality = modalities.pop()
    t = 1 if modality == "image" else frames
    vids = np.stack([sample_frames(p.visual, t, phase, rng) for p in pairs]).astype(np.float32)
    ids, mask = tokenize_batch([p.caption for p in pairs], vocab)
    return Batch(torch.from_numpy(vids), ids, mask, modality, [p.id for p in pairs], [p.caption for p in pairs])


class JointBatcher:
    """Stream of single-modality batches drawn from an image and a video corpus.

    Each batch's modality is a seeded coin flip with P(image) = ``ratio``; inside a
    corpus items are drawn without replacement, reshuffling when exhausted.
    """

    def __init__(self, image_corpus: Corpus | None, video_corpus: Corpus | None, batch_size: int,
                 ratio: float, seed: int, vocab: Vocabulary, frames: int = 4):
        if not 0.0 <= ratio <= 1.0:
            raise ValueError("mix ratio must lie in [0, 1]")
        if 0.0 < ratio < 1.0 and (not image_corpus or not video_corpus):
            raise ValueError("both corpora must be non-empty for a mixed ratio")
        if ratio == 0.0 and not video_corpus:
            raise ValueError("ratio 0 needs a video corpus")
        if ratio == 1.0 and not image_corpus:
            raise ValueError("ratio 1 needs an image corpus")
        self.corpora = {"image": image_corpus, "video": video_corpus}
        self.batch_size = batch_size
        self.ratio = ratio
        self.seed = seed
        self.vocab = vocab
        self.frames = frames
        self.rng = np.random.default_rng(derived_seed(seed, "batching"))
        self.frame_rng = np.random.default_rng(derived_seed(seed, "frames"))
        self._orders: dict[str, list[int]] = {"image": [], "video": []}

    @property
    def steps_per_epoch(self) -> int:
        sizes = [len(c) for c in self.corpora.values() if c]
        return max(1, int(np.ceil(sum(sizes) / self.batch_size)))

    def _draw(self, modality: str) -> list[Pair]:
        corpus = self.corpora[modality]
        bs = min(self.batch_size, len(corpus))
        order = self._orders[modality]
        if len(order) < bs:
            order = order + list(self.rng.permutation(len(corpus)))
        take, self._orders[modality] = order[:bs], order[bs:]
        return [corpus[i] for i in take]

    def next_modality(self) -> str:
        return "image" if self.rng.random() < self.ratio else "video"

    def __next__(self) -> Batch:
        modality = self.next_modality()
        pairs = self._draw(modality)
        return make_batch(pairs, self.vocab, self.frames, "train", self.frame_rng)

    def __iter__(self) -> Iterator[Batch]:
        return self

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "frame_rng": self.frame_rng.bit_generator.state,
            "orders": {k: [int(i) for i in v] for k, v in self._orders.items()},
        }

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.frame_rng.bit_generator.state = state["frame_rng"]
        self._orders = {k: list(v) for k, v in state["orders"].items()}


def batch_joint(image_corpus, video_corpus, batch_size: int, ratio: float, seed: int, vocab: Vocabulary,
                frames: int = 4) -> JointBatcher:
    return JointBatcher(image_corpus, video_corpus, batch_size, ratio, seed, vocab, frames)


def merge(*corpora: Corpus) -> Corpus:
    """Concatenate corpora, renumbering ids to stay unique."""
    pairs, k = [], 0
    for c in corpora:
        for p in c:
            pairs.append(Pair(k, p.visual, p.caption, p.modality, p.task))
            k += 1
    return Corpus(pairs, corpora[0].seed if corpora else 0, {"kind": "merged"})
