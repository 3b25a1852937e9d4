import numpy as np
import pytest
import torch

from vidlkit.data import (Corpus, JointBatcher, build_vocabulary, frame_indices, gen_image_corpus, gen_qa_items,
                          gen_spatial_corpus, gen_temporal_corpus, make_batch, merge, read_frames, sample_frames,
                          write_frames)
from vidlkit.model import VideoTextModel
from vidlkit.pipeline import tiny_config


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    return len(a) == len(b) and all(
        p.id == q.id and p.caption == q.caption and p.modality == q.modality and np.array_equal(p.visual, q.visual)
        for p, q in zip(a, b)
    )


# ---------------------------------------------------------------- temporal corpus


def test_temporal_corpus_contains_mirror_couples():
    c = gen_temporal_corpus(4, colors=2, frames=2, seed=0)
    caps = set(c.captions)
    assert {"red then green", "green then red"} <= caps
    for k in range(0, len(c), 2):
        a, b = c[k], c[k + 1]
        assert b.caption == " then ".join(reversed(a.caption.split(" then ")))
        assert np.array_equal(b.visual, a.visual[::-1])


def test_temporal_consecutive_frames_differ():
    c = gen_temporal_corpus(40, colors=3, frames=4, seed=1)
    for p in c:
        assert p.visual.shape[0] == 4 and p.modality == "video" and p.task == "temporal"
        for f0, f1 in zip(p.visual, p.visual[1:]):
            assert not np.array_equal(f0, f1)


def test_temporal_corpus_errors():
    with pytest.raises(ValueError):
        gen_temporal_corpus(3)
    with pytest.raises(ValueError):
        gen_temporal_corpus(4, frames=1)
    with pytest.raises(ValueError):
        gen_temporal_corpus(4, colors=1)
    with pytest.raises(ValueError):
        gen_temporal_corpus(100, colors=2, frames=2, unique=True)


@pytest.mark.parametrize("gen", [lambda s: gen_temporal_corpus(16, seed=s, noise=0.05),
                                 lambda s: gen_spatial_corpus(16, seed=s, noise=0.05),
                                 lambda s: gen_image_corpus(16, seed=s)])
def test_regeneration_is_bit_identical(gen):
    assert corpora_equal(gen(3), gen(3))
    assert not corpora_equal(gen(3), gen(4))


def test_ids_unique_and_merge_renumbers():
    a, b = gen_temporal_corpus(8), gen_spatial_corpus(8)
    for c in (a, b):
        assert len({p.id for p in c}) == len(c)
    m = merge(a, b)
    assert [p.id for p in m] == list(range(16))


def test_order_blind_model_cannot_tell_mirrors_apart():
    c = gen_temporal_corpus(8, colors=4, frames=2, seed=0)
    vocab = build_vocabulary(c)
    model = VideoTextModel(tiny_config(temporal_mode="MP", fusion_mode="None", objectives=("VTC",),
                                       vocab_size=len(vocab)))
    batch = make_batch(list(c), vocab, frames=2)
    with torch.no_grad():
        _, v = model.encode_video(batch.videos.double())
        _, t = model.encode_text(batch.ids, batch.mask)
    sim = (t @ v.T).numpy()
    for k in range(0, len(c), 2):
        assert sim[k, k] == pytest.approx(sim[k, k + 1], abs=1e-12)
        assert sim[k + 1, k + 1] == pytest.approx(sim[k + 1, k], abs=1e-12)


# ---------------------------------------------------------------- spatial / image corpora


def test_spatial_frames_identical_and_caption_format():
    c = gen_spatial_corpus(12, seed=0, frames=3)
    for p in c:
        assert all(np.array_equal(p.visual[0], f) for f in p.visual)
        color, shape, at, *where = p.caption.split()
        assert at == "at" and len(where) == 2
    sub = sample_frames(c[0].visual, 2)
    assert np.array_equal(sub[0], sub[1])


def test_image_corpus_is_single_frame():
    c = gen_image_corpus(10, seed=0)
    assert all(p.modality == "image" and p.frames == 1 and p.task == "spatial" for p in c)


def test_quadrant_changes_pixels():
    c = gen_spatial_corpus(64, seed=0, unique=False)
    by_cap = {p.caption: p.visual for p in c}
    caps = [k for k in by_cap if k.endswith("top left")]
    for cap in caps:
        other = cap.replace("top left", "bottom right")
        if other in by_cap:
            assert not np.array_equal(by_cap[cap], by_cap[other])


# ---------------------------------------------------------------- frame sampling


def test_eval_sampling_rules():
    assert frame_indices(4, 4, "eval").tolist() == [0, 1, 2, 3]
    assert frame_indices(4, 2, "eval").tolist() == [1, 3]
    assert frame_indices(2, 4, "eval").tolist() == [0, 0, 1, 1]  # repeat by nearest index
    with pytest.raises(ValueError):
        frame_indices(4, 0, "eval")


def test_train_sampling_deterministic_and_within_segments():
    a = frame_indices(8, 4, "train", np.random.default_rng(5))
    b = frame_indices(8, 4, "train", np.random.default_rng(5))
    assert a.tolist() == b.tolist()
    for k, i in enumerate(a):
        assert 2 * k <= i < 2 * k + 2
    with pytest.raises(ValueError):
        frame_indices(8, 4, "train")


# ---------------------------------------------------------------- batching


@pytest.fixture(scope="module")
def mix():
    v = gen_temporal_corpus(16, seed=0)
    i = gen_image_corpus(16, seed=0)
    return i, v, build_vocabulary(i, v)


def test_ratio_extremes(mix):
    i, v, vocab = mix
    assert all(next(JointBatcher(i, v, 4, 0.0, 0, vocab, 2)).modality == "video" for _ in range(10))
    b = JointBatcher(i, v, 4, 1.0, 0, vocab, 2)
    assert all(next(b).modality == "image" for _ in range(10))


def test_half_ratio_concentrates_and_never_mixes(mix):
    i, v, vocab = mix
    b = JointBatcher(i, v, 4, 0.5, 0, vocab, 2)
    mods = [b.next_modality() for _ in range(1000)]
    assert 0.46 <= mods.count("image") / 1000 <= 0.54
    for _ in range(20):
        batch = next(b)
        expected_t = 1 if batch.modality == "image" else 2
        assert batch.videos.shape[1] == expected_t


def test_mixed_batch_rejected(mix):
    i, v, vocab = mix
    with pytest.raises(ValueError):
        make_batch([i[0], v[0]], vocab, 2)
    with pytest.raises(ValueError):
        JointBatcher(None, v, 4, 0.5, 0, vocab)


def test_sampling_without_replacement_per_epoch(mix):
    _, v, vocab = mix
    b = JointBatcher(None, v, 4, 0.0, 0, vocab, 2)
    seen = [pid for _ in range(4) for pid in next(b).pair_ids]
    assert sorted(seen) == list(range(16))


def test_batch_order_deterministic_and_resumable(mix):
    i, v, vocab = mix
    a = JointBatcher(i, v, 4, 0.5, 7, vocab, 2)
    for _ in range(3):
        next(a)
    state = a.state()
    tail_a = [next(a) for _ in range(3)]
    b = JointBatcher(i, v, 4, 0.5, 7, vocab, 2)
    b.set_state(state)
    tail_b = [next(b) for _ in range(3)]
    for x, y in zip(tail_a, tail_b):
        assert x.pair_ids == y.pair_ids and torch.equal(x.videos, y.videos)


# ---------------------------------------------------------------- export / QA


def test_export_round_trip(tmp_path):
    c = merge(gen_temporal_corpus(4, seed=0, noise=0.1), gen_image_corpus(2, seed=0))
    root = c.export(tmp_path / "c")
    line = (root / "captions.tsv").read_text().splitlines()[0].split("\t")
    assert line == ["0", c[0].caption, "video"]
    blob = (root / "frames" / "0.bin").read_bytes()
    assert np.frombuffer(blob[:16], dtype="<i4").tolist() == list(c[0].visual.shape)
    back = Corpus.load(root)
    assert corpora_equal(c, back)


def test_truncated_blob_rejected(tmp_path):
    write_frames(tmp_path / "x.bin", np.zeros((1, 2, 2, 3), dtype=np.float32))
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_frames(tmp_path / "x.bin")


def test_qa_items_follow_generating_attributes():
    items = gen_qa_items(gen_temporal_corpus(2, colors=2, seed=0))
    first = {it.question: it.answer for it in items[:2]}
    assert first["what color is first"] != first["what color is last"]
    sp = gen_qa_items(gen_spatial_corpus(1, seed=0))
    assert {it.question for it in sp} == {"what color is the shape", "where is the shape", "which shape is it"}
