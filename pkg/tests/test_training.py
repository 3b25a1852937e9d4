import math

import numpy as np
import pytest
import torch

from vidlkit.autodiff import ParamStore
from vidlkit.data import (JointBatcher, build_vocabulary, gen_spatial_corpus, gen_temporal_corpus, make_batch,
                          merge)
from vidlkit.model import VideoTextModel
from vidlkit.objectives import RngStreams, total_loss
from vidlkit.pipeline import tiny_config
from vidlkit.training import (CheckpointError, OptimState, StageConfig, Trainer, TrainingDiverged, adamw_step,
                              decays, load_checkpoint, lr_at, resume_trainer, run_curriculum, run_stage,
                              save_checkpoint, save_trainer)


def scalar_store(v):
    return ParamStore({"p": torch.tensor([v], dtype=torch.float64)})


# ---------------------------------------------------------------- optimizer


def test_adamw_hand_step():
    p = scalar_store(1.0)
    adamw_step(p, scalar_store(1.0), OptimState(), lr=0.1, wd=0.0, decay_filter=None)
    # m_hat = 1, v_hat = 1 -> p - lr * 1 / (1 + eps)
    assert abs(float(p["p"]) - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12
    assert abs(float(p["p"]) - 0.9) < 1e-9


def test_adamw_pure_decay():
    p = scalar_store(1.0)
    adamw_step(p, scalar_store(0.0), OptimState(), lr=0.1, wd=0.02, decay_filter=None)
    assert abs(float(p["p"]) - 0.998) < 1e-12


def test_adamw_without_decay_is_plain_adaptive_update():
    rng = np.random.default_rng(0)
    p = ParamStore({"w": torch.from_numpy(rng.normal(size=(3, 2)))})
    ref = p["w"].clone()
    state = OptimState()
    m = torch.zeros_like(ref)
    v = torch.zeros_like(ref)
    for t in range(1, 4):
        g = torch.from_numpy(rng.normal(size=(3, 2)))
        adamw_step(p, ParamStore({"w": g}), state, lr=0.01, wd=0.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)).sqrt() + 1e-8)
    assert torch.allclose(p["w"], ref, rtol=1e-14, atol=0)
    assert state.step == 3


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step(scalar_store(1.0), ParamStore({"p": torch.zeros(2, dtype=torch.float64)}), OptimState(), 0.1)


def test_decay_only_on_matrices():
    assert decays("text.layers.0.attn.q.w", torch.zeros(2, 2))
    assert not decays("text.layers.0.attn.q.b", torch.zeros(2))
    assert not decays("temp", torch.zeros(()))
    assert not decays("vision.layers.0.rel_bias", torch.zeros(2, 12))


# ---------------------------------------------------------------- schedule


def test_lr_schedule_endpoints_and_midpoint():
    base, lo = 1e-3, 1e-5
    assert lr_at(0, 101, 10, base, lo) == 0.0
    assert lr_at(5, 101, 10, base, lo) == pytest.approx(base / 2)
    assert lr_at(10, 101, 10, base, lo) == base
    assert lr_at(100, 101, 10, base, lo) == lo
    assert lr_at(55, 101, 10, base, lo) == pytest.approx((base + lo) / 2, rel=1e-12)
    values = [lr_at(s, 101, 10, base, lo) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_stage_validation():
    with pytest.raises(ValueError):
        StageConfig(frames=0).validate()
    with pytest.raises(ValueError):
        StageConfig(epochs=1, warmup_epochs=2).validate()


# ---------------------------------------------------------------- stage loop


@pytest.fixture(scope="module")
def corpus16():
    c = gen_temporal_corpus(8, seed=0)
    s = gen_spatial_corpus(8, seed=0, frames=2)
    m = merge(s, c)
    return m, build_vocabulary(m)


def make(corpus16, objectives=("VTC", "VTM", "MLM"), fusion="V2T", seed=0, frames=2):
    corpus, vocab = corpus16
    model = VideoTextModel(tiny_config(fusion_mode=fusion, objectives=objectives, vocab_size=len(vocab), seed=seed))
    batcher = JointBatcher(None, corpus, 8, 0.0, seed, vocab, frames)
    return model, batcher


def test_seeded_runs_are_identical(corpus16):
    stage = StageConfig(frames=2, epochs=2, batch_size=8, lr=1e-3, warmup_epochs=0.5)
    curves = []
    for _ in range(2):
        model, batcher = make(corpus16)
        _, log = run_stage(model, batcher, stage, seed=3)
        curves.append([r.losses["total"] for r in log])
    assert len(curves[0]) == 4
    assert max(abs(a - b) for a, b in zip(*curves)) <= 1e-7


def test_step_zero_vtc_is_near_log_batch(corpus16):
    model, batcher = make(corpus16, objectives=("VTC",), fusion="None")
    stage = StageConfig(frames=2, epochs=1, batch_size=8, objectives=("VTC",), warmup_epochs=0)
    _, log = run_stage(model, batcher, stage)
    assert abs(log[0].losses["VTC"] - math.log(8)) <= 0.3 * math.log(8)


def test_overfits_sixteen_pairs():
    # distinct captions, otherwise duplicate pairs put a floor under the contrastive loss
    corpus = merge(gen_spatial_corpus(8, seed=0, frames=2, unique=True), gen_temporal_corpus(8, seed=0, unique=True))
    vocab = build_vocabulary(corpus)
    model = VideoTextModel(tiny_config(fusion_mode="None", objectives=("VTC",), vocab_size=len(vocab)))
    batcher = JointBatcher(None, corpus, 16, 0.0, 0, vocab, 2)
    stage = StageConfig(frames=2, epochs=300, batch_size=16, lr=5e-4, objectives=("VTC",), warmup_epochs=2)
    _, log = run_stage(model, batcher, stage)
    first, last = log[0].losses["total"], log[-1].losses["total"]
    assert last < 0.25 * first


def test_non_finite_loss_aborts_with_step(corpus16):
    model, batcher = make(corpus16, objectives=("VTC",), fusion="None")
    stage = StageConfig(frames=2, epochs=1, batch_size=8, objectives=("VTC",), warmup_epochs=0)
    trainer = Trainer(model, batcher, stage, 0)
    trainer.train_step()
    model.params["vision.patch.w"] = torch.full_like(model.params["vision.patch.w"], float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        trainer.train_step()
    assert info.value.step == 1


# ---------------------------------------------------------------- curricula


def test_curriculum_pads_temporal_positions(corpus16):
    corpus, vocab = corpus16
    stages = [StageConfig(frames=1, epochs=1, batch_size=8, objectives=("VTC",), warmup_epochs=0),
              StageConfig(frames=4, epochs=1, batch_size=8, objectives=("VTC",), warmup_epochs=0)]
    factory = lambda st: JointBatcher(None, corpus, 8, 0.0, 0, vocab, st.frames)  # noqa: E731

    def one_frame_model():
        cfg = tiny_config(fusion_mode="None", objectives=("VTC",), vocab_size=len(vocab))
        cfg.vision.num_frames = 1
        return VideoTextModel(cfg)

    stage_one_only, _ = run_curriculum(one_frame_model(), stages[:1], factory)
    entering = {}
    run_curriculum(one_frame_model(), stages, factory, on_stage_start=lambda i, m: entering.setdefault(i, m.params.clone()))
    pos = entering[1]["vision.temporal_pos"]
    assert pos.shape[0] == 4
    assert torch.equal(pos[:1], stage_one_only.params["vision.temporal_pos"])
    assert torch.count_nonzero(pos[1:]) == 0
    for n in stage_one_only.params:
        if n != "vision.temporal_pos":
            assert torch.equal(entering[1][n], stage_one_only.params[n]), n


def test_curriculum_rejects_decreasing_frames(corpus16):
    model, _ = make(corpus16)
    with pytest.raises(ValueError):
        run_curriculum(model, [StageConfig(frames=4), StageConfig(frames=2)], lambda s: None)


def test_single_stage_curriculum_equals_run_stage(corpus16):
    stage = StageConfig(frames=2, epochs=1, batch_size=8, warmup_epochs=0)
    a, ba = make(corpus16)
    _, la = run_stage(a, ba, stage, seed=0)
    b, bb = make(corpus16)
    _, logs = run_curriculum(b, [stage], lambda s: bb, seed=0)
    assert [r.losses for r in la] == [r.losses for r in logs[0]]
    assert all(torch.equal(a.params[n], b.params[n]) for n in a.params)


@pytest.mark.slow
def test_one_to_four_frames_lowers_temporal_loss():
    corpus = gen_temporal_corpus(64, colors=4, frames=4, seed=0)
    vocab = build_vocabulary(corpus)
    cfg = tiny_config(fusion_mode="None", objectives=("VTC",), vocab_size=len(vocab))
    cfg.vision.num_frames = 1
    model = VideoTextModel(cfg)
    factory = lambda st: JointBatcher(None, corpus, 16, 0.0, 0, vocab, st.frames)  # noqa: E731
    s1 = StageConfig(frames=1, epochs=10, batch_size=16, lr=1e-3, objectives=("VTC",))
    s2 = StageConfig(frames=4, epochs=10, batch_size=16, lr=1e-3, objectives=("VTC",))
    snap = {}
    run_curriculum(model, [s1, s2], factory, on_stage_start=lambda i, m: snap.setdefault(i, m.clone()))
    frozen = snap[1]

    def temporal_loss(m):
        batch = make_batch(list(corpus), vocab, frames=4)
        with torch.no_grad():
            return float(total_loss(m, batch, ("VTC",), RngStreams(0)).total)

    assert temporal_loss(model) < temporal_loss(frozen)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(corpus16, tmp_path):
    model, batcher = make(corpus16)
    stage = StageConfig(frames=2, epochs=1, batch_size=8, warmup_epochs=0)
    trainer = Trainer(model, batcher, stage, 0)
    trainer.run(until=1)
    save_checkpoint(model, tmp_path / "ck", trainer.optim, record={"note": "x"})
    back, optim, state = load_checkpoint(tmp_path / "ck", expected=model.cfg)
    assert list(back.params) == list(model.params)
    assert all(torch.equal(back.params[n], model.params[n]) and back.params[n].dtype == model.params[n].dtype
               for n in model.params)
    assert optim.step == 1 and all(torch.equal(optim.m[n], trainer.optim.m[n]) for n in optim.m)
    assert state["note"] == "x"
    line = (tmp_path / "ck" / "manifest.txt").read_text().splitlines()[0].split()
    assert len(line) == 5


def test_checkpoint_config_mismatch_lists_fields(corpus16, tmp_path):
    model, _ = make(corpus16)
    save_checkpoint(model, tmp_path / "ck")
    other = tiny_config(temporal_mode="MP", vocab_size=model.tcfg.vocab_size, objectives=model.cfg.objectives)
    with pytest.raises(CheckpointError, match="vision.temporal_mode"):
        load_checkpoint(tmp_path / "ck", expected=other)


def test_corrupt_checkpoint_rejected(corpus16, tmp_path):
    model, _ = make(corpus16)
    root = save_checkpoint(model, tmp_path / "ck")
    blob = (root / "weights.bin").read_bytes()
    (root / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(root)
    (root / "weights.bin").write_bytes(blob)
    lines = (root / "manifest.txt").read_text().splitlines()
    name, dtype, shape, off, length = lines[1].split()
    lines[1] = " ".join([name, dtype, shape, "0", length])
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(root)
    (root / "manifest.txt").write_text("garbage line\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(root)


def test_resume_matches_uninterrupted_run(corpus16, tmp_path):
    stage = StageConfig(frames=2, epochs=3, batch_size=8, lr=1e-3, warmup_epochs=1)
    model, batcher = make(corpus16)
    full = Trainer(model, batcher, stage, 5).run()
    ref = [r.losses["total"] for r in full]

    model, batcher = make(corpus16)
    first = Trainer(model, batcher, stage, 5)
    first.run(until=3)
    save_trainer(first, tmp_path / "mid")
    _, fresh_batcher = make(corpus16)
    resumed = resume_trainer(tmp_path / "mid", fresh_batcher)
    assert resumed.step == 3
    tail = [r.losses["total"] for r in resumed.run()]
    got = [r.losses["total"] for r in first.log] + tail
    assert len(got) == len(ref)
    assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-6


def test_resume_needs_trainer_state(corpus16, tmp_path):
    model, batcher = make(corpus16)
    save_checkpoint(model, tmp_path / "ck")
    with pytest.raises(CheckpointError):
        resume_trainer(tmp_path / "ck", batcher)
