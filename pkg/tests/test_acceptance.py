"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the session summary.

Each test uses the criterion's stated tolerance; none is relaxed to make a criterion pass.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from vidlkit.autodiff import ParamStore
from vidlkit.config import ExperimentConfig, load_config
from vidlkit.data import JointBatcher, build_vocabulary, gen_spatial_corpus, gen_temporal_corpus, merge
from vidlkit.evaluation import (RerankConfig, infer_frames, mc_choice, mirror_discrimination, rerank_order,
                                retrieval_eval, stage_one_order)
from vidlkit.ladder import run_ablation_ladder
from vidlkit.model import VideoTextModel
from vidlkit.objectives import binary_cross_entropy, masked_count, plan_text_mask, plan_video_mask, vtc_loss
from vidlkit.pipeline import gradient_suite, tiny_config
from vidlkit.text import MASK
from vidlkit.training import (OptimState, StageConfig, Trainer, adamw_step, load_checkpoint, resume_trainer,
                              run_stage, save_checkpoint, save_trainer)
from vidlkit.vision import VisionConfig, encode_video, extend_temporal_pos, init_params, interp_temporal_pos, patchify

pytestmark = pytest.mark.slow

RESULTS: dict[int, tuple[bool, str]] = {}
TITLES = {
    1: "gradient suite",
    2: "WA(k=1) equals TA",
    3: "temporal directional claim",
    4: "fusion directional claim",
    5: "masking statistics",
    6: "exact-value oracles",
    7: "rerank degeneracies",
    8: "positional-embedding rules",
    9: "determinism and persistence",
    10: "ladder report",
}
SEEDS = (0, 1, 2)


def check(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n} ({TITLES[n]}): {detail}"


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = []
    for n, title in TITLES.items():
        ok, detail = RESULTS.get(n, (False, "not run"))
        lines.append(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    write = tr.write_line if tr is not None else print
    write("")
    write("acceptance summary")
    for line in lines:
        write(line)


# ---------------------------------------------------------------- 1


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    results = gradient_suite(dim=16, tol=1e-4, batch=4)
    secs = time.perf_counter() - t0
    failed = [name for name, rep in results if not rep.passed]
    worst = max(rep.worst for _, rep in results)
    names = {name for name, _ in results}
    covered = {f"loss/{x}" for x in ("VTC", "VTM", "MLM", "MVM", "total")} <= names and len(names) >= 15
    check(1, not failed and covered and secs < 300,
          f"{len(results)} checks, worst rel err {worst:.1e}, failed {failed or 'none'}, {secs:.0f}s")


# ---------------------------------------------------------------- 2


def test_criterion_02_window_one_equals_temporal_attention():
    ta = VisionConfig(image_size=16, patch_size=8, dim=16, layers=2, heads=2, tc_hidden=8, prompts=2, num_frames=4,
                      proj_dim=16, temporal_mode="TA")
    wa = replace(ta, temporal_mode="WA", window=1)
    worst = 0.0
    for seed in range(20):
        p = ParamStore()
        init_params(p, ta, seed, torch.float64)
        gen = torch.Generator().manual_seed(seed)
        p = p.map(lambda t: t + 0.1 * torch.randn(t.shape, generator=gen, dtype=t.dtype))
        v = torch.from_numpy(np.random.default_rng(seed).random((2, 4, 16, 16, 3)))
        s1, e1 = encode_video(p, ta, v)
        s2, e2 = encode_video(p, wa, v)
        worst = max(worst, float((s1 - s2).abs().max()), float((e1 - e2).abs().max()))
    check(2, worst <= 1e-6, f"max abs diff {worst:.1e} over 20 seeds")


# ---------------------------------------------------------------- 3


def _temporal_run(mode: str, seed: int, train, test, vocab):
    base = ExperimentConfig().model
    cfg = replace(base, vision=replace(base.vision, temporal_mode=mode, num_frames=2),
                  text=replace(base.text, fusion_mode="None"), objectives=("VTC",), seed=seed)
    model = VideoTextModel(cfg)
    stage = StageConfig(frames=2, epochs=10, batch_size=16, lr=5e-4, objectives=("VTC",))
    run_stage(model, JointBatcher(None, train, 16, 0.0, seed, vocab, 2), stage, seed)
    r1 = retrieval_eval(model, test, vocab, RerankConfig(rerank=False)).r1
    return r1, mirror_discrimination(model, test, vocab)


def test_criterion_03_temporal_attention_beats_mean_pooling():
    t0 = time.perf_counter()
    ta_r1, mp_r1, mp_mirror = [], [], []
    for seed in SEEDS:
        train = gen_temporal_corpus(512, frames=2, seed=seed)
        test = gen_temporal_corpus(12, frames=2, seed=seed + 7919, unique=True)
        vocab = build_vocabulary(train, test)
        ta_r1.append(_temporal_run("TA", seed, train, test, vocab)[0])
        r1, mirror = _temporal_run("MP", seed, train, test, vocab)
        mp_r1.append(r1)
        mp_mirror.append(mirror)
    secs = time.perf_counter() - t0
    margin = float(np.mean(ta_r1) - np.mean(mp_r1))
    check(3, margin >= 20 and np.mean(mp_mirror) <= 55 and secs < 900,
          f"TA R@1 {np.mean(ta_r1):.1f} vs MP {np.mean(mp_r1):.1f} (margin {margin:.1f}), "
          f"MP mirror {np.mean(mp_mirror):.1f}%, {secs:.0f}s")


# ---------------------------------------------------------------- ladder shared by 4 and 10


@pytest.fixture(scope="module")
def ladder():
    cfg = load_config()
    t0 = time.perf_counter()
    reports = [run_ablation_ladder(cfg, seed=s) for s in SEEDS]
    return reports, time.perf_counter() - t0


def test_criterion_04_fusion_with_rerank_beats_vtc_only(ladder):
    reports, _ = ladder
    margins = [r.margin(2, 1, "combined.Avg") for r in reports]
    mean = float(np.mean(margins))
    check(4, math.isfinite(mean) and mean >= 5,
          f"row 2 minus row 1 combined Avg per seed {[round(m, 1) for m in margins]}, mean {mean:.1f} (need >= 5)")


# ---------------------------------------------------------------- 5


def test_criterion_05_masking_statistics():
    rng = np.random.default_rng(0)
    ids = rng.integers(MASK + 1, 40, size=(2000, 10))
    plan = plan_text_mask(ids, 0.5, rng, 40)
    frac = len(plan) / ids.size
    acts = np.array(plan.actions)
    shares = [float((acts == a).mean()) for a in ("mask", "random", "keep")]
    split_ok = all(abs(s - e) <= 0.02 for s, e in zip(shares, (0.8, 0.1, 0.1)))

    counts_ok = True
    for eligible in (4, 7, 16, 49):
        m = plan_video_mask(5, 3, eligible, 0.75, np.random.default_rng(eligible))
        counts_ok &= bool((m.reshape(5, -1).sum(1) == masked_count(3 * eligible, 0.75)).all())
        counts_ok &= masked_count(3 * eligible, 0.75) == round(0.75 * 3 * eligible)
    cfg = tiny_config(objectives=("VTC", "MVM"), fusion_mode="None")
    model = VideoTextModel(cfg)
    v = torch.from_numpy(np.random.default_rng(0).random((2, 2, 16, 16, 3)))
    pm = np.ones((2, 2, model.vcfg.num_patches), dtype=bool)
    cls_ok = torch.equal(patchify(v, model.vcfg, model.params)[:, :, 0],
                         patchify(v, model.vcfg, model.params, patch_mask=pm)[:, :, 0])
    check(5, 0.48 <= frac <= 0.52 and split_ok and counts_ok and cls_ok,
          f"masked fraction {frac:.3f}, split {[round(s, 3) for s in shares]}, "
          f"exact patch counts {counts_ok}, CLS untouched {cls_ok}")


# ---------------------------------------------------------------- 6


def test_criterion_06_exact_value_oracles():
    d = torch.float64
    e1 = torch.nn.functional.normalize(torch.randn(1, 8, dtype=d), dim=-1)
    vtc1 = float(vtc_loss(e1, torch.nn.functional.normalize(torch.randn(1, 8, dtype=d), dim=-1), torch.tensor(0.07)))
    vtc2 = float(vtc_loss(torch.eye(2, dtype=d), torch.eye(2, dtype=d), torch.tensor(1.0, dtype=d)))
    vtm = float(binary_cross_entropy(torch.zeros(6, dtype=d), torch.tensor([1, 1, 0, 0, 0, 0])))
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    best, scores = mc_choice([0.9, 0.1], [logit(0.2), logit(0.9)])
    p = ParamStore({"p": torch.tensor([1.0], dtype=d)})
    adamw_step(p, ParamStore({"p": torch.tensor([1.0], dtype=d)}), OptimState(), lr=0.1, wd=0.0, decay_filter=None)
    q = ParamStore({"p": torch.tensor([1.0], dtype=d)})
    adamw_step(q, ParamStore({"p": torch.tensor([0.0], dtype=d)}), OptimState(), lr=0.1, wd=0.02, decay_filter=None)
    ok = (vtc1 == 0.0 and abs(vtc2 - 0.31326) <= 1e-5 and abs(vtm - math.log(2)) <= 1e-9
          and np.allclose(scores, [0.41, 0.66], atol=1e-12, rtol=0) and best == 1
          and abs(float(p["p"]) - 0.9) <= 1e-9 and abs(float(q["p"]) - 0.998) <= 1e-9)
    check(6, ok, f"VTC(B=1) {vtc1}, VTC 2x2 {vtc2:.6f}, VTM {vtm:.12f}, mc {np.round(scores, 12).tolist()} -> {best}, "
                 f"adamw {float(p['p']):.10f}/{float(q['p']):.10f}")


# ---------------------------------------------------------------- 7


def test_criterion_07_rerank_degeneracies():
    full_ok = top1_ok = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 30))
        sim, vtm = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        score = lambda r, c, vtm=vtm: vtm[r, c]  # noqa: E731
        for k in (n, n + 5, 128):
            full_ok &= np.array_equal(rerank_order(sim, score, RerankConfig(k)),
                                      np.argsort(-vtm, axis=1, kind="stable"))
        top1_ok &= np.array_equal(rerank_order(sim, score, RerankConfig(1))[:, 0], stage_one_order(sim)[:, 0])
    check(7, full_ok and top1_ok, f"K>=N equals VTM order {full_ok}, K=1 keeps stage-1 top-1 {top1_ok} (20 cases)")


# ---------------------------------------------------------------- 8


def test_criterion_08_positional_embedding_rules():
    gen = torch.Generator().manual_seed(0)
    pad_ok = interp_ok = True
    for t in (1, 2, 4):
        pos = torch.randn(t, 16, generator=gen, dtype=torch.float64)
        for m in (t + 1, 2 * t + 3, 8):
            out = extend_temporal_pos(pos, m)
            pad_ok &= torch.equal(out[:t], pos) and torch.count_nonzero(out[t:]) == 0
        if t > 1:
            for m in (t, 3, 8, 13):
                out = interp_temporal_pos(pos, m)
                interp_ok &= torch.equal(out[0], pos[0]) and torch.equal(out[-1], pos[-1])
    corpus = merge(gen_spatial_corpus(6, seed=0, frames=2), gen_temporal_corpus(6, seed=0))
    vocab = build_vocabulary(corpus)
    model = VideoTextModel(tiny_config(vocab_size=len(vocab), objectives=("VTC", "VTM", "MLM")))
    a = retrieval_eval(model, corpus, vocab, RerankConfig(4))
    b = infer_frames(model, corpus, vocab, model.vcfg.num_frames, RerankConfig(4))
    same = np.array_equal(a.ranks, b.ranks) and (a.r1, a.r5, a.r10, a.median_rank) == (b.r1, b.r5, b.r10, b.median_rank)
    check(8, pad_ok and interp_ok and same,
          f"zero-pad prefix exact {pad_ok}, interpolation endpoints exact {interp_ok}, infer_frames(M=T) identical {same}")


# ---------------------------------------------------------------- 9


def test_criterion_09_determinism_and_persistence(tmp_path):
    corpus = merge(gen_spatial_corpus(8, seed=0, frames=2), gen_temporal_corpus(8, seed=0))
    vocab = build_vocabulary(corpus)

    def make(seed=0):
        model = VideoTextModel(tiny_config(vocab_size=len(vocab), objectives=("VTC", "VTM", "MLM"), seed=seed))
        return model, JointBatcher(None, corpus, 8, 0.0, seed, vocab, 2)

    stage = StageConfig(frames=2, epochs=3, batch_size=8, lr=1e-3, warmup_epochs=1)
    curves = []
    for _ in range(2):
        model, batcher = make()
        _, log = run_stage(model, batcher, stage, seed=3)
        curves.append([r.losses["total"] for r in log])
    det = max(abs(x - y) for x, y in zip(*curves))

    model, batcher = make()
    trainer = Trainer(model, batcher, stage, 0)
    trainer.run(until=2)
    save_checkpoint(model, tmp_path / "ck", trainer.optim)
    back, optim, _ = load_checkpoint(tmp_path / "ck", expected=model.cfg)
    exact = (list(back.params) == list(model.params)
             and all(torch.equal(back.params[n], model.params[n]) for n in model.params)
             and all(torch.equal(optim.m[n], trainer.optim.m[n]) and torch.equal(optim.v[n], trainer.optim.v[n])
                     for n in trainer.optim.m))

    model, batcher = make()
    ref = [r.losses["total"] for r in Trainer(model, batcher, stage, 5).run()]
    model, batcher = make()
    first = Trainer(model, batcher, stage, 5)
    first.run(until=3)
    save_trainer(first, tmp_path / "mid")
    resumed = resume_trainer(tmp_path / "mid", make()[1])
    got = [r.losses["total"] for r in first.log] + [r.losses["total"] for r in resumed.run()]
    resume_err = max(abs(x - y) for x, y in zip(got, ref)) if len(got) == len(ref) else math.inf
    check(9, det <= 1e-7 and exact and resume_err <= 1e-6,
          f"seeded runs differ by {det:.1e}, checkpoint bit-exact {exact}, resume error {resume_err:.1e}")


# ---------------------------------------------------------------- 10


def test_criterion_10_ladder_report(ladder):
    reports, secs = ladder
    rows_ok = all(len(r.rows) == 6 and all(row.status == "ok" for row in r.rows) for r in reports)
    m1 = [r.margin(1, 0, "temporal.R@1") for r in reports]
    m2 = [r.margin(2, 1, "combined.Avg") for r in reports]
    wins1 = sum(m > 0 for m in m1)
    wins2 = sum(m > 0 for m in m2)
    check(10, rows_ok and secs < 45 * 60 and wins1 >= 2 and wins2 >= 2,
          f"all rows ok {rows_ok}, {secs / 60:.1f} min, row1-row0 temporal R@1 {[round(m, 1) for m in m1]} "
          f"({wins1}/3 > 0), row2-row1 Avg {[round(m, 1) for m in m2]} ({wins2}/3 > 0)")
