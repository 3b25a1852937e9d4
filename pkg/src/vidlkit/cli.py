"""``vidlkit`` command line: pretraining, finetuning, evaluation, the recipe ladder and data export."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, save_config
from .data import qa_answers
from .evaluation import (QAConfig, attach_decoder, finetune_qa, format_report, mc_score, qa_accuracy,
                         write_metrics)
from .ladder import emit_report, run_ablation_ladder
from .pipeline import build_corpora, evaluate, gradient_suite, pretrain, qa_sets, timed
from .training import load_checkpoint, save_checkpoint
from .vision import ConfigError

log = logging.getLogger("vidlkit")

OUT_ENV = "VIDLKIT_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage mistakes map to the config-error code here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="global seed; overrides the config")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command> or the config's out)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config assignment, value parsed as JSON when possible; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> Parser:
    parser = Parser(prog="vidlkit", description="Desk-scale video-language pretraining toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("pretrain", help="train a model through the configured stages")
    _common(p)

    p = sub.add_parser("finetune", help="continue training a checkpoint with the configured stages")
    _common(p)
    p.add_argument("--from", dest="source", required=True, help="run directory holding a checkpoint")

    p = sub.add_parser("eval-retrieval", help="text-to-video retrieval on the evaluation sets")
    _common(p)
    p.add_argument("--from", dest="source", required=True, help="run directory holding a checkpoint")
    p.add_argument("--frames", type=int, nargs="+", help="inference frame counts (default: eval.inference_frames)")

    p = sub.add_parser("eval-qa", help="open-ended QA finetuning/generation and multiple-choice scoring")
    _common(p)
    p.add_argument("--from", dest="source", required=True, help="run directory holding a checkpoint")

    p = sub.add_parser("ablate", help="run the recipe ladder and write its report")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="run the ladder once per seed")

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=4)

    p = sub.add_parser("gen-data", help="export the synthetic corpora")
    _common(p)
    return parser


def resolve_config(args) -> ExperimentConfig:
    base = args.config
    if base is None and getattr(args, "source", None):
        saved = Path(args.source) / "experiment.json"
        base = saved if saved.exists() else None
    if base is not None and not Path(base).is_file():
        raise ConfigError(f"config file {base} not found")
    cfg = load_config(base, args.override)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def resolve_out(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if root:
        return Path(root) / args.command
    return Path(cfg.out)


def _write_train_log(path: Path, logs) -> None:
    keys = sorted({k for stage in logs for rec in stage for k in rec.losses})
    lines = ["\t".join(["stage", "step", "lr", "modality"] + keys)]
    for i, stage in enumerate(logs):
        for rec in stage:
            vals = [f"{rec.losses.get(k, float('nan')):.8f}" for k in keys]
            lines.append("\t".join([str(i), str(rec.step), f"{rec.lr:.8e}", rec.modality] + vals))
    path.write_text("\n".join(lines) + "\n")


def _load_run(source: str):
    ck = Path(source) / "checkpoint"
    if not ck.exists():
        raise FileNotFoundError(f"{source}: no checkpoint directory")
    return load_checkpoint(ck)


def cmd_pretrain(args, cfg: ExperimentConfig, out: Path) -> int:
    corpora = build_corpora(cfg)
    (model, logs), secs = timed(pretrain, cfg, corpora)
    save_config(cfg, out / "experiment.json")
    save_checkpoint(model, out / "checkpoint", record={"seed": cfg.seed})
    _write_train_log(out / "train_log.tsv", logs)
    metrics = evaluate(model, corpora, cfg)
    write_metrics(out / "metrics.tsv", metrics)
    (out / "report.txt").write_text(format_report(metrics))
    log.info("pretrained in %.0fs; combined Avg %.1f", secs, metrics["combined.Avg"])
    return EXIT_OK


def cmd_finetune(args, cfg: ExperimentConfig, out: Path) -> int:
    model, _, _ = _load_run(args.source)
    cfg.model = model.cfg
    corpora = build_corpora(cfg)
    model, logs = pretrain(cfg, corpora, model=model)
    save_config(cfg, out / "experiment.json")
    save_checkpoint(model, out / "checkpoint", record={"seed": cfg.seed, "from": str(args.source)})
    _write_train_log(out / "train_log.tsv", logs)
    metrics = evaluate(model, corpora, cfg)
    write_metrics(out / "metrics.tsv", metrics)
    (out / "report.txt").write_text(format_report(metrics))
    return EXIT_OK


def cmd_eval_retrieval(args, cfg: ExperimentConfig, out: Path) -> int:
    model, _, _ = _load_run(args.source)
    corpora = build_corpora(cfg)
    metrics: dict[str, float] = {}
    for m in args.frames or cfg.eval.inference_frames:
        for k, v in evaluate(model, corpora, cfg, frames=m).items():
            metrics[f"frames{m}.{k}"] = v
    write_metrics(out / "metrics.tsv", metrics)
    (out / "report.txt").write_text(format_report(metrics))
    sys.stdout.write(format_report(metrics))
    return EXIT_OK


def cmd_eval_qa(args, cfg: ExperimentConfig, out: Path) -> int:
    model, _, _ = _load_run(args.source)
    if not model.tcfg.text_fusion:
        raise ConfigError("eval-qa needs a model with V2T or B fusion")
    corpora = build_corpora(cfg)
    train_items, eval_items = qa_sets(corpora)
    train_items = train_items[: cfg.eval.qa_train_items]
    frames = model.vcfg.num_frames
    # multiple choice uses the pretrained model; candidates are every answer seen for the same question
    by_question: dict[str, list[str]] = {}
    for it in train_items + eval_items:
        by_question.setdefault(it.question, [])
        if it.answer not in by_question[it.question]:
            by_question[it.question].append(it.answer)
    hits = []
    for it in eval_items:
        cands = by_question[it.question]
        best, _ = mc_score(model, it.video, it.question, cands, corpora.vocab, frames)
        hits.append(cands[best] == it.answer)
    qa_model = attach_decoder(model)
    losses = finetune_qa(qa_model, train_items, corpora.vocab, epochs=cfg.eval.qa_epochs, frames=frames, seed=cfg.seed)
    qcfg = QAConfig(qa_answers(train_items), max_len=cfg.eval.qa_max_len, frames=frames)
    metrics = {
        "qa.mc_accuracy": 100.0 * float(np.mean(hits)),
        "qa.train_accuracy": qa_accuracy(qa_model, train_items[:64], qcfg, corpora.vocab),
        "qa.eval_accuracy": qa_accuracy(qa_model, eval_items, qcfg, corpora.vocab),
        "qa.final_loss": float(losses[-1]),
    }
    write_metrics(out / "metrics.tsv", metrics)
    (out / "report.txt").write_text(format_report(metrics))
    sys.stdout.write(format_report(metrics))
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig, out: Path) -> int:
    seeds = args.seeds or [cfg.seed]
    summary = ["seed\trow1_minus_row0_temporal_R@1\trow2_minus_row1_Avg"]
    for s in seeds:
        report = run_ablation_ladder(cfg, seed=s)
        target = out if len(seeds) == 1 else out / f"seed_{s}"
        emit_report(report, target)
        m1 = report.margin(1, 0, "temporal.R@1")
        m2 = report.margin(2, 1, "combined.Avg")
        summary.append(f"{s}\t{m1:.1f}\t{m2:.1f}")
        sys.stdout.write((target / "ladder.txt").read_text())
    out.mkdir(parents=True, exist_ok=True)
    (out / "margins.tsv").write_text("\n".join(summary) + "\n")
    save_config(cfg, out / "experiment.json")
    return EXIT_OK


def cmd_grad_check(args, cfg: ExperimentConfig, out: Path) -> int:
    results, secs = timed(gradient_suite, dim=args.dim, tol=args.tol, max_coords=args.max_coords, seed=cfg.seed)
    ok = True
    lines = []
    for name, rep in results:
        ok &= rep.passed
        lines.append(f"{'PASS' if rep.passed else 'FAIL'}  {name:<16} worst rel err {rep.worst:.2e}  flagged {len(rep.flagged)}")
    lines.append(f"{len(results)} checks in {secs:.0f}s")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> int:
    corpora = build_corpora(cfg)
    for name in ("train_temporal", "train_spatial", "images", "eval_temporal", "eval_spatial"):
        getattr(corpora, name).export(out / name)
    corpora.vocab.save(out / "vocab.txt")
    save_config(cfg, out / "experiment.json")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-qa": cmd_eval_qa,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "gen-data": cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = resolve_out(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
