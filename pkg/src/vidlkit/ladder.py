"""Progressive recipe ladder: each row adds one ingredient to the previous row and is retrained."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig, apply_overrides
from .pipeline import build_corpora, evaluate, pretrain
from .training import TrainingDiverged

log = logging.getLogger(__name__)

COLUMNS = ("Step", "Delta", "R@1", "R@5", "R@10", "Avg", "T-R@1", "T-Avg", "Mirror", "Time(s)", "Status")
NUMERIC = ("R@1", "R@5", "R@10", "Avg", "T-R@1", "T-Avg", "Mirror", "Time(s)")

# Applied to the user config to obtain row 0: an image-style baseline on video data.
BASELINE = (
    'model.vision.temporal_mode="MP"',
    'model.text.fusion_mode="None"',
    'model.objectives=["VTC"]',
    "data.mix_ratio=0.0",
    "eval.frames=null",
)


@dataclass
class RowSpec:
    name: str
    delta: tuple[str, ...]
    reuse_previous: bool = False  # evaluate the previous row's model instead of retraining


@dataclass
class LadderRow:
    step: str
    delta: str
    metrics: dict[str, float]
    seconds: float
    status: str = "ok"

    def values(self) -> dict[str, object]:
        m = self.metrics
        nan = float("nan")
        return {
            "Step": self.step,
            "Delta": self.delta,
            "R@1": m.get("combined.R@1", nan),
            "R@5": m.get("combined.R@5", nan),
            "R@10": m.get("combined.R@10", nan),
            "Avg": m.get("combined.Avg", nan),
            "T-R@1": m.get("temporal.R@1", nan),
            "T-Avg": m.get("temporal.Avg", nan),
            "Mirror": m.get("temporal.mirror", nan),
            "Time(s)": self.seconds,
            "Status": self.status,
        }


@dataclass
class LadderReport:
    rows: list[LadderRow] = field(default_factory=list)
    seed: int = 0

    def row(self, i: int) -> LadderRow:
        return self.rows[i]

    def margin(self, hi: int, lo: int, key: str = "combined.Avg") -> float:
        a, b = self.rows[hi], self.rows[lo]
        if a.status != "ok" or b.status != "ok":
            return float("nan")
        return a.metrics[key] - b.metrics[key]


def _json_list(items) -> str:
    return "[" + ",".join(f'"{x}"' for x in items) + "]"


def ladder_rows(cfg: ExperimentConfig) -> list[RowSpec]:
    """Row definitions for a config; stage objective overrides follow the model's flags."""
    n = len(cfg.stages)

    def objectives(*names: str) -> tuple[str, ...]:
        lst = _json_list(names)
        return (f"model.objectives={lst}",) + tuple(f"stages.{i}.objectives={lst}" for i in range(n))

    rows = [
        RowSpec("MP baseline", ()),
        RowSpec("+ temporal attention", ('model.vision.temporal_mode="TA"',)),
        RowSpec("+ V2T fusion, VTM", ('model.text.fusion_mode="V2T"',) + objectives("VTC", "VTM")),
        RowSpec("+ MLM", objectives("VTC", "VTM", "MLM")),
    ]
    if cfg.ladder.mvm:
        rows.append(RowSpec("+ MVM", objectives("VTC", "VTM", "MLM", "MVM")))
    rows.append(RowSpec("+ images", ("data.mix_ratio=0.5",)))
    frames = max(cfg.ladder.sweep_inference_frames)
    rows.append(RowSpec(f"inference {frames} frames", (f"eval.frames={frames}",), reuse_previous=True))
    return rows


def baseline_dict(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    overrides = list(BASELINE) + [f'stages.{i}.objectives=["VTC"]' for i in range(len(cfg.stages))]
    return apply_overrides(d, overrides)


def _flatten(d, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    if isinstance(d, dict):
        for k, v in d.items():
            out.update(_flatten(v, f"{prefix}{k}."))
    elif isinstance(d, list) and d and isinstance(d[0], dict):
        for i, v in enumerate(d):
            out.update(_flatten(v, f"{prefix}{i}."))
    else:
        out[prefix[:-1]] = d
    return out


def changed_keys(a: dict, b: dict) -> set[str]:
    fa, fb = _flatten(a), _flatten(b)
    return {k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k)}


def audit(prev: dict, cur: dict, delta: tuple[str, ...]) -> None:
    """Raise if ``cur`` differs from ``prev`` anywhere outside the declared delta."""
    declared = {item.split("=", 1)[0] for item in delta}
    extra = changed_keys(prev, cur) - declared
    if extra:
        raise AssertionError(f"row config changed undeclared fields {sorted(extra)}")


def row_configs(cfg: ExperimentConfig) -> list[tuple[RowSpec, ExperimentConfig]]:
    out = []
    d = baseline_dict(cfg)
    prev = d
    for spec in ladder_rows(cfg):
        d = apply_overrides(prev, list(spec.delta))
        audit(prev, d, spec.delta)
        row_cfg = ExperimentConfig.from_dict(d)
        row_cfg.validate()
        out.append((spec, row_cfg))
        prev = d
    return out


def run_ablation_ladder(cfg: ExperimentConfig, seed: int | None = None) -> LadderReport:
    """Train and evaluate every recipe row in order under one seed."""
    if seed is not None:
        cfg = cfg.with_seed(seed)
    rows = row_configs(cfg)
    corpora = build_corpora(rows[0][1])
    report = LadderReport(seed=cfg.seed)
    model = None
    for spec, rcfg in rows:
        t0 = time.perf_counter()
        delta = "; ".join(spec.delta) or "baseline"
        try:
            if spec.reuse_previous:
                if model is None:
                    raise TrainingDiverged(-1)
            else:
                model = None
                model, _ = pretrain(rcfg, corpora)
            metrics = evaluate(model, corpora, rcfg, frames=rcfg.eval.frames)
            if not all(math.isfinite(v) for v in metrics.values()):
                raise TrainingDiverged(-1)
            status = "ok"
        except TrainingDiverged as exc:
            log.warning("row %r failed: %s", spec.name, exc)
            metrics, status, model = {}, "failed", None
        seconds = time.perf_counter() - t0
        report.rows.append(LadderRow(spec.name, delta, metrics, seconds, status))
        log.info("row %-28s avg %.1f  temporal R@1 %.1f  %.0fs", spec.name, metrics.get("combined.Avg", float("nan")),
                 metrics.get("temporal.R@1", float("nan")), seconds)
    return report


def _fmt(v) -> str:
    return f"{v:.1f}" if isinstance(v, float) else str(v)


def report_table(report: LadderReport) -> list[list[str]]:
    return [list(COLUMNS)] + [[_fmt(r.values()[c]) for c in COLUMNS] for r in report.rows]


def emit_report(report: LadderReport, path) -> tuple[Path, Path]:
    """Write ``ladder.txt`` (aligned table) and ``ladder.csv`` with the same cells."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    table = report_table(report)
    widths = [max(len(row[i]) for row in table) for i in range(len(COLUMNS))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    txt = root / "ladder.txt"
    txt.write_text("\n".join(lines) + "\n")
    csv_path = root / "ladder.csv"
    with csv_path.open("w", newline="") as fh:
        csv.writer(fh).writerows(table)
    return txt, csv_path


def read_report_csv(path) -> list[dict[str, object]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in NUMERIC:
            r[c] = float(r[c])
    return rows
