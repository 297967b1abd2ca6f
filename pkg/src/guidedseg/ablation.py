"""Variant grids: train each variant, evaluate it, tabulate the results."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .episodes import Dataset
from .inference import EvalProtocol, MetricsReport, evaluate, model_predictor
from .network import save_checkpoint
from .training import LOSS_GRID, VECTOR_GRID, TrainConfig, Variant, train

GRIDS = {"vectors": VECTOR_GRID, "losses": LOSS_GRID}


@dataclass
class AblationRow:
    variant: Variant
    report: MetricsReport

    def to_dict(self) -> dict:
        v = self.variant
        losses = [name for name, on in (("L_s1", v.support_loss), ("L_s2", v.refine_loss)) if on]
        return {
            "variant": v.name,
            "query_vectors": list(v.query_vectors),
            "losses": losses + ["L_q"],
            "mIoU": self.report.mIoU,
            "FB_IoU": self.report.FB_IoU,
            "per_class_iou": self.report.to_dict()["per_class_iou"],
        }


def train_and_evaluate(dataset: Dataset, config: TrainConfig, protocol: EvalProtocol,
                       fusion: str = "cgm", out_dir=None) -> MetricsReport:
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.txt"
    model, _ = train(dataset, config, log_path=log_path)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.bin")
    return evaluate(model_predictor(model, fusion), dataset, protocol)


def _job(args):
    return train_and_evaluate(*args)


def run_ablation(dataset: Dataset, grid: str, config: TrainConfig, protocol: EvalProtocol,
                 fusion: str = "cgm", out_dir=None, jobs: int = 1) -> list:
    """One row per variant of ``grid`` ('vectors' or 'losses'), in grid order."""
    if grid not in GRIDS:
        raise ValueError(f"grid must be one of {sorted(GRIDS)}, got {grid!r}")
    variants = GRIDS[grid]
    tasks = []
    for v in variants:
        sub = None if out_dir is None else Path(out_dir) / v.name.replace("+", "_")
        tasks.append((dataset, replace(config, variant=v), protocol, fusion, sub))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_job, tasks))
    else:
        reports = [_job(t) for t in tasks]
    return [AblationRow(v, r) for v, r in zip(variants, reports)]


def best_rows(rows) -> list:
    """Names of every row that attains the maximum mIoU."""
    top = max(r.report.mIoU for r in rows)
    return [r.variant.name for r in rows if r.report.mIoU == top]


def format_table(rows) -> str:
    header = ("variant", "vectors", "losses", "mIoU", "FB-IoU")
    body = []
    for row in rows:
        d = row.to_dict()
        body.append((d["variant"], "+".join(d["query_vectors"]), "+".join(d["losses"]),
                     f"{d['mIoU']:.4f}", f"{d['FB_IoU']:.4f}"))
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
             for r in [header] + body]
    return "\n".join(lines) + "\n"


def write_ablation(rows, out_dir, grid: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"grid": grid, "rows": [r.to_dict() for r in rows], "best": best_rows(rows)}
    (out / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n")
    (out / "ablation.txt").write_text(format_table(rows))
