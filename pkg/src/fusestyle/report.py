"""Experiment report files and cross-seed aggregation.

A run directory holds ``report.txt`` (human table), ``report.jsonl`` (one JSON
object per line, keyed by ``record``), ``predictions.csv`` and
``decisions.log``. Timing lives in its own ``timing`` records so the
remaining records are reproducible byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .train import ExperimentReport, Prediction

SEED_KEYS = ("seed", "init_seed", "shuffle_seed", "aug_seed")
PREDICTIONS_HEADER = "sample_id,domain,label,logit,pred"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def report_records(report: ExperimentReport) -> List[dict]:
    records = [
        {
            "record": "summary",
            "strategy": report.strategy,
            "holdout": report.holdout,
            "seen": report.seen,
            "seed": report.seed,
            "config": report.config,
        }
    ]
    for domain in sorted(report.accuracy):
        records.append(
            {
                "record": "accuracy",
                "domain": domain,
                "accuracy": report.accuracy[domain],
                "unseen": domain == report.holdout,
            }
        )
    for epoch, (loss, lr) in enumerate(zip(report.loss_curve, report.lr_curve), start=1):
        records.append({"record": "epoch", "epoch": epoch, "loss": loss, "lr": lr})
    for epoch, seconds in enumerate(report.epoch_times, start=1):
        records.append({"record": "timing", "epoch": epoch, "seconds": seconds})
    return records


def format_report_text(report: ExperimentReport) -> str:
    domains = sorted(report.accuracy)
    cells = [f"{d}{'*' if d == report.holdout else ''}" for d in domains]
    lines = [
        f"strategy: {report.strategy}    holdout (unseen, marked *): {report.holdout}    seed: {report.seed}",
        "",
        "Test Accuracy(%)",
        " ".join(f"{c:>9}" for c in cells),
        " ".join(f"{report.accuracy[d]:>9.2f}" for d in domains),
        "",
        f"{'epoch':>5} {'loss':>10} {'lr':>10}",
    ]
    for epoch, (loss, lr) in enumerate(zip(report.loss_curve, report.lr_curve), start=1):
        lines.append(f"{epoch:>5} {loss:>10.6f} {lr:>10.3g}")
    lines += ["", "timing (excluded from reproducibility checks)"]
    for epoch, seconds in enumerate(report.epoch_times, start=1):
        lines.append(f"{epoch:>5} {seconds:>10.3f} s")
    return "\n".join(lines) + "\n"


def predictions_csv(predictions: Sequence[Prediction]) -> str:
    rows = [PREDICTIONS_HEADER]
    for p in predictions:
        rows.append(f"{p.sample_id},{p.domain},{p.label},{p.logit!r},{p.pred}")
    return "\n".join(rows) + "\n"


def read_predictions_csv(path) -> List[Prediction]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != PREDICTIONS_HEADER:
        raise ValidationError(f"{path} is not a prediction dump")
    out = []
    for line in lines[1:]:
        sid, domain, label, logit, pred = line.split(",")
        out.append(Prediction(sid, domain, int(label), float(logit), int(pred)))
    return out


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_report(report: ExperimentReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out / "report.jsonl", "".join(_dumps(r) + "\n" for r in report_records(report)))
    _atomic_write_text(out / "report.txt", format_report_text(report))
    _atomic_write_text(out / "predictions.csv", predictions_csv(report.predictions))
    _atomic_write_text(out / "decisions.log", "".join(line + "\n" for line in report.decision_log))
    return out


@dataclass
class LoadedReport:
    path: str
    strategy: str
    holdout: str
    seed: int
    config: dict
    accuracy: Dict[str, float]


def read_report(path) -> LoadedReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.jsonl"
    summary, accuracy = None, {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("record") == "summary":
            summary = rec
        elif rec.get("record") == "accuracy":
            accuracy[rec["domain"]] = rec["accuracy"]
    if summary is None or not accuracy:
        raise ValidationError(f"{path} is missing summary or accuracy records")
    return LoadedReport(str(path), summary["strategy"], summary["holdout"], summary["seed"], summary["config"], accuracy)


@dataclass
class AggregateRow:
    strategy: str
    holdout: str
    seeds: List[int]
    mean_accuracy: Dict[str, float]


def _without_seeds(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in SEED_KEYS}


def aggregate(reports: Sequence[LoadedReport]) -> List[AggregateRow]:
    """Mean per-domain accuracy across seeds for each (strategy, holdout) group."""
    if not reports:
        raise ValidationError("no reports to aggregate")
    groups: Dict[Tuple[str, str], List[LoadedReport]] = {}
    for r in reports:
        groups.setdefault((r.strategy, r.holdout), []).append(r)
    rows = []
    for (strategy, holdout), members in sorted(groups.items()):
        reference = _dumps(_without_seeds(members[0].config))
        for m in members[1:]:
            if _dumps(_without_seeds(m.config)) != reference:
                raise ValidationError(f"conflicting configs in group ({strategy}, {holdout}): {members[0].path} vs {m.path}")
        domains = sorted(members[0].accuracy)
        means = {d: float(np.mean([m.accuracy[d] for m in members])) for d in domains}
        rows.append(AggregateRow(strategy, holdout, sorted(m.seed for m in members), means))
    return rows


def format_aggregate(rows: Sequence[AggregateRow]) -> str:
    domains = sorted({d for r in rows for d in r.mean_accuracy})
    header = f"{'strategy':<16} {'holdout':<8} {'seeds':<10} " + " ".join(f"{d:>9}" for d in domains)
    lines = ["Test Accuracy(%), mean over seeds; unseen domain marked *", header, "-" * len(header)]
    for r in rows:
        cells = []
        for d in domains:
            value = r.mean_accuracy.get(d)
            text = "-" if value is None else f"{value:.2f}" + ("*" if d == r.holdout else " ")
            cells.append(f"{text:>9}")
        seeds = ",".join(str(s) for s in r.seeds)
        lines.append(f"{r.strategy:<16} {r.holdout:<8} {seeds:<10} " + " ".join(cells))
    return "\n".join(lines) + "\n"


def aggregate_csv(rows: Sequence[AggregateRow]) -> str:
    domains = sorted({d for r in rows for d in r.mean_accuracy})
    out = ["strategy,holdout,seeds," + ",".join(domains) + ",unseen"]
    for r in rows:
        values = ",".join(f"{r.mean_accuracy[d]:.4f}" if d in r.mean_accuracy else "" for d in domains)
        out.append(f"{r.strategy},{r.holdout},{' '.join(map(str, r.seeds))},{values},{r.holdout}")
    return "\n".join(out) + "\n"
