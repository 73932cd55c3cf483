import os
import json
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from rebalance.errors import InvalidInputError, RebalanceError
from rebalance.models import (
    AblationSpec,
    AnnotationLedger,
    EmbeddingDataset,
    ExperimentReport,
    GroupMetrics,
    LinearHead,
    OptimConfig,
    SelfVariant,
    TrainReport,
)
from rebalance.services import mathcore
from rebalance.services.dataset import subsample_annotations
from rebalance.services.samplers import ablation_subset
from rebalance.services.trainer import cb_last_layer_retrain, dfr

logger = logging.getLogger(__name__)

REPORT_CSV_COLUMNS = ["method", "seed", "group", "accuracy", "wga", "avg"]
ABLATION_FRACTIONS = (0.025, 0.05, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
ABLATION_COLUMNS = ["fraction", "size", "wga", "avg", "relative_gain", "error"]


def predict(head: LinearHead, features) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(np.atleast_2d(mathcore.linear_forward(head, features)), axis=1)


def evaluate(head: LinearHead, ds: EmbeddingDataset) -> GroupMetrics:
    """
    Per-group and average accuracy of ``head`` on ``ds``

    Without spurious labels only the average is filled in.

    Args:
        head (LinearHead): Head to score
        ds (EmbeddingDataset): Labelled rows

    Returns:
        GroupMetrics: Accuracies, group counts and omitted groups
    """
    labels = ds.require_class_labels()
    head.check_compatible(ds)
    correct = predict(head, ds.features) == labels
    average = float(correct.mean())
    if not ds.has_groups:
        return GroupMetrics({}, None, average, {})

    groups = ds.group_ids
    counts = np.bincount(groups, minlength=ds.num_groups)
    hits = np.bincount(groups, weights=correct, minlength=ds.num_groups)
    per_group = {g: float(hits[g] / counts[g]) for g in range(ds.num_groups) if counts[g]}
    omitted = tuple(g for g in range(ds.num_groups) if not counts[g])
    if omitted:
        logger.warning(f"Groups {omitted} are empty in '{ds.name or 'dataset'}' and left out of the minimum")
    return GroupMetrics(
        per_group_accuracy=per_group,
        worst_group_accuracy=min(per_group.values()),
        average_accuracy=average,
        counts={g: int(counts[g]) for g in per_group},
        omitted_groups=omitted,
    )


def worst_group(metrics: GroupMetrics) -> int:
    """Group with the lowest accuracy, ties to the lowest id."""
    if not metrics.per_group_accuracy:
        raise InvalidInputError("metrics carry no per-group accuracies")
    return min(metrics.per_group_accuracy, key=lambda g: (metrics.per_group_accuracy[g], g))


def model_select(
    candidates: Sequence[Tuple[LinearHead, dict]],
    val: EmbeddingDataset,
    ledger: Optional[AnnotationLedger] = None,
) -> Tuple[LinearHead, dict]:
    """Candidate with the best worst-group accuracy on ``val``; ties to the earliest."""
    if not candidates:
        raise InvalidInputError("model selection needs at least one candidate")
    val.require_groups()
    scores = [evaluate(head, val).worst_group_accuracy for head, _ in candidates]
    best = int(np.argmax(scores))
    if ledger is not None:
        ledger.reveal(np.arange(val.n), "group")
    logger.info(f"Model selection over {len(candidates)} candidates: best WGA {scores[best]:.4f} ({candidates[best][1]})")
    return candidates[best]


def pick_worst_groups(per_group: Dict[int, float], tolerance: float = 0.0) -> List[int]:
    """
    Groups to treat as worst

    With no tolerance this is the single lowest-accuracy group (ties to the
    lowest id). A positive tolerance adds every group whose accuracy is
    within ``tolerance`` of that minimum.
    """
    if not per_group:
        raise InvalidInputError("no per-group accuracies to pick worst groups from")
    if tolerance < 0.0:
        raise InvalidInputError(f"tolerance must be non-negative, got {tolerance}")
    lowest = min(per_group, key=lambda g: (per_group[g], g))
    if tolerance == 0.0:
        return [lowest]
    return sorted(g for g, acc in per_group.items() if acc <= per_group[lowest] + tolerance)


def run_wg_ablation(
    erm: TrainReport,
    heldout: EmbeddingDataset,
    fractions: Sequence[float],
    config: OptimConfig,
    eval_ds: Optional[EmbeddingDataset] = None,
    worst_groups: Optional[Sequence[int]] = None,
    tolerance: float = 0.0,
    progress: bool = False,
) -> List[dict]:
    """
    Worst-group data ablation at constant reweighting-set size

    For each fraction the worst groups keep that share of their balanced
    allotment, the rest is refilled from the same class, and a fresh head is
    retrained class-balanced. A fraction whose subset cannot be built or
    trained yields a row with an ``error`` entry and the sweep goes on.

    ``relative_gain`` is the row's WGA increase over the ERM head as a
    percentage of the largest increase in the sweep; it stays empty when no
    fraction beats ERM.

    Args:
        erm (TrainReport): ERM run used to pick the worst groups
        heldout (EmbeddingDataset): Group-annotated reweighting pool
        fractions (Sequence[float]): Worst-group fractions to try
        config (OptimConfig): Retraining budget
        eval_ds (EmbeddingDataset): Where WGA is measured; ``heldout`` when omitted
        worst_groups (Sequence[int]): Override for the worst groups
        tolerance (float): Accuracy margin for picking several worst groups
        progress (bool): Show a progress bar on stderr

    Returns:
        List[dict]: One row per fraction, keyed by ABLATION_COLUMNS
    """
    heldout.require_groups()
    bad = [f for f in fractions if not (0.0 <= float(f) <= 1.0)]
    if bad:
        raise InvalidInputError(f"ablation fractions must lie in [0, 1], got {bad}")
    if eval_ds is None:
        logger.warning("No evaluation split given to the ablation; scoring on the reweighting pool")
        eval_ds = heldout
    if worst_groups is None:
        reference = erm.val_trace[-1].per_group_accuracy if erm.val_trace else evaluate(erm.head, heldout).per_group_accuracy
        worst_groups = pick_worst_groups(reference, tolerance)
    worst_groups = sorted(set(int(g) for g in worst_groups))
    logger.info(f"Ablating worst groups {worst_groups} over {len(fractions)} fractions")

    rows = []
    for fraction in tqdm(fractions, desc="ablation", disable=not progress):
        row = {"fraction": float(fraction), "size": None, "wga": None, "avg": None, "relative_gain": None, "error": ""}
        try:
            idx = ablation_subset(heldout, AblationSpec(worst_groups=worst_groups, fraction=fraction, seed=config.seed))
            subset = heldout.subset(idx, name=f"{heldout.name}@{fraction:g}")
            metrics = evaluate(cb_last_layer_retrain(subset, config), eval_ds)
            row.update(size=int(idx.size), wga=metrics.worst_group_accuracy, avg=metrics.average_accuracy)
        except RebalanceError as e:
            logger.warning(f"Ablation fraction {fraction} failed: {e}")
            row["error"] = e.kind
        rows.append(row)

    erm_wga = evaluate(erm.head, eval_ds).worst_group_accuracy
    if erm_wga is None:
        return rows
    gains = [row["wga"] - erm_wga for row in rows if row["wga"] is not None]
    best = max(gains, default=0.0)
    if best > 0.0:
        for row in rows:
            if row["wga"] is not None:
                row["relative_gain"] = 100.0 * (row["wga"] - erm_wga) / best
    return rows


def summarize(
    method: str,
    seeds: Sequence[int],
    metrics: Sequence[GroupMetrics],
    annotations: Optional[Dict[str, int]] = None,
    config: Optional[dict] = None,
    extras: Optional[List[dict]] = None,
) -> ExperimentReport:
    """Aggregate per-seed metrics; std is the sample estimator and 0 for a single seed."""
    if len(seeds) != len(metrics):
        raise InvalidInputError(f"{len(seeds)} seeds but {len(metrics)} metric sets")
    wgas = [m.worst_group_accuracy for m in metrics if m.worst_group_accuracy is not None]
    mean = float(np.mean(wgas)) if wgas else None
    std = float(np.std(wgas, ddof=1)) if len(wgas) > 1 else (0.0 if wgas else None)
    return ExperimentReport(
        method=method,
        seeds=[int(s) for s in seeds],
        metrics=list(metrics),
        wga_mean=mean,
        wga_std=std,
        annotations=dict(annotations or {"class": 0, "group": 0}),
        config=dict(config or {}),
        extras=list(extras or []),
    )


def _sig6(value):
    if isinstance(value, (float, np.floating)):
        return float(f"{float(value):.6g}")
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, dict):
        return {k: _sig6(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sig6(v) for v in value]
    return value


def _report_dict(report: ExperimentReport) -> dict:
    runs = []
    for seed, m in zip(report.seeds, report.metrics):
        runs.append(
            {
                "seed": seed,
                "average_accuracy": m.average_accuracy,
                "worst_group_accuracy": m.worst_group_accuracy,
                "per_group_accuracy": {str(g): a for g, a in sorted(m.per_group_accuracy.items())},
                "counts": {str(g): c for g, c in sorted(m.counts.items())},
                "omitted_groups": list(m.omitted_groups),
            }
        )
    return _sig6(
        {
            "method": report.method,
            "seeds": report.seeds,
            "wga_mean": report.wga_mean,
            "wga_std": report.wga_std,
            "annotations": {"class": report.annotations.get("class", 0), "group": report.annotations.get("group", 0)},
            "config": {k: report.config[k] for k in sorted(report.config)},
            "runs": runs,
            "extras": report.extras,
        }
    )


def _csv_frame(report: ExperimentReport) -> pd.DataFrame:
    rows = []
    for seed, m in zip(report.seeds, report.metrics):
        if not m.per_group_accuracy:
            rows.append([report.method, seed, "", None, m.worst_group_accuracy, m.average_accuracy])
        for g, acc in sorted(m.per_group_accuracy.items()):
            rows.append([report.method, seed, g, acc, m.worst_group_accuracy, m.average_accuracy])
    return pd.DataFrame(rows, columns=REPORT_CSV_COLUMNS)


def emit_report(report: ExperimentReport, path: str, format: str = "json") -> None:
    """
    Write ``report`` as JSON or CSV

    Floats carry 6 significant digits and field order is fixed, so equal
    reports give byte-identical files.
    """
    if format not in ("json", "csv"):
        raise InvalidInputError(f"unknown report format '{format}'")
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    if format == "json":
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(_report_dict(report), indent=2) + "\n")
    else:
        _csv_frame(report).to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
    logger.info(f"Wrote {format} report for {report.method} to {path}")


def load_report(path: str) -> ExperimentReport:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    metrics = [
        GroupMetrics(
            per_group_accuracy={int(g): a for g, a in run["per_group_accuracy"].items()},
            worst_group_accuracy=run["worst_group_accuracy"],
            average_accuracy=run["average_accuracy"],
            counts={int(g): c for g, c in run["counts"].items()},
            omitted_groups=tuple(run["omitted_groups"]),
        )
        for run in raw["runs"]
    ]
    return ExperimentReport(
        method=raw["method"],
        seeds=raw["seeds"],
        metrics=metrics,
        wga_mean=raw["wga_mean"],
        wga_std=raw["wga_std"],
        annotations=raw["annotations"],
        config=raw["config"],
        extras=raw.get("extras", []),
    )


def emit_table(rows: Sequence[dict], path: str, columns: Optional[List[str]] = None) -> None:
    """Plot-ready CSV, one line per row dict."""
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=columns)
    frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")


def label_efficiency(
    erm_report: TrainReport,
    heldout: EmbeddingDataset,
    val: EmbeddingDataset,
    test: EmbeddingDataset,
    fractions: Sequence[float],
    config: OptimConfig,
    variant: SelfVariant,
    lrs: Sequence[float] = (1e-4, 1e-3, 1e-2),
) -> List[dict]:
    """
    DFR against SELF as group annotations are taken away

    DFR loses rows from both its reweighting set and its selection set. SELF
    keeps its class-annotated pool and only loses group-annotated selection
    rows.
    """
    # local import: selfselect builds on this module
    from rebalance.services.selfselect import run_self

    rows = []
    for fraction in fractions:
        row = {"fraction": float(fraction), "dfr_wga": None, "dfr_group_labels": None,
               "self_wga": None, "self_group_labels": None, "error": ""}
        try:
            sub_heldout = subsample_annotations(heldout, fraction, config.seed)
            sub_val = subsample_annotations(val, fraction, config.seed + 1)

            dfr_ledger = AnnotationLedger(sub_heldout.n)
            dfr_val_ledger = AnnotationLedger(sub_val.n, scope="val")
            dfr_candidates = []
            for lr in lrs:
                cfg = config.model_copy(update={"lr0": float(lr)})
                dfr_candidates.append((dfr(heldout, sub_heldout, cfg, dfr_ledger), {"lr": float(lr)}))
            dfr_head, _ = model_select(dfr_candidates, sub_val, dfr_val_ledger)
            row["dfr_wga"] = evaluate(dfr_head, test).worst_group_accuracy
            row["dfr_group_labels"] = AnnotationLedger.merge(dfr_ledger, dfr_val_ledger)["group"]

            self_val_ledger = AnnotationLedger(sub_val.n, scope="val")
            self_candidates = []
            for lr in lrs:
                cfg = config.model_copy(update={"lr0": float(lr)})
                head, _ = run_self(erm_report, heldout, variant, cfg)
                self_candidates.append((head, {"lr": float(lr)}))
            self_head, _ = model_select(self_candidates, sub_val, self_val_ledger)
            row["self_wga"] = evaluate(self_head, test).worst_group_accuracy
            row["self_group_labels"] = self_val_ledger.revealed_group_labels
        except RebalanceError as e:
            logger.warning(f"Label-efficiency fraction {fraction} failed: {e}")
            row["error"] = e.kind
        rows.append(row)
    return rows
