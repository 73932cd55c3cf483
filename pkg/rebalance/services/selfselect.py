import os
import logging
import itertools
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from rebalance.errors import InvalidInputError
from rebalance.models import (
    AnnotationLedger,
    EmbeddingDataset,
    LinearHead,
    OptimConfig,
    SelectionResult,
    SelfVariant,
    TrainReport,
)
from rebalance.services import mathcore
from rebalance.services.evalreport import evaluate, model_select, worst_group
from rebalance.services.trainer import DEFAULT_ES_FRACTIONS, finetune_head

logger = logging.getLogger(__name__)

SELF_GRID = {
    "n": (20, 100, 500),
    "lr": (1e-4, 1e-3, 1e-2),
    "es_fraction": DEFAULT_ES_FRACTIONS,
    "dropout_p": (0.5, 0.7, 0.9),
}


def misclassification_cost(
    head: LinearHead,
    ds: EmbeddingDataset,
    ledger: Optional[AnnotationLedger] = None,
) -> np.ndarray:
    """
    Cross-entropy of each row against its class label

    Scoring a row needs its label, so every row is charged one class
    annotation when a ledger is given.

    Args:
        head (LinearHead): Head producing the logits
        ds (EmbeddingDataset): Rows to score
        ledger (AnnotationLedger): Optional bookkeeping for revealed labels

    Returns:
        np.ndarray: One cost per row
    """
    labels = ds.require_class_labels()
    head.check_compatible(ds)
    costs = np.atleast_1d(mathcore.cross_entropy(mathcore.linear_forward(head, ds.features), labels))
    if ledger is not None:
        ledger.reveal(np.arange(ds.n), "class")
    return costs


def _check_pair(f: LinearHead, g: LinearHead, ds: EmbeddingDataset) -> None:
    if f.weights.shape != g.weights.shape:
        raise InvalidInputError(f"heads differ in shape: {f.weights.shape} vs {g.weights.shape}")
    f.check_compatible(ds)


def disagreement_cost(f: LinearHead, g: LinearHead, ds: EmbeddingDataset, divergence: str = "kl") -> np.ndarray:
    """divergence(softmax(f(x)), softmax(g(x))) per row; no labels are read."""
    _check_pair(f, g, ds)
    return np.atleast_1d(
        mathcore.logit_divergence(
            mathcore.linear_forward(f, ds.features),
            mathcore.linear_forward(g, ds.features),
            divergence,
        )
    )


def match_scale(head: LinearHead, reference: LinearHead) -> LinearHead:
    """
    Rescale ``head`` so its weight norm equals the norm of ``reference``

    Weights and bias share one factor, so the decision boundary stays put. An
    early checkpoint compared this way differs from the final head only in
    how it splits weight across features, not in overall confidence.
    """
    norm = float(np.linalg.norm(head.weights))
    if norm == 0.0:
        return head
    factor = float(np.linalg.norm(reference.weights)) / norm
    return LinearHead(head.weights * factor, head.bias * factor)


def dropout_forward(head: LinearHead, embedding, p: float, passes: int = 1, seed: int = 0) -> np.ndarray:
    """
    Logits with inverted dropout on the embedding coordinates

    Each pass keeps every coordinate with probability 1 - p and scales the
    survivors by 1 / (1 - p). The logits of all passes are averaged.
    """
    if not (0.0 <= p < 1.0):
        raise InvalidInputError(f"dropout probability must lie in [0, 1), got {p}")
    if passes < 1:
        raise InvalidInputError("passes must be at least 1")
    if p == 0.0:
        return mathcore.linear_forward(head, embedding)

    x = np.asarray(embedding, dtype=np.float64)
    rng = np.random.default_rng(seed)
    total = np.zeros(x.shape[:-1] + (head.num_classes,))
    for _ in range(passes):
        keep = rng.random(x.shape) >= p
        total += mathcore.linear_forward(head, np.where(keep, x / (1.0 - p), 0.0))
    return total / passes


def select_top_n(costs, n: int) -> SelectionResult:
    """The n highest-cost rows, ties to the lower index.

    The selection objective is a sum of per-row costs, so the top n rows are
    its exact maximizer.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 1:
        raise InvalidInputError("costs must be a vector")
    if not np.all(np.isfinite(costs)):
        raise InvalidInputError("costs contain non-finite values")
    if n < 1 or n > costs.size:
        raise InvalidInputError(f"cannot select {n} rows out of {costs.size}")
    order = np.argsort(-costs, kind="stable")[:n]
    return SelectionResult(indices=order, costs=costs[order], annotations_requested=int(n))


def _variant_costs(
    erm_report: TrainReport,
    heldout: EmbeddingDataset,
    variant: SelfVariant,
    seed: int,
    ledger: Optional[AnnotationLedger],
) -> np.ndarray:
    erm = erm_report.head
    if variant.variant == "misclassification":
        return misclassification_cost(erm, heldout, ledger)
    if variant.variant == "es-misclassification":
        return misclassification_cost(erm_report.checkpoints.at(variant.es_fraction), heldout, ledger)
    if variant.variant == "es-disagreement":
        early = match_scale(erm_report.checkpoints.at(variant.es_fraction), erm)
        return disagreement_cost(erm, early, heldout, variant.divergence)
    # dropout-disagreement
    dropped = dropout_forward(erm, heldout.features, variant.dropout_p, variant.dropout_passes, seed)
    return np.atleast_1d(
        mathcore.logit_divergence(mathcore.linear_forward(erm, heldout.features), dropped, variant.divergence)
    )


def run_self(
    erm_report: TrainReport,
    heldout: EmbeddingDataset,
    variant: SelfVariant,
    finetune_config: OptimConfig,
    ledger: Optional[AnnotationLedger] = None,
    worst_groups: Optional[Sequence[int]] = None,
) -> Tuple[LinearHead, SelectionResult]:
    """
    Build the reweighting set from held-out rows and finetune the ERM head on it

    Args:
        erm_report (TrainReport): ERM run; its checkpoints supply early-stopped heads
        heldout (EmbeddingDataset): Candidate rows
        variant (SelfVariant): Cost variant and its parameters
        finetune_config (OptimConfig): Finetuning budget; its seed drives random draws
        ledger (AnnotationLedger): Bookkeeping over heldout rows
        worst_groups (Sequence[int]): Groups counted as worst; lowest ERM accuracy when omitted

    Returns:
        tuple: (finetuned_head, selection)
    """
    erm = erm_report.head
    erm.check_compatible(heldout)
    if variant.n > heldout.n:
        raise InvalidInputError(f"cannot select {variant.n} rows from a held-out set of {heldout.n}")

    if variant.variant == "random":
        rng = np.random.default_rng(finetune_config.seed)
        chosen = np.sort(rng.choice(heldout.n, size=variant.n, replace=False))
        selection = SelectionResult(indices=chosen, costs=np.zeros(variant.n), annotations_requested=variant.n)
    else:
        costs = _variant_costs(erm_report, heldout, variant, finetune_config.seed, ledger)
        selection = select_top_n(costs, variant.n)
        if variant.variant.endswith("misclassification"):
            selection.annotations_requested = heldout.n

    if ledger is not None and variant.variant not in ("misclassification", "es-misclassification"):
        ledger.reveal(selection.indices, "class")
    selection.variant = variant.variant

    reweight = heldout.subset(selection.indices, name=f"{heldout.name}[self]")
    head = finetune_head(erm, reweight, finetune_config)
    selection.reweight_accuracy = evaluate(head, reweight.without_groups()).average_accuracy

    # group labels below are for reporting only and never reach the ledger
    if heldout.has_groups:
        if worst_groups is None:
            worst_groups = (worst_group(evaluate(erm, heldout)),)
        worst = np.asarray(sorted(set(int(g) for g in worst_groups)))
        groups = heldout.group_ids
        selection.worst_groups = tuple(int(g) for g in worst)
        selection.worst_group_fraction = float(np.isin(groups[selection.indices], worst).mean())
        selection.worst_group_base_rate = float(np.isin(groups, worst).mean())
        logger.info(
            f"SELF {variant.variant} n={variant.n}: worst-group share {selection.worst_group_fraction:.3f} "
            f"vs base rate {selection.worst_group_base_rate:.3f}"
        )
    return head, selection


def dump_selection(selection: SelectionResult, heldout: EmbeddingDataset, path: str) -> None:
    """Audit CSV with columns index,cost,class[,group] in selection order."""
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    idx = np.asarray(selection.indices, dtype=np.int64)
    frame = pd.DataFrame({"index": idx, "cost": selection.costs})
    frame["class"] = heldout.require_class_labels()[idx]
    if heldout.has_groups:
        frame["group"] = heldout.group_ids[idx]
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")


def _grid_variants(variant: SelfVariant, grid: Dict[str, Iterable]) -> List[SelfVariant]:
    keys = ["n"]
    if variant.variant.startswith("es-"):
        keys.append("es_fraction")
    if variant.variant == "dropout-disagreement":
        keys.append("dropout_p")
    variants = []
    for values in itertools.product(*(grid.get(k, (getattr(variant, k),)) for k in keys)):
        try:
            variants.append(SelfVariant(**{**variant.model_dump(), **dict(zip(keys, values))}))
        except InvalidInputError as e:
            raise InvalidInputError(f"invalid SELF grid point {dict(zip(keys, values))}: {e}") from None
    return variants


def run_self_grid(
    erm_report: TrainReport,
    heldout: EmbeddingDataset,
    val: EmbeddingDataset,
    variant: SelfVariant,
    config: OptimConfig,
    grid: Optional[Dict[str, Iterable]] = None,
    ledger: Optional[AnnotationLedger] = None,
    val_ledger: Optional[AnnotationLedger] = None,
) -> Tuple[LinearHead, SelectionResult, dict]:
    """
    Hyperparameter search for SELF, selected by worst-group accuracy on ``val``

    Grid points asking for more rows than ``heldout`` holds are skipped.

    Returns:
        tuple: (best_head, best_selection, best_point)
    """
    grid = dict(SELF_GRID if grid is None else grid)
    candidates = []
    selections = []
    for point in _grid_variants(variant, grid):
        if point.n > heldout.n:
            logger.warning(f"Skipping n={point.n}: held-out set has only {heldout.n} rows")
            continue
        for lr in grid.get("lr", (config.lr0,)):
            cfg = config.model_copy(update={"lr0": float(lr)})
            head, selection = run_self(erm_report, heldout, point, cfg, ledger)
            settings = {
                "variant": point.variant,
                "n": point.n,
                "es_fraction": point.es_fraction,
                "dropout_p": point.dropout_p,
                "lr": float(lr),
            }
            candidates.append((head, settings))
            selections.append(selection)

    if not candidates:
        raise InvalidInputError("SELF grid produced no runnable configuration")
    head, best = model_select(candidates, val, val_ledger)
    chosen = next(i for i, (_, settings) in enumerate(candidates) if settings is best)
    logger.info(f"SELF grid picked {best} out of {len(candidates)} candidates")
    return head, selections[chosen], best
