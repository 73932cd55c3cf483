import math
import os
import struct
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from rebalance.errors import (
    DivergenceError,
    InvalidInputError,
    MagicMismatchError,
    ParseError,
    TruncationError,
    VersionError,
)
from rebalance.models import (
    AnnotationLedger,
    CheckpointSet,
    EmbeddingDataset,
    LinearHead,
    OptimConfig,
    SplitSpec,
    TrainReport,
    ValidationPoint,
)
from rebalance.services import mathcore
from rebalance.services.dataset import concat, split
from rebalance.services.samplers import BalanceMode, balanced_batch_stream, balanced_subset

logger = logging.getLogger(__name__)

GHED_MAGIC = b"GHED"
GHED_VERSION = 1
GHED_HEADER = struct.Struct("<4sIIQ")

DEFAULT_ES_FRACTIONS = (0.1, 0.2, 0.5)


def steps_for_epochs(n: int, batch_size: int, epochs: int) -> int:
    return math.ceil(n / batch_size) * epochs


def _checkpoint_steps(total_steps: int, fractions: Sequence[float]) -> Dict[int, List[float]]:
    plan: Dict[int, List[float]] = {}
    for fraction in sorted(set(float(f) for f in fractions) | {1.0}):
        if not (0.0 < fraction <= 1.0):
            raise InvalidInputError(f"checkpoint fraction {fraction} outside (0, 1]")
        step = max(1, math.ceil(fraction * total_steps - 1e-9)) if total_steps else 0
        plan.setdefault(step, []).append(fraction)
    return plan


def train_head(
    ds: EmbeddingDataset,
    mode: BalanceMode,
    config: OptimConfig,
    init: Optional[LinearHead] = None,
    checkpoints: Sequence[float] = (),
    val: Optional[EmbeddingDataset] = None,
) -> TrainReport:
    """
    Minibatch training of a linear head on frozen embeddings

    Args:
        ds (EmbeddingDataset): Training rows (class labels required)
        mode (BalanceMode): How minibatches are drawn
        config (OptimConfig): Optimizer, schedule and budget
        init (LinearHead): Starting head; zeros when omitted
        checkpoints (Sequence[float]): Fractions of training to snapshot
        val (EmbeddingDataset): Optional set for the per-group accuracy trace

    Returns:
        TrainReport: Final head, checkpoints and traces
    """
    labels = ds.require_class_labels()
    if init is not None:
        init.check_compatible(ds)
        head = init.copy()
    else:
        head = LinearHead.zeros(ds.num_classes, ds.d)

    plan = _checkpoint_steps(config.total_steps, checkpoints)
    snapshots = CheckpointSet()
    if config.total_steps == 0:
        for fraction in plan.get(0, [1.0]):
            snapshots.heads[fraction] = head.copy()
        return TrainReport(head=head, checkpoints=snapshots, loss_trace=[], steps=0)

    stream = balanced_batch_stream(ds, mode, config.batch_size, config.seed)
    adaptive = config.optimizer == "adaptive-decoupled"
    w_state = mathcore.AdamState.fresh(head.weights)
    b_state = mathcore.AdamState.fresh(head.bias)

    eval_steps = set()
    if val is not None:
        eval_steps = set(plan)
        if config.eval_every:
            eval_steps |= set(range(config.eval_every, config.total_steps + 1, config.eval_every))

    loss_trace: List[float] = []
    val_trace: List[ValidationPoint] = []
    for step in range(config.total_steps):
        batch = next(stream)
        lr = mathcore.lr_at(config, step)
        loss, grad_w, grad_b = mathcore.ce_gradient_batch(head, ds.features[batch], labels[batch])
        if not (math.isfinite(loss) and np.all(np.isfinite(grad_w))):
            raise DivergenceError("non-finite training loss", step)
        loss_trace.append(loss)

        # weight decay on weights only; the bias is never decayed
        if adaptive:
            head.weights, w_state = mathcore.adaptive_step(w_state, head.weights, grad_w, lr, config.weight_decay)
            head.bias, b_state = mathcore.adaptive_step(b_state, head.bias, grad_b, lr, 0.0)
        else:
            head.weights = mathcore.sgd_step(head.weights, grad_w, lr, config.weight_decay)
            head.bias = mathcore.sgd_step(head.bias, grad_b, lr, 0.0)
        if not (np.all(np.isfinite(head.weights)) and np.all(np.isfinite(head.bias))):
            raise DivergenceError("parameters became non-finite", step)

        done = step + 1
        if done in plan:
            for fraction in plan[done]:
                snapshots.heads[fraction] = head.copy()
        if done in eval_steps:
            val_trace.append(_validation_point(head, val, done))

    head = snapshots.final.copy()
    logger.info(
        f"Trained head on '{ds.name or 'dataset'}' with {BalanceMode(mode).value} for "
        f"{config.total_steps} steps, final loss {loss_trace[-1]:.6f}"
    )
    return TrainReport(
        head=head,
        checkpoints=snapshots,
        loss_trace=loss_trace,
        val_trace=val_trace,
        steps=config.total_steps,
    )


def _validation_point(head: LinearHead, val: EmbeddingDataset, step: int) -> ValidationPoint:
    # local import: evalreport builds on trainer
    from rebalance.services.evalreport import evaluate

    metrics = evaluate(head, val)
    return ValidationPoint(step, dict(metrics.per_group_accuracy), metrics.worst_group_accuracy)


def retrain_head(ds: EmbeddingDataset, config: OptimConfig, mode: BalanceMode = BalanceMode.UNBALANCED) -> LinearHead:
    """Fresh zero-initialised head trained on ``ds``."""
    return train_head(ds, mode, config).head


def dfr(
    erm_ds: EmbeddingDataset,
    heldout: EmbeddingDataset,
    config: OptimConfig,
    ledger: Optional[AnnotationLedger] = None,
    repeats: int = 1,
) -> LinearHead:
    """
    Group-balanced last-layer retraining on the held-out set

    With ``repeats`` > 1 the heads of independent group-balanced subsets are
    averaged instead of sampling groups uniformly per minibatch.
    """
    heldout.require_groups()
    if erm_ds.d != heldout.d or erm_ds.num_classes != heldout.num_classes:
        raise InvalidInputError("held-out embeddings do not match the ERM training embeddings")
    if repeats < 1:
        raise InvalidInputError("repeats must be at least 1")

    if repeats == 1:
        head = train_head(heldout, BalanceMode.GROUP_SAMPLING, config).head
    else:
        heads = []
        for r in range(repeats):
            cfg = config.model_copy(update={"seed": config.seed + r})
            heads.append(train_head(heldout, BalanceMode.GROUP_SUBSET, cfg).head)
        head = LinearHead(
            np.mean([h.weights for h in heads], axis=0),
            np.mean([h.bias for h in heads], axis=0),
        )

    if ledger is not None:
        rows = np.arange(heldout.n)
        ledger.reveal(rows, "class")
        ledger.reveal(rows, "group")
    return head


def cb_last_layer_retrain(
    heldout: EmbeddingDataset,
    config: OptimConfig,
    ledger: Optional[AnnotationLedger] = None,
) -> LinearHead:
    """Class-balanced retraining of a fresh head; uses no group labels."""
    head = train_head(heldout, BalanceMode.CLASS_SAMPLING, config).head
    if ledger is not None:
        ledger.reveal(np.arange(heldout.n), "class")
    return head


def finetune_head(init: LinearHead, reweight: EmbeddingDataset, config: OptimConfig) -> LinearHead:
    """Continue from ``init`` with class-balanced minibatches on ``reweight``."""
    init.check_compatible(reweight)
    if config.total_steps == 0:
        return init.copy()
    return train_head(reweight, BalanceMode.CLASS_SAMPLING, config, init=init).head


def free_lunch(
    ds: EmbeddingDataset,
    erm_config: OptimConfig,
    retrain_config: OptimConfig,
    holdout_fraction: float = 0.05,
    extra: Optional[EmbeddingDataset] = None,
) -> Tuple[LinearHead, LinearHead]:
    """
    ERM on the large split, class-balanced retraining on the small one

    No hyperparameter search happens here, so no group labels are touched.

    Args:
        ds (EmbeddingDataset): Class-annotated pool
        erm_config (OptimConfig): ERM budget; its seed also drives the split
        retrain_config (OptimConfig): Retraining budget
        holdout_fraction (float): Share of the pool kept for retraining
        extra (EmbeddingDataset): Rows pooled with ``ds`` before splitting,
            e.g. a held-out split whose group labels go unused

    Returns:
        tuple: (erm_head, retrained_head)
    """
    if not (0.0 < holdout_fraction < 1.0):
        raise InvalidInputError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    if extra is not None:
        ds = concat([ds.without_groups(), extra.without_groups()], name=f"{ds.name}+{extra.name}")
    first, second = split(ds, SplitSpec(fractions=[1.0 - holdout_fraction, holdout_fraction], seed=erm_config.seed))
    logger.info(f"Free-lunch split sizes: {first.n} / {second.n}")
    erm_head = train_head(first, BalanceMode.CLASS_SAMPLING, erm_config).head
    retrained = train_head(second, BalanceMode.CLASS_SAMPLING, retrain_config).head
    return erm_head, retrained


def class_balanced_erm(train: EmbeddingDataset, heldout: EmbeddingDataset, config: OptimConfig) -> LinearHead:
    combined = concat([train.without_groups(), heldout.without_groups()], name="train+heldout")
    return train_head(combined, BalanceMode.CLASS_SAMPLING, config).head


def group_balanced_heldout(heldout: EmbeddingDataset, seed: int = 0) -> EmbeddingDataset:
    return heldout.subset(balanced_subset(heldout, "group", seed), name=f"{heldout.name}[balanced]")


def save_head(head: LinearHead, path: str) -> None:
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(GHED_HEADER.pack(GHED_MAGIC, GHED_VERSION, head.num_classes, head.input_dim))
        f.write(head.weights.astype("<f8").tobytes())
        f.write(head.bias.astype("<f8").tobytes())


def load_head(path: str) -> LinearHead:
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] != GHED_MAGIC:
        raise MagicMismatchError(f"expected magic {GHED_MAGIC!r}, found {payload[:4]!r}", 0)
    if len(payload) < GHED_HEADER.size:
        raise TruncationError("head header truncated", len(payload))
    _, version, k, d = GHED_HEADER.unpack_from(payload, 0)
    if version != GHED_VERSION:
        raise VersionError(f"unsupported GHED version {version}", 4)
    need = GHED_HEADER.size + 8 * (k * d + k)
    if len(payload) < need:
        raise TruncationError(f"head payload needs {need} bytes", len(payload))
    if len(payload) > need:
        raise ParseError(f"{len(payload) - need} trailing bytes after the bias block", need)
    weights = np.frombuffer(payload, dtype="<f8", count=k * d, offset=GHED_HEADER.size).reshape(k, d)
    bias = np.frombuffer(payload, dtype="<f8", count=k, offset=GHED_HEADER.size + 8 * k * d)
    return LinearHead(weights.astype(np.float64), bias.astype(np.float64))
