import logging
from enum import Enum
from typing import Dict, Iterator, List

import numpy as np

from rebalance.errors import (
    DegenerateStratumError,
    InvalidInputError,
    PoolExhaustedError,
)
from rebalance.models import AblationSpec, EmbeddingDataset

logger = logging.getLogger(__name__)


class BalanceMode(str, Enum):
    UNBALANCED = "unbalanced"
    CLASS_SAMPLING = "class-sampling"
    GROUP_SAMPLING = "group-sampling"
    # s ~ Unif(S) first, then a row with that spurious value; never a default
    SPURIOUS_SAMPLING = "spurious-sampling"
    CLASS_SUBSET = "class-subset"
    GROUP_SUBSET = "group-subset"

    def __str__(self) -> str:
        return self.value

    @property
    def is_sampling(self) -> bool:
        return self in (BalanceMode.CLASS_SAMPLING, BalanceMode.GROUP_SAMPLING, BalanceMode.SPURIOUS_SAMPLING)

    @property
    def needs_groups(self) -> bool:
        return self in (BalanceMode.GROUP_SAMPLING, BalanceMode.SPURIOUS_SAMPLING, BalanceMode.GROUP_SUBSET)


def stratum_labels(ds: EmbeddingDataset, by: str):
    """
    Stratum id per row and the number of declared strata

    Args:
        ds (EmbeddingDataset): Dataset to stratify
        by (str): One of 'class', 'group', 'spurious'

    Returns:
        tuple: (labels, num_strata)
    """
    if by == "class":
        return ds.require_class_labels(), ds.num_classes
    if by == "group":
        return ds.group_ids, ds.num_groups
    if by == "spurious":
        ds.require_groups()
        return ds.spurious_labels, ds.num_spurious
    raise InvalidInputError(f"unknown stratification '{by}'")


def strata_members(ds: EmbeddingDataset, by: str) -> List[np.ndarray]:
    labels, k = stratum_labels(ds, by)
    members = [np.flatnonzero(labels == s) for s in range(k)]
    for s, rows in enumerate(members):
        if rows.size == 0:
            raise DegenerateStratumError(f"{by} stratum {s} has no rows in '{ds.name or 'dataset'}'", stratum=s)
    return members


def _mode_strata(mode: BalanceMode) -> str:
    return {
        BalanceMode.CLASS_SAMPLING: "class",
        BalanceMode.CLASS_SUBSET: "class",
        BalanceMode.GROUP_SAMPLING: "group",
        BalanceMode.GROUP_SUBSET: "group",
        BalanceMode.SPURIOUS_SAMPLING: "spurious",
    }[mode]


def balanced_batch_stream(ds: EmbeddingDataset, mode: BalanceMode, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """
    Endless stream of row-index batches

    Sampling modes draw every slot by picking a stratum uniformly and then a
    row uniformly inside it (with replacement). Unbalanced and subset modes
    shuffle a fixed row pool each epoch and cut it into consecutive batches.
    """
    mode = BalanceMode(mode)
    if batch_size < 1:
        raise InvalidInputError("batch_size must be positive")
    rng = np.random.default_rng(seed)

    if mode.is_sampling:
        members = strata_members(ds, _mode_strata(mode))
        return _stratified_stream(members, batch_size, rng)

    if mode == BalanceMode.UNBALANCED:
        pool = np.arange(ds.n)
    else:
        pool = balanced_subset(ds, _mode_strata(mode), seed)
    return _epoch_stream(pool, batch_size, rng)


def _stratified_stream(members: List[np.ndarray], batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    sizes = np.array([rows.size for rows in members])
    k = len(members)
    while True:
        strata = rng.integers(0, k, size=batch_size)
        offsets = rng.integers(0, sizes[strata])
        yield np.array([members[s][o] for s, o in zip(strata, offsets)], dtype=np.int64)


def _epoch_stream(pool: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        order = pool[rng.permutation(pool.size)]
        for start in range(0, order.size, batch_size):
            yield order[start:start + batch_size]


def balanced_subset(ds: EmbeddingDataset, by: str, seed: int = 0) -> np.ndarray:
    """Keep the smallest stratum whole and downsample the rest to its size."""
    members = strata_members(ds, by)
    target = min(rows.size for rows in members)
    rng = np.random.default_rng(seed)
    chosen = [rng.choice(rows, size=target, replace=False) for rows in members]
    return np.sort(np.concatenate(chosen))


def _round_half_away(value: float) -> int:
    return int(np.floor(abs(value) + 0.5) * np.sign(value))


def ablation_base_size(ds: EmbeddingDataset, worst_groups) -> int:
    counts = np.bincount(ds.group_ids, minlength=ds.num_groups)
    worst = min(int(counts[g]) for g in worst_groups)
    others = [int(counts[g]) for g in range(ds.num_groups) if g not in worst_groups]
    if not others:
        return worst
    return min(worst, min(others) // 2)


def ablation_subset(ds: EmbeddingDataset, spec: AblationSpec) -> np.ndarray:
    """
    Group-balanced base with the worst groups partially swapped out

    Every group starts at ``base`` rows. Each worst group keeps
    round(fraction * base) of them and the difference is refilled from the
    same class with the other spurious value(s), so the total never changes.
    """
    ds.require_groups()
    worst_groups = list(spec.worst_groups)
    for g in worst_groups:
        if g >= ds.num_groups:
            raise InvalidInputError(f"group {g} does not exist (only {ds.num_groups} groups)")

    members = strata_members(ds, "group")
    base = ablation_base_size(ds, worst_groups)
    rng = np.random.default_rng(spec.seed)

    # permute each group once; base rows are a prefix, refills come after it
    shuffled: Dict[int, np.ndarray] = {g: rng.permutation(rows) for g, rows in enumerate(members)}
    used = {g: base for g in shuffled}
    chosen = {g: list(shuffled[g][:base]) for g in shuffled}

    kept = _round_half_away(spec.fraction * base)
    for g in worst_groups:
        class_id, spurious_id = ds.split_group(g)
        chosen[g] = chosen[g][:kept]
        need = base - kept
        pool_groups = [
            ds.group_of(class_id, s)
            for s in range(ds.num_spurious)
            if s != spurious_id and ds.group_of(class_id, s) not in worst_groups
        ]
        available = sum(shuffled[p].size - used[p] for p in pool_groups)
        if available < need:
            raise PoolExhaustedError(
                f"group {g} needs {need} replacement rows from class {class_id} but only {available} remain"
            )
        # round-robin over the pool groups keeps multi-valued spurious draws even
        while need > 0:
            for p in pool_groups:
                if need == 0:
                    break
                if used[p] < shuffled[p].size:
                    chosen[p].append(shuffled[p][used[p]])
                    used[p] += 1
                    need -= 1

    indices = np.sort(np.concatenate([np.asarray(rows, dtype=np.int64) for rows in chosen.values()]))
    logger.info(f"Ablation subset: base {base} per group, fraction {spec.fraction}, {indices.size} rows")
    return indices
