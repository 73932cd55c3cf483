"""Linear feature model with one core, one spurious and several junk features.

The generator produces embeddings where the core coordinate decides the label
and the spurious coordinate agrees with it except on a minority of rows. The
theorem helpers compare two linear models that share these features and
differ only in how they split weight between core and spurious.
"""
import logging
from typing import Optional, Tuple

import numpy as np
from tqdm import tqdm

from rebalance.errors import InvalidInputError, LinkValidityError, TheoremViolationError
from rebalance.models import EmbeddingDataset, SyntheticSpec, TheoremInstance, TheoremReport
from rebalance.services import mathcore

logger = logging.getLogger(__name__)

IDENTITY_TOLERANCE = 1e-10
MAX_REJECTIONS = 10_000


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingDataset:
    """
    Sample a spurious-correlation dataset

    Columns are (core, spurious, junk...). Class 1 means y = +1. The
    spurious label is 1 exactly on minority rows, where the spurious
    coordinate points against y.

    Args:
        spec (SyntheticSpec): Sizes, rates and magnitudes

    Returns:
        EmbeddingDataset: n rows, d columns, two classes, two spurious values
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    y = np.where(rng.random(n) < spec.class_prior, 1.0, -1.0)
    core = y * (spec.core_magnitude + np.abs(rng.normal(0.0, spec.core_noise, n)))

    minority = rng.random(n) < spec.minority_rate
    spurious_noise = spec.core_noise if spec.spurious_noise is None else spec.spurious_noise
    direction = np.where(minority, -y, y)
    spurious = direction * (spec.spurious_magnitude + np.abs(rng.normal(0.0, spurious_noise, n)))

    junk = rng.normal(0.0, spec.junk_scale, (n, spec.d - 2))
    features = np.column_stack([core, spurious, junk])
    logger.info(f"Generated {n} synthetic rows, {int(minority.sum())} in the minority")
    return EmbeddingDataset(
        features=features,
        class_labels=((y + 1) // 2).astype(np.int64),
        spurious_labels=minority.astype(np.int64),
        num_classes=2,
        num_spurious=2,
        name="synthetic",
    )


def _logits(inst: TheoremInstance) -> Tuple[float, float, float, float]:
    """(erm_min, reg_min, erm_maj, reg_maj) for y = +1 at matched magnitudes."""
    c, s, junk = inst.core_mag, inst.spurious_mag, inst.junk_sum
    return (
        inst.alpha_erm * c - inst.beta_erm * s + junk,
        inst.alpha_reg * c - inst.beta_reg * s + junk,
        inst.alpha_erm * c + inst.beta_erm * s + junk,
        inst.alpha_reg * c + inst.beta_reg * s + junk,
    )


def link_valid(inst: TheoremInstance) -> bool:
    return all(abs(inst.b * z) <= 1.0 for z in _logits(inst))


def _check_link(inst: TheoremInstance) -> None:
    if not link_valid(inst):
        raise LinkValidityError(f"b * logit leaves [-1, 1] for instance {inst.model_dump()}")


def tvd_gap_formula(inst: TheoremInstance) -> float:
    """Closed form b * min(c, s) * |beta_erm - beta_reg|."""
    _check_link(inst)
    return inst.b * min(inst.core_mag, inst.spurious_mag) * abs(inst.beta_erm - inst.beta_reg)


def _two_point(inst: TheoremInstance, logit: float) -> np.ndarray:
    p = (inst.b * logit + 1.0) / 2.0
    if not (0.0 <= p <= 1.0):
        raise LinkValidityError(f"probability {p} outside [0, 1]")
    return np.array([p, 1.0 - p])


def tvd_gap_direct(inst: TheoremInstance) -> float:
    """TVD between the two models at the minority point minus the same at the majority point."""
    erm_min, reg_min, erm_maj, reg_maj = (_two_point(inst, z) for z in _logits(inst))
    return mathcore.total_variation(erm_min, reg_min) - mathcore.total_variation(erm_maj, reg_maj)


def sample_instance(rng: np.random.Generator) -> TheoremInstance:
    """Draw a valid instance with distinct spurious weights by rejection."""
    for _ in range(MAX_REJECTIONS):
        total = rng.uniform(0.5, 1.5)
        alpha_erm = rng.uniform(0.05, 0.95) * total
        alpha_reg = rng.uniform(0.05, 0.95) * total
        inst = TheoremInstance(
            alpha_erm=alpha_erm,
            beta_erm=total - alpha_erm,
            alpha_reg=alpha_reg,
            beta_reg=total - alpha_reg,
            b=rng.uniform(0.01, 1.0),
            core_mag=rng.uniform(0.1, 1.0),
            spurious_mag=rng.uniform(0.1, 1.0),
            junk_sum=rng.normal(0.0, 0.25),
        )
        if abs(inst.beta_erm - inst.beta_reg) > 1e-3 and link_valid(inst):
            return inst
    raise InvalidInputError(f"no valid instance after {MAX_REJECTIONS} draws")


def verify_theorem(trials: int, seed: int = 0, progress: bool = False) -> TheoremReport:
    """
    Check the closed-form gap against direct evaluation on random instances

    Each trial has its own stream spawned from ``seed``. The first instance
    where the two disagree, or where the gap is not positive, is raised.

    Returns:
        TheoremReport: Trial count, largest deviation, smallest gap
    """
    if trials < 1:
        raise InvalidInputError("trials must be at least 1")
    max_dev = 0.0
    min_gap: Optional[float] = None
    children = np.random.SeedSequence(seed).spawn(trials)
    for child in tqdm(children, desc="theorem", disable=not progress):
        inst = sample_instance(np.random.default_rng(child))
        formula = tvd_gap_formula(inst)
        direct = tvd_gap_direct(inst)
        deviation = abs(formula - direct)
        if deviation >= IDENTITY_TOLERANCE or direct <= 0.0:
            logger.error(f"Theorem check failed: formula {formula!r} direct {direct!r}")
            raise TheoremViolationError(
                f"gap identity violated: formula {formula:.17g}, direct {direct:.17g}", instance=inst
            )
        max_dev = max(max_dev, deviation)
        min_gap = direct if min_gap is None else min(min_gap, direct)
    logger.info(f"Theorem identity held on {trials} instances, max deviation {max_dev:.3e}")
    return TheoremReport(trials=trials, max_abs_deviation=max_dev, min_gap=min_gap)
