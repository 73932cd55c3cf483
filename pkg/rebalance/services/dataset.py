import os
import sys
import math
import struct
import logging
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from rebalance.errors import (
    DegenerateSplitError,
    InvalidInputError,
    LabelRangeError,
    MagicMismatchError,
    ParseError,
    SizeOverflowError,
    TruncationError,
    VersionError,
)
from rebalance.models import AnnotationLedger, EmbeddingDataset, SplitSpec

logger = logging.getLogger(__name__)

GEMB_MAGIC = b"GEMB"
GEMB_VERSION = 1
# magic, version u32, n u64, d u64, num_classes u32, num_spurious u32
GEMB_HEADER = struct.Struct("<4sIQQII")


def load_embeddings(path: str) -> EmbeddingDataset:
    """
    Load an embedding dataset from a GEMB binary file or a CSV file

    Args:
        path (str): File path; a ``.csv`` suffix selects the CSV reader

    Returns:
        EmbeddingDataset: Features promoted to float64
    """
    if str(path).lower().endswith(".csv"):
        return load_csv(path)

    with open(path, "rb") as f:
        payload = f.read()
    ds = decode_gemb(payload, name=os.path.basename(str(path)))
    logger.info(f"Loaded {ds.n}x{ds.d} embeddings from {path}")
    return ds


def decode_gemb(payload: bytes, name: str = "") -> EmbeddingDataset:
    if len(payload) < 4:
        raise TruncationError("file shorter than the magic bytes", len(payload))
    if payload[:4] != GEMB_MAGIC:
        raise MagicMismatchError(f"expected magic {GEMB_MAGIC!r}, found {payload[:4]!r}", 0)
    if len(payload) < GEMB_HEADER.size:
        raise TruncationError("header truncated", len(payload))

    _, version, n, d, num_classes, num_spurious = GEMB_HEADER.unpack_from(payload, 0)
    if version != GEMB_VERSION:
        raise VersionError(f"unsupported GEMB version {version}", 4)
    if n < 1 or d < 1:
        raise ParseError(f"dataset must have n >= 1 and d >= 1, got n={n} d={d}", 8)
    if num_classes < 1:
        raise ParseError("num_classes must be positive", 24)

    cells = n * d
    if cells * 4 > sys.maxsize or n * 8 > sys.maxsize:
        raise SizeOverflowError(f"n*d = {cells} does not fit in memory addressing", 8)

    offset = GEMB_HEADER.size
    feature_bytes = cells * 4
    if len(payload) < offset + feature_bytes:
        raise TruncationError(f"feature block needs {feature_bytes} bytes", len(payload))
    features = np.frombuffer(payload, dtype="<f4", count=cells, offset=offset).reshape(n, d)
    offset += feature_bytes

    class_labels, offset = _read_labels(payload, offset, n, num_classes, "class")
    spurious_labels = None
    if num_spurious > 0:
        spurious_labels, offset = _read_labels(payload, offset, n, num_spurious, "spurious")

    if offset != len(payload):
        raise ParseError(f"{len(payload) - offset} trailing bytes after the label blocks", offset)

    return EmbeddingDataset(
        features=features.astype(np.float64),
        class_labels=class_labels,
        spurious_labels=spurious_labels,
        num_classes=num_classes,
        num_spurious=num_spurious,
        name=name,
    )


def _read_labels(payload: bytes, offset: int, n: int, bound: int, kind: str) -> Tuple[np.ndarray, int]:
    need = n * 4
    if len(payload) < offset + need:
        have = max(0, (len(payload) - offset) // 4)
        raise TruncationError(f"{kind} label block declares {n} entries but holds {have}", len(payload))
    labels = np.frombuffer(payload, dtype="<u4", count=n, offset=offset).astype(np.int64)
    bad = np.flatnonzero(labels >= bound)
    if bad.size:
        first = int(bad[0])
        raise LabelRangeError(
            f"{kind} label {labels[first]} at row {first} is not below {bound}", offset + 4 * first
        )
    return labels, offset + need


def encode_gemb(ds: EmbeddingDataset) -> bytes:
    labels = ds.require_class_labels()
    num_spurious = ds.num_spurious if ds.spurious_labels is not None else 0
    parts = [
        GEMB_HEADER.pack(GEMB_MAGIC, GEMB_VERSION, ds.n, ds.d, ds.num_classes, num_spurious),
        np.ascontiguousarray(ds.features, dtype="<f4").tobytes(),
        labels.astype("<u4").tobytes(),
    ]
    if num_spurious:
        parts.append(ds.spurious_labels.astype("<u4").tobytes())
    return b"".join(parts)


def save_embeddings(ds: EmbeddingDataset, path: str) -> None:
    """Write ``ds`` as GEMB (float32 features) or, for a ``.csv`` path, as CSV."""
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)

    if str(path).lower().endswith(".csv"):
        save_csv(ds, path)
        return

    with open(path, "wb") as f:
        f.write(encode_gemb(ds))
    logger.info(f"Saved {ds.n}x{ds.d} embeddings to {path}")


def load_csv(path: str, num_classes: Optional[int] = None, num_spurious: Optional[int] = None) -> EmbeddingDataset:
    """
    Read the CSV ingest format: header ``f0,...,f{d-1},class[,spurious]``

    Class and spurious counts default to ``max label + 1``.
    """
    frame = pd.read_csv(path)
    columns = list(frame.columns)
    feature_cols = [c for c in columns if c not in ("class", "spurious")]
    expected = [f"f{i}" for i in range(len(feature_cols))]
    if feature_cols != expected or "class" not in columns:
        raise ParseError(f"CSV header must be f0..f{{d-1}},class[,spurious]; got {columns}", 0)
    if not feature_cols:
        raise ParseError("CSV has no feature columns", 0)
    if frame.empty:
        raise TruncationError("CSV has a header but no rows", 1)

    try:
        features = frame[feature_cols].to_numpy(dtype=np.float64)
        raw_labels = frame["class"].to_numpy(dtype=np.float64)
        raw_spurious = frame["spurious"].to_numpy(dtype=np.float64) if "spurious" in columns else None
    except (ValueError, TypeError) as e:
        raise ParseError(f"CSV contains non-numeric or missing values: {e}", 1)
    if np.isnan(features).any():
        raise ParseError("CSV contains missing feature values", int(np.flatnonzero(np.isnan(features).any(axis=1))[0]) + 1)
    labels = _integral_labels(raw_labels, "class")
    spurious = None if raw_spurious is None else _integral_labels(raw_spurious, "spurious")

    if labels.min() < 0 or (spurious is not None and spurious.min() < 0):
        row = int(np.flatnonzero(labels < 0)[0]) if labels.min() < 0 else int(np.flatnonzero(spurious < 0)[0])
        raise LabelRangeError("negative label", row + 1)
    k = num_classes or int(labels.max()) + 1
    s = 0 if spurious is None else (num_spurious or int(spurious.max()) + 1)
    if labels.max() >= k:
        raise LabelRangeError(f"class label not below {k}", int(np.flatnonzero(labels >= k)[0]) + 1)
    if spurious is not None and spurious.max() >= s:
        raise LabelRangeError(f"spurious label not below {s}", int(np.flatnonzero(spurious >= s)[0]) + 1)

    return EmbeddingDataset(features, labels, spurious, k, s, name=os.path.basename(str(path)))


def _integral_labels(values: np.ndarray, column: str) -> np.ndarray:
    missing = np.flatnonzero(np.isnan(values))
    if missing.size:
        raise ParseError(f"CSV {column} column has a missing value", int(missing[0]) + 1)
    fractional = np.flatnonzero(values != np.round(values))
    if fractional.size:
        row = int(fractional[0])
        raise InvalidInputError(f"CSV {column} label {values[row]!r} on row {row + 1} is not an integer")
    return values.astype(np.int64)


def save_csv(ds: EmbeddingDataset, path: str) -> None:
    frame = pd.DataFrame(ds.features.astype(np.float32), columns=[f"f{i}" for i in range(ds.d)])
    frame["class"] = ds.require_class_labels()
    if ds.spurious_labels is not None:
        frame["spurious"] = ds.spurious_labels
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")


def split_indices(n: int, spec: SplitSpec) -> List[np.ndarray]:
    if n < len(spec.fractions):
        raise DegenerateSplitError(f"cannot cut {n} rows into {len(spec.fractions)} parts")
    # epsilon guards floor(0.95 * 1000) against representation error
    sizes = [int(math.floor(f * n + 1e-9)) for f in spec.fractions]
    sizes[0] += n - sum(sizes)
    if min(sizes) == 0:
        raise DegenerateSplitError(f"split of {n} rows by {spec.fractions} leaves an empty part")

    order = np.random.default_rng(spec.seed).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return np.split(order, cuts)


def split(ds: EmbeddingDataset, spec: SplitSpec) -> List[EmbeddingDataset]:
    """Seeded shuffle then contiguous cut; the rounding remainder goes to the first part."""
    parts = split_indices(ds.n, spec)
    return [ds.subset(idx, name=f"{ds.name}[{i}]") for i, idx in enumerate(parts)]


def halve(ds: EmbeddingDataset, seed: int = 0) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
    """Half for reweighting, half for model selection (uniform, not stratified)."""
    heldout, val = split(ds, SplitSpec(fractions=[0.5, 0.5], seed=seed))
    return heldout, val


def group_counts(ds: EmbeddingDataset) -> dict:
    groups = ds.group_ids
    ids, counts = np.unique(groups, return_counts=True)
    return {int(g): int(c) for g, c in zip(ids, counts)}


def class_counts(ds: EmbeddingDataset) -> dict:
    ids, counts = np.unique(ds.require_class_labels(), return_counts=True)
    return {int(k): int(c) for k, c in zip(ids, counts)}


def concat(datasets: Iterable[EmbeddingDataset], name: str = "") -> EmbeddingDataset:
    datasets = list(datasets)
    if not datasets:
        raise InvalidInputError("nothing to concatenate")
    first = datasets[0]
    for other in datasets[1:]:
        if (other.d, other.num_classes, other.num_spurious) != (first.d, first.num_classes, first.num_spurious):
            raise InvalidInputError("datasets disagree on dimension or label spaces")
    has_labels = all(ds.class_labels is not None for ds in datasets)
    has_spurious = all(ds.spurious_labels is not None for ds in datasets)
    return EmbeddingDataset(
        features=np.vstack([ds.features for ds in datasets]),
        class_labels=np.concatenate([ds.class_labels for ds in datasets]) if has_labels else None,
        spurious_labels=np.concatenate([ds.spurious_labels for ds in datasets]) if has_spurious else None,
        num_classes=first.num_classes,
        num_spurious=first.num_spurious if has_spurious else 0,
        name=name or "+".join(ds.name for ds in datasets),
    )


def subsample_annotations(ds: EmbeddingDataset, fraction: float, seed: int = 0) -> EmbeddingDataset:
    """Keep a seeded uniform ``fraction`` of rows (at least one)."""
    if not (0.0 < fraction <= 1.0):
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction}")
    keep = max(1, int(round(fraction * ds.n)))
    idx = np.sort(np.random.default_rng(seed).choice(ds.n, size=keep, replace=False))
    return ds.subset(idx, name=f"{ds.name}@{fraction:g}")


def reveal_labels(ledger: AnnotationLedger, indices, kind: str) -> AnnotationLedger:
    newly = ledger.reveal(indices, kind)
    if newly:
        logger.debug(f"Revealed {newly} {kind} labels in {ledger.scope}")
    return ledger
