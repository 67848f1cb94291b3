"""Dataset loading, splitting, standardization, and the flower generator."""

from __future__ import annotations

import csv
import os
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CsvFormatError

STD_FLOOR = 1e-9

FLOWER_PETALS = 9
FLOWER_CENTER_RADIUS = 3.0
FLOWER_RADIAL_STD = 0.8
FLOWER_TANGENTIAL_STD = 0.15


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.features.shape[0]:
                raise ValueError("labels length does not match feature rows")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SplitSpec:
    train_fraction: float = 0.64
    valid_fraction: float = 0.16
    test_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.valid_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"split fractions sum to {total}, expected 1")


def _detect_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def load_csv(path, label_column: str | None = None) -> Dataset:
    """Parse a headered CSV or TSV of numbers into a Dataset.

    The delimiter (comma or tab) is detected from the header line. Decimal
    separator is '.'. Ragged or non-numeric rows raise with their 1-based
    line number; rows containing NaN or infinities parse but are dropped
    with a warning reporting the count. If label_column names a column it
    is split off as 0/1 labels.
    """
    with open(path, "r", newline="") as fh:
        first = fh.readline()
        if not first:
            raise CsvFormatError(f"{path}: empty file")
        delim = _detect_delimiter(first)
        header = next(csv.reader([first], delimiter=delim))
        header = [h.strip() for h in header]
        label_idx = None
        if label_column is not None:
            if label_column not in header:
                raise CsvFormatError(
                    f"{path}: label column {label_column!r} not in header {header}")
            label_idx = header.index(label_column)
        rows = []
        for lineno, rec in enumerate(csv.reader(fh, delimiter=delim), start=2):
            if not rec or (len(rec) == 1 and rec[0].strip() == ""):
                continue
            if len(rec) != len(header):
                raise CsvFormatError(
                    f"{path}: line {lineno}: expected {len(header)} fields, "
                    f"got {len(rec)}")
            try:
                rows.append([float(cell) for cell in rec])
            except ValueError as exc:
                raise CsvFormatError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    mat = np.array(rows, dtype=np.float64)
    labels = None
    if label_idx is not None:
        labels = mat[:, label_idx]
        mat = np.delete(mat, label_idx, axis=1)
        header = header[:label_idx] + header[label_idx + 1 :]
    finite = np.isfinite(mat).all(axis=1)
    if labels is not None:
        finite &= np.isfinite(labels)
    dropped = int((~finite).sum())
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} rows with non-finite values",
                      stacklevel=2)
        mat = mat[finite]
        labels = labels[finite] if labels is not None else None
    if mat.shape[0] == 0:
        raise CsvFormatError(f"{path}: all rows dropped as non-finite")
    if labels is not None:
        bad = ~np.isin(labels, (0.0, 1.0))
        if bad.any():
            raise CsvFormatError(
                f"{path}: label column must be 0/1, found {labels[bad][0]!r}")
        labels = labels.astype(np.int64)
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(mat, labels, name=name, columns=tuple(header))


def _atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(str(path))) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_csv(path, dataset: Dataset) -> None:
    """Write a comma-separated file with header; 17 significant digits so a
    save/load round trip is bit-exact."""
    cols = dataset.columns or tuple(f"x{i}" for i in range(dataset.dim))
    header = list(cols)
    if dataset.labels is not None:
        header.append("label")
    lines = [",".join(header)]
    for i in range(dataset.n):
        cells = ["%.17g" % v for v in dataset.features[i]]
        if dataset.labels is not None:
            cells.append(str(int(dataset.labels[i])))
        lines.append(",".join(cells))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic train/valid/test split; anomalies never reach train.

    Sizes are floor(0.64 n) and floor(0.16 n) with the remainder as test.
    Rows labeled 1 are distributed between valid and test in proportion to
    those splits' sizes (16:20); normal rows fill the rest.
    """
    n = dataset.n
    if n < 5:
        raise ValueError(f"need at least 5 rows to split, got {n}")
    n_train = int(np.floor(spec.train_fraction * n))
    n_valid = int(np.floor(spec.valid_fraction * n))
    rng = np.random.default_rng(spec.seed)

    def take(idx):
        feats = dataset.features[idx]
        labs = dataset.labels[idx] if dataset.labels is not None else None
        return Dataset(feats, labs, name=dataset.name, columns=dataset.columns)

    if dataset.labels is None or not dataset.labels.any():
        perm = rng.permutation(n)
        return (take(perm[:n_train]),
                take(perm[n_train : n_train + n_valid]),
                take(perm[n_train + n_valid :]))

    anom = np.nonzero(dataset.labels == 1)[0]
    normal = np.nonzero(dataset.labels == 0)[0]
    if normal.size == 0:
        raise ValueError("dataset contains only anomalies; nothing to train on")
    n_anom_valid = int(np.floor(anom.size * spec.valid_fraction
                                / (spec.valid_fraction + spec.test_fraction)))
    n_valid_norm = n_valid - n_anom_valid
    n_test = n - n_train - n_valid
    n_test_norm = n_test - (anom.size - n_anom_valid)
    if n_train > normal.size or n_valid_norm < 0 or n_test_norm < 0:
        raise ValueError(
            f"too many anomalies ({anom.size}/{n}) for a "
            f"{spec.train_fraction:.0%} normal-only training split")
    anom = rng.permutation(anom)
    normal = rng.permutation(normal)
    train_idx = normal[:n_train]
    valid_idx = np.concatenate([normal[n_train : n_train + n_valid_norm],
                                anom[:n_anom_valid]])
    test_idx = np.concatenate([normal[n_train + n_valid_norm :],
                               anom[n_anom_valid:]])
    return take(train_idx), take(valid_idx), take(test_idx)


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardization":
        """Per-feature mean/std from training rows; constant features get a
        floored std of 1e-9 and a warning."""
        features = np.asarray(features, dtype=np.float64)
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        low = std < STD_FLOOR
        if low.any():
            warnings.warn(
                f"features {np.nonzero(low)[0].tolist()} are (near) constant; "
                f"flooring std at {STD_FLOOR:g}", stacklevel=2)
            std = np.where(low, STD_FLOOR, std)
        return cls(mean, std)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def inverse(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) * self.std + self.mean

    @property
    def log_volume(self) -> float:
        """log|det| of the standardization map; subtract from standardized
        log-densities to express them in original units."""
        return float(-np.log(self.std).sum())

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


def make_flower(n: int, petals: int = FLOWER_PETALS, seed: int = 0) -> Dataset:
    """2-D flower: anisotropic Gaussian petals rotated to uniform angles.

    Each sample picks a petal uniformly, draws a point around (3, 0) with
    radial std 0.8 and tangential std 0.15, and rotates it by 2 pi k/petals,
    making the distribution invariant under that rotation by construction.
    """
    if petals < 1:
        raise ValueError("petals must be >= 1")
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    k = rng.integers(0, petals, size=n)
    radial = rng.normal(0.0, FLOWER_RADIAL_STD, size=n)
    tangential = rng.normal(0.0, FLOWER_TANGENTIAL_STD, size=n)
    px = FLOWER_CENTER_RADIUS + radial
    py = tangential
    angle = 2.0 * np.pi * k / petals
    ca, sa = np.cos(angle), np.sin(angle)
    feats = np.column_stack([ca * px - sa * py, sa * px + ca * py])
    return Dataset(feats, name="flower", columns=("x0", "x1"))
