"""Labeled datasets, embedding sets and the synthetic two-pretraining world."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, DatasetFormatError, EmptyDatasetError
from .param_space import atomic_write_bytes

__all__ = [
    "LabeledDataset",
    "FeatureSet",
    "WorldConfig",
    "make_world",
    "load_csv",
    "save_csv",
]

SPLITS = ("pretrainA", "pretrainB", "train", "val", "test")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix with integer labels.

    ``sample_ids`` are globally unique within a world and make split
    disjointness checkable.
    """

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("labels must be 1-D and aligned with feature rows")
        if X.shape[0] == 0:
            raise EmptyDatasetError(f"dataset split {self.split!r} is empty")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = int(y.max()) + 1
        if y.min() < 0 or y.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes})")
        ids = self.sample_ids
        ids = np.arange(X.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if ids.shape != y.shape:
            raise ValueError("sample_ids must align with rows")
        for arr in (X, y, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", int(num_classes))
        object.__setattr__(self, "sample_ids", ids)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, split=None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx],
            self.labels[idx],
            split=split or self.split,
            num_classes=self.num_classes,
            sample_ids=self.sample_ids[idx],
        )

    def class_indices(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in range(self.num_classes)}

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Row-normalized embeddings of a dataset.

    Rows whose raw activation was exactly zero stay zero and are flagged in
    ``valid`` so selectors can skip them.
    """

    rows: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if rows.ndim != 2 or labels.shape != (rows.shape[0],) or source_ids.shape != labels.shape:
            raise ValueError("rows, labels and source_ids are misaligned")
        norms = np.linalg.norm(rows, axis=1)
        valid = norms > 0 if self.valid is None else np.asarray(self.valid, dtype=bool)
        if not np.all(np.abs(norms[valid] - 1.0) <= 1e-9):
            raise ValueError("valid FeatureSet rows must have unit L2 norm")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "source_ids", source_ids)
        object.__setattr__(self, "valid", valid)

    def __len__(self):
        return self.rows.shape[0]

    def to_param_vector(self):
        from .param_space import ParamVector

        return ParamVector.from_segments(
            [
                ("rows", self.rows),
                ("labels", self.labels.astype(np.float64)),
                ("source_ids", self.source_ids.astype(np.float64)),
            ]
        )

    @classmethod
    def from_param_vector(cls, pv):
        return cls(pv["rows"], pv["labels"].astype(np.int64), pv["source_ids"].astype(np.int64))


def save_feature_set(fs: FeatureSet, path) -> None:
    from .param_space import encode_segments

    atomic_write_bytes(path, encode_segments(b"GFXE", fs.to_param_vector()))


def load_feature_set(path) -> FeatureSet:
    from .param_space import ParamVector, decode_segments

    with open(path, "rb") as fh:
        _, names, shapes, flat = decode_segments(fh.read(), [b"GFXE"])
    return FeatureSet.from_param_vector(ParamVector(names, shapes, flat))


# ---------------------------------------------------------------------------
# synthetic world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    """Knobs of the synthetic world.

    Pre-training A draws Gaussian blobs around random class means.  Pre-training
    B reuses the same draws rotated by ``rotation_angle`` in ``rotation_planes``
    random 2-D planes, so ``rotation_angle=0`` reproduces A exactly.  The
    downstream task mixes the pre-training geometry (rotated half way) with
    fresh class means; ``relatedness`` in [0, 1] sets the mixing weight.
    """

    input_dim: int = 16
    num_classes_pretrain: int = 4
    num_classes_downstream: int = 4
    dispersion: float = 3.0
    within_sigma: float = 1.0
    rotation_angle: float = math.pi / 6
    rotation_planes: int = 4
    relatedness: float = 0.5
    n_pretrain: int = 2000
    n_train: int = 400
    n_val: int = 100
    n_test: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 2:
            raise ConfigError("input_dim must be >= 2")
        if self.num_classes_pretrain < 2 or self.num_classes_downstream < 2:
            raise ConfigError("class counts must be >= 2")
        if not (self.dispersion > self.within_sigma > 0):
            raise ConfigError("need dispersion > within_sigma > 0")
        if not math.isfinite(self.rotation_angle):
            raise ConfigError("rotation_angle must be finite")
        if not 0 <= 2 * self.rotation_planes <= self.input_dim:
            raise ConfigError("rotation_planes must satisfy 0 <= 2*planes <= input_dim")
        if not 0.0 <= self.relatedness <= 1.0:
            raise ConfigError("relatedness must lie in [0, 1]")
        for name in ("n_pretrain", "n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def num_classes(self) -> int:
        return max(self.num_classes_pretrain, self.num_classes_downstream)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _rotation(dim, angle, planes, rng):
    """Orthogonal map rotating ``planes`` random orthogonal 2-planes by ``angle``;
    None stands for the exact identity."""
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    if angle == 0 or planes == 0:
        # the basis is still drawn so later draws do not depend on the angle
        return None
    c, s = math.cos(angle), math.sin(angle)
    block = np.eye(dim)
    for k in range(planes):
        i, j = 2 * k, 2 * k + 1
        block[i, i] = c
        block[j, j] = c
        block[i, j] = -s
        block[j, i] = s
    return basis @ block @ basis.T


def _balanced_labels(n, num_classes, rng):
    labels = np.arange(n) % num_classes
    return rng.permutation(labels)


def _blobs(means, n, sigma, rng):
    labels = _balanced_labels(n, means.shape[0], rng)
    noise = rng.standard_normal((n, means.shape[1])) * sigma
    return means[labels] + noise, labels


def make_world(cfg: WorldConfig) -> dict[str, LabeledDataset]:
    """Build pretrainA, pretrainB, train, val and test splits.

    Each split draws its own noise, so sample ids (assigned consecutively
    across splits) are disjoint by construction.
    """
    root = np.random.SeedSequence(cfg.seed)
    geo_ss, a_ss, down_ss = root.spawn(3)
    geo = np.random.default_rng(geo_ss)
    d, k = cfg.input_dim, cfg.num_classes

    base_means = geo.standard_normal((cfg.num_classes_pretrain, d))
    base_means *= cfg.dispersion / np.linalg.norm(base_means, axis=1, keepdims=True)
    rot = _rotation(d, cfg.rotation_angle, cfg.rotation_planes, geo)
    half_rot = _rotation(d, cfg.rotation_angle / 2, cfg.rotation_planes, geo)
    fresh = geo.standard_normal((cfg.num_classes_downstream, d))
    fresh *= cfg.dispersion / np.linalg.norm(fresh, axis=1, keepdims=True)
    related = np.resize(base_means, (cfg.num_classes_downstream, d))
    lam = cfg.relatedness
    down_means = lam * related + math.sqrt(1.0 - lam * lam) * fresh
    if half_rot is not None:
        down_means = down_means @ half_rot.T

    Xa, ya = _blobs(base_means, cfg.n_pretrain, cfg.within_sigma, np.random.default_rng(a_ss))
    Xb = Xa.copy() if rot is None else Xa @ rot.T
    yb = ya.copy()

    down_rng = np.random.default_rng(down_ss)
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    out = {}
    next_id = 0
    for split, X, y in (("pretrainA", Xa, ya), ("pretrainB", Xb, yb)):
        ids = np.arange(next_id, next_id + len(y))
        next_id += len(y)
        out[split] = LabeledDataset(X, y, split=split, num_classes=k, sample_ids=ids)
    for split, n in sizes.items():
        X, y = _blobs(down_means, n, cfg.within_sigma, down_rng)
        ids = np.arange(next_id, next_id + n)
        next_id += n
        out[split] = LabeledDataset(X, y, split=split, num_classes=k, sample_ids=ids)
    return out


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def save_csv(data: LabeledDataset, path) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"f{j}" for j in range(data.n_features)] + ["label"])
    for row, label in zip(data.features, data.labels):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def load_csv(path, input_dim: int | None = None, num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """Parse a ``f0..f{d-1},label`` CSV.

    Errors name the 1-based file line so malformed rows are easy to find.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"f{j}" for j in range(d)] + ["label"]
        if d < 1 or header != expected or (input_dim is not None and d != input_dim):
            want = input_dim if input_dim is not None else "d"
            raise DatasetFormatError(f"{path}:1: header must be f0..f{want}-1,label; got {header}")
        rows, labels = [], []
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise DatasetFormatError(f"{path}:{line_no}: expected {d + 1} fields, got {len(rec)}")
            try:
                vals = [float(x) for x in rec[:d]]
                label = int(rec[d])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{line_no}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetFormatError(f"{path}:{line_no}: non-finite feature value")
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DatasetFormatError(
                    f"{path}:{line_no}: label {label} outside [0, {num_classes})"
                )
            rows.append(vals)
            labels.append(label)
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    return LabeledDataset(np.array(rows), np.array(labels), split=split, num_classes=num_classes)
