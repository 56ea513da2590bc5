"""Datasets, IDX/CSV I/O, target encodings and unlearning scenario splits.

Samples are stored column-wise: ``X`` has shape ``(d, N)``.
"""

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ONE_HOT = "one-hot"
PM_ONE = "pm-one"
SCHEMES = (ONE_HOT, PM_ONE)

SCENARIO_KINDS = ("full-class", "sub-class", "random")


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    labels: np.ndarray
    n_classes: int
    names: tuple = ()
    superclass_map: dict = None
    fine_labels: np.ndarray = None
    split: str = "train"
    image_shape: tuple = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError(f"X must be (d, N), got shape {X.shape}")
        if labels.ndim != 1 or labels.shape[0] != X.shape[1]:
            raise ValueError(f"expected {X.shape[1]} labels, got shape {labels.shape}")
        if X.shape[1] < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite entries")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        names = tuple(self.names) if self.names else tuple(str(c) for c in range(self.n_classes))
        if len(names) != self.n_classes:
            raise ValueError(f"need {self.n_classes} class names, got {len(names)}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        fine = None
        if self.fine_labels is not None:
            fine = np.asarray(self.fine_labels, dtype=np.int64)
            if fine.shape != labels.shape:
                raise ValueError("fine_labels must match labels in length")
            if self.superclass_map is None:
                raise ValueError("fine_labels require a superclass_map")
            mapped = np.array([self.superclass_map[int(f)] for f in fine], dtype=np.int64)
            if not np.array_equal(mapped, labels):
                raise ValueError("labels disagree with superclass_map applied to fine_labels")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "fine_labels", fine)

    @property
    def N(self):
        return self.X.shape[1]

    @property
    def d(self):
        return self.X.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            X=self.X[:, indices],
            labels=self.labels[indices],
            n_classes=self.n_classes,
            names=self.names,
            superclass_map=self.superclass_map,
            fine_labels=None if self.fine_labels is None else self.fine_labels[indices],
            split=self.split,
            image_shape=self.image_shape,
        )


@dataclass(frozen=True)
class Scenario:
    kind: str
    target: int = None
    fraction: float = None
    count: int = None
    seed: int = 0

    def describe(self):
        if self.kind == "random":
            size = f"n{self.count}" if self.count is not None else f"f{self.fraction:g}"
            return f"random-{size}"
        suffix = f"-n{self.count}" if self.count is not None else ""
        return f"{self.kind}-{self.target}{suffix}"


@dataclass(frozen=True)
class ScenarioSplit:
    retain: np.ndarray
    forget: np.ndarray
    scenario: Scenario

    def __post_init__(self):
        retain = np.asarray(self.retain, dtype=np.int64)
        forget = np.asarray(self.forget, dtype=np.int64)
        if forget.size == 0:
            raise ValueError("forget set is empty")
        if np.intersect1d(retain, forget).size:
            raise ValueError("retain and forget indices overlap")
        object.__setattr__(self, "retain", retain)
        object.__setattr__(self, "forget", forget)


@dataclass(frozen=True)
class TargetMatrix:
    Y: np.ndarray
    encoding: str
    labels: np.ndarray = field(default=None, repr=False)


# --------------------------------------------------------------------------
# IDX


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _read_idx(path, magic):
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) < expected:
        raise IdxFormatError(f"{path}: truncated data ({len(body)} of {expected} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path, split="train", n_classes=None):
    """Read an IDX image/label pair; pixels are scaled to [0, 1].

    ``.gz`` files are decompressed transparently.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n, rows, cols = images.shape
    X = images.reshape(n, rows * cols).T.astype(float) / 255.0
    if n_classes is None:
        n_classes = max(10, int(labels.max()) + 1)
    return Dataset(
        X=X,
        labels=labels.astype(np.int64),
        n_classes=n_classes,
        split=split,
        image_shape=(rows, cols),
    )


def write_idx(ds, images_path, labels_path):
    """Write a dataset back to IDX; pixels are rounded to bytes."""
    if ds.image_shape is None:
        raise ValueError("dataset has no image_shape; cannot write IDX images")
    rows, cols = ds.image_shape
    pixels = np.rint(ds.X.T * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("pixel values outside [0, 1]")
    pixels = pixels.astype(np.uint8).reshape(ds.N, rows, cols)
    if ds.labels.max() > 255:
        raise ValueError("IDX label files hold unsigned bytes")
    with _open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, ds.N, rows, cols))
        fh.write(pixels.tobytes())
    with _open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, ds.N))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# CSV


def write_csv(ds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x{j}" for j in range(ds.d)])
        for i in range(ds.N):
            writer.writerow([int(ds.labels[i])] + [repr(float(v)) for v in ds.X[:, i]])


def read_csv(path, n_classes=None, split="train"):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: first column must be 'label'")
        rows = [row for row in reader if row]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float).T
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return Dataset(X=X, labels=labels, n_classes=n_classes, split=split)


# --------------------------------------------------------------------------
# construction


def filter_classes(ds, keep, per_class_cap=None, seed=0):
    """Keep the listed classes, relabelled to ``0..len(keep)-1`` in ``keep`` order.

    With a cap, each class is subsampled by a seeded shuffle; selected
    samples keep their original relative order.
    """
    keep = [int(c) for c in keep]
    if not keep:
        raise ValueError("keep must list at least one class")
    if len(set(keep)) != len(keep):
        raise ValueError(f"duplicate classes in keep: {keep}")
    for c in keep:
        if not 0 <= c < ds.n_classes:
            raise ValueError(f"class {c} not in [0, {ds.n_classes})")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in keep:
        idx = np.flatnonzero(ds.labels == c)
        if per_class_cap is not None and idx.size > per_class_cap:
            idx = np.sort(rng.permutation(idx)[:per_class_cap])
        chosen.append(idx)
    chosen = np.sort(np.concatenate(chosen))
    if chosen.size == 0:
        raise ValueError(f"no samples left after filtering to classes {keep}")
    remap = {c: i for i, c in enumerate(keep)}
    labels = np.array([remap[int(c)] for c in ds.labels[chosen]], dtype=np.int64)
    return Dataset(
        X=ds.X[:, chosen],
        labels=labels,
        n_classes=len(keep),
        names=tuple(ds.names[c] for c in keep),
        split=ds.split,
        image_shape=ds.image_shape,
    )


def synth_gaussian(d, n_classes, per_class, separation, seed=0, split="train"):
    """Isotropic Gaussian classes centred at ``separation * e_c``."""
    if d < 1 or n_classes < 1 or per_class < 1:
        raise ValueError("d, n_classes and per_class must be positive")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    if n_classes > d:
        raise ValueError(f"need d >= n_classes for basis-direction means, got d={d}, C={n_classes}")
    rng = np.random.default_rng(seed)
    means = separation * np.eye(d)[:, :n_classes]
    X = np.concatenate(
        [means[:, [c]] + rng.standard_normal((d, per_class)) for c in range(n_classes)], axis=1
    )
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset(X=X, labels=labels, n_classes=n_classes, split=split)


def with_superclasses(ds, superclass_map, names=None):
    """Relabel a fine-labelled dataset by ``superclass_map``, keeping the fine labels."""
    coarse = np.array([superclass_map[int(c)] for c in ds.labels], dtype=np.int64)
    n_coarse = max(superclass_map.values()) + 1
    return Dataset(
        X=ds.X,
        labels=coarse,
        n_classes=n_coarse,
        names=names or (),
        superclass_map=dict(superclass_map),
        fine_labels=ds.labels,
        split=ds.split,
        image_shape=ds.image_shape,
    )


def split_scenario(ds, scenario):
    """Partition sample indices into retain and forget sets.

    ``full-class`` forgets every sample of ``target``.  ``sub-class``
    forgets a fine class (``target`` indexes ``fine_labels``) of a
    superclass-labelled dataset, or ``count`` seeded samples of class
    ``target`` when ``count`` is given.  ``random`` forgets
    ``floor(fraction * N)`` (or ``count``) seeded samples.
    """
    kind = scenario.kind
    N = ds.N
    rng = np.random.default_rng(scenario.seed)
    if kind == "full-class":
        if scenario.target is None or not 0 <= scenario.target < ds.n_classes:
            raise ValueError(f"full-class target {scenario.target} is not a valid class")
        forget = np.flatnonzero(ds.labels == scenario.target)
    elif kind == "sub-class":
        if scenario.target is None:
            raise ValueError("sub-class scenario needs a target")
        if ds.fine_labels is not None:
            pool = np.flatnonzero(ds.fine_labels == scenario.target)
        elif scenario.count is not None:
            if not 0 <= scenario.target < ds.n_classes:
                raise ValueError(f"sub-class target {scenario.target} is not a valid class")
            pool = np.flatnonzero(ds.labels == scenario.target)
        else:
            raise ValueError("sub-class scenario needs a superclass-labelled dataset or a count")
        if scenario.count is not None:
            if not 0 < scenario.count <= pool.size:
                raise ValueError(f"count {scenario.count} not in [1, {pool.size}]")
            pool = rng.choice(pool, size=scenario.count, replace=False)
        forget = np.sort(pool)
    elif kind == "random":
        if scenario.count is not None:
            n_u = int(scenario.count)
        else:
            if scenario.fraction is None or not 0 < scenario.fraction < 1:
                raise ValueError(f"random fraction must be in (0, 1), got {scenario.fraction}")
            n_u = int(np.floor(scenario.fraction * N))
        if not 0 < n_u < N:
            raise ValueError(f"random scenario selects {n_u} of {N} samples")
        forget = np.sort(rng.choice(N, size=n_u, replace=False))
    else:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")
    if forget.size == 0:
        raise ValueError(f"scenario {scenario.describe()} selects an empty forget set")
    retain = np.setdiff1d(np.arange(N), forget)
    return ScenarioSplit(retain=retain, forget=forget, scenario=scenario)


def encode_targets(labels, n_classes, scheme=ONE_HOT):
    labels = np.asarray(labels, dtype=np.int64)
    if scheme == ONE_HOT:
        Y = np.zeros((labels.size, n_classes))
        Y[np.arange(labels.size), labels] = 1.0
    elif scheme == PM_ONE:
        if n_classes != 2:
            raise ValueError(f"pm-one encoding needs exactly 2 classes, got {n_classes}")
        Y = np.where(labels == 1, 1.0, -1.0).reshape(-1, 1)
    else:
        raise ValueError(f"unknown target scheme {scheme!r}; expected one of {SCHEMES}")
    return TargetMatrix(Y=Y, encoding=scheme, labels=labels)
