"""Dataset model, on-disk formats, validation splits and a synthetic generator.

Conventions follow the column-instance layout used throughout the package:

* features are ``d x n`` (one instance per column),
* semantic representations are ``a x C`` (one category per column),
* labels are ``n x C`` one-hot matrices with entries in ``{0, 1}``.

On disk a dataset is a JSON manifest plus one CSV file per matrix (one
matrix row per line, comma separated, ``.`` decimal point, no header).
Values are written with ``repr(float)``, which round-trips bit-exactly.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from zslmap.errors import DatasetError, DimensionError

MANIFEST_FORMAT = "zslmap-dataset"
MANIFEST_VERSION = 1

# Matrix roles in the order they appear in a manifest.
MATRIX_ROLES = (
    "seen_features",
    "seen_labels",
    "seen_semantics",
    "unseen_features",
    "unseen_semantics",
    "unseen_labels",
)


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Return ``values`` as a finite 2-D float64 array.

    Raises :class:`DatasetError` naming the first non-finite entry.
    """
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        r, c = bad[0]
        raise DatasetError(f"non-finite value at ({r},{c}) in {name}")
    return arr


def check_one_hot(labels: np.ndarray, name: str = "labels") -> None:
    ok_values = (labels == 0.0) | (labels == 1.0)
    for r in range(labels.shape[0]):
        row = labels[r]
        if not ok_values[r].all() or row.sum() != 1.0:
            raise DatasetError(f"invalid one-hot label at row {r} of {name}")


def one_hot(indices: Sequence[int], n_classes: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((indices.size, n_classes))
    if indices.size:
        if indices.min() < 0 or indices.max() >= n_classes:
            raise DatasetError("label index out of range")
        out[np.arange(indices.size), indices] = 1.0
    return out


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ZslDataset:
    """Seen training data plus unseen test data for one zero-shot problem.

    Arrays are copied and made read-only on construction.
    """

    seen_features: np.ndarray
    seen_labels: np.ndarray
    seen_semantics: np.ndarray
    unseen_features: np.ndarray
    unseen_semantics: np.ndarray
    seen_categories: tuple = ()
    unseen_categories: tuple = ()
    unseen_labels: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        for role in MATRIX_ROLES:
            value = getattr(self, role)
            if value is None:
                continue
            object.__setattr__(self, role, _frozen(as_matrix(value, role)))

        d, n_s = self.seen_features.shape
        a, c_s = self.seen_semantics.shape
        c_t = self.unseen_semantics.shape[1]
        n_t = self.unseen_features.shape[1]

        if self.seen_labels.shape != (n_s, c_s):
            raise DimensionError(
                f"seen_labels has shape {self.seen_labels.shape}, expected {(n_s, c_s)}"
            )
        if self.unseen_features.shape[0] != d:
            raise DimensionError("unseen_features and seen_features differ in feature dimension")
        if self.unseen_semantics.shape[0] != a:
            raise DimensionError("unseen_semantics and seen_semantics differ in semantic dimension")
        check_one_hot(self.seen_labels, "seen_labels")
        if self.unseen_labels is not None:
            if self.unseen_labels.shape != (n_t, c_t):
                raise DimensionError(
                    f"unseen_labels has shape {self.unseen_labels.shape}, expected {(n_t, c_t)}"
                )
            check_one_hot(self.unseen_labels, "unseen_labels")

        seen_ids = tuple(str(c) for c in self.seen_categories) or tuple(
            f"s{i}" for i in range(c_s)
        )
        unseen_ids = tuple(str(c) for c in self.unseen_categories) or tuple(
            f"u{i}" for i in range(c_t)
        )
        if len(seen_ids) != c_s or len(unseen_ids) != c_t:
            raise DimensionError("category identifier lists do not match semantic matrices")
        if len(set(seen_ids)) != c_s or len(set(unseen_ids)) != c_t:
            raise DatasetError("duplicate category identifier")
        if set(seen_ids) & set(unseen_ids):
            raise DatasetError("seen and unseen category identifiers overlap")
        object.__setattr__(self, "seen_categories", seen_ids)
        object.__setattr__(self, "unseen_categories", unseen_ids)

    @property
    def d(self) -> int:
        return self.seen_features.shape[0]

    @property
    def a(self) -> int:
        return self.seen_semantics.shape[0]

    @property
    def n_seen(self) -> int:
        return self.seen_features.shape[1]

    @property
    def n_unseen(self) -> int:
        return self.unseen_features.shape[1]

    @property
    def n_seen_classes(self) -> int:
        return self.seen_semantics.shape[1]

    @property
    def n_unseen_classes(self) -> int:
        return self.unseen_semantics.shape[1]

    @property
    def seen_label_indices(self) -> np.ndarray:
        return np.argmax(self.seen_labels, axis=1) if self.n_seen else np.zeros(0, int)

    @property
    def unseen_label_indices(self) -> np.ndarray | None:
        if self.unseen_labels is None:
            return None
        return np.argmax(self.unseen_labels, axis=1) if self.n_unseen else np.zeros(0, int)


# --------------------------------------------------------------------------
# CSV matrices and manifests
# --------------------------------------------------------------------------


def _format_row(row) -> str:
    return ",".join(repr(float(v)) for v in row)


def write_matrix(path, matrix) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in matrix:
            fh.write(_format_row(row))
            fh.write("\n")


def read_matrix(path, rows: int | None = None, cols: int | None = None, name: str | None = None) -> np.ndarray:
    """Read a headerless CSV matrix; ``rows``/``cols`` are checked when given.

    Empty matrices are representable: a ``r x 0`` matrix is ``r`` empty
    lines and a ``0 x c`` matrix is an empty file, which is why the
    expected shape is needed to disambiguate.
    """
    name = name or os.fspath(path)
    if not os.path.exists(path):
        raise DatasetError(f"missing file: {os.fspath(path)}")
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    data = []
    for r, line in enumerate(lines):
        line = line.strip()
        if not line:
            data.append([])
            continue
        try:
            data.append([float(tok) for tok in line.split(",")])
        except ValueError as exc:
            raise DatasetError(f"unparsable value in row {r} of {name}: {exc}") from None
    widths = {len(r) for r in data}
    if len(widths) > 1:
        raise DimensionError(f"ragged rows in {name}")
    n_rows = len(data)
    n_cols = widths.pop() if widths else (cols or 0)
    if rows is not None and n_rows != rows:
        raise DimensionError(f"{name} has {n_rows} rows, manifest says {rows}")
    if cols is not None and n_cols != cols:
        raise DimensionError(f"{name} has {n_cols} columns, manifest says {cols}")
    arr = np.array(data, dtype=np.float64).reshape(n_rows, n_cols)
    return as_matrix(arr, name)


def save_dataset(dataset: ZslDataset, directory, name: str | None = None) -> Path:
    """Write ``dataset`` as ``manifest.json`` plus CSV files into ``directory``.

    Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    matrices = {}
    for role in MATRIX_ROLES:
        value = getattr(dataset, role)
        if value is None:
            continue
        fname = f"{role}.csv"
        write_matrix(directory / fname, value)
        matrices[role] = {"path": fname, "rows": value.shape[0], "cols": value.shape[1]}
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": name or dataset.name,
        "d": dataset.d,
        "a": dataset.a,
        "seen_categories": list(dataset.seen_categories),
        "unseen_categories": list(dataset.unseen_categories),
        "matrices": matrices,
    }
    path = directory / "manifest.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(manifest_path) -> ZslDataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"missing file: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"not a {MANIFEST_FORMAT} manifest: {manifest_path}")

    entries: Mapping = manifest.get("matrices", {})
    missing = [r for r in MATRIX_ROLES[:-1] if r not in entries]
    if missing:
        raise DatasetError(f"manifest lacks matrices: {', '.join(missing)}")
    base = manifest_path.parent
    loaded = {}
    for role, entry in entries.items():
        if role not in MATRIX_ROLES:
            raise DatasetError(f"unknown matrix role {role!r}")
        loaded[role] = read_matrix(base / entry["path"], entry.get("rows"), entry.get("cols"), role)

    d, a = manifest.get("d"), manifest.get("a")
    if d is not None and loaded["seen_features"].shape[0] != d:
        raise DimensionError(f"seen_features has {loaded['seen_features'].shape[0]} rows, manifest d={d}")
    if a is not None and loaded["seen_semantics"].shape[0] != a:
        raise DimensionError(f"seen_semantics has {loaded['seen_semantics'].shape[0]} rows, manifest a={a}")

    return ZslDataset(
        seen_features=loaded["seen_features"],
        seen_labels=loaded["seen_labels"],
        seen_semantics=loaded["seen_semantics"],
        unseen_features=loaded["unseen_features"],
        unseen_semantics=loaded["unseen_semantics"],
        unseen_labels=loaded.get("unseen_labels"),
        seen_categories=tuple(manifest.get("seen_categories", ())),
        unseen_categories=tuple(manifest.get("unseen_categories", ())),
        name=manifest.get("name", "dataset"),
    )


# --------------------------------------------------------------------------
# Model files: CSV matrix blocks with a small header
# --------------------------------------------------------------------------


def save_blocks(path, method: str, meta: Mapping, blocks: Mapping[str, np.ndarray]) -> None:
    """Write named matrices to one text file.

    Layout::

        #model <method>
        #meta <json object>
        #block <name> <rows> <cols>
        <row as CSV>
        ...
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#model {method}\n")
        fh.write("#meta " + json.dumps(dict(meta), sort_keys=True) + "\n")
        for name, value in blocks.items():
            value = np.atleast_2d(np.asarray(value, dtype=np.float64))
            fh.write(f"#block {name} {value.shape[0]} {value.shape[1]}\n")
            for row in value:
                fh.write(_format_row(row) + "\n")


def load_blocks(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise DatasetError(f"missing file: {os.fspath(path)}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#model "):
        raise DatasetError(f"not a model file: {os.fspath(path)}")
    method = lines[0][len("#model "):].strip()
    meta: dict = {}
    blocks: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("#meta "):
            meta = json.loads(line[len("#meta "):])
            i += 1
        elif line.startswith("#block "):
            _, name, rows, cols = line.split()
            rows, cols = int(rows), int(cols)
            body = lines[i + 1 : i + 1 + rows]
            if len(body) != rows:
                raise DatasetError(f"truncated block {name} in {os.fspath(path)}")
            vals = [[float(t) for t in r.split(",")] if r else [] for r in body]
            blocks[name] = np.array(vals, dtype=np.float64).reshape(rows, cols)
            i += 1 + rows
        else:
            raise DatasetError(f"unexpected line {i + 1} in {os.fspath(path)}")
    return method, meta, blocks


# --------------------------------------------------------------------------
# Synthetic projection-domain-shift data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    d: int
    a: int
    n_seen_classes: int
    n_unseen_classes: int
    per_category: int
    mapping_drift: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for f in ("d", "a", "n_seen_classes", "n_unseen_classes", "per_category"):
            if int(getattr(self, f)) < 1:
                raise DatasetError(f"{f} must be >= 1")
        if not self.mapping_drift >= 0 or not math.isfinite(self.mapping_drift):
            raise DatasetError("mapping_drift must be a finite nonnegative number")
        if not self.noise_sigma >= 0 or not math.isfinite(self.noise_sigma):
            raise DatasetError("noise_sigma must be a finite nonnegative number")


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide generator: numpy's PCG64 bit generator seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def generate_synthetic(spec: SyntheticSpec) -> ZslDataset:
    """Sample a zero-shot problem whose visual-semantic mapping varies by category.

    Draw order from ``make_rng(spec.seed)``:

    1. ``prototypes``: ``a x (C_s + C_t)`` uniform[0, 1) values cubed, each
       column scaled to unit L2 norm (nonnegative, attribute-like, a few
       dominant entries per category). Seen categories are the first ``C_s``
       columns.
    2. ``shared``: ``d x a`` standard normal, scaled by ``1/sqrt(a)``.
    3. ``basis``: ``a x d x a`` standard normal; slice ``j`` is the
       perturbation contributed by attribute ``j``.
    4. ``noise``: ``d x (per_category * (C_s + C_t))`` standard normal, seen
       instances first, grouped by category in category order.

    Category ``c`` uses the mapping ``shared + drift * delta_c`` where
    ``delta_c = sum_j (prototype_c[j] - mean_prototype[j]) * basis[j]``, so
    semantically close categories get close mappings and no part of the
    perturbation is common to all categories. Its instances are
    ``(shared + drift * delta_c) @ prototype_c + noise_sigma * noise``.
    """
    rng = make_rng(spec.seed)
    d, a = spec.d, spec.a
    c_s, c_t, m = spec.n_seen_classes, spec.n_unseen_classes, spec.per_category
    n_classes = c_s + c_t

    prototypes = rng.random((a, n_classes)) ** 3
    # an all-zero column has probability zero; keep it well-defined anyway
    prototypes[:, np.linalg.norm(prototypes, axis=0) == 0] = 1.0
    prototypes /= np.linalg.norm(prototypes, axis=0)

    shared = rng.standard_normal((d, a)) / math.sqrt(a)
    basis = rng.standard_normal((a, d, a))
    noise = rng.standard_normal((d, m * n_classes))

    coef = prototypes - prototypes.mean(axis=1, keepdims=True)
    centers = np.empty((d, n_classes))
    for c in range(n_classes):
        delta = np.tensordot(coef[:, c], basis, axes=1)
        centers[:, c] = (shared + spec.mapping_drift * delta) @ prototypes[:, c]

    labels = np.repeat(np.arange(n_classes), m)
    features = centers[:, labels] + spec.noise_sigma * noise

    n_s = c_s * m
    return ZslDataset(
        seen_features=features[:, :n_s],
        seen_labels=one_hot(labels[:n_s], c_s),
        seen_semantics=prototypes[:, :c_s],
        unseen_features=features[:, n_s:],
        unseen_semantics=prototypes[:, c_s:],
        unseen_labels=one_hot(labels[n_s:] - c_s, c_t),
        seen_categories=tuple(f"seen{i:03d}" for i in range(c_s)),
        unseen_categories=tuple(f"unseen{i:03d}" for i in range(c_t)),
        name=f"synthetic-seed{spec.seed}",
    )


# --------------------------------------------------------------------------
# Validation split
# --------------------------------------------------------------------------


def n_validation_classes(n_seen: int, n_unseen: int) -> int:
    """``C_c`` with ``C_c / C_s = C_t / (C_s + C_t)``, rounded half up, at least 1."""
    return max(1, math.floor(n_seen * n_unseen / (n_seen + n_unseen) + 0.5))


def validation_split(dataset: ZslDataset) -> tuple[np.ndarray, np.ndarray]:
    """Split seen categories into (inner training, validation) index arrays.

    The first ``C_c`` categories in stored order are held out for validation.
    """
    c_s = dataset.n_seen_classes
    if c_s < 2:
        raise DatasetError("validation split needs at least 2 seen categories")
    c_c = n_validation_classes(c_s, dataset.n_unseen_classes)
    if c_c >= c_s:
        raise DatasetError(f"degenerate validation split: {c_c} of {c_s} seen categories")
    return np.arange(c_c, c_s), np.arange(c_c)


def restrict_seen(dataset: ZslDataset, classes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Columns of instances belonging to ``classes`` and their relabelled one-hot rows."""
    classes = np.asarray(classes, dtype=np.int64)
    y = dataset.seen_label_indices
    remap = -np.ones(dataset.n_seen_classes, dtype=np.int64)
    remap[classes] = np.arange(classes.size)
    cols = np.flatnonzero(remap[y] >= 0)
    return cols, one_hot(remap[y[cols]], classes.size)


def validation_problem(dataset: ZslDataset) -> ZslDataset:
    """The inner zero-shot problem used for hyperparameter search.

    Seen side: the inner training categories. Unseen side: the validation
    categories, with their instances and labels.
    """
    train_cls, val_cls = validation_split(dataset)
    tr_cols, tr_labels = restrict_seen(dataset, train_cls)
    va_cols, va_labels = restrict_seen(dataset, val_cls)
    ids = dataset.seen_categories
    return ZslDataset(
        seen_features=dataset.seen_features[:, tr_cols],
        seen_labels=tr_labels,
        seen_semantics=dataset.seen_semantics[:, train_cls],
        unseen_features=dataset.seen_features[:, va_cols],
        unseen_semantics=dataset.seen_semantics[:, val_cls],
        unseen_labels=va_labels,
        seen_categories=tuple(ids[i] for i in train_cls),
        unseen_categories=tuple(ids[i] for i in val_cls),
        name=dataset.name + "-validation",
    )
