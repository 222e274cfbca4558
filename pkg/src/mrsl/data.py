"""Voxel-level data model: subjects, coordinate standardization, labels, I/O.

A dataset is a collection of subject images; each image is an ordered set of
voxels carrying a standardized 2-D coordinate in (-1,1)^2, a zone indicator
(1 = peripheral zone, 0 = central gland), a feature vector of quantitative
image parameters, and outcome labels: a binary cancer status ``c`` and,
optionally, an ordinal grade ``G`` in 1..Z derived from the pathology grade
pair (primary, secondary).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

VALID_GRADES = (0, 3, 4, 5)

# Bounding boxes are inflated by this factor so standardized coordinates land
# strictly inside the open square (-1,1)^2 and always fall in some grid cell.
BBOX_INFLATION = 1.01

DATASET_SCHEMA_VERSION = "mrsl-dataset-v1"


class SchemaError(ValueError):
    """Input file does not provide the columns/fields the schema requires."""


class ParseError(ValueError):
    """A cell could not be parsed; message carries the row index."""


def derive_labels(primary: int, secondary: int) -> tuple[int, int]:
    """Map a (primary, secondary) grade pair to (c, G).

    c = 1 exactly when primary + secondary >= 6.  Among cancer voxels,
    G = 2 for the 3+3 and 3+4 patterns and G = 3 otherwise; benign voxels
    get G = 1.  This keeps {G >= 2} identical to {c = 1} for every valid
    grade pair, including pairs like (4, 0) where no secondary pattern was
    assigned.
    """
    if primary not in VALID_GRADES or secondary not in VALID_GRADES:
        raise ValueError(
            f"grade pair ({primary}, {secondary}) outside {VALID_GRADES}"
        )
    c = 1 if primary + secondary >= 6 else 0
    if c == 0:
        return 0, 1
    if (primary, secondary) in ((3, 3), (3, 4)):
        return 1, 2
    return 1, 3


def standardize_coordinates(raw: np.ndarray) -> np.ndarray:
    """Affinely map one subject's raw 2-D coordinates into (-1,1)^2.

    Per axis: subtract the bounding-box midpoint, then divide by half the
    bounding-box width inflated by ``BBOX_INFLATION``.  An axis with zero
    width maps to 0 for every voxel.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 2:
        raise ValueError(f"expected (n, 2) coordinates, got shape {raw.shape}")
    if raw.shape[0] < 1:
        raise ValueError("subject has no voxels")
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite raw coordinate")
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    center = (lo + hi) / 2.0
    centered = raw - center
    # Recover the half-width from the centered values (equal to (hi-lo)/2 in
    # exact arithmetic) so the 1/1.01 bound survives cancellation error.
    half = np.abs(centered).max(axis=0)
    out = np.zeros_like(raw)
    for ax in range(2):
        if half[ax] > 0:
            out[:, ax] = centered[:, ax] / (half[ax] * BBOX_INFLATION)
    return out


@dataclass(frozen=True)
class Voxel:
    """One spatial observation (record view over a SubjectImage row)."""

    s: tuple[float, float]
    r: int
    y: tuple[float, ...]
    gleason_primary: Optional[int]
    gleason_secondary: Optional[int]
    c: Optional[int]
    G: Optional[int]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class SubjectImage:
    """All voxels of one subject, in stable row order.

    Arrays are immutable after construction and safe to share across
    concurrent workers.
    """

    def __init__(self, subject_id, coords, zones, features,
                 c=None, G=None, gleason_primary=None, gleason_secondary=None):
        self.subject_id = str(subject_id)
        self.coords = _frozen(np.asarray(coords, dtype=float))
        self.zones = _frozen(np.asarray(zones, dtype=np.int64))
        self.features = _frozen(np.asarray(features, dtype=float))
        self.c = None if c is None else _frozen(np.asarray(c, dtype=np.int64))
        self.G = None if G is None else _frozen(np.asarray(G, dtype=np.int64))
        self.gleason_primary = (None if gleason_primary is None
                                else _frozen(np.asarray(gleason_primary, dtype=np.int64)))
        self.gleason_secondary = (None if gleason_secondary is None
                                  else _frozen(np.asarray(gleason_secondary, dtype=np.int64)))
        self._validate()

    def _validate(self):
        n = self.coords.shape[0]
        if n < 1:
            raise ValueError(f"subject {self.subject_id!r} has no voxels")
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError("coords must have shape (n, 2)")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinate")
        if np.any(np.abs(self.coords) >= 1.0):
            raise ValueError(
                f"subject {self.subject_id!r}: standardized coordinates must lie "
                "strictly inside (-1, 1)"
            )
        if self.zones.shape != (n,) or not np.all(np.isin(self.zones, (0, 1))):
            raise ValueError("zones must be 0/1 with one entry per voxel")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must have shape (n, d)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature value")
        for name in ("c", "G", "gleason_primary", "gleason_secondary"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per voxel")
        if self.c is not None and not np.all(np.isin(self.c, (0, 1))):
            raise ValueError("c must be 0/1")
        if self.c is not None and self.G is not None:
            if not np.array_equal(self.G >= 2, self.c == 1):
                raise ValueError(
                    f"subject {self.subject_id!r}: G >= 2 must coincide with c = 1"
                )

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def voxel(self, j: int) -> Voxel:
        def pick(a):
            return None if a is None else int(a[j])
        return Voxel(
            s=(float(self.coords[j, 0]), float(self.coords[j, 1])),
            r=int(self.zones[j]),
            y=tuple(float(v) for v in self.features[j]),
            gleason_primary=pick(self.gleason_primary),
            gleason_secondary=pick(self.gleason_secondary),
            c=pick(self.c),
            G=pick(self.G),
        )

    @property
    def voxels(self) -> Iterator[Voxel]:
        return (self.voxel(j) for j in range(self.n))


class Dataset:
    """Subject images plus feature names and the number of ordinal levels."""

    def __init__(self, subjects: Sequence[SubjectImage],
                 feature_names: Sequence[str], Z: int = 2):
        self.subjects = tuple(subjects)
        self.feature_names = tuple(str(f) for f in feature_names)
        self.Z = int(Z)
        if len(self.subjects) < 1:
            raise ValueError("dataset has no subjects")
        if self.Z < 2:
            raise ValueError("Z must be at least 2")
        d = len(self.feature_names)
        for subj in self.subjects:
            if subj.d != d:
                raise ValueError(
                    f"subject {subj.subject_id!r} has {subj.d} features, expected {d}"
                )
            if subj.G is not None and np.any((subj.G < 1) | (subj.G > self.Z)):
                raise ValueError(
                    f"subject {subj.subject_id!r}: G outside 1..{self.Z}"
                )

    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def d(self) -> int:
        return len(self.feature_names)

    @property
    def n_total(self) -> int:
        return sum(s.n for s in self.subjects)

    def has_ordinal(self) -> bool:
        return all(s.G is not None for s in self.subjects)

    def pooled_labels(self, target: str) -> np.ndarray:
        if target == "binary":
            return np.concatenate([s.c for s in self.subjects])
        if target == "ordinal":
            if not self.has_ordinal():
                raise ValueError("dataset has no ordinal labels")
            return np.concatenate([s.G for s in self.subjects])
        raise ValueError(f"unknown target {target!r}")


@dataclass
class ColumnSchema:
    """Names the CSV columns for each dataset field.

    Exactly one of ``gleason`` (pair of column names) or ``label_c`` must be
    given; ``label_g`` is optional and only meaningful with ``label_c``.
    """

    subject: str
    x: str
    y: str
    zone: str
    features: Sequence[str]
    gleason: Optional[tuple[str, str]] = None
    label_c: Optional[str] = None
    label_g: Optional[str] = None

    def required_columns(self):
        cols = [self.subject, self.x, self.y, self.zone, *self.features]
        if self.gleason is not None:
            cols.extend(self.gleason)
        elif self.label_c is not None:
            cols.append(self.label_c)
            if self.label_g is not None:
                cols.append(self.label_g)
        else:
            raise SchemaError("schema must name either gleason columns or a c column")
        return cols


def _parse_float(text, row_idx, col):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ParseError(f"row {row_idx}: column {col!r} is not numeric: {text!r}")


def _parse_int(text, row_idx, col):
    try:
        return int(text)
    except (TypeError, ValueError):
        raise ParseError(f"row {row_idx}: column {col!r} is not an integer: {text!r}")


def load_dataset_csv(path, schema: ColumnSchema, Z: Optional[int] = None,
                     standardize: bool = True) -> Dataset:
    """Read a delimiter-separated voxel table into a Dataset.

    One row per voxel; rows are grouped by subject id in first-appearance
    order, preserving row order within each subject.  When the schema names
    gleason columns, c and G are derived via `derive_labels` (and Z defaults
    to 3); otherwise labels come from the named c (and optional G) columns.
    Raw coordinates are standardized per subject unless ``standardize`` is
    False (for tables that already carry standardized coordinates).
    """
    for col in schema.required_columns():
        pass  # raises SchemaError if the schema itself is incomplete

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in schema.required_columns() if c not in header]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")
        groups: dict[str, dict] = {}
        order: list[str] = []
        for row_idx, row in enumerate(reader):
            sid = row[schema.subject]
            if sid not in groups:
                groups[sid] = {"xy": [], "zone": [], "feat": [],
                               "pa": [], "sb": [], "c": [], "G": []}
                order.append(sid)
            g = groups[sid]
            g["xy"].append((_parse_float(row[schema.x], row_idx, schema.x),
                            _parse_float(row[schema.y], row_idx, schema.y)))
            g["zone"].append(_parse_int(row[schema.zone], row_idx, schema.zone))
            g["feat"].append([_parse_float(row[c], row_idx, c) for c in schema.features])
            if schema.gleason is not None:
                pa = _parse_int(row[schema.gleason[0]], row_idx, schema.gleason[0])
                sb = _parse_int(row[schema.gleason[1]], row_idx, schema.gleason[1])
                g["pa"].append(pa)
                g["sb"].append(sb)
            else:
                g["c"].append(_parse_int(row[schema.label_c], row_idx, schema.label_c))
                if schema.label_g is not None:
                    g["G"].append(_parse_int(row[schema.label_g], row_idx, schema.label_g))

    if not order:
        raise ParseError("file contains no voxel rows")

    subjects = []
    for sid in order:
        g = groups[sid]
        xy = np.asarray(g["xy"], dtype=float)
        coords = standardize_coordinates(xy) if standardize else xy
        if schema.gleason is not None:
            labels = [derive_labels(pa, sb) for pa, sb in zip(g["pa"], g["sb"])]
            c = [lc for lc, _ in labels]
            G = [lg for _, lg in labels]
            subjects.append(SubjectImage(sid, coords, g["zone"], g["feat"],
                                         c=c, G=G,
                                         gleason_primary=g["pa"],
                                         gleason_secondary=g["sb"]))
        else:
            G = g["G"] if schema.label_g is not None else None
            subjects.append(SubjectImage(sid, coords, g["zone"], g["feat"],
                                         c=g["c"], G=G))

    if Z is None:
        Z = 3 if (schema.gleason is not None or schema.label_g is not None) else 2
    return Dataset(subjects, schema.features, Z=Z)


def save_dataset_csv(dataset: Dataset, path) -> None:
    """Write the dataset as CSV with standardized coordinates in x/y."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        head = ["subject", "x", "y", "zone", *dataset.feature_names, "c"]
        ordinal = dataset.has_ordinal()
        if ordinal:
            head.append("G")
        writer.writerow(head)
        for subj in dataset.subjects:
            for j in range(subj.n):
                row = [subj.subject_id,
                       repr(float(subj.coords[j, 0])), repr(float(subj.coords[j, 1])),
                       int(subj.zones[j]),
                       *[repr(float(v)) for v in subj.features[j]],
                       int(subj.c[j])]
                if ordinal:
                    row.append(int(subj.G[j]))
                writer.writerow(row)


def dataset_to_dict(dataset: Dataset) -> dict:
    def arr(a):
        return None if a is None else [int(v) for v in a]

    return {
        "schema": DATASET_SCHEMA_VERSION,
        "feature_names": list(dataset.feature_names),
        "Z": dataset.Z,
        "coordinates": "standardized",
        "subjects": [
            {
                "subject_id": s.subject_id,
                "s": [[float(x), float(y)] for x, y in s.coords],
                "r": [int(v) for v in s.zones],
                "y": [[float(v) for v in row] for row in s.features],
                "gleason_primary": arr(s.gleason_primary),
                "gleason_secondary": arr(s.gleason_secondary),
                "c": arr(s.c),
                "G": arr(s.G),
            }
            for s in dataset.subjects
        ],
    }


def dataset_from_dict(doc: dict) -> Dataset:
    if doc.get("schema") != DATASET_SCHEMA_VERSION:
        raise SchemaError(f"unrecognized dataset schema: {doc.get('schema')!r}")
    subjects = [
        SubjectImage(s["subject_id"], s["s"], s["r"], s["y"],
                     c=s.get("c"), G=s.get("G"),
                     gleason_primary=s.get("gleason_primary"),
                     gleason_secondary=s.get("gleason_secondary"))
        for s in doc["subjects"]
    ]
    return Dataset(subjects, doc["feature_names"], Z=doc["Z"])


def save_dataset_json(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_to_dict(dataset), fh, separators=(",", ":"))
        fh.write("\n")


def load_dataset_json(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return dataset_from_dict(json.load(fh))


def load_dataset(path, schema: Optional[ColumnSchema] = None, **kwargs) -> Dataset:
    """Load a dataset from its JSON interchange format or, given a schema,
    from CSV."""
    p = str(path)
    if p.endswith(".json"):
        return load_dataset_json(path)
    if schema is None:
        raise SchemaError("loading CSV requires a column schema")
    return load_dataset_csv(path, schema, **kwargs)
