"""Data containers and their on-disk formats.

Binary matrices use the little-endian ``IISE`` layout::

    b"IISE" | u32 version=1 | u64 rows | u64 cols | u8 dtype (0 = f32)
    | rows*cols f32 row-major | u64 n_labels | n_labels * u32 | u32 n_classes

Concept libraries and soft-label matrices are a JSON manifest plus a
sibling ``.iise`` matrix. Schedules and reports are JSON; curves are CSV.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
    UsageError,
    ValidationError,
    ZeroSamplesError,
)

MAGIC = b"IISE"
FORMAT_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIQQB")
# refuse headers that would describe more than 2**34 float32 cells (64 GiB)
MAX_CELLS = 1 << 34

SPLITS = ("train", "val", "test")
LIBRARY_KINDS = ("prototype", "cluster", "end2end", "text")

UNIT_NORM_TOL = 1e-9
# tolerance once a unit row has been rounded through float32 storage
STORED_UNIT_NORM_TOL = 1e-6


# ---------------------------------------------------------------------------
# types


@dataclass
class EmbeddingDataset:
    embeddings: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.n_classes = int(self.n_classes)
        self.validate()

    def validate(self):
        x, y = self.embeddings, self.labels
        if x.ndim != 2:
            raise ValidationError("embeddings must be a 2-D matrix")
        if x.shape[0] == 0:
            raise ZeroSamplesError("zero samples")
        if x.shape[1] == 0:
            raise ValidationError("embedding dimension must be positive")
        if y.shape != (x.shape[0],):
            raise ValidationError(f"{y.size} labels for {x.shape[0]} samples")
        if self.n_classes <= 0:
            raise ValidationError("class count must be positive")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(x)):
            raise ValidationError("embeddings contain non-finite values")
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split tag {self.split!r}")

    @property
    def n_samples(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def missing_classes(self):
        return sorted(set(range(self.n_classes)) - set(np.unique(self.labels).tolist()))

    def with_embeddings(self, embeddings):
        return EmbeddingDataset(embeddings, self.labels, self.n_classes, self.split)


@dataclass
class SoftLabelMatrix:
    values: np.ndarray
    names: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.names = [str(n) for n in self.names]
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise ValidationError("soft-label columns must match concept names")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("soft labels contain non-finite values")


@dataclass
class ConceptLibrary:
    vectors: np.ndarray
    names: list
    kind: str
    provenance: dict = field(default_factory=dict)
    norm_tolerance: float = field(default=UNIT_NORM_TOL, repr=False, compare=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.names = [str(n) for n in self.names]
        self.validate()

    def validate(self):
        v = self.vectors
        if v.ndim != 2 or v.shape[0] == 0:
            raise ValidationError("a concept library needs at least one vector")
        if len(self.names) != v.shape[0]:
            raise ValidationError(f"{len(self.names)} names for {v.shape[0]} concepts")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("duplicate concept names")
        if self.kind not in LIBRARY_KINDS:
            raise ValidationError(f"unknown library kind {self.kind!r}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("concept vectors contain non-finite values")
        if self.kind == "text" and self.provenance.get("normalized"):
            norms = np.linalg.norm(v, axis=1)
            if np.max(np.abs(norms - 1.0)) > self.norm_tolerance:
                raise ValidationError("text concept vectors are not unit-normalized")

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def library_id(self):
        return str(self.provenance.get("id", f"{self.kind}-{self.size}"))


@dataclass
class SparsitySchedule:
    ratios: tuple

    def __post_init__(self):
        ratios = sorted(float(r) for r in self.ratios)
        if len(ratios) < 2:
            raise UsageError("a sparsity schedule needs at least 2 ratios to integrate")
        for r in ratios:
            if not 0.0 <= r < 1.0:
                raise UsageError(f"sparsity ratio {r} outside [0, 1)")
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise UsageError("sparsity ratios must be distinct")
        self.ratios = tuple(ratios)

    def __len__(self):
        return len(self.ratios)

    def __iter__(self):
        return iter(self.ratios)


def trapezoid_mean(xs, ys) -> float:
    """Trapezoid area under (xs, ys) divided by the span of xs.

    The span is summed from the same interval widths as the area, so a
    constant curve gives back exactly its constant.
    """
    widths = [xs[i + 1] - xs[i] for i in range(len(xs) - 1)]
    area = math.fsum(0.5 * (ys[i] + ys[i + 1]) * w for i, w in enumerate(widths))
    return area / math.fsum(widths)


@dataclass
class IISReport:
    representation_accuracy: float
    interpretation_accuracies: list
    arr: list
    iis: float
    schedule: SparsitySchedule
    library_id: str
    mode: str
    extras: dict = field(default_factory=dict)

    def validate(self):
        n = len(self.schedule)
        if len(self.arr) != n or len(self.interpretation_accuracies) != n:
            raise ValidationError(
                f"report lists {len(self.arr)} ARR values and "
                f"{len(self.interpretation_accuracies)} accuracies for {n} ratios"
            )
        if not 0.0 <= self.representation_accuracy <= 1.0:
            raise ValidationError("representation accuracy outside [0, 1]")
        if self.representation_accuracy > 0:
            for acc, a in zip(self.interpretation_accuracies, self.arr):
                if abs(acc / self.representation_accuracy - a) > 1e-12:
                    raise ValidationError("ARR is not interpretation / representation accuracy")
        expected = trapezoid_mean(self.schedule.ratios, self.arr)
        if abs(expected - self.iis) > 1e-9:
            raise ValidationError(f"IIS {self.iis} disagrees with the ARR curve ({expected})")

    def to_dict(self):
        return {
            "format": "iis-report",
            "version": FORMAT_VERSION,
            "library_id": self.library_id,
            "mode": self.mode,
            "ratios": list(self.schedule.ratios),
            "representation_accuracy": self.representation_accuracy,
            "interpretation_accuracies": list(self.interpretation_accuracies),
            "arr": list(self.arr),
            "iis": self.iis,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d):
        _check_header(d, "iis-report")
        try:
            report = cls(
                representation_accuracy=float(d["representation_accuracy"]),
                interpretation_accuracies=[float(a) for a in d["interpretation_accuracies"]],
                arr=[float(a) for a in d["arr"]],
                iis=float(d["iis"]),
                schedule=SparsitySchedule(d["ratios"]),
                library_id=str(d["library_id"]),
                mode=str(d["mode"]),
                extras=dict(d.get("extras", {})),
            )
        except KeyError as exc:
            raise ValidationError(f"report is missing field {exc}") from None
        except UsageError as exc:
            raise ValidationError(str(exc)) from None
        report.validate()
        return report


# ---------------------------------------------------------------------------
# binary matrices


def write_matrix(path, matrix, labels=None, n_classes=0):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise UsageError("only 2-D matrices can be stored")
    if not np.all(np.isfinite(matrix)):
        raise ValidationError("refusing to store non-finite values")
    rows, cols = matrix.shape
    labels = np.zeros(0, dtype=np.uint32) if labels is None else np.asarray(labels)
    payload = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols, DTYPE_F32),
        np.ascontiguousarray(matrix, dtype="<f4").tobytes(),
        struct.pack("<Q", labels.size),
        np.ascontiguousarray(labels, dtype="<u4").tobytes(),
        struct.pack("<I", int(n_classes)),
    ]
    Path(path).write_bytes(b"".join(payload))


def read_matrix(path):
    """Return ``(matrix, labels, n_classes)`` from an IISE file."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: file too short for a header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, rows, cols, dtype = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} (this build reads {FORMAT_VERSION})")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype}")
    if rows > MAX_CELLS or cols > MAX_CELLS or rows * cols > MAX_CELLS:
        raise DimensionOverflowError(f"{path}: {rows} x {cols} exceeds the format limit")
    if rows == 0:
        raise ZeroSamplesError(f"{path}: zero samples")
    offset = _HEADER.size
    nbytes = rows * cols * 4
    if len(blob) < offset + nbytes + 8:
        raise TruncatedFileError(f"{path}: payload shorter than {rows} x {cols}")
    matrix = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
    matrix = matrix.astype(np.float64).reshape(rows, cols)
    offset += nbytes
    (n_labels,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if n_labels > MAX_CELLS:
        raise DimensionOverflowError(f"{path}: label count {n_labels} exceeds the format limit")
    if len(blob) < offset + 4 * n_labels + 4:
        raise TruncatedFileError(f"{path}: label block truncated")
    labels = np.frombuffer(blob, dtype="<u4", count=n_labels, offset=offset).astype(np.int64)
    offset += 4 * n_labels
    (n_classes,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return matrix, labels, n_classes


def _split_from_name(path):
    stem = Path(path).stem.lower()
    for tag in SPLITS:
        if stem == tag or stem.endswith(("_" + tag, "-" + tag, "." + tag)):
            return tag
    return "train"


def save_embeddings(dataset: EmbeddingDataset, path):
    write_matrix(path, dataset.embeddings, dataset.labels, dataset.n_classes)


def load_embeddings(path, split=None) -> EmbeddingDataset:
    matrix, labels, n_classes = read_matrix(path)
    if labels.size != matrix.shape[0]:
        raise ValidationError(f"{path}: {labels.size} labels for {matrix.shape[0]} samples")
    return EmbeddingDataset(matrix, labels, n_classes, split or _split_from_name(path))


# ---------------------------------------------------------------------------
# JSON manifests


def _check_header(d, fmt):
    if not isinstance(d, dict) or d.get("format") != fmt:
        raise FormatError(f"not an {fmt} document")
    version = d.get("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{fmt} version {version} (this build reads {FORMAT_VERSION})")


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def _sibling(path):
    return Path(path).with_suffix(".iise")


def save_library(library: ConceptLibrary, path):
    path = Path(path)
    matrix_path = _sibling(path)
    write_matrix(matrix_path, library.vectors)
    dump_json(
        {
            "format": "iis-library",
            "version": FORMAT_VERSION,
            "kind": library.kind,
            "names": library.names,
            "provenance": library.provenance,
            "matrix": matrix_path.name,
        },
        path,
    )


def load_library(path) -> ConceptLibrary:
    path = Path(path)
    d = _read_json(path)
    _check_header(d, "iis-library")
    vectors, _, _ = read_matrix(path.parent / d["matrix"])
    return ConceptLibrary(
        vectors, d["names"], d["kind"], d.get("provenance", {}), norm_tolerance=STORED_UNIT_NORM_TOL
    )


def save_soft_labels(soft: SoftLabelMatrix, path):
    path = Path(path)
    matrix_path = _sibling(path)
    write_matrix(matrix_path, soft.values)
    dump_json(
        {"format": "iis-softlabels", "version": FORMAT_VERSION, "names": soft.names, "matrix": matrix_path.name},
        path,
    )


def load_soft_labels(path) -> SoftLabelMatrix:
    path = Path(path)
    d = _read_json(path)
    _check_header(d, "iis-softlabels")
    values, _, _ = read_matrix(path.parent / d["matrix"])
    return SoftLabelMatrix(values, d["names"])


def save_schedule(schedule: SparsitySchedule, path):
    dump_json({"format": "iis-schedule", "version": FORMAT_VERSION, "ratios": list(schedule.ratios)}, path)


def load_schedule(path) -> SparsitySchedule:
    d = _read_json(path)
    _check_header(d, "iis-schedule")
    return SparsitySchedule(d["ratios"])


def save_report(report: IISReport, path):
    report.validate()
    dump_json(report.to_dict(), path)


def load_report(path) -> IISReport:
    return IISReport.from_dict(_read_json(path))


def write_curve_csv(report: IISReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sparsity", "arr"])
        for s, a in zip(report.schedule.ratios, report.arr):
            writer.writerow([repr(float(s)), repr(float(a))])


def read_curve_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["sparsity", "arr"]:
        raise FormatError(f"{path}: expected header 'sparsity,arr'")
    return [(float(s), float(a)) for s, a in rows[1:]]
