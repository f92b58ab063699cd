"""Slide feature interchange: the MILF binary format, the extractor
dimension registry, ensemble fusion by per-patch concatenation, and
manifest ingestion.

MILF layout (little-endian): magic ``MILF`` | version u16=1 | extractor_id
(u8 length + UTF-8) | m u32 | d u32 | coords flag u8 | m pairs of i32 when
flagged | m*d float32 row-major payload | CRC-32 of everything before it
as a trailing u32.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    ConfigurationError,
    CorruptFileError,
    IngestionError,
    RegistryError,
)

MILF_MAGIC = b"MILF"
MILF_VERSION = 1

# Known extractor embedding dimensions; extensible at runtime. An id built
# from '+'-joined known parts (a materialized ensemble) is understood too.
_EXTRACTOR_DIMS: dict[str, int] = {
    "resnet50": 1024,
    "uni": 1024,
    "hibou-base": 768,
}


def register_extractor(extractor_id: str, dim: int) -> None:
    """Add or override a known extractor dimension."""
    if dim < 1:
        raise ConfigurationError(f"extractor dim must be positive, got {dim}")
    _EXTRACTOR_DIMS[extractor_id] = int(dim)


def registered_dim(extractor_id: str) -> int | None:
    """Expected dimension for an id, or None when the id is unknown."""
    if extractor_id in _EXTRACTOR_DIMS:
        return _EXTRACTOR_DIMS[extractor_id]
    if "+" in extractor_id:
        parts = extractor_id.split("+")
        if all(p in _EXTRACTOR_DIMS for p in parts):
            return sum(_EXTRACTOR_DIMS[p] for p in parts)
    return None


def _check_registry(extractor_id: str, d: int) -> None:
    expected = registered_dim(extractor_id)
    if expected is not None and expected != d:
        raise RegistryError(
            f"extractor {extractor_id!r} is registered with dim {expected}, got {d}"
        )


@dataclass
class FeatureMatrix:
    """One slide's m x d patch embeddings from a single extractor.

    coords are level-0 pixel origins of each patch, int32 pairs; values are
    float32 row-major.
    """

    extractor_id: str
    values: np.ndarray
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ConfigurationError(
                f"feature values must be a non-empty 2-D matrix, got shape {self.values.shape}"
            )
        if self.coords is not None:
            self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int32))
            if self.coords.shape != (self.values.shape[0], 2):
                raise ConfigurationError(
                    f"coords shape {self.coords.shape} does not match {self.values.shape[0]} patches"
                )
        _check_registry(self.extractor_id, self.values.shape[1])

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass
class EnsembleFeature:
    """Per-patch concatenation of several extractors' features."""

    parts: tuple[str, ...]
    values: np.ndarray
    coords: np.ndarray | None

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def as_feature_matrix(self) -> FeatureMatrix:
        return FeatureMatrix("+".join(self.parts), self.values, self.coords)


def write_features(fm: FeatureMatrix, path) -> None:
    """Serialize to MILF; the trailing CRC covers every preceding byte."""
    ident = fm.extractor_id.encode("utf-8")
    if len(ident) > 255:
        raise ConfigurationError("extractor_id longer than 255 bytes")
    buf = bytearray()
    buf += MILF_MAGIC
    buf += struct.pack("<H", MILF_VERSION)
    buf += struct.pack("<B", len(ident)) + ident
    buf += struct.pack("<II", fm.m, fm.d)
    if fm.coords is not None:
        buf += struct.pack("<B", 1)
        buf += fm.coords.astype("<i4").tobytes()
    else:
        buf += struct.pack("<B", 0)
    buf += fm.values.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def read_features(path) -> FeatureMatrix:
    """Parse and checksum-verify a MILF file."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 2 + 1 + 8 + 1 + 4:
        raise CorruptFileError(f"{path}: truncated MILF file")
    body, (crc_stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CorruptFileError(f"{path}: CRC mismatch")
    if body[:4] != MILF_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {body[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != MILF_VERSION:
        raise CorruptFileError(f"{path}: unsupported MILF version {version}")
    (id_len,) = struct.unpack_from("<B", body, off)
    off += 1
    extractor_id = body[off:off + id_len].decode("utf-8")
    off += id_len
    m, d = struct.unpack_from("<II", body, off)
    off += 8
    (has_coords,) = struct.unpack_from("<B", body, off)
    off += 1
    coords = None
    if has_coords:
        coords = np.frombuffer(body, dtype="<i4", count=2 * m, offset=off).reshape(m, 2)
        off += 8 * m
    values = np.frombuffer(body, dtype="<f4", count=m * d, offset=off).reshape(m, d)
    off += 4 * m * d
    if off != len(body):
        raise CorruptFileError(f"{path}: {len(body) - off} trailing bytes")
    return FeatureMatrix(extractor_id, values.copy(), None if coords is None else coords.copy())


def peek_header(path) -> tuple[str, int, int]:
    """(extractor_id, m, d) from the header without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(4 + 2 + 1 + 255 + 8 + 1)
    if head[:4] != MILF_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {head[:4]!r}")
    (version,) = struct.unpack_from("<H", head, 4)
    if version != MILF_VERSION:
        raise CorruptFileError(f"{path}: unsupported MILF version {version}")
    (id_len,) = struct.unpack_from("<B", head, 6)
    extractor_id = head[7:7 + id_len].decode("utf-8")
    m, d = struct.unpack_from("<II", head, 7 + id_len)
    return extractor_id, m, d


def concat_ensemble(parts: list[FeatureMatrix]) -> EnsembleFeature:
    """Fuse per-extractor matrices along the feature axis, in given order.

    Parts must agree patch-for-patch: equal m and identical coordinate
    lists. Alignment is checked by coordinates, never assumed by index.
    """
    if not parts:
        raise ConfigurationError("concat_ensemble needs at least one part")
    ids = [p.extractor_id for p in parts]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate extractor ids in ensemble: {ids}")
    first = parts[0]
    for other in parts[1:]:
        if other.m != first.m:
            raise AlignmentError(
                f"patch counts differ: {first.extractor_id!r} has {first.m}, "
                f"{other.extractor_id!r} has {other.m}"
            )
        if (first.coords is None) != (other.coords is None):
            missing = first.extractor_id if first.coords is None else other.extractor_id
            raise AlignmentError(f"extractor {missing!r} carries no coordinates to align on")
        if first.coords is not None and not np.array_equal(first.coords, other.coords):
            raise AlignmentError(
                f"patch coordinates differ between {first.extractor_id!r} "
                f"and {other.extractor_id!r}"
            )
    values = parts[0].values if len(parts) == 1 else np.concatenate(
        [p.values for p in parts], axis=1
    )
    return EnsembleFeature(tuple(ids), np.ascontiguousarray(values), first.coords)


# ---------------------------------------------------------------------------
# manifests

REQUIRED_COLUMNS = ("case_id", "slide_id", "survival_months", "censored")


@dataclass
class ManifestRow:
    case_id: str
    slide_id: str
    survival_months: float
    censored: bool
    feature_paths: dict[str, Path] = field(default_factory=dict)


@dataclass
class Manifest:
    rows: list[ManifestRow]
    extractors: tuple[str, ...]
    rejected: list[tuple[str, str]] = field(default_factory=list)  # (case_id, reason)

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, case_id: str) -> ManifestRow:
        for r in self.rows:
            if r.case_id == case_id:
                return r
        raise KeyError(case_id)


def load_manifest(clinical_csv, feature_root, extractors: list[str] | None = None) -> Manifest:
    """Read and validate a clinical CSV.

    Columns: case_id, slide_id, survival_months, censored (1 = censored),
    plus one column per extractor holding a feature path relative to
    ``feature_root``. Rows whose files are missing or unreadable for the
    requested extractor set are rejected and reported in
    ``Manifest.rejected``; duplicate case ids and negative survival are
    hard errors.
    """
    clinical_csv = Path(clinical_csv)
    feature_root = Path(feature_root)
    with open(clinical_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError(f"{clinical_csv}: empty manifest")
        header = [c.strip() for c in reader.fieldnames]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise IngestionError(f"{clinical_csv}: missing columns {missing}")
        available = [c for c in header if c not in REQUIRED_COLUMNS]
        wanted = list(extractors) if extractors is not None else available
        unknown = [e for e in wanted if e not in available]
        if unknown:
            raise IngestionError(f"{clinical_csv}: no feature column for extractors {unknown}")
        rows: list[ManifestRow] = []
        rejected: list[tuple[str, str]] = []
        seen: set[str] = set()
        for record in reader:
            case_id = record["case_id"].strip()
            if case_id in seen:
                raise IngestionError(f"duplicate case_id {case_id!r}")
            seen.add(case_id)
            try:
                survival = float(record["survival_months"])
            except ValueError:
                raise IngestionError(f"{case_id}: survival_months is not a number") from None
            if survival < 0:
                raise IngestionError(f"{case_id}: negative survival_months ({survival})")
            censored_raw = record["censored"].strip()
            if censored_raw not in ("0", "1"):
                raise IngestionError(f"{case_id}: censored must be 0 or 1, got {censored_raw!r}")
            paths: dict[str, Path] = {}
            reason = None
            for ext in wanted:
                rel = (record.get(ext) or "").strip()
                if not rel:
                    reason = f"no {ext} feature path"
                    break
                p = feature_root / rel
                if not p.is_file():
                    reason = f"missing file {p}"
                    break
                try:
                    file_ext, _, d = peek_header(p)
                    _check_registry(file_ext, d)
                except (CorruptFileError, RegistryError) as exc:
                    reason = str(exc)
                    break
                paths[ext] = p
            if reason is not None:
                rejected.append((case_id, reason))
                continue
            rows.append(ManifestRow(case_id, record["slide_id"].strip(), survival,
                                    censored_raw == "1", paths))
    return Manifest(rows=rows, extractors=tuple(wanted), rejected=rejected)


def load_bag(row: ManifestRow, extractor_set: list[str]) -> EnsembleFeature:
    """Read one slide's features for an extractor set and fuse them."""
    parts = [read_features(row.feature_paths[e]) for e in extractor_set]
    return concat_ensemble(parts)
