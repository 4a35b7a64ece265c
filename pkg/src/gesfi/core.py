"""CSI record types, the on-disk record format, and manifest handling.

Binary record layout (all little-endian)::

    offset  size  field
    0       4     magic  b"CSIR"
    4       4     A      uint32, antennas
    8       4     C      uint32, subcarriers
    12      4     T      uint32, packets
    16      8     sample_rate_hz   float64
    24      8     wavelength_m     float64
    32      8*A*C*T  payload, float32 pairs (real, imag), row-major [a][c][t]

A manifest is a JSON document::

    {"label_set": [...],
     "factor_schema": {"user": [...], "location": [...], ...},
     "records": [{"file": ..., "gesture": ..., "user": ..., "location": ...,
                  "orientation": ..., "environment": ..., "repetition": 1}, ...]}

Record files are resolved relative to the manifest's directory.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"CSIR"
HEADER = struct.Struct("<4sIIIdd")
HEADER_SIZE = HEADER.size  # 32
PAYLOAD_DTYPE = np.dtype("<c8")

FACTORS = ("user", "location", "orientation", "environment")


class CsiError(Exception):
    """Base class for ingestion errors; carries the offending record id."""

    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"{message} (record {record_id})"
        super().__init__(message)


class MissingRecordError(CsiError):
    pass


class SchemaMismatchError(CsiError):
    pass


class CorruptedRecordError(CsiError):
    pass


@dataclass(frozen=True)
class SampleMeta:
    gesture: str
    user: str = "0"
    location: str = "0"
    orientation: str = "0"
    environment: str = "0"
    repetition: int = 1

    def __post_init__(self):
        for name in ("gesture",) + FACTORS:
            value = getattr(self, name)
            if not isinstance(value, str):
                object.__setattr__(self, name, str(value))
            if getattr(self, name) == "":
                raise ValueError(f"empty categorical field {name!r}")
        if int(self.repetition) < 1:
            raise ValueError("repetition must be >= 1")

    def factor(self, name: str) -> str:
        if name == "gesture" or name in FACTORS:
            return getattr(self, name)
        raise KeyError(f"unknown factor {name!r}")


@dataclass
class CsiRecord:
    """Complex CSI ``data[a, c, t]`` for one gesture sample."""

    data: np.ndarray
    sample_rate_hz: float
    carrier_wavelength_m: float
    meta: SampleMeta
    record_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex128)
        if self.data.ndim != 3:
            raise ValueError(f"CSI data must be [antenna, subcarrier, time], got shape {self.data.shape}")
        A, C, T = self.data.shape
        if A < 2 or C < 1 or T < 2:
            raise ValueError(f"need A>=2, C>=1, T>=2; got A={A}, C={C}, T={T}")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        if not self.carrier_wavelength_m > 0:
            raise ValueError("carrier_wavelength_m must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("CSI data contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def num_antennas(self) -> int:
        return self.data.shape[0]


@dataclass
class Dataset:
    records: list[CsiRecord]
    label_set: list[str]
    factor_schema: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.label_set = [str(g) for g in self.label_set]
        self.factor_schema = {k: [str(v) for v in vals] for k, vals in self.factor_schema.items()}
        labels = set(self.label_set)
        for rec in self.records:
            if rec.meta.gesture not in labels:
                raise SchemaMismatchError(
                    f"schema mismatch: gesture {rec.meta.gesture!r} not in label_set", rec.record_id)
            for name, values in self.factor_schema.items():
                if rec.meta.factor(name) not in values:
                    raise SchemaMismatchError(
                        f"schema mismatch: {name}={rec.meta.factor(name)!r} not declared", rec.record_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CsiRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> CsiRecord:
        return self.records[i]

    @property
    def metas(self) -> list[SampleMeta]:
        return [r.meta for r in self.records]

    def gesture_codes(self) -> np.ndarray:
        index = {g: i for i, g in enumerate(self.label_set)}
        return np.array([index[r.meta.gesture] for r in self.records], dtype=np.int64)

    def factor_codes(self, name: str) -> np.ndarray:
        """Integer codes of a categorical factor, in declared schema order."""
        if name == "gesture":
            return self.gesture_codes()
        values = self.factor_values(name)
        index = {v: i for i, v in enumerate(values)}
        return np.array([index[r.meta.factor(name)] for r in self.records], dtype=np.int64)

    def factor_values(self, name: str) -> list[str]:
        if name not in FACTORS:
            raise KeyError(f"unknown factor {name!r}")
        if name in self.factor_schema:
            return list(self.factor_schema[name])
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.meta.factor(name), None)
        return list(seen)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.records[i] for i in indices], list(self.label_set), dict(self.factor_schema))


def write_record(path: str | Path, data: np.ndarray, sample_rate_hz: float, wavelength_m: float) -> None:
    data = np.asarray(data)
    A, C, T = data.shape
    header = HEADER.pack(MAGIC, A, C, T, float(sample_rate_hz), float(wavelength_m))
    payload = np.ascontiguousarray(data, dtype=PAYLOAD_DTYPE).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_record(path: str | Path, record_id: str | None = None) -> tuple[np.ndarray, float, float]:
    """Read one binary record; returns ``(data, sample_rate_hz, wavelength_m)``."""
    path = Path(path)
    if not path.exists():
        raise MissingRecordError(f"missing file {path}", record_id)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise CorruptedRecordError(f"corrupted record: {len(raw)} bytes is shorter than the header", record_id)
    magic, A, C, T, fs, wl = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptedRecordError(f"corrupted record: bad magic {magic!r}", record_id)
    expected = A * C * T * PAYLOAD_DTYPE.itemsize
    if len(raw) - HEADER_SIZE != expected:
        raise CorruptedRecordError(
            f"corrupted record: payload has {len(raw) - HEADER_SIZE} bytes, expected {expected} "
            f"for A*C*T={A * C * T} complex values", record_id)
    data = np.frombuffer(raw, dtype=PAYLOAD_DTYPE, offset=HEADER_SIZE).reshape(A, C, T)
    return data, fs, wl


def _record_id(entry: dict, i: int) -> str:
    if "id" in entry:
        return str(entry["id"])
    if "file" in entry:
        return Path(str(entry["file"])).stem
    return f"#{i}"


def load_manifest(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise MissingRecordError(f"missing manifest {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatchError(f"schema mismatch: manifest is not valid JSON ({exc})") from exc
    for key in ("label_set", "records"):
        if key not in doc:
            raise SchemaMismatchError(f"schema mismatch: manifest lacks {key!r}")
    label_set = [str(g) for g in doc["label_set"]]
    schema = {str(k): [str(v) for v in vals] for k, vals in doc.get("factor_schema", {}).items()}
    unknown = set(schema) - set(FACTORS)
    if unknown:
        raise SchemaMismatchError(f"schema mismatch: unknown factors {sorted(unknown)}")

    root = path.parent
    records = []
    for i, entry in enumerate(doc["records"]):
        rid = _record_id(entry, i)
        if "file" not in entry or "gesture" not in entry:
            raise SchemaMismatchError("schema mismatch: record needs 'file' and 'gesture'", rid)
        try:
            meta = SampleMeta(
                gesture=str(entry["gesture"]),
                **{f: str(entry.get(f, "0")) for f in FACTORS},
                repetition=int(entry.get("repetition", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise SchemaMismatchError(f"schema mismatch: {exc}", rid) from exc
        if meta.gesture not in label_set:
            raise SchemaMismatchError(f"schema mismatch: gesture {meta.gesture!r} not in label_set", rid)
        for name, values in schema.items():
            if meta.factor(name) not in values:
                raise SchemaMismatchError(f"schema mismatch: {name}={meta.factor(name)!r} not declared", rid)
        data, fs, wl = read_record(root / entry["file"], rid)
        try:
            rec = CsiRecord(data, fs, wl, meta, record_id=rid)
        except ValueError as exc:
            raise CorruptedRecordError(f"corrupted record: {exc}", rid) from exc
        records.append(rec)
    return Dataset(records, label_set, schema)


def write_manifest(ds: Dataset, path: str | Path, data_dir: str = "records") -> Path:
    """Write ``ds`` as a manifest plus one binary file per record.

    Record files go to ``<manifest dir>/<data_dir>/<record_id>.csi``.
    """
    path = Path(path)
    out_dir = path.parent / data_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(ds.records):
        rid = rec.record_id or f"rec{i:05d}"
        rel = f"{data_dir}/{rid}.csi"
        write_record(path.parent / rel, rec.data, rec.sample_rate_hz, rec.carrier_wavelength_m)
        m = rec.meta
        entries.append({"id": rid, "file": rel, "gesture": m.gesture, "user": m.user,
                        "location": m.location, "orientation": m.orientation,
                        "environment": m.environment, "repetition": int(m.repetition)})
    doc = {"label_set": list(ds.label_set), "factor_schema": dict(ds.factor_schema), "records": entries}
    path.write_text(json.dumps(doc, indent=1))
    return path


def split_leave_one_out(ds: Dataset, factor: str, held_out) -> tuple[Dataset, Dataset]:
    """Hold out every record whose ``factor`` equals ``held_out``.

    Returns ``(source, target)``; the two form a partition of ``ds``.
    """
    if factor not in FACTORS:
        raise ValueError(f"factor must be one of {FACTORS}, got {factor!r}")
    held_out = str(held_out)
    target_idx = [i for i, r in enumerate(ds.records) if r.meta.factor(factor) == held_out]
    if not target_idx:
        raise ValueError(f"held-out value {held_out!r} does not occur for factor {factor!r}")
    source_idx = [i for i, r in enumerate(ds.records) if r.meta.factor(factor) != held_out]
    if not source_idx:
        raise ValueError(f"empty source: every record has {factor}={held_out!r}")
    return ds.subset(source_idx), ds.subset(target_idx)
