"""On-disk formats: checkpoints, datasets, metrics records and CSV tables.

Checkpoint layout (all integers and reals little-endian)::

    magic        8 bytes   b"LHUCCKPT"
    version      u32       CHECKPOINT_VERSION
    n_layers     u32       number of affine layers (hidden + output)
    sizes        u32 * (n_layers + 1)
    output_kind  u8        index into OUTPUT_KINDS
    reparam      u8        index into REPARAM_KINDS, 255 for none
    has_bank     u8
    meta_len     u32       followed by meta_len bytes of UTF-8 JSON
    tensors      f64       W0, b0, W1, b1, ... (row-major)
    n_clusters   u32       only if has_bank
    clusters     (i64 id, f64 r per hidden layer) in ascending id order
    checksum     8 bytes   blake2b-64 of every preceding byte

The dataset file uses the same header/trailer discipline with magic
b"LHUCDSET" and fixed-width records.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import OUTPUT_KINDS, REPARAM_KINDS, LhucTransform, NetworkParams, TransformBank
from .synth import FrameDataset

__all__ = [
    "CHECKPOINT_VERSION",
    "DATASET_VERSION",
    "METRICS_SCHEMA",
    "CheckpointError",
    "ChecksumError",
    "VersionError",
    "TruncatedError",
    "FormatError",
    "Checkpoint",
    "MetricRecord",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "parse_checkpoint",
    "dataset_bytes",
    "parse_dataset",
    "save_dataset",
    "load_dataset",
    "import_csv",
    "emit_metrics",
    "read_metrics",
    "write_table",
]

CHECKPOINT_MAGIC = b"LHUCCKPT"
DATASET_MAGIC = b"LHUCDSET"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1
METRICS_SCHEMA = 1
_NO_KIND = 255
_CHECKSUM_BYTES = 8


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint or dataset files."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_CHECKSUM_BYTES).digest()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.what} ends early at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, count: int, dtype: str, shape=None) -> np.ndarray:
        dt = np.dtype(dtype)
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).astype(dt.newbyteorder("="))
        return arr.reshape(shape) if shape is not None else arr


def _open_container(data: bytes, magic: bytes, version: int, what: str) -> _Reader:
    if len(data) < len(magic) + 4 + _CHECKSUM_BYTES:
        raise TruncatedError(f"{what} is only {len(data)} bytes long")
    if data[:len(magic)] != magic:
        raise FormatError(f"not a {what}: bad magic {data[:len(magic)]!r}")
    (found,) = struct.unpack("<I", data[len(magic):len(magic) + 4])
    if found != version:
        raise VersionError(f"{what} format version {found} is not supported (expected {version})")
    body, trailer = data[:-_CHECKSUM_BYTES], data[-_CHECKSUM_BYTES:]
    if _checksum(body) != trailer:
        raise ChecksumError(f"{what} checksum mismatch (file corrupted or truncated)")
    reader = _Reader(body, what)
    reader.take(len(magic) + 4)
    return reader


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: NetworkParams
    bank: TransformBank | None = None
    kind: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bank is not None:
            if self.kind is not None and self.kind != self.bank.kind:
                raise ValueError(f"checkpoint kind {self.kind!r} differs from bank kind {self.bank.kind!r}")
            self.kind = self.bank.kind

    def equals(self, other: "Checkpoint") -> bool:
        same_bank = (self.bank is None and other.bank is None) or (
            self.bank is not None and other.bank is not None and self.bank.equals(other.bank)
        )
        return (
            self.params.equals(other.params)
            and same_bank
            and self.kind == other.kind
            and self.metadata == other.metadata
        )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    buf = _io.BytesIO()
    sizes = p.layer_sizes
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(p.weights)))
    buf.write(struct.pack(f"<{len(sizes)}I", *sizes))
    kind = _NO_KIND if ckpt.kind is None else REPARAM_KINDS.index(ckpt.kind)
    buf.write(struct.pack("<BBB", OUTPUT_KINDS.index(p.output_kind), kind, ckpt.bank is not None))
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for W, b in zip(p.weights, p.biases):
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if ckpt.bank is not None:
        buf.write(struct.pack("<I", len(ckpt.bank)))
        for cid in ckpt.bank.cluster_ids:
            buf.write(struct.pack("<q", cid))
            for l, width in enumerate(p.hidden_sizes):
                r = ckpt.bank[cid].r[l]
                if r.shape != (width,):
                    raise ValueError(f"cluster {cid} layer {l} has {r.shape} amplitudes for {width} units")
                buf.write(np.ascontiguousarray(r, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + _checksum(body)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    rd = _open_container(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    (n_layers,) = rd.unpack("I")
    if n_layers < 2:
        raise FormatError(f"checkpoint declares {n_layers} layers")
    sizes = rd.unpack(f"{n_layers + 1}I")
    out_code, kind_code, has_bank = rd.unpack("BBB")
    if out_code >= len(OUTPUT_KINDS) or (kind_code != _NO_KIND and kind_code >= len(REPARAM_KINDS)):
        raise FormatError("unknown output or re-parametrisation code")
    (meta_len,) = rd.unpack("I")
    metadata = json.loads(rd.take(meta_len).decode())
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rd.array(n_out * n_in, "<f8", (n_out, n_in)))
        biases.append(rd.array(n_out, "<f8"))
    params = NetworkParams(weights, biases, OUTPUT_KINDS[out_code])
    kind = None if kind_code == _NO_KIND else REPARAM_KINDS[kind_code]
    bank = None
    if has_bank:
        if kind is None:
            raise FormatError("checkpoint has a bank but no re-parametrisation kind")
        (n_clusters,) = rd.unpack("I")
        transforms = {}
        for _ in range(n_clusters):
            (cid,) = rd.unpack("q")
            transforms[cid] = LhucTransform(kind, [rd.array(w, "<f8") for w in params.hidden_sizes])
        bank = TransformBank(kind, transforms)
    if rd.pos != len(rd.data):
        raise FormatError(f"{len(rd.data) - rd.pos} unexpected bytes after the checkpoint payload")
    return Checkpoint(params, bank, kind, metadata)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# datasets


def _record_dtype(dim: int, label_width: int) -> np.dtype:
    label = ("label", "<i8") if label_width == 0 else ("label", "<f8", (label_width,))
    return np.dtype([
        ("features", "<f8", (dim,)),
        label,
        ("speaker", "<i8"),
        ("segment", "<i8"),
        ("environment", "<i8"),
    ])


def dataset_bytes(ds: FrameDataset) -> bytes:
    n, dim = ds.features.shape
    label_width = 0 if ds.is_classification else ds.labels.shape[1]
    flags = int(ds.segments is not None) | int(ds.environments is not None) << 1
    cards = [len(np.unique(a)) if a is not None else 0 for a in (ds.speakers, ds.segments, ds.environments)]
    head = struct.pack(
        "<QIIqB3Q", n, dim, label_width, -1 if ds.n_classes is None else ds.n_classes, flags, *cards
    )
    rec = np.zeros(n, dtype=_record_dtype(dim, label_width))
    rec["features"] = ds.features
    rec["label"] = ds.labels
    rec["speaker"] = ds.speakers
    rec["segment"] = -1 if ds.segments is None else ds.segments
    rec["environment"] = -1 if ds.environments is None else ds.environments
    body = DATASET_MAGIC + struct.pack("<I", DATASET_VERSION) + head + rec.tobytes()
    return body + _checksum(body)


def save_dataset(path, ds: FrameDataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(data: bytes) -> FrameDataset:
    rd = _open_container(data, DATASET_MAGIC, DATASET_VERSION, "dataset file")
    n, dim, label_width, n_classes, flags, *_cards = rd.unpack("QIIqB3Q")
    dt = _record_dtype(dim, label_width)
    raw = rd.take(n * dt.itemsize)
    if rd.pos != len(rd.data):
        raise FormatError("unexpected bytes after the dataset records")
    rec = np.frombuffer(raw, dtype=dt)
    return FrameDataset(
        np.array(rec["features"], dtype=np.float64),
        np.array(rec["label"]),
        np.array(rec["speaker"], dtype=np.int64),
        np.array(rec["segment"], dtype=np.int64) if flags & 1 else None,
        np.array(rec["environment"], dtype=np.int64) if flags & 2 else None,
        None if n_classes < 0 else int(n_classes),
    )


def load_dataset(path) -> FrameDataset:
    return parse_dataset(Path(path).read_bytes())


def import_csv(path, n_classes: int | None = None) -> FrameDataset:
    """Read ``features..., label, speaker, segment, environment`` rows.

    Lines starting with ``#`` are skipped. ``n_classes`` defaults to the
    largest label plus one.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) < 5:
                raise FormatError(f"{path}:{lineno}: need at least one feature plus 4 id columns, got {len(row)}")
            if rows and len(row) != len(rows[0]):
                raise FormatError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    feats = np.array([[float(v) for v in r[:-4]] for r in rows])
    ids = np.array([[int(v) for v in r[-4:]] for r in rows], dtype=np.int64)
    labels = ids[:, 0]
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return FrameDataset(feats, labels, ids[:, 1], ids[:, 2], ids[:, 3], n_classes)


# --------------------------------------------------------------------------
# metrics and tables


@dataclass(frozen=True)
class MetricRecord:
    experiment: str
    step: int
    metric: str
    value: float | None
    cluster: int | None = None

    def to_json(self) -> str:
        value = self.value
        if value is not None and not math.isfinite(value):
            raise ValueError(f"metric {self.metric} has non-finite value {value}")
        return json.dumps(
            {
                "schema": METRICS_SCHEMA,
                "experiment": self.experiment,
                "step": int(self.step),
                "metric": self.metric,
                "value": None if value is None else float(value),
                "cluster": None if self.cluster is None else int(self.cluster),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        d = json.loads(line)
        if d.get("schema") != METRICS_SCHEMA:
            raise VersionError(f"metrics schema {d.get('schema')} is not supported")
        return cls(d["experiment"], d["step"], d["metric"], d["value"], d["cluster"])


def emit_metrics(path, records: Iterable[MetricRecord]) -> int:
    """Append records, one JSON object per line; returns the number written."""
    n = 0
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


def read_metrics(path) -> list[MetricRecord]:
    with open(path, encoding="utf-8") as fh:
        return [MetricRecord.from_json(line) for line in fh if line.strip()]


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return "" if v is None else str(v)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} cells for {len(header)} columns")
            w.writerow([_cell(v) for v in row])
