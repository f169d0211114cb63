import json
import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from data import Dataset, Source
from net import NetworkConfig, NetworkParams
from seeding import fingerprint
from utils import FormatError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"AFPD"
PARAMS_MAGIC = b"AFPW"
VERSION = 1

KIND_PLAIN = 0
KIND_ADVERSARIAL = 1

# magic, version, kind, source, seed, N, d
_DATASET_HEADER = struct.Struct("<4sIBBQQQ")
# magic, version, m, d, m_plus, gamma
_PARAMS_HEADER = struct.Struct("<4sIIQId")

_SOURCE_CODES = {
    Source.UNIFORM: 0,
    Source.GAUSSIAN: 1,
    Source.RADEMACHER: 2,
    Source.ORTHOGONALIZED: 3,
    Source.FILE: 4,
}
_SOURCES = {code: source for source, code in _SOURCE_CODES.items()}


@dataclass(frozen=True, eq=False)
class AdversarialRecord:
    """Contents of an adversarial AFPD file"""

    X: np.ndarray
    base_labels: np.ndarray
    targets: np.ndarray
    provenance_id: int
    supports: tuple | None
    source: Source
    seed: int
    scale: float

    def training_set(self):
        return Dataset(self.X, self.targets, self.source, self.seed, self.scale)


def adversarial_fingerprint(X, targets):
    return fingerprint(np.asarray(X, dtype=np.float64), np.asarray(targets, dtype=np.int8), tag="adv")


class _Reader:
    def __init__(self, payload, path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count, what):
        end = self.offset + count
        if end > len(self.payload):
            raise FormatError(f"{self.path}: truncated payload while reading {what}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def array(self, dtype, count, what):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count, what), dtype=dtype).copy()

    def scalar(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]

    @property
    def exhausted(self):
        return self.offset == len(self.payload)

    def finish(self):
        if self.offset != len(self.payload):
            raise FormatError(f"{self.path}: {len(self.payload) - self.offset} trailing bytes")


def _dataset_header(kind, dataset):
    return _DATASET_HEADER.pack(
        DATASET_MAGIC, VERSION, kind, _SOURCE_CODES[dataset.source], dataset.seed, dataset.n, dataset.d
    )


def _body(X, y):
    return np.ascontiguousarray(X, dtype="<f8").tobytes() + np.asarray(y, dtype=np.int8).tobytes()


def _support_block(supports):
    if supports is None:
        return b"\x00"
    parts = [b"\x01"]
    for support in supports:
        support = np.asarray(support, dtype="<u4")
        parts.append(struct.pack("<I", len(support)))
        parts.append(support.tobytes())
    return b"".join(parts)


def write_dataset(dataset, path):
    """
    Write a plain dataset in the AFPD binary format

    Layout (little-endian): header, X as f64 row-major, y as i8, scale as f64

    The trailing scale is an extension of the base layout, which ends at y.
    Readers of the base layout stop there and ignore it; read_dataset accepts
    files without it and takes scale = 1.
    """
    path = Path(path)
    payload = _dataset_header(KIND_PLAIN, dataset) + _body(dataset.X, dataset.y)
    payload += struct.pack("<d", dataset.scale)
    path.write_bytes(payload)
    logger.debug("wrote dataset N=%d d=%d to %s", dataset.n, dataset.d, path)
    return path


def write_adversarial(adv, path):
    """
    Write an adversarial dataset: the plain layout plus targets and provenance id

    The support block and scale follow the provenance id as an optional
    trailer; without it supports are None and scale is 1.
    """
    path = Path(path)
    base = adv.base
    header_source = Dataset(adv.X, base.y, base.source, base.seed, base.scale)
    payload = _dataset_header(KIND_ADVERSARIAL, header_source) + _body(adv.X, base.y)
    payload += np.asarray(adv.targets, dtype=np.int8).tobytes()
    payload += struct.pack("<Q", adv.provenance_id)
    payload += _support_block(adv.supports)
    payload += struct.pack("<d", base.scale)
    path.write_bytes(payload)
    logger.debug("wrote adversarial dataset N=%d d=%d to %s", base.n, base.d, path)
    return path


def _read_afpd(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    reader = _Reader(path.read_bytes(), path)
    magic, version, kind, source_code, seed, n, d = _DATASET_HEADER.unpack(
        reader.take(_DATASET_HEADER.size, "header")
    )
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind not in (KIND_PLAIN, KIND_ADVERSARIAL):
        raise FormatError(f"{path}: unknown kind {kind}")
    if source_code not in _SOURCES:
        raise FormatError(f"{path}: unknown source code {source_code}")
    if n == 0 or d == 0:
        raise FormatError(f"{path}: empty dataset")
    if n * d * 8 > len(reader.payload):
        raise FormatError(f"{path}: truncated payload, header declares N={n}, d={d}")

    X = reader.array("<f8", n * d, "X").reshape(n, d)
    y = reader.array(np.int8, n, "labels").astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise FormatError(f"{path}: non-finite values in X")
    if not np.all(np.abs(y) == 1.0):
        raise FormatError(f"{path}: labels must be +1 or -1")

    extra = {}
    if kind == KIND_ADVERSARIAL:
        targets = reader.array(np.int8, n, "targets").astype(np.float64)
        if not np.all(np.abs(targets) == 1.0):
            raise FormatError(f"{path}: targets must be +1 or -1")
        extra["targets"] = targets
        extra["provenance_id"] = reader.scalar("<Q", "provenance id")
        supports = None
        if not reader.exhausted and reader.scalar("<B", "support flag"):
            supports = []
            for _ in range(n):
                count = reader.scalar("<I", "support length")
                supports.append(reader.array("<u4", count, "support").astype(np.int64))
            supports = tuple(supports)
        extra["supports"] = supports
    scale = 1.0 if reader.exhausted else reader.scalar("<d", "scale")
    reader.finish()
    if not (math.isfinite(scale) and scale > 0.0):
        raise FormatError(f"{path}: invalid scale {scale}")
    return kind, X, y, _SOURCES[source_code], seed, scale, extra


def _adversarial_record(path, X, y, source, seed, scale, extra):
    if adversarial_fingerprint(X, extra["targets"]) != extra["provenance_id"]:
        raise FormatError(f"{path}: provenance id does not match contents")
    return AdversarialRecord(
        X=X,
        base_labels=y,
        targets=extra["targets"],
        provenance_id=extra["provenance_id"],
        supports=extra["supports"],
        source=source,
        seed=seed,
        scale=scale,
    )


def read_adversarial(path):
    kind, X, y, source, seed, scale, extra = _read_afpd(path)
    if kind != KIND_ADVERSARIAL:
        raise FormatError(f"{path}: not an adversarial dataset")
    return _adversarial_record(path, X, y, source, seed, scale, extra)


def read_dataset(path):
    """
    Read an AFPD file as a training set

    Adversarial files yield (x_adv, targets), the set a classifier is trained on.
    """
    kind, X, y, source, seed, scale, extra = _read_afpd(path)
    if kind == KIND_ADVERSARIAL:
        return _adversarial_record(path, X, y, source, seed, scale, extra).training_set()
    return Dataset(X, y, source, seed, scale)


def write_params(params, cfg, path):
    path = Path(path)
    params.check(cfg)
    header = _PARAMS_HEADER.pack(PARAMS_MAGIC, VERSION, cfg.m, cfg.d, cfg.m_plus, cfg.gamma)
    path.write_bytes(header + np.ascontiguousarray(params.W, dtype="<f8").tobytes())
    return path


def read_params(path):
    """
    Read an AFPW file

    Returns:
        tuple: (NetworkParams, NetworkConfig)
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    reader = _Reader(path.read_bytes(), path)
    magic, version, m, d, m_plus, gamma = _PARAMS_HEADER.unpack(reader.take(_PARAMS_HEADER.size, "header"))
    if magic != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {PARAMS_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    W = reader.array("<f8", m * d, "W").reshape(m, d)
    reader.finish()
    if not np.all(np.isfinite(W)):
        raise FormatError(f"{path}: non-finite weights")
    cfg = NetworkConfig(d=d, m=m, gamma=gamma, m_plus=m_plus)
    return NetworkParams(W), cfg


def dataset_frame(dataset):
    frame = pd.DataFrame(dataset.X, columns=[f"x{i}" for i in range(dataset.d)])
    frame["y"] = dataset.y.astype(np.int8)
    return frame


def export_csv(dataset, path):
    dataset_frame(dataset).to_csv(path, index=False, float_format="%.17g")
    return Path(path)


def read_csv_dataset(path):
    frame = pd.read_csv(path)
    if "y" not in frame.columns:
        raise FormatError(f"{path}: missing y column")
    feature_cols = [c for c in frame.columns if c != "y"]
    return Dataset(frame[feature_cols].to_numpy(dtype=np.float64), frame["y"].to_numpy(), Source.FILE)


class ReportEncoder(json.JSONEncoder):
    def default(self, o):
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if isinstance(o, Enum):
            return o.value
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, Path):
            return str(o)
        return super().default(o)


def to_json(obj):
    return json.dumps(obj, cls=ReportEncoder, indent=2, sort_keys=True)


def write_json(obj, path):
    path = Path(path)
    path.write_text(to_json(obj) + "\n")
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})")
