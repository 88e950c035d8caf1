"""Messages exchanged between clients and server, and their wire encoding.

Byte layout (all integers little-endian, all reals float32 little-endian)::

    common header   u8 tag, u8 version
    WeightSnapshot  (tag 1)
        header   u16 n_layers, then (u32 out, u32 in) per layer,
                 u8 has_head, [u32 rows, u32 cols, u8 has_bias]
        payload  W_0, b_0, W_1, b_1, ..., head anchors, head bias
    ClassMeanFeatures  (tag 2)
        header   u16 n_rows, u16 d, u16 count per row
        payload  n_rows x d reals, row c = mean of class c (zeros if count 0)
    LabeledFeatureSet  (tag 3)
        header   u32 n_items, u16 d
        payload  per item: u16 label, d reals

Only payload bytes enter the communication-cost comparison.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from .errors import AggregationError, EncodingError
from .nn import BackboneParams, HeadParams

WIRE_VERSION = 1
TAG_WEIGHTS = 1
TAG_CLASS_MEANS = 2
TAG_FEATURES = 3
BYTES_PER_SCALAR = 4
BYTES_PER_LABEL = 2
_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF

_F32 = np.dtype("<f4")
_U16 = np.dtype("<u2")


@dataclass
class WeightSnapshot:
    backbone: BackboneParams
    head: HeadParams | None = None


@dataclass
class ClassMeanFeatures:
    """Per-class mean embeddings.

    ``n_classes`` and ``d`` fix the dense ``[n_classes, d]`` wire block; when
    omitted they are inferred from the classes and vectors present.
    """

    means: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    n_classes: int | None = None
    d: int | None = None

    def __post_init__(self):
        if set(self.means) != set(self.counts):
            raise AggregationError("means and counts must cover the same classes")
        if any(int(n) < 1 for n in self.counts.values()):
            raise AggregationError("every reported class needs a count >= 1")
        if self.n_classes is None:
            self.n_classes = max(self.means) + 1 if self.means else 0
        if any(c < 0 or c >= self.n_classes for c in self.means):
            raise AggregationError(f"class id outside [0, {self.n_classes})")
        dims = {int(np.asarray(v).shape[-1]) for v in self.means.values()}
        if self.d is None:
            self.d = dims.pop() if len(dims) == 1 else (0 if not dims else None)
        if self.d is None or any(x != self.d for x in dims):
            raise AggregationError(f"feature vectors have mismatched dimensions {sorted(dims)}")

    @property
    def classes(self) -> list[int]:
        return sorted(self.means)


@dataclass
class LabeledFeatureSet:
    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.vectors.shape[0] != self.labels.shape[0]:
            raise EncodingError("vectors and labels differ in length")


RoundMessage = Union[WeightSnapshot, ClassMeanFeatures, LabeledFeatureSet]


class MessageSize(NamedTuple):
    payload: int
    header: int

    @property
    def total(self) -> int:
        return self.payload + self.header


def _u16(value, what):
    if not 0 <= value <= _U16_MAX:
        raise EncodingError(f"{what}={value} does not fit the 2-byte header field")
    return value


def _u32(value, what):
    if not 0 <= value <= _U32_MAX:
        raise EncodingError(f"{what}={value} does not fit the 4-byte header field")
    return value


def _weights_parts(msg: WeightSnapshot):
    arrays = []
    for w, b in msg.backbone.layers:
        arrays += [w, b]
    head_hdr = struct.pack("<B", 0)
    if msg.head is not None:
        rows, cols = np.asarray(msg.head.anchors).shape
        has_bias = msg.head.bias is not None
        head_hdr = struct.pack("<BIIB", 1, _u32(rows, "head rows"), _u32(cols, "head cols"), int(has_bias))
        arrays.append(msg.head.anchors)
        if has_bias:
            arrays.append(msg.head.bias)
    layers = msg.backbone.weights
    header = struct.pack("<BBH", TAG_WEIGHTS, WIRE_VERSION, _u16(len(layers), "n_layers"))
    for w in layers:
        out_dim, in_dim = np.asarray(w).shape
        header += struct.pack("<II", _u32(out_dim, "layer out"), _u32(in_dim, "layer in"))
    header += head_hdr
    payload = b"".join(np.ascontiguousarray(a, dtype=_F32).tobytes() for a in arrays)
    return header, payload


def _class_mean_parts(msg: ClassMeanFeatures):
    n_rows = msg.n_classes
    d = msg.d
    rows = np.zeros((n_rows, d), dtype=_F32)
    counts = np.zeros(n_rows, dtype=_U16)
    for c in msg.classes:
        vec = np.asarray(msg.means[c], dtype=np.float64)
        if vec.shape != (d,):
            raise EncodingError(f"class {c} vector has shape {vec.shape}, expected ({d},)")
        rows[c] = vec
        counts[c] = _u16(int(msg.counts[c]), f"count of class {c}")
    header = struct.pack("<BBHH", TAG_CLASS_MEANS, WIRE_VERSION, _u16(n_rows, "n_rows"), _u16(d, "feature dim"))
    header += counts.tobytes()
    return header, rows.tobytes()


def _feature_parts(msg: LabeledFeatureSet):
    n, d = msg.vectors.shape
    header = struct.pack("<BBIH", TAG_FEATURES, WIRE_VERSION, _u32(n, "n_items"), _u16(d, "feature dim"))
    if n and (msg.labels.min() < 0 or msg.labels.max() > _U16_MAX):
        raise EncodingError("labels must fit in 2 bytes")
    record = np.dtype([("label", _U16), ("vec", _F32, (d,))])
    items = np.empty(n, dtype=record)
    items["label"] = msg.labels
    items["vec"] = msg.vectors
    return header, items.tobytes()


def _parts(msg):
    if isinstance(msg, WeightSnapshot):
        return _weights_parts(msg)
    if isinstance(msg, ClassMeanFeatures):
        return _class_mean_parts(msg)
    if isinstance(msg, LabeledFeatureSet):
        return _feature_parts(msg)
    raise EncodingError(f"cannot encode {type(msg).__name__}")


def encode(msg: RoundMessage) -> bytes:
    header, payload = _parts(msg)
    return header + payload


def measure_message(msg: RoundMessage) -> MessageSize:
    header, payload = _parts(msg)
    return MessageSize(len(payload), len(header))


def _f32(buf, offset, count):
    arr = np.frombuffer(buf, dtype=_F32, count=count, offset=offset).astype(np.float64)
    return arr, offset + count * BYTES_PER_SCALAR


def decode(buf: bytes) -> RoundMessage:
    if len(buf) < 2:
        raise EncodingError("truncated message")
    tag, version = struct.unpack_from("<BB", buf, 0)
    if version != WIRE_VERSION:
        raise EncodingError(f"unsupported wire version {version}")
    try:
        if tag == TAG_WEIGHTS:
            return _decode_weights(buf)
        if tag == TAG_CLASS_MEANS:
            return _decode_class_means(buf)
        if tag == TAG_FEATURES:
            return _decode_features(buf)
    except (struct.error, ValueError) as exc:
        raise EncodingError(f"malformed message: {exc}") from None
    raise EncodingError(f"unknown message tag {tag}")


def _decode_weights(buf):
    (n_layers,) = struct.unpack_from("<H", buf, 2)
    off = 4
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", buf, off))
        off += 8
    (has_head,) = struct.unpack_from("<B", buf, off)
    off += 1
    head_shape, has_bias = None, 0
    if has_head:
        rows, cols, has_bias = struct.unpack_from("<IIB", buf, off)
        head_shape = (rows, cols)
        off += 9
    weights, biases = [], []
    for out_dim, in_dim in shapes:
        w, off = _f32(buf, off, out_dim * in_dim)
        b, off = _f32(buf, off, out_dim)
        weights.append(w.reshape(out_dim, in_dim))
        biases.append(b)
    head = None
    if head_shape is not None:
        anchors, off = _f32(buf, off, head_shape[0] * head_shape[1])
        bias = None
        if has_bias:
            bias, off = _f32(buf, off, head_shape[0])
        head = HeadParams(anchors.reshape(head_shape), bias)
    if off != len(buf):
        raise EncodingError("trailing bytes after weight snapshot")
    return WeightSnapshot(BackboneParams(weights, biases), head)


def _decode_class_means(buf):
    n_rows, d = struct.unpack_from("<HH", buf, 2)
    off = 6
    counts = np.frombuffer(buf, dtype=_U16, count=n_rows, offset=off)
    off += 2 * n_rows
    rows, off = _f32(buf, off, n_rows * d)
    if off != len(buf):
        raise EncodingError("trailing bytes after class means")
    rows = rows.reshape(n_rows, d)
    present = [c for c in range(n_rows) if counts[c] > 0]
    return ClassMeanFeatures(
        {c: rows[c].copy() for c in present}, {c: int(counts[c]) for c in present}, n_rows, d
    )


def _decode_features(buf):
    n, d = struct.unpack_from("<IH", buf, 2)
    record = np.dtype([("label", _U16), ("vec", _F32, (d,))])
    items = np.frombuffer(buf, dtype=record, count=n, offset=8)
    if 8 + n * record.itemsize != len(buf):
        raise EncodingError("trailing bytes after feature set")
    return LabeledFeatureSet(items["vec"].astype(np.float64).reshape(n, d), items["label"].astype(np.int64))
