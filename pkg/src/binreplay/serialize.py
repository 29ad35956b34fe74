"""Binary file formats: tensors, datasets, checkpoints, replay memory.

All multi-byte values are little-endian.  Writes go through a temp file in
the target directory followed by an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager

import numpy as np

from . import cwr as cwr_mod
from .bitpack import BitTensor
from .graph import BitwidthConfig, Graph, LayerNode
from .bitpack import BinConvSpec
from .quant import QuantParams, QuantizedTensor, STORAGE_DTYPE
from .replay import LatentSample, ReplayMemory

TENSOR_MAGIC = b"QTNS"
DATASET_MAGIC = b"BRDS"
CHECKPOINT_MAGIC = b"BRCK"
REPLAY_MAGIC = b"BRRM"
FORMAT_VERSION = 1

DTYPE_F32 = 0
DTYPE_I8 = 1
DTYPE_I16 = 2
DTYPE_I32 = 3
DTYPE_BITPACKED = 4

_INT_TAGS = {8: DTYPE_I8, 16: DTYPE_I16, 32: DTYPE_I32}
_UNSIGNED_DTYPE = {8: np.uint8, 16: np.uint16, 32: np.uint32}


def _storage_dtype(bits: int, signed: bool) -> np.dtype:
    base = STORAGE_DTYPE[bits] if signed else _UNSIGNED_DTYPE[bits]
    return np.dtype(base).newbyteorder("<")


class FormatError(ValueError):
    pass


@contextmanager
def atomic_write(path):
    """Write to a temp file next to path, then rename into place."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated file")
    return b


def write_tensor(f, t) -> None:
    if isinstance(t, BitTensor):
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BBB", FORMAT_VERSION, DTYPE_BITPACKED, len(t.shape)))
        f.write(struct.pack(f"<{len(t.shape)}I", *t.shape))
        f.write(struct.pack("<Q", t.size))
        f.write(np.ascontiguousarray(t.words, dtype="<u8").tobytes())
    elif isinstance(t, QuantizedTensor):
        tag = _INT_TAGS[t.params.bits]
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BBB", FORMAT_VERSION, tag, t.data.ndim))
        f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        f.write(struct.pack("<diB", t.params.scale, t.params.zero_point, t.params.bits))
        f.write(b"\x01" if t.params.signed else b"\x00")
        dt = _storage_dtype(t.params.bits, t.params.signed)
        f.write(np.ascontiguousarray(t.data.astype(dt)).tobytes())
    else:
        a = np.asarray(t, dtype="<f4")
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BBB", FORMAT_VERSION, DTYPE_F32, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(np.ascontiguousarray(a).tobytes())


def read_tensor(f):
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, tag, rank = struct.unpack("<BBB", _read_exact(f, 3))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if tag == DTYPE_F32:
        data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
        return data.reshape(shape).astype(np.float64)
    if tag == DTYPE_BITPACKED:
        (n,) = struct.unpack("<Q", _read_exact(f, 8))
        if n != count:
            raise FormatError("bitpacked logical length disagrees with shape")
        n_words = -(-n // 64)
        words = np.frombuffer(_read_exact(f, 8 * n_words), dtype="<u8").astype(np.uint64)
        return BitTensor(shape=shape, words=words)
    if tag in (DTYPE_I8, DTYPE_I16, DTYPE_I32):
        scale, zp, bits = struct.unpack("<diB", _read_exact(f, 13))
        signed = _read_exact(f, 1) == b"\x01"
        dt = _storage_dtype(bits, signed)
        data = np.frombuffer(_read_exact(f, dt.itemsize * count), dtype=dt)
        params = QuantParams(bits=bits, scale=scale, zero_point=zp, signed=signed)
        return QuantizedTensor(data=data.reshape(shape).astype(np.int64), params=params)
    raise FormatError(f"unknown dtype tag {tag}")


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(path, inputs: np.ndarray, labels: np.ndarray, class_count: int) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= class_count:
        raise FormatError("labels outside [0, class_count)")
    shape = inputs.shape[1:]
    with atomic_write(path) as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<BIB", FORMAT_VERSION, len(inputs), len(shape)))
        f.write(struct.pack(f"<{len(shape)}I", *shape))
        f.write(struct.pack("<H", class_count))
        for x, y in zip(inputs, labels):
            write_tensor(f, x)
            f.write(struct.pack("<H", int(y)))


def read_dataset(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4) != DATASET_MAGIC:
            raise FormatError(f"{path}: bad dataset magic")
        version, count, rank = struct.unpack("<BIB", _read_exact(f, 6))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
        (class_count,) = struct.unpack("<H", _read_exact(f, 2))
        xs = np.empty((count,) + shape)
        ys = np.empty(count, dtype=np.int64)
        for i in range(count):
            x = read_tensor(f)
            if x.shape != shape:
                raise FormatError(f"{path}: sample {i} shape {x.shape} != header {shape}")
            xs[i] = x
            (ys[i],) = struct.unpack("<H", _read_exact(f, 2))
    return xs, ys, class_count


# ---------------------------------------------------------------------------
# replay memory files


def write_replay_memory(path, mem: ReplayMemory) -> None:
    with atomic_write(path) as f:
        f.write(REPLAY_MAGIC)
        f.write(struct.pack("<BIII", FORMAT_VERSION, mem.quota, mem.max_classes, len(mem.per_class)))
        for c in mem.classes:
            bucket = mem.per_class[c]
            f.write(struct.pack("<IQI", c, mem.seen_counts.get(c, 0), len(bucket)))
            for s in bucket:
                write_tensor(f, s.activation)


def read_replay_memory(path) -> ReplayMemory:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != REPLAY_MAGIC:
            raise FormatError(f"{path}: bad replay-memory magic")
        version, quota, max_classes, n_classes = struct.unpack("<BIII", _read_exact(f, 13))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported replay-memory version {version}")
        mem = ReplayMemory(quota=quota, max_classes=max_classes)
        for _ in range(n_classes):
            c, seen, n = struct.unpack("<IQI", _read_exact(f, 16))
            mem.seen_counts[c] = seen
            mem.per_class[c] = [
                LatentSample(activation=read_tensor(f), label=c) for _ in range(n)
            ]
    return mem


# ---------------------------------------------------------------------------
# checkpoints


def _qparams_to_json(p: QuantParams | None):
    if p is None:
        return None
    return {"bits": p.bits, "scale": p.scale, "zero_point": p.zero_point, "signed": p.signed}


def _qparams_from_json(d):
    return None if d is None else QuantParams(**d)


def _spec_to_json(s: BinConvSpec):
    return {
        "kernel_h": s.kernel_h, "kernel_w": s.kernel_w, "stride": s.stride,
        "padding": s.padding, "in_channels": s.in_channels, "out_channels": s.out_channels,
    }


def graph_descriptor(graph: Graph, bitwidth: BitwidthConfig) -> dict:
    nodes = []
    for node in graph.nodes:
        attrs = {k: (_spec_to_json(v) if k == "spec" else v) for k, v in node.attrs.items()}
        nodes.append({
            "kind": node.kind,
            "name": node.name,
            "inputs": node.inputs,
            "trainable": node.trainable,
            "attrs": attrs,
            "param_names": sorted(node.params),
            "param_scales": dict(node.param_scales),
            "out_qparams": _qparams_to_json(node.out_qparams),
            "has_weight_bits": node.weight_bits is not None,
        })
    return {
        "input_shape": list(graph.input_shape),
        "replay_level": graph.replay_level,
        "input_qparams": _qparams_to_json(graph.input_qparams),
        "bitwidth": {
            "q_f": bitwidth.q_f, "q_b_nonbin": bitwidth.q_b_nonbin, "q_b_bin": bitwidth.q_b_bin,
        },
        "nodes": nodes,
    }


def write_checkpoint(path, graph: Graph, bitwidth: BitwidthConfig, head) -> None:
    desc = graph_descriptor(graph, bitwidth)
    desc["head"] = {
        "feature_dim": head.feature_dim,
        "max_classes": head.max_classes,
        "past_counts": head.past_counts.tolist(),
        "seen": sorted(head.seen),
    }
    blob = json.dumps(desc, sort_keys=True).encode()
    with atomic_write(path) as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BI", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for node in graph.nodes:
            for pname in sorted(node.params):
                write_tensor(f, node.params[pname])
            if node.weight_bits is not None:
                write_tensor(f, node.weight_bits)
        write_tensor(f, head.cw)


def read_checkpoint(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        version, blen = struct.unpack("<BI", _read_exact(f, 5))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        desc = json.loads(_read_exact(f, blen))
        graph = Graph(tuple(desc["input_shape"]))
        graph.replay_level = desc["replay_level"]
        graph.input_qparams = _qparams_from_json(desc["input_qparams"])
        for nd in desc["nodes"]:
            attrs = dict(nd["attrs"])
            if "spec" in attrs:
                attrs["spec"] = BinConvSpec(**attrs["spec"])
            node = LayerNode(kind=nd["kind"], name=nd["name"], inputs=list(nd["inputs"]),
                             trainable=nd["trainable"], attrs=attrs)
            node.param_scales = dict(nd["param_scales"])
            node.out_qparams = _qparams_from_json(nd["out_qparams"])
            graph.nodes.append(node)
        for nd, node in zip(desc["nodes"], graph.nodes):
            for pname in nd["param_names"]:
                node.params[pname] = read_tensor(f)
            if nd["has_weight_bits"]:
                node.weight_bits = read_tensor(f)
        hd = desc["head"]
        head = cwr_mod.init(hd["feature_dim"], hd["max_classes"])
        head.past_counts = np.asarray(hd["past_counts"], dtype=np.int64)
        head.seen = set(hd["seen"])
        head.cw = read_tensor(f)
    bw = BitwidthConfig(**desc["bitwidth"])
    return graph, head, bw
