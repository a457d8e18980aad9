"""Binary artifact formats: ``ADCK`` checkpoints and ``ADTR`` attention traces.

Both are little-endian.  Checkpoint layout::

    b"ADCK" | version u16 | ModelConfig fields (u32 each, fixed order)
    | tensor count u32 | per tensor: name length u16, utf-8 name,
    rows u32, cols u32, rows*cols f32 values (row-major)

Vectors are stored as one row.  Trace layout::

    b"ADTR" | version u16 | per record: step u32, layer count u16,
    per layer (size u16, size x u32 indices), uniform (size u16, u32 indices), token u32
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from ..controller import ControllerParams
from ..errors import FormatError
from ..model.config import ModelConfig
from ..model.params import TransformerParams, tensor_shapes
from ..model.traces import TraceRecord

CKPT_MAGIC = b"ADCK"
TRACE_MAGIC = b"ADTR"
VERSION = 1
CONTROLLER_PREFIX = "controller."
_VARIANT_CODES = {"uni": 0, "bi": 1, "mlp": 2}


def _read(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("unexpected end of file")
    return b


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read(f, struct.calcsize(fmt)))


# ------------------------------------------------------------- checkpoints


def write_checkpoint(path: str | Path, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack(f"<{len(ModelConfig.FIELDS)}I",
                          *(getattr(config, f) for f in ModelConfig.FIELDS)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        a = np.asarray(t, dtype="<f4")
        if a.ndim > 2:
            raise FormatError(f"{name}: only vectors and matrices can be stored")
        a = a.reshape(1, -1) if a.ndim < 2 else a
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Config and raw 2-D tensors (in file order) of a checkpoint."""
    with open(path, "rb") as f:
        if _read(f, 4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not an ADCK checkpoint")
        (version,) = _unpack(f, "<H")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        fields = _unpack(f, f"<{len(ModelConfig.FIELDS)}I")
        config = ModelConfig(**dict(zip(ModelConfig.FIELDS, fields)))
        (count,) = _unpack(f, "<I")
        tensors = {}
        for _ in range(count):
            (n,) = _unpack(f, "<H")
            name = _read(f, n).decode("utf-8")
            rows, cols = _unpack(f, "<II")
            data = np.frombuffer(_read(f, 4 * rows * cols), dtype="<f4")
            tensors[name] = data.reshape(rows, cols).astype(np.float32)
        if f.read(1):
            raise FormatError("trailing bytes after last tensor")
    return config, tensors


def save_model(path: str | Path, params: TransformerParams) -> None:
    write_checkpoint(path, params.config, params.tensors)


def load_model(path: str | Path) -> TransformerParams:
    config, raw = read_checkpoint(path)
    shapes = tensor_shapes(config)
    missing = set(shapes) - set(raw)
    if missing:
        raise FormatError(f"checkpoint lacks model tensors: {sorted(missing)[:3]}")
    return TransformerParams(config, {k: raw[k].reshape(shapes[k]) for k in shapes})


def save_controller(path: str | Path, ctrl: ControllerParams, config: ModelConfig) -> None:
    tensors = {CONTROLLER_PREFIX + k: v for k, v in ctrl.tensors.items()}
    tensors[CONTROLLER_PREFIX + "meta"] = np.array(
        [_VARIANT_CODES[ctrl.variant], ctrl.pos_scale, ctrl.max_position], dtype=np.float32)
    write_checkpoint(path, config, tensors)


def load_controller(path: str | Path) -> ControllerParams:
    _, raw = read_checkpoint(path)
    meta_key = CONTROLLER_PREFIX + "meta"
    if meta_key not in raw:
        raise FormatError(f"{path}: no controller section")
    code, pos_scale, max_pos = raw.pop(meta_key).reshape(-1)
    variant = {v: k for k, v in _VARIANT_CODES.items()}[int(code)]
    t = {k[len(CONTROLLER_PREFIX):]: v for k, v in raw.items() if k.startswith(CONTROLLER_PREFIX)}
    for k, v in t.items():
        # biases and per-unit vectors were written as single rows
        if v.shape[0] == 1 and not k.endswith(("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "int.w", "proj.w")):
            t[k] = v.reshape(-1)
    return ControllerParams(t, variant, float(pos_scale), int(max_pos))


# ------------------------------------------------------------------ traces


def _write_set(buf: BinaryIO, idx: np.ndarray) -> None:
    idx = np.asarray(idx, dtype="<u4")
    buf.write(struct.pack("<H", idx.size))
    buf.write(idx.tobytes())


def _read_set(f: BinaryIO) -> np.ndarray:
    (n,) = _unpack(f, "<H")
    return np.frombuffer(_read(f, 4 * n), dtype="<u4").astype(np.int64)


def write_traces(path: str | Path, records: Iterable[TraceRecord]) -> None:
    buf = io.BytesIO()
    buf.write(TRACE_MAGIC)
    buf.write(struct.pack("<H", VERSION))
    for r in records:
        buf.write(struct.pack("<IH", r.step, len(r.layer_sets)))
        for s in r.layer_sets:
            _write_set(buf, s)
        _write_set(buf, r.uniform)
        buf.write(struct.pack("<I", r.token))
    Path(path).write_bytes(buf.getvalue())


def read_traces(path: str | Path) -> list[TraceRecord]:
    with open(path, "rb") as f:
        if _read(f, 4) != TRACE_MAGIC:
            raise FormatError(f"{path}: not an ADTR trace file")
        (version,) = _unpack(f, "<H")
        if version != VERSION:
            raise FormatError(f"unsupported trace version {version}")
        out = []
        while True:
            head = f.read(6)
            if not head:
                break
            if len(head) != 6:
                raise FormatError("truncated trace record")
            step, n_layers = struct.unpack("<IH", head)
            sets = [_read_set(f) for _ in range(n_layers)]
            uniform = _read_set(f)
            (token,) = _unpack(f, "<I")
            out.append(TraceRecord(step, sets, uniform, token))
    return out


def split_sequences(records: Sequence[TraceRecord]) -> list[list[TraceRecord]]:
    """Cut a flat record list back into sequences wherever ``step`` stops increasing."""
    out: list[list[TraceRecord]] = []
    for r in records:
        if not out or r.step <= out[-1][-1].step:
            out.append([])
        out[-1].append(r)
    return out
