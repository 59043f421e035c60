"""Binary checkpoint format for float32 and quantized models.

Layout:

    bytes 0..3    magic "QLML"
    bytes 4..7    format version, uint32 little-endian
    bytes 8..11   header length H, uint32 little-endian
    bytes 12..12+H  UTF-8 JSON directory
    remainder     payload; entry offsets are relative to its first byte

The directory carries the model config, the training stage, and one entry
per stored array: {name, dtype f32|i8, shape, offset}. Entries are sorted
by name and their offsets must be ascending and non-overlapping. int8
weight entries name their per-channel scale vector under "qparams"; a
quantized file also stores the activation quantization parameters inline
in the header. All payloads are little-endian.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError
from .model import ModelConfig, ModelParams, parameter_shapes
from .quant import QuantizedModel, QuantizedTensor, QuantParams

MAGIC = b"QLML"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}
_SCALES_SUFFIX = ".scales"


def _entry_nbytes(dtype: str, shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n * _DTYPES[dtype].itemsize


def _pack(config: ModelConfig, stage: str, kind: str,
          arrays: dict[str, tuple[str, np.ndarray]],
          act_qparams: dict[str, QuantParams] | None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        dtype, arr = arrays[name]
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset}
        if dtype == "i8":
            entry["qparams"] = name + _SCALES_SUFFIX
        entries.append(entry)
        blobs.append(blob)
        offset += len(blob)
    header = {
        "kind": kind,
        "config": {
            "num_layers": config.num_layers,
            "hidden_size": config.hidden_size,
            "num_heads": config.num_heads,
            "ffn_size": config.ffn_size,
            "vocab_size": config.vocab_size,
            "max_positions": config.max_positions,
        },
        "stage": stage,
        "entries": entries,
    }
    if act_qparams is not None:
        header["act_qparams"] = {
            k: {"scale": qp.scale, "zero_point": qp.zero_point}
            for k, qp in sorted(act_qparams.items())
        }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += np.uint32(VERSION).tobytes()
    out += np.uint32(len(hbytes)).tobytes()
    out += hbytes
    for blob in blobs:
        out += blob
    return bytes(out)


def save_params(path, params: ModelParams) -> None:
    """Write a float32 model checkpoint."""
    arrays = {name: ("f32", t.data) for name, t in params.tensors.items()}
    Path(path).write_bytes(_pack(params.config, params.stage, "fp32", arrays, None))


def save_quantized(path, qm: QuantizedModel) -> None:
    """Write a quantized model checkpoint (int8 plan weights + f32 rest)."""
    arrays: dict[str, tuple[str, np.ndarray]] = {
        name: ("f32", arr) for name, arr in qm.fp32.items()
    }
    for name, qt in qm.weights.items():
        arrays[name] = ("i8", qt.q)
        arrays[name + _SCALES_SUFFIX] = ("f32", qt.scales)
    Path(path).write_bytes(_pack(qm.config, qm.stage, "quantized", arrays, qm.act_qparams))


def save_checkpoint(path, model) -> None:
    if isinstance(model, ModelParams):
        save_params(path, model)
    elif isinstance(model, QuantizedModel):
        save_quantized(path, model)
    else:
        raise FormatError(f"cannot checkpoint object of type {type(model).__name__}")


def _read_header(raw: bytes):
    if len(raw) < 12:
        raise FormatError("file too short for the fixed header")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}, expected {VERSION}")
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if len(raw) < 12 + hlen:
        raise FormatError("file truncated inside the JSON directory")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"directory is not valid JSON: {exc}") from exc
    return header, raw[12 + hlen:]


def _read_arrays(header, payload: bytes) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    prev_end = 0
    prev_name = None
    for entry in header["entries"]:
        name = entry["name"]
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype {dtype!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = _entry_nbytes(dtype, shape)
        if offset < prev_end:
            raise FormatError(
                f"entry {name!r}: offset {offset} overlaps previous entry {prev_name!r}"
            )
        if offset + nbytes > len(payload):
            raise FormatError(f"entry {name!r}: payload truncated")
        flat = np.frombuffer(payload, dtype=_DTYPES[dtype], count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        arrays[name] = flat.reshape(shape).copy()
        prev_end = offset + nbytes
        prev_name = name
    return arrays


def _read_config(header) -> ModelConfig:
    try:
        return ModelConfig(**header["config"])
    except Exception as exc:  # config errors become format errors
        raise FormatError(f"config: {exc}") from exc


def load_checkpoint(path):
    """Read either checkpoint kind; returns ModelParams or QuantizedModel."""
    raw = Path(path).read_bytes()
    header, payload = _read_header(raw)
    kind = header.get("kind")
    if kind == "fp32":
        return _load_params_from(header, payload)
    if kind == "quantized":
        return _load_quantized_from(header, payload)
    raise FormatError(f"unknown checkpoint kind {kind!r}")


def load_params(path) -> ModelParams:
    model = load_checkpoint(path)
    if not isinstance(model, ModelParams):
        raise FormatError(f"{path}: expected an fp32 checkpoint, found a quantized one")
    return model


def load_quantized(path) -> QuantizedModel:
    model = load_checkpoint(path)
    if not isinstance(model, QuantizedModel):
        raise FormatError(f"{path}: expected a quantized checkpoint, found an fp32 one")
    return model


def _load_params_from(header, payload) -> ModelParams:
    config = _read_config(header)
    arrays = _read_arrays(header, payload)
    expect = parameter_shapes(config)
    missing = sorted(set(expect) - set(arrays))
    extra = sorted(set(arrays) - set(expect))
    if missing:
        raise FormatError(f"entry {missing[0]!r} missing from checkpoint")
    if extra:
        raise FormatError(f"unexpected entry {extra[0]!r} in fp32 checkpoint")
    for name, arr in arrays.items():
        if arr.shape != expect[name]:
            raise FormatError(f"entry {name!r}: shape {arr.shape} does not match config {expect[name]}")
    tensors = {name: Tensor(arr.astype(np.float32), requires_grad=True) for name, arr in arrays.items()}
    return ModelParams(config, tensors, stage=header.get("stage", "init"))


def _load_quantized_from(header, payload) -> QuantizedModel:
    config = _read_config(header)
    arrays = _read_arrays(header, payload)
    dtype_of = {e["name"]: e["dtype"] for e in header["entries"]}
    fp32: dict[str, np.ndarray] = {}
    weights: dict[str, QuantizedTensor] = {}
    for name, arr in arrays.items():
        if dtype_of[name] == "i8":
            scales = arrays.get(name + _SCALES_SUFFIX)
            if scales is None:
                raise FormatError(f"entry {name!r}: missing scale vector {name + _SCALES_SUFFIX!r}")
            weights[name] = QuantizedTensor(arr.astype(np.int8), scales.astype(np.float32))
        elif not name.endswith(_SCALES_SUFFIX):
            fp32[name] = arr.astype(np.float32)
    act_raw = header.get("act_qparams")
    if act_raw is None:
        raise FormatError("quantized checkpoint is missing act_qparams")
    act = {k: QuantParams(float(v["scale"]), int(v["zero_point"])) for k, v in act_raw.items()}
    return QuantizedModel(config, fp32, weights, act, stage=header.get("stage", "quantized"))
