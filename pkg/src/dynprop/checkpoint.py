"""Binary checkpoint files.

Layout: the magic bytes ``DYNP1`` followed by repeated records

    [name_len: u32 LE][name: utf-8][rank: u32][dims: u32 x rank][values: f64 x prod LE]

Save/load round-trips are byte-identical: tensors are written in dict order
and read back into an ordered dict.  Model configuration travels as a
reserved ``_meta`` record of scalars so a checkpoint is self-contained.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .model import ARCH_QUERY, ARCH_TWO_STAGE, Model, ModelConfig, param_shapes

MAGIC = b"DYNP1"
META_NAME = "_meta"

_ARCH_CODES = {ARCH_QUERY: 0.0, ARCH_TWO_STAGE: 1.0}
_ARCH_FROM_CODE = {v: k for k, v in _ARCH_CODES.items()}
_STRATEGY_CODES = {"first": 0.0, "last": 1.0, "bin": 2.0}
_STRATEGY_FROM_CODE = {v: k for k, v in _STRATEGY_CODES.items()}


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be read or fails validation."""


def _meta_vector(cfg: ModelConfig) -> np.ndarray:
    return np.array([
        _ARCH_CODES[cfg.arch], cfg.n_total, cfg.theta, cfg.k_objects, cfg.dim,
        cfg.stages, cfg.classes, cfg.patch, cfg.image_size,
        _STRATEGY_CODES[cfg.strategy],
    ], dtype=np.float64)


def _config_from_meta(vec: np.ndarray) -> ModelConfig:
    if vec.size != 10:
        raise CheckpointError(f"bad _meta record length {vec.size}")
    return ModelConfig(
        arch=_ARCH_FROM_CODE[float(vec[0])],
        n_total=int(vec[1]), theta=int(vec[2]), k_objects=float(vec[3]),
        dim=int(vec[4]), stages=int(vec[5]), classes=int(vec[6]),
        patch=int(vec[7]), image_size=int(vec[8]),
        strategy=_STRATEGY_FROM_CODE[float(vec[9])],
    )


def write_records(path: str, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", a.ndim))
            for dim in a.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(a.tobytes())


def read_records(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:5]!r}")
    arrays: dict[str, np.ndarray] = {}
    off = 5
    record = 0
    while off < len(blob):
        record += 1
        name = "?"
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            raw_name = blob[off:off + name_len]
            if len(raw_name) != name_len:
                raise ValueError("truncated name")
            name = raw_name.decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if off + nbytes > len(blob):
                raise ValueError("truncated values")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
            off += nbytes
            arrays[name] = arr.astype(np.float64)
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt record {record} ({name}): {e}") from e
    return arrays


def save_model(path: str, model: Model) -> None:
    arrays = {META_NAME: _meta_vector(model.cfg)}
    for name, t in model.params.items():
        arrays[name] = t.values
    write_records(path, arrays)


def load_model(path: str) -> Model:
    arrays = read_records(path)
    if META_NAME not in arrays:
        raise CheckpointError(f"{path}: missing {META_NAME} record")
    try:
        cfg = _config_from_meta(arrays.pop(META_NAME))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: bad {META_NAME} record: {e}") from e
    expected = param_shapes(cfg)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(
            f"{path}: parameter names mismatch (missing {missing}, unexpected {extra})")
    params = {}
    for name, shape in expected.items():
        arr = arrays[name]
        if arr.shape != shape:
            raise CheckpointError(
                f"{path}: record {name} has shape {arr.shape}, expected {shape}")
        params[name] = T.Tensor.param(arr)
    return Model(cfg=cfg, params=params)
