"""Versioned binary weight checkpoints (magic "SWSH").

Layout, all little-endian: magic, u16 format version, packed config record,
u32 tensor count, then per tensor: u16 name length, name bytes (utf-8),
u8 rank, u32 extents, f64 data. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError
from .models import (
    PIPELINE_DISTRACTED,
    PIPELINE_DROWSY,
    ModelConfig,
    init_params,
    named_parameters,
)

MAGIC = b"SWSH"
VERSION = 1

# pipeline, num_classes, seq_len, height, width, d_model, heads, depth,
# stages, window (3x), mlp_ratio, dropout_p, rel_pos_bias, seed
_CONFIG_FMT = "<BIIIIIIIIIIIddBQ"
_PIPELINE_CODES = {PIPELINE_DROWSY: 0, PIPELINE_DISTRACTED: 1}
_PIPELINE_NAMES = {v: k for k, v in _PIPELINE_CODES.items()}


def _pack_config(config):
    return struct.pack(
        _CONFIG_FMT,
        _PIPELINE_CODES[config.pipeline],
        config.num_classes,
        config.seq_len,
        config.height,
        config.width,
        config.d_model,
        config.heads,
        config.depth,
        config.stages,
        config.window[0],
        config.window[1],
        config.window[2],
        config.mlp_ratio,
        config.dropout_p,
        int(config.rel_pos_bias),
        config.seed,
    )


def _unpack_config(blob, offset):
    fields = struct.unpack(_CONFIG_FMT, blob)
    code = fields[0]
    if code not in _PIPELINE_NAMES:
        raise DataFormatError(f"unknown pipeline code {code}", offset=offset)
    return ModelConfig(
        pipeline=_PIPELINE_NAMES[code],
        num_classes=fields[1],
        seq_len=fields[2],
        height=fields[3],
        width=fields[4],
        d_model=fields[5],
        heads=fields[6],
        depth=fields[7],
        stages=fields[8],
        window=fields[9:12],
        mlp_ratio=fields[12],
        dropout_p=fields[13],
        rel_pos_bias=bool(fields[14]),
        seed=fields[15],
    )


def save_checkpoint(path, config, params):
    """Write config + every named tensor; reload is bit-exact."""
    tensors = named_parameters(params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(_pack_config(config))
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            for extent in tensor.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(tensor.data.astype("<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated checkpoint while reading {what}", offset=fh.tell() - len(data))
    return data


def load_checkpoint(path):
    """Read a checkpoint back into (config, params); bit-exact."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
        config_offset = fh.tell()
        config = _unpack_config(
            _read_exact(fh, struct.calcsize(_CONFIG_FMT), "config record"), config_offset
        )
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))

        params = init_params(config)
        tensors = named_parameters(params)
        if count != len(tensors):
            raise DataFormatError(
                f"checkpoint has {count} tensors, config implies {len(tensors)}"
            )
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if name not in tensors:
                raise DataFormatError(f"unexpected tensor {name!r} for this config")
            if name in seen:
                raise DataFormatError(f"duplicate tensor {name!r}")
            seen.add(name)
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            extents = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "extent"))[0] for _ in range(rank)
            )
            target = tensors[name]
            if extents != target.shape:
                raise DataFormatError(
                    f"tensor {name!r} has extents {extents}, config implies {target.shape}"
                )
            n_bytes = int(np.prod(extents, dtype=np.int64)) * 8 if extents else 8
            raw = _read_exact(fh, n_bytes, f"data of {name!r}")
            target.data = np.frombuffer(raw, dtype="<f8").reshape(extents).copy()
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after last tensor", offset=fh.tell() - 1)
    return config, params
