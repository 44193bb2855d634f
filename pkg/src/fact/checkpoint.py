"""Binary containers for factor checkpoints and dense backbones.

Factor checkpoint (little-endian)::

    "FACT"  u16 version  u8 format  u8 strategy  u8 stage_count  u8 init_scheme
    per stage:
        u32 M  u32 d  u32 r1  u32 r2  u32 r3  f32 scale
        factor payloads, f32 row-major: MB U,V | TT U,V,Sigma | TK P,U,V,C
    u32 head_in  u32 head_out  f32 head weight (head_in x head_out)  f32 head bias
    u32 crc32 of every preceding byte

Backbone container: same magic/version, format byte 255, then a u32-length
JSON config, a u32 tensor count, per tensor ``u16 name_len, name, u8 ndim,
u32 dims...``, then all tensors as f32 in manifest order and the CRC.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fact import factorization as fz
from fact import vit
from fact.tensor import AutoTensor

MAGIC = b"FACT"
VERSION = 1
BACKBONE_TAG = 255
HEAD_ONLY_TAG = 254

_FIXED = struct.Struct("<4sHBBBB")
_STAGE = struct.Struct("<5If")
_HEAD = struct.Struct("<2I")
_CRC = struct.Struct("<I")

_FORMAT_BY_TAG = {v: k for k, v in fz.FORMAT_TAGS.items()}
_STRATEGY_BY_TAG = {v: k for k, v in vit.STRATEGY_TAGS.items()}


class CheckpointError(ValueError):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class VersionError(CheckpointError):
    code = "bad-version"


class CrcError(CheckpointError):
    code = "crc-mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


@dataclass
class FactorCheckpoint:
    """Everything a task needs on top of the shared backbone."""

    partition: vit.StagePartition | None
    head_weight: np.ndarray
    head_bias: np.ndarray


def fixed_overhead(n_stages):
    """Bytes of header and trailer in a factor checkpoint with ``n_stages`` stages."""
    return _FIXED.size + n_stages * _STAGE.size + _HEAD.size + _CRC.size


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _atomic_write(path, blob):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(ckpt):
    adapters = [] if ckpt.partition is None else ckpt.partition.adapters
    if any(a is None for a in adapters):
        raise CheckpointError("every stage needs a factor set to be checkpointed")
    if adapters:
        fmt_tag = fz.FORMAT_TAGS[adapters[0].factors.fmt]
        strat_tag = vit.STRATEGY_TAGS[adapters[0].tmap.strategy]
        init = adapters[0].factors.init_scheme
    else:
        fmt_tag, strat_tag, init = HEAD_ONLY_TAG, 0, 0
    out = [_FIXED.pack(MAGIC, VERSION, fmt_tag, strat_tag, len(adapters), init)]
    for a in adapters:
        f = a.factors
        out.append(_STAGE.pack(f.M, f.d, *f.ranks, f.scale))
        out.extend(_f32(p.data) for p in f.parameters())
    w, b = np.asarray(ckpt.head_weight), np.asarray(ckpt.head_bias)
    out.append(_HEAD.pack(*w.shape))
    out.append(_f32(w))
    out.append(_f32(b))
    body = b"".join(out)
    return body + _CRC.pack(zlib.crc32(body))


def save_checkpoint(ckpt, path):
    _atomic_write(path, encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))

    def array(self, shape, what):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float32).reshape(shape)


def _check_frame(blob, expect_backbone):
    if len(blob) < _FIXED.size + _CRC.size:
        raise TruncatedError(f"file too short ({len(blob)} bytes)")
    magic, version, tag = struct.unpack_from("<4sHB", blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if expect_backbone != (tag == BACKBONE_TAG):
        kind = "backbone container" if expect_backbone else "factor checkpoint"
        raise CheckpointError(f"not a {kind} (format tag {tag})")


def _check_crc(blob, end):
    if end + _CRC.size != len(blob):
        if end + _CRC.size > len(blob):
            raise TruncatedError(f"missing CRC trailer ({len(blob)} bytes, need {end + _CRC.size})")
        raise CheckpointError(f"{len(blob) - end - _CRC.size} trailing bytes after payload")
    (stored,) = _CRC.unpack_from(blob, end)
    if zlib.crc32(blob[:end]) != stored:
        raise CrcError("CRC32 mismatch: payload corrupted")


def decode_checkpoint(blob):
    _check_frame(blob, expect_backbone=False)
    r = _Reader(blob)
    _, _, fmt_tag, strat_tag, n_stages, init = r.unpack(_FIXED, "header")
    if n_stages and fmt_tag not in _FORMAT_BY_TAG:
        raise CheckpointError(f"unknown format tag {fmt_tag}")
    if n_stages and strat_tag not in _STRATEGY_BY_TAG:
        raise CheckpointError(f"unknown strategy tag {strat_tag}")
    adapters = []
    for _ in range(n_stages):
        M, d, r1, r2, r3, scale = r.unpack(_STAGE, "stage header")
        fmt, strategy = _FORMAT_BY_TAG[fmt_tag], _STRATEGY_BY_TAG[strat_tag]
        per_layer = vit.slices_per_layer(strategy)
        if M % per_layer:
            raise CheckpointError(f"M={M} is not a multiple of {per_layer} ({strategy})")
        ranks = fz.normalize_ranks(fmt, tuple(x for x in (r1, r2, r3) if x))
        factors = {name: AutoTensor(r.array(shape, f"factor {name}"), requires_grad=True)
                   for name, shape in fz.factor_shapes(fmt, M, d, ranks).items()}
        fs = fz.FactorSet(fmt, M, d, ranks, float(np.float32(scale)), factors, init)
        adapters.append(vit.StageAdapter(vit.build_tensorization_map(M // per_layer, d, strategy), fs))
    h_in, h_out = r.unpack(_HEAD, "head header")
    weight = r.array((h_in, h_out), "head weight")
    bias = r.array((h_out,), "head bias")
    _check_crc(blob, r.pos)
    return FactorCheckpoint(vit.StagePartition(adapters) if adapters else None, weight, bias)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_from_model(model, partition):
    return FactorCheckpoint(partition, model["head.weight"].data.copy(), model["head.bias"].data.copy())


# --------------------------------------------------------------------------
# backbone container
# --------------------------------------------------------------------------


def encode_backbone(model):
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    out = [_FIXED.pack(MAGIC, VERSION, BACKBONE_TAG, 0, 0, 0), struct.pack("<I", len(cfg)), cfg]
    state = model.state_dict()
    out.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.extend(_f32(arr) for arr in state.values())
    body = b"".join(out)
    return body + _CRC.pack(zlib.crc32(body))


def save_backbone(model, path):
    _atomic_write(path, encode_backbone(model))


def decode_backbone(blob):
    _check_frame(blob, expect_backbone=True)
    r = _Reader(blob)
    r.unpack(_FIXED, "header")
    (cfg_len,) = r.unpack(struct.Struct("<I"), "config length")
    try:
        config = vit.ViTConfig.from_dict(json.loads(r.take(cfg_len, "config").decode()))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad backbone config: {exc}") from exc
    (count,) = r.unpack(struct.Struct("<I"), "tensor count")
    manifest = []
    for _ in range(count):
        (name_len,) = r.unpack(struct.Struct("<H"), "name length")
        name = r.take(name_len, "name").decode()
        (ndim,) = r.unpack(struct.Struct("<B"), "ndim")
        shape = r.unpack(struct.Struct(f"<{ndim}I"), "dims") if ndim else ()
        manifest.append((name, shape))
    weights = OrderedDict((name, r.array(shape, name)) for name, shape in manifest)
    _check_crc(blob, r.pos)
    return vit.VisionTransformer(config, weights)


def load_backbone(path):
    return decode_backbone(Path(path).read_bytes())
