"""Binary file formats: RFG grids and UNC1 model checkpoints.

Both are little-endian. Readers validate every size field against the file
length before touching the payload, and writers go through a temporary file
so a failed write never leaves a partial output behind.
"""

from __future__ import annotations

import enum
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import CheckpointError, FormatError, ValidationError
from .raysim import Mode, PowerVolume
from .scenegen import DEFAULT_FREQUENCY, HeightMap, OccupancyVolume, TxSpec
from .unet import Model, PredictMode, UNetConfig, parameter_shapes

RFG_MAGIC = b"RFG1"
RFG_VERSION = 1
# magic, version, width, height, layers, resolution, frequency, tx x/y/height/power, kind, reserved
_RFG_HEADER = struct.Struct("<4sIIIIffffffB3x")

CKPT_MAGIC = b"UNC1"
CKPT_VERSION = 1
# version, mode, depth, base_channels, in_channels, out_channels, input_size, layers
_CKPT_CONFIG = struct.Struct("<IBIIIIII")

_MAX_DIM = 1 << 16


class Kind(enum.IntEnum):
    HEIGHTMAP = 0
    OCCUPANCY = 1
    POWER_COHERENT = 2
    POWER_TIME_AVERAGED = 3
    MODEL_PREDICTION = 4


_MODE_KIND = {
    Mode.COHERENT: Kind.POWER_COHERENT,
    Mode.TIME_AVERAGED: Kind.POWER_TIME_AVERAGED,
    Mode.PREDICTION: Kind.MODEL_PREDICTION,
}


@dataclass
class RfgFile:
    kind: Kind
    values: np.ndarray  # (layers, height, width) float32
    elevations: tuple[float, ...] = ()
    resolution: float = 1.0
    frequency: float = DEFAULT_FREQUENCY
    tx: tuple[float, float, float, float] | None = None  # x_px, y_px, height, power

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3:
            raise ValidationError(f"RFG values must be (layers, height, width), got {self.values.shape}")
        if self.kind is Kind.HEIGHTMAP:
            if self.values.shape[0] != 1:
                raise ValidationError("a heightmap RFG has exactly one layer")
            if not self.elevations:
                self.elevations = (0.0,)
        self.elevations = tuple(float(e) for e in self.elevations)
        if len(self.elevations) != self.values.shape[0]:
            raise ValidationError(
                f"{len(self.elevations)} elevations for {self.values.shape[0]} layers"
            )
        if any(min(s, _MAX_DIM) != s or s < 1 for s in self.values.shape):
            raise ValidationError(f"RFG dimensions out of range: {self.values.shape}")

    @property
    def layers(self) -> int:
        return self.values.shape[0]


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def encode_rfg(rfg: RfgFile) -> bytes:
    layers, height, width = rfg.values.shape
    tx = rfg.tx if rfg.tx is not None else (math.nan,) * 4
    header = _RFG_HEADER.pack(
        RFG_MAGIC, RFG_VERSION, width, height, layers,
        rfg.resolution, rfg.frequency, *tx, int(rfg.kind),
    )
    elev = np.asarray(rfg.elevations, dtype="<f4").tobytes()
    return header + elev + rfg.values.astype("<f4", copy=False).tobytes(order="C")


def decode_rfg(buf: bytes) -> RfgFile:
    if len(buf) < _RFG_HEADER.size:
        raise FormatError(f"file too short for an RFG header ({len(buf)} bytes)", len(buf))
    (magic, version, width, height, layers, resolution, frequency,
     tx_x, tx_y, tx_h, tx_p, kind) = _RFG_HEADER.unpack_from(buf, 0)
    if magic != RFG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RFG_MAGIC!r}", 0)
    if version != RFG_VERSION:
        raise FormatError(f"unsupported RFG version {version}", 4)
    for offset, name, value in ((8, "width", width), (12, "height", height), (16, "layers", layers)):
        if not 1 <= value <= _MAX_DIM:
            raise FormatError(f"{name} {value} out of range", offset)
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"unknown RFG kind {kind}", 44) from None
    expected = _RFG_HEADER.size + 4 * layers + 4 * layers * height * width
    if len(buf) != expected:
        raise FormatError(
            f"declared {width}x{height}x{layers} needs {expected} bytes, file has {len(buf)}",
            min(len(buf), expected),
        )
    off = _RFG_HEADER.size
    elevations = np.frombuffer(buf, dtype="<f4", count=layers, offset=off)
    values = np.frombuffer(buf, dtype="<f4", count=layers * height * width, offset=off + 4 * layers)
    tx = None if all(math.isnan(v) for v in (tx_x, tx_y, tx_h, tx_p)) else (tx_x, tx_y, tx_h, tx_p)
    return RfgFile(
        kind=kind,
        values=values.astype(np.float32).reshape(layers, height, width),
        elevations=tuple(float(e) for e in elevations),
        resolution=float(resolution),
        frequency=float(frequency),
        tx=tx,
    )


def write_rfg(path: str | os.PathLike, rfg: RfgFile) -> None:
    _atomic_write(path, encode_rfg(rfg))


def read_rfg(path: str | os.PathLike) -> RfgFile:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(_RFG_HEADER.size)
        if len(head) == _RFG_HEADER.size:
            _, _, width, height, layers = struct.unpack_from("<4sIIII", head)
            expected = _RFG_HEADER.size + 4 * layers + 4 * layers * height * width
            if expected > size and head[:4] == RFG_MAGIC:
                raise FormatError(
                    f"declared {width}x{height}x{layers} needs {expected} bytes, file has {size}", size
                )
        return decode_rfg(head + fh.read())


# Conversions between domain objects and RFG payloads.

def _tx_tuple(tx: TxSpec) -> tuple[float, float, float, float]:
    return (float(tx.x_px), float(tx.y_px), float(tx.height), float(tx.power))


def heightmap_to_rfg(hm: HeightMap, frequency: float = DEFAULT_FREQUENCY) -> RfgFile:
    return RfgFile(Kind.HEIGHTMAP, hm.heights, (0.0,), hm.resolution, frequency)


def rfg_to_heightmap(rfg: RfgFile) -> HeightMap:
    if rfg.kind is not Kind.HEIGHTMAP:
        raise ValidationError(f"expected a heightmap RFG, got kind {rfg.kind.name}")
    return HeightMap(rfg.values[0], rfg.resolution)


def occupancy_to_rfg(occ: OccupancyVolume, resolution: float = 1.0) -> RfgFile:
    return RfgFile(Kind.OCCUPANCY, occ.planes.astype(np.float32), occ.elevations, resolution)


def rfg_to_occupancy(rfg: RfgFile) -> OccupancyVolume:
    if rfg.kind is not Kind.OCCUPANCY:
        raise ValidationError(f"expected an occupancy RFG, got kind {rfg.kind.name}")
    return OccupancyVolume(rfg.elevations, (rfg.values != 0).astype(np.uint8))


def power_to_rfg(vol: PowerVolume, resolution: float = 1.0) -> RfgFile:
    return RfgFile(_MODE_KIND[Mode(vol.mode)], vol.values, vol.elevations, resolution,
                   vol.tx.frequency, _tx_tuple(vol.tx))


def rfg_to_power(rfg: RfgFile) -> PowerVolume:
    modes = {k: m for m, k in _MODE_KIND.items()}
    if rfg.kind not in modes:
        raise ValidationError(f"expected a power RFG, got kind {rfg.kind.name}")
    if rfg.tx is None:
        raise ValidationError("power RFG carries no transmitter metadata")
    x, y, h, p = rfg.tx
    tx = TxSpec(int(x), int(y), float(h), float(p), rfg.frequency)
    return PowerVolume(rfg.values, rfg.elevations, tx, modes[rfg.kind])


# Checkpoints.

_MODE_CODES = {PredictMode.TO_2D: 0, PredictMode.TO_3D: 1}


def encode_checkpoint(model: Model) -> bytes:
    cfg = model.config
    parts = [CKPT_MAGIC, _CKPT_CONFIG.pack(
        CKPT_VERSION, _MODE_CODES[cfg.mode], cfg.depth, cfg.base_channels,
        cfg.in_channels, cfg.out_channels, cfg.input_size, cfg.layers,
    )]
    parts.append(struct.pack("<I", len(model.params)))
    for name, tensor in model.params.items():
        raw = name.encode("utf-8")
        data = tensor.data
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Model:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", 0)
    off = 4
    if len(buf) < off + _CKPT_CONFIG.size + 4:
        raise FormatError("file too short for a checkpoint header", len(buf))
    version, mode_code, depth, base, in_ch, out_ch, size, layers = _CKPT_CONFIG.unpack_from(buf, off)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", off)
    modes = {v: k for k, v in _MODE_CODES.items()}
    if mode_code not in modes:
        raise FormatError(f"unknown model mode code {mode_code}", off + 4)
    try:
        config = UNetConfig(modes[mode_code], depth, base, size, layers)
    except ValidationError as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from None
    if (in_ch, out_ch) != (config.in_channels, config.out_channels):
        raise CheckpointError(
            f"checkpoint declares {in_ch} in / {out_ch} out channels but its config implies "
            f"{config.in_channels} / {config.out_channels}"
        )
    off += _CKPT_CONFIG.size
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    expected = parameter_shapes(config)
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} tensors, config {config} needs {len(expected)}")

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated while reading {what}", len(buf))
        chunk = buf[off : off + n]
        off += n
        return chunk

    params = {}
    for want_name, want_shape in expected.items():
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<B", take(1, "tensor rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor dims"))
        if name != want_name or tuple(shape) != want_shape:
            raise CheckpointError(
                f"tensor {name!r} with shape {tuple(shape)} does not match expected "
                f"{want_name!r} with shape {want_shape}"
            )
        n = int(np.prod(shape))
        data = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(shape)
        params[name] = tc.Tensor(data.astype(np.float32), requires_grad=True)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after the last tensor", off)
    return Model(config, params)


def save_checkpoint(path: str | os.PathLike, model: Model) -> None:
    _atomic_write(path, encode_checkpoint(model))


def load_checkpoint(path: str | os.PathLike) -> Model:
    return decode_checkpoint(Path(path).read_bytes())

