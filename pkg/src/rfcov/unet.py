"""UNet models for the 3D-to-2D and 3D-to-3D prediction modes, plus input encoding."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ValidationError
from .raysim import FLOOR_DBM, Mode, PowerMap, PowerVolume
from .scenegen import OccupancyVolume, TxSpec

# Heights and elevations are divided by this before entering the network.
HEIGHT_SCALE = 20
SANITY_MARGIN = 50.0


class PredictMode(str, enum.Enum):
    TO_2D = "to2d"
    TO_3D = "to3d"


class Direction(enum.Enum):
    TO_UNIT = "to_unit"
    FROM_UNIT = "from_unit"


@dataclass(frozen=True)
class NormSpec:
    floor: float = FLOOR_DBM
    ceiling: float = -40.0

    def __post_init__(self):
        if not self.floor < self.ceiling:
            raise ValidationError(f"NormSpec needs floor < ceiling, got {self.floor}, {self.ceiling}")


@dataclass(frozen=True)
class UNetConfig:
    mode: PredictMode = PredictMode.TO_3D
    depth: int = 3
    base_channels: int = 16
    input_size: int = 64
    layers: int = 5

    def __post_init__(self):
        object.__setattr__(self, "mode", PredictMode(self.mode))
        if self.depth < 1 or self.base_channels < 1 or self.layers < 1:
            raise ValidationError(f"depth, base_channels and layers must be positive: {self}")
        if self.input_size < 1 or self.input_size % (2**self.depth):
            raise ValidationError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2**self.depth}"
            )

    @property
    def in_channels(self) -> int:
        # occupancy planes, tx one-hot, tx height, and the target elevation for To2D
        return self.layers + 2 + (1 if self.mode is PredictMode.TO_2D else 0)

    @property
    def out_channels(self) -> int:
        return 1 if self.mode is PredictMode.TO_2D else self.layers

    def widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth + 1)]


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in a fixed order."""
    c = config.widths()
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = config.in_channels
    for i in range(config.depth):
        conv(f"enc{i}.conv", cin, c[i])
        conv(f"enc{i}.down", c[i], c[i])
        cin = c[i]
    conv("bottleneck", c[config.depth - 1], c[config.depth])
    for i in reversed(range(config.depth)):
        conv(f"dec{i}.up", c[i + 1], c[i])
        conv(f"dec{i}.fuse", 2 * c[i], c[i])
    conv("head", c[0], config.out_channels, k=1)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


@dataclass
class Model:
    config: UNetConfig
    params: dict[str, tc.Tensor]
    forward_calls: int = field(default=0, compare=False)

    def parameters(self) -> list[tc.Tensor]:
        return list(self.params.values())

    def forward(self, x: tc.Tensor) -> tc.Tensor:
        """Map ``(N, in_channels, S, S)`` inputs to ``(N, out_channels, S, S)``."""
        self.forward_calls += 1
        p = self.params

        def conv(h, name, stride=1):
            w = p[f"{name}.weight"]
            return tc.conv2d(h, w, p[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)

        skips = []
        h = x
        for i in range(self.config.depth):
            h = tc.relu(conv(h, f"enc{i}.conv"))
            skips.append(h)
            h = tc.relu(conv(h, f"enc{i}.down", stride=2))
        h = tc.relu(conv(h, "bottleneck"))
        for i in reversed(range(self.config.depth)):
            h = tc.relu(conv(tc.upsample_nearest(h), f"dec{i}.up"))
            h = tc.relu(conv(tc.concat_channels(h, skips[i]), f"dec{i}.fuse"))
        return conv(h, "head")

    def astype(self, precision: tc.Precision) -> Model:
        params = {
            k: tc.Tensor(v.data.astype(precision.dtype), requires_grad=v.requires_grad)
            for k, v in self.params.items()
        }
        return Model(self.config, params)


def build_model(config: UNetConfig, seed: int = 0, precision: tc.Precision = tc.Precision.F32) -> Model:
    """Fresh model; weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = tc.Tensor(data.astype(precision.dtype), requires_grad=True)
    return Model(config, params)


def normalize_power(grid, spec: NormSpec = NormSpec(), direction: Direction = Direction.TO_UNIT) -> np.ndarray:
    g = np.asarray(grid)
    span = spec.ceiling - spec.floor
    if Direction(direction) is Direction.TO_UNIT:
        return (np.clip(g, spec.floor, spec.ceiling) - spec.floor) / span
    return g * span + spec.floor


def encode_input(occ: OccupancyVolume, tx: TxSpec, mode: PredictMode,
                 target_elevation: float | None = None) -> np.ndarray:
    """Network input ``(1, C, H, W)`` float32.

    Channels: occupancy planes, transmitter one-hot, constant tx height / 20,
    and for To2D a constant target elevation / 20.
    """
    mode = PredictMode(mode)
    if mode is PredictMode.TO_2D:
        if target_elevation is None:
            raise ValidationError("To2D encoding needs a target_elevation")
        occ.plane_at(target_elevation)
    elif target_elevation is not None:
        raise ValidationError("To3D encoding takes no target_elevation")
    _, h, w = occ.planes.shape
    if not (0 <= tx.x_px < w and 0 <= tx.y_px < h):
        raise ValidationError(f"transmitter pixel ({tx.x_px}, {tx.y_px}) outside {w}x{h} grid")
    extra = 3 if mode is PredictMode.TO_2D else 2
    x = np.zeros((1, occ.layers + extra, h, w), dtype=np.float32)
    x[0, : occ.layers] = occ.planes
    x[0, occ.layers, tx.y_px, tx.x_px] = 1.0
    x[0, occ.layers + 1] = tx.height / HEIGHT_SCALE
    if mode is PredictMode.TO_2D:
        x[0, occ.layers + 2] = target_elevation / HEIGHT_SCALE
    return x


def _check_model(model: Model, mode: PredictMode, occ: OccupancyVolume) -> None:
    cfg = model.config
    if cfg.mode is not mode:
        raise ValidationError(f"model mode is {cfg.mode.value}, expected {mode.value}")
    if occ.layers != cfg.layers or occ.planes.shape[1:] != (cfg.input_size, cfg.input_size):
        raise ValidationError(
            f"occupancy volume {occ.planes.shape} does not fit model "
            f"({cfg.layers} layers, {cfg.input_size}x{cfg.input_size})"
        )


def _infer(model: Model, x: np.ndarray) -> np.ndarray:
    dtype = next(iter(model.params.values())).dtype
    return model.forward(tc.Tensor(x.astype(dtype, copy=False))).data


def _to_dbm(out: np.ndarray, norm: NormSpec) -> np.ndarray:
    # sanity clamp: a wild output cannot land more than SANITY_MARGIN dB outside the range
    dbm = normalize_power(out, norm, Direction.FROM_UNIT)
    return np.clip(dbm, norm.floor - SANITY_MARGIN, norm.ceiling + SANITY_MARGIN).astype(np.float32)


def predict_layer(model: Model, occ: OccupancyVolume, tx: TxSpec, target_elevation: float,
                  norm: NormSpec = NormSpec()) -> PowerMap:
    _check_model(model, PredictMode.TO_2D, occ)
    out = _infer(model, encode_input(occ, tx, PredictMode.TO_2D, target_elevation))[0, 0]
    dbm = _to_dbm(out, norm)
    dbm[occ.plane_at(target_elevation) != 0] = norm.floor
    return PowerMap(dbm, float(target_elevation), tx, Mode.PREDICTION)


def predict_volume(model: Model, occ: OccupancyVolume, tx: TxSpec,
                   norm: NormSpec = NormSpec()) -> PowerVolume:
    """All layers from one forward pass."""
    _check_model(model, PredictMode.TO_3D, occ)
    out = _infer(model, encode_input(occ, tx, PredictMode.TO_3D))[0]
    dbm = _to_dbm(out, norm)
    dbm[occ.planes != 0] = norm.floor
    return PowerVolume(dbm, occ.elevations, tx, Mode.PREDICTION)
