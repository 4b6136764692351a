"""Procedural urban scenes and their layered occupancy volumes.

Scenes are axis-aligned rectangular buildings on flat ground. All randomness
comes from :class:`Rng`, a PCG64 stream consumed through ``random_raw`` so the
exact sequence of draws (and therefore every golden file) is portable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PlacementError, ValidationError

DEFAULT_ELEVATIONS: tuple[float, ...] = (2.0, 6.0, 10.0, 14.0, 18.0)
DEFAULT_FREQUENCY = 28e9
DEFAULT_TX_HEIGHT_RANGE = (12.0, 20.0)


class Rng:
    """Deterministic 64-bit generator.

    Raw words come from PCG64 (its raw stream is stable across numpy
    releases). Floats take the top 53 bits of one word; bounded integers are
    ``floor(u * n)``. Nothing else touches the state, so the draw order below
    is the whole contract.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValidationError(f"seed must fit in 64 unsigned bits, got {seed}")
        self._bitgen = np.random.PCG64(int(seed))

    def next_u64(self) -> int:
        return int(self._bitgen.random_raw())

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def integer(self, low: int, high: int) -> int:
        """Integer in ``[low, high)``."""
        if high <= low:
            raise ValidationError(f"empty integer range [{low}, {high})")
        return low + min(int(self.uniform() * (high - low)), high - low - 1)


@dataclass(frozen=True)
class SceneSpec:
    width_px: int = 64
    height_px: int = 64
    resolution: float = 1.0
    seed: int = 0
    building_density: float = 0.3
    min_building_side: float = 4.0
    max_building_side: float = 16.0
    max_building_height: float = 20.0

    def validate(self) -> None:
        problems = []
        if self.width_px < 16 or self.height_px < 16:
            problems.append(f"grid must be at least 16x16, got {self.width_px}x{self.height_px}")
        if not self.resolution > 0:
            problems.append(f"resolution must be positive, got {self.resolution}")
        if not 0.0 <= self.building_density <= 0.6:
            problems.append(f"building_density must lie in [0, 0.6], got {self.building_density}")
        if not 0 < self.min_building_side <= self.max_building_side:
            problems.append(
                f"need 0 < min_building_side <= max_building_side, got "
                f"{self.min_building_side}, {self.max_building_side}"
            )
        if not self.max_building_height > 0:
            problems.append(f"max_building_height must be positive, got {self.max_building_height}")
        if not 0 <= int(self.seed) < 2**64:
            problems.append(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if problems:
            raise ValidationError("invalid SceneSpec: " + "; ".join(problems))


@dataclass
class HeightMap:
    """Building heights in meters, shape ``(height_px, width_px)``, 0 = open ground."""

    heights: np.ndarray
    resolution: float = 1.0

    def __post_init__(self):
        self.heights = np.ascontiguousarray(self.heights, dtype=np.float32)
        if self.heights.ndim != 2:
            raise ValidationError(f"heights must be 2D, got shape {self.heights.shape}")
        if np.any(self.heights < 0) or not np.all(np.isfinite(self.heights)):
            raise ValidationError("heights must be finite and non-negative")

    @property
    def width_px(self) -> int:
        return self.heights.shape[1]

    @property
    def height_px(self) -> int:
        return self.heights.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape


@dataclass
class OccupancyVolume:
    elevations: tuple[float, ...]
    planes: np.ndarray  # (L, H, W) uint8, 1 = inside a building

    @property
    def layers(self) -> int:
        return len(self.elevations)

    def plane_at(self, elevation: float) -> np.ndarray:
        try:
            return self.planes[self.elevations.index(float(elevation))]
        except ValueError:
            raise ValidationError(
                f"elevation {elevation} m is not one of the volume's layers {list(self.elevations)}"
            ) from None


@dataclass(frozen=True)
class TxSpec:
    x_px: int
    y_px: int
    height: float
    power: float = 0.0
    frequency: float = DEFAULT_FREQUENCY

    @property
    def wavelength(self) -> float:
        return 299_792_458.0 / self.frequency


def generate_scene(spec: SceneSpec) -> HeightMap:
    """Scatter non-overlapping rectangular buildings until the density budget is used.

    Footprints keep a one-pixel street between them. Candidates that would push
    the footprint past ``building_density`` are rejected, so the density is an
    upper bound that dense requests may not reach.
    """
    spec.validate()
    w, h = spec.width_px, spec.height_px
    heights = np.zeros((h, w), dtype=np.float32)
    if spec.building_density == 0:
        return HeightMap(heights, spec.resolution)

    rng = Rng(spec.seed)
    side_min = max(1, round(spec.min_building_side / spec.resolution))
    side_max = min(max(side_min, round(spec.max_building_side / spec.resolution)), w, h)
    side_min = min(side_min, side_max)
    budget = spec.building_density * w * h
    reserved = np.zeros((h, w), dtype=bool)
    cap = np.float32(spec.max_building_height)
    used = 0
    for _ in range(400 + 8 * (w * h) // (side_min * side_min)):
        bw = rng.integer(side_min, side_max + 1)
        bh = rng.integer(side_min, side_max + 1)
        x0 = rng.integer(0, w - bw + 1)
        y0 = rng.integer(0, h - bh + 1)
        u = rng.uniform()
        if used + bw * bh > budget or reserved[y0 : y0 + bh, x0 : x0 + bw].any():
            continue
        # (1 - u) lies in (0, 1], giving heights in (0, max].
        heights[y0 : y0 + bh, x0 : x0 + bw] = min(np.float32(spec.max_building_height * (1.0 - u)), cap)
        reserved[max(0, y0 - 1) : y0 + bh + 1, max(0, x0 - 1) : x0 + bw + 1] = True
        used += bw * bh
    return HeightMap(heights, spec.resolution)


def _check_elevations(elevations: Sequence[float]) -> tuple[float, ...]:
    elev = tuple(float(e) for e in elevations)
    if not elev:
        raise ValidationError("elevations must be non-empty")
    if any(e < 0 for e in elev):
        raise ValidationError(f"elevations must be >= 0, got {list(elev)}")
    if any(b <= a for a, b in zip(elev, elev[1:])):
        raise ValidationError(f"elevations must be strictly ascending, got {list(elev)}")
    return elev


def slice_layers(hm: HeightMap, elevations: Sequence[float] = DEFAULT_ELEVATIONS) -> OccupancyVolume:
    """Cut the height map at each elevation; a layer exactly at rooftop height is free."""
    elev = _check_elevations(elevations)
    levels = np.asarray(elev, dtype=np.float32)[:, None, None]
    planes = (levels < hm.heights[None, :, :]).astype(np.uint8)
    return OccupancyVolume(elev, planes)


def place_transmitter(
    hm: HeightMap,
    tx: TxSpec,
    height_range: tuple[float, float] | None = DEFAULT_TX_HEIGHT_RANGE,
) -> TxSpec:
    """Validate that ``tx`` sits in free space above its pixel; returns it unchanged."""
    if not (0 <= tx.x_px < hm.width_px and 0 <= tx.y_px < hm.height_px):
        raise ValidationError(
            f"transmitter pixel ({tx.x_px}, {tx.y_px}) outside {hm.width_px}x{hm.height_px} grid"
        )
    if not tx.frequency > 0:
        raise ValidationError(f"frequency must be positive, got {tx.frequency}")
    if height_range is not None:
        lo, hi = height_range
        if not lo <= tx.height <= hi:
            raise ValidationError(f"transmitter height {tx.height} m outside [{lo}, {hi}] m")
    roof = float(hm.heights[tx.y_px, tx.x_px])
    if not roof < tx.height:
        raise PlacementError(
            f"transmitter at pixel ({tx.x_px}, {tx.y_px}) with height {tx.height} m is inside "
            f"a building of height {roof} m"
        )
    return tx


@dataclass
class TxPolicy:
    """How a dataset builder draws transmitters for a scene."""

    height_range: tuple[float, float] = DEFAULT_TX_HEIGHT_RANGE
    power: float = 0.0
    frequency: float = DEFAULT_FREQUENCY
    max_retries: int = 64

    def draw(self, hm: HeightMap, rng: Rng) -> TxSpec:
        """Uniform height, then a uniform pixel; retried until placement succeeds."""
        lo, hi = self.height_range
        for _ in range(self.max_retries):
            tx = TxSpec(
                x_px=rng.integer(0, hm.width_px),
                y_px=rng.integer(0, hm.height_px),
                height=float(np.float32(rng.uniform(lo, hi))),
                power=self.power,
                frequency=self.frequency,
            )
            try:
                return place_transmitter(hm, tx, self.height_range)
            except PlacementError:
                continue
        raise PlacementError(f"no valid transmitter placement after {self.max_retries} retries")
