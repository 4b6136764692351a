"""Reference 2.5D ray-launching simulator.

Rays leave the transmitter pixel on a fixed, evenly spaced azimuth fan and
march cell by cell (DDA traversal) through the horizontal plane of one
receiver layer. Entering an occupied cell reflects the ray off that wall
face. Height only enters through the constant transmitter-to-layer offset,
added in quadrature to the in-plane path length.

Every ray carries its image source: each reflection mirrors the source across
the wall line, so the unfolded path to any cell centre is just the distance
from the image. All rays of one image family crossing a cell describe the same
propagation path, so a cell takes one contribution per family. That is what
makes an unobstructed direct path reproduce free-space loss exactly.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numba
import numpy as np

from .errors import ShapeError, ValidationError
from .scenegen import HeightMap, OccupancyVolume, TxSpec, place_transmitter

SPEED_OF_LIGHT = 299_792_458.0
FLOOR_DBM = -127.0

# Distinct image families remembered per cell when de-duplicating deposits.
_FAMILY_SLOTS = 16
_KEY_OFFSET = 1 << 20
_KEY_SPAN = 1 << 21


class Mode(str, enum.Enum):
    COHERENT = "coherent"
    TIME_AVERAGED = "time_averaged"
    # Maps produced by a trained model rather than the simulator.
    PREDICTION = "model_prediction"


@dataclass(frozen=True)
class RayConfig:
    n_rays: int = 2048
    max_bounces: int = 3
    reflection_coeff: float = 0.5
    mode: Mode = Mode.TIME_AVERAGED
    floor: float = FLOOR_DBM
    max_range: float = math.inf
    # Deposits closer than this to the transmitter use this distance instead.
    min_distance: float = 0.5

    def validate(self) -> None:
        if self.n_rays < 8:
            raise ValidationError(f"n_rays must be >= 8, got {self.n_rays}")
        if self.max_bounces < 0:
            raise ValidationError(f"max_bounces must be >= 0, got {self.max_bounces}")
        if not 0 < self.reflection_coeff <= 1:
            raise ValidationError(f"reflection_coeff must lie in (0, 1], got {self.reflection_coeff}")
        if not self.floor < 0:
            raise ValidationError(f"floor must be negative, got {self.floor}")
        if not self.max_range > 0:
            raise ValidationError(f"max_range must be positive, got {self.max_range}")
        if not self.min_distance > 0:
            raise ValidationError(f"min_distance must be positive, got {self.min_distance}")
        if Mode(self.mode) is Mode.PREDICTION:
            raise ValidationError("the simulator mode must be coherent or time_averaged")


@dataclass
class PowerMap:
    values: np.ndarray  # (H, W) float32 dBm
    elevation: float
    tx: TxSpec
    mode: Mode


@dataclass
class PowerVolume:
    values: np.ndarray  # (L, H, W) float32 dBm
    elevations: tuple[float, ...]
    tx: TxSpec
    mode: Mode

    @property
    def layers(self) -> int:
        return len(self.elevations)

    def layer(self, k: int) -> PowerMap:
        return PowerMap(self.values[k], self.elevations[k], self.tx, self.mode)

    @classmethod
    def stack(cls, maps: list[PowerMap]) -> PowerVolume:
        return cls(
            np.stack([m.values for m in maps]),
            tuple(m.elevation for m in maps),
            maps[0].tx,
            maps[0].mode,
        )


def friis_fspl(distance: float, frequency: float) -> float:
    """Free-space path loss in dB, ``20 log10(4 pi d f / c)``."""
    if not distance > 0 or not frequency > 0:
        raise ValidationError(
            f"distance and frequency must be positive, got d={distance}, f={frequency}"
        )
    return 20.0 * math.log10(4.0 * math.pi * distance * frequency / SPEED_OF_LIGHT)


def combine_rays(amplitudes, path_lengths, wavelength: float, mode: Mode) -> float:
    """Linear received power of rays meeting at one point (unscaled)."""
    a = np.asarray(amplitudes, dtype=np.float64)
    if Mode(mode) is Mode.TIME_AVERAGED:
        return float(np.sum(a * a))
    phase = 2.0 * np.pi * np.mod(np.asarray(path_lengths, dtype=np.float64) / wavelength, 1.0)
    return float(abs(np.sum(a * np.exp(1j * phase))) ** 2)


@numba.njit(cache=True, nogil=True)
def _deposit(cx, cy, ix2, iy2, bounces, keys, slot, inc, cre, cim,
             res, dh2, wavelength, coeff_pow, min_d):
    key = ((ix2 + _KEY_OFFSET) * _KEY_SPAN + (iy2 + _KEY_OFFSET)) * 16 + bounces
    for s in range(_FAMILY_SLOTS):
        if keys[cy, cx, s] == key:
            return
    keys[cy, cx, slot[cy, cx]] = key
    slot[cy, cx] = (slot[cy, cx] + 1) % _FAMILY_SLOTS
    ddx = (2 * cx + 1 - ix2) * 0.5 * res
    ddy = (2 * cy + 1 - iy2) * 0.5 * res
    d3 = math.sqrt(ddx * ddx + ddy * ddy + dh2)
    if d3 < min_d:
        d3 = min_d
    amp = coeff_pow[bounces] / d3
    inc[cy, cx] += amp * amp
    cycles = d3 / wavelength
    phase = 2.0 * math.pi * (cycles - math.floor(cycles))
    cre[cy, cx] += amp * math.cos(phase)
    cim[cy, cx] += amp * math.sin(phase)


@numba.njit(cache=True, nogil=True)
def _launch(occ, tx_x, tx_y, res, dh, wavelength, n_rays, max_bounces, coeff,
            max_range, min_d):
    h, w = occ.shape
    inc = np.zeros((h, w))
    cre = np.zeros((h, w))
    cim = np.zeros((h, w))
    keys = np.full((h, w, _FAMILY_SLOTS), -1, dtype=np.int64)
    slot = np.zeros((h, w), dtype=np.int64)
    coeff_pow = np.empty(max_bounces + 1)
    for b in range(max_bounces + 1):
        coeff_pow[b] = coeff ** b
    dh2 = dh * dh
    range_px = max_range / res
    ix0 = 2 * tx_x + 1
    iy0 = 2 * tx_y + 1

    for r in range(n_rays):
        theta = 2.0 * math.pi * (r + 0.5) / n_rays
        dx = math.cos(theta)
        dy = math.sin(theta)
        px = tx_x + 0.5
        py = tx_y + 0.5
        cx = tx_x
        cy = tx_y
        ix2 = ix0
        iy2 = iy0
        bounces = 0
        travelled = 0.0
        # The transmitter's own building is transparent below its rooftop.
        escaping = occ[cy, cx] != 0
        if not escaping:
            _deposit(cx, cy, ix2, iy2, bounces, keys, slot, inc, cre, cim,
                     res, dh2, wavelength, coeff_pow, min_d)
        while True:
            if dx > 0.0:
                tx_ = (cx + 1 - px) / dx
            elif dx < 0.0:
                tx_ = (cx - px) / dx
            else:
                tx_ = math.inf
            if dy > 0.0:
                ty_ = (cy + 1 - py) / dy
            elif dy < 0.0:
                ty_ = (cy - py) / dy
            else:
                ty_ = math.inf
            step_x = tx_ <= ty_
            t = tx_ if step_x else ty_
            if t < 0.0:
                t = 0.0
            travelled += t
            if travelled > range_px:
                break
            px += t * dx
            py += t * dy
            if step_x:
                nx = cx + (1 if dx > 0.0 else -1)
                ny = cy
            else:
                nx = cx
                ny = cy + (1 if dy > 0.0 else -1)
            if nx < 0 or nx >= w or ny < 0 or ny >= h:
                break
            if occ[ny, nx] != 0 and not escaping:
                bounces += 1
                if bounces > max_bounces:
                    break
                if step_x:
                    wall = cx + 1 if dx > 0.0 else cx
                    ix2 = 4 * wall - ix2
                    px = float(wall)
                    dx = -dx
                else:
                    wall = cy + 1 if dy > 0.0 else cy
                    iy2 = 4 * wall - iy2
                    py = float(wall)
                    dy = -dy
                continue
            cx = nx
            cy = ny
            if occ[cy, cx] == 0:
                escaping = False
                _deposit(cx, cy, ix2, iy2, bounces, keys, slot, inc, cre, cim,
                         res, dh2, wavelength, coeff_pow, min_d)
    return inc, cre * cre + cim * cim


def _to_dbm(linear: np.ndarray, tx: TxSpec, floor: float, occ: np.ndarray) -> np.ndarray:
    scale_db = tx.power + 20.0 * math.log10(tx.wavelength / (4.0 * math.pi))
    with np.errstate(divide="ignore"):
        dbm = scale_db + 10.0 * np.log10(linear)
    dbm = np.maximum(dbm, floor)
    dbm[occ != 0] = floor
    return dbm.astype(np.float32)


def _check_layer_inputs(hm: HeightMap, occ_plane: np.ndarray, tx: TxSpec, cfg: RayConfig) -> None:
    cfg.validate()
    if occ_plane.shape != hm.shape:
        raise ShapeError(f"occupancy plane shape {occ_plane.shape} does not match scene {hm.shape}")
    place_transmitter(hm, tx, height_range=None)


def _trace_both(hm, occ_plane, tx, elevation, cfg) -> dict[Mode, np.ndarray]:
    occ = np.ascontiguousarray(occ_plane, dtype=np.uint8)
    inc, coh = _launch(
        occ, int(tx.x_px), int(tx.y_px), float(hm.resolution),
        abs(float(tx.height) - float(elevation)), float(tx.wavelength),
        int(cfg.n_rays), int(cfg.max_bounces), float(cfg.reflection_coeff),
        float(cfg.max_range), float(cfg.min_distance),
    )
    return {
        Mode.TIME_AVERAGED: _to_dbm(inc, tx, cfg.floor, occ),
        Mode.COHERENT: _to_dbm(coh, tx, cfg.floor, occ),
    }


def trace_layer(hm: HeightMap, occ_plane: np.ndarray, tx: TxSpec, elevation: float,
                cfg: RayConfig = RayConfig()) -> PowerMap:
    """Power map (dBm) at one receiver elevation."""
    _check_layer_inputs(hm, occ_plane, tx, cfg)
    mode = Mode(cfg.mode)
    return PowerMap(_trace_both(hm, occ_plane, tx, elevation, cfg)[mode], float(elevation), tx, mode)


def simulate_volume_modes(hm: HeightMap, occ: OccupancyVolume, tx: TxSpec,
                          cfg: RayConfig = RayConfig(), workers: int = 1) -> dict[Mode, PowerVolume]:
    """Both coherent and time-averaged volumes from a single set of traced rays.

    Layers are distributed over ``workers`` threads; each layer is traced
    whole by one worker, so results do not depend on the worker count.
    """
    if occ.planes.shape[1:] != hm.shape:
        raise ShapeError(f"occupancy volume shape {occ.planes.shape} does not match scene {hm.shape}")
    for plane in occ.planes:
        _check_layer_inputs(hm, plane, tx, cfg)

    def one(k):
        return _trace_both(hm, occ.planes[k], tx, occ.elevations[k], cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            layers = list(pool.map(one, range(occ.layers)))
    else:
        layers = [one(k) for k in range(occ.layers)]
    return {
        mode: PowerVolume(np.stack([lay[mode] for lay in layers]), occ.elevations, tx, mode)
        for mode in (Mode.COHERENT, Mode.TIME_AVERAGED)
    }


def simulate_volume(hm: HeightMap, occ: OccupancyVolume, tx: TxSpec,
                    cfg: RayConfig = RayConfig(), workers: int = 1) -> PowerVolume:
    """One traced layer per occupancy elevation, in ``cfg.mode``."""
    return simulate_volume_modes(hm, occ, tx, cfg, workers)[Mode(cfg.mode)]


def total_variation(values: np.ndarray, mask: np.ndarray) -> float:
    """Sum of absolute differences between 4-neighbours that both lie in ``mask``."""
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    horiz = m[:, 1:] & m[:, :-1]
    vert = m[1:, :] & m[:-1, :]
    return float(np.abs(np.diff(v, axis=1))[horiz].sum() + np.abs(np.diff(v, axis=0))[vert].sum())


def with_mode(cfg: RayConfig, mode: Mode) -> RayConfig:
    return replace(cfg, mode=Mode(mode))
