"""Dataset construction, region split, training and evaluation."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .errors import PlacementError, SplitError, ValidationError
from .formats import (
    _atomic_write,
    heightmap_to_rfg,
    power_to_rfg,
    read_rfg,
    rfg_to_heightmap,
    rfg_to_power,
    write_rfg,
)
from .raysim import FLOOR_DBM, Mode, RayConfig, simulate_volume
from .scenegen import (
    DEFAULT_ELEVATIONS,
    OccupancyVolume,
    Rng,
    SceneSpec,
    TxPolicy,
    TxSpec,
    generate_scene,
    slice_layers,
)
from .unet import (
    HEIGHT_SCALE,
    Direction,
    Model,
    NormSpec,
    PredictMode,
    encode_input,
    normalize_power,
    predict_layer,
    predict_volume,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = "# rfcov dataset manifest v1"
COLUMNS = (
    "sample_id", "scene", "power", "tx_x", "tx_y", "tx_height", "tx_power",
    "frequency", "master_x", "master_y", "region",
)
REGIONS = ("train", "test")


@dataclass(frozen=True)
class Record:
    sample_id: str
    scene: str
    power: str
    tx: TxSpec
    master_x: float
    master_y: float
    region: str | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path
    elevations: tuple[float, ...] = DEFAULT_ELEVATIONS
    mode: Mode = Mode.TIME_AVERAGED
    skipped: int = 0

    def region(self, name: str) -> DatasetManifest:
        return replace(self, records=[r for r in self.records if r.region == name])

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate sample_ids in manifest")
        for r in self.records:
            if r.region not in (None, *REGIONS):
                raise ValidationError(f"sample {r.sample_id} has unknown region {r.region!r}")
            for rel in (r.scene, r.power):
                if not (self.root / rel).is_file():
                    raise ValidationError(f"sample {r.sample_id} references missing file {rel}")


def _fmt(v: float) -> str:
    return repr(float(v))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike | None = None) -> Path:
    """Write the tab-separated manifest atomically; returns its path."""
    path = Path(path) if path is not None else manifest.root / MANIFEST_NAME
    lines = [
        MANIFEST_HEADER,
        "# elevations\t" + ",".join(_fmt(e) for e in manifest.elevations),
        f"# mode\t{Mode(manifest.mode).value}",
        f"# skipped\t{manifest.skipped}",
        "# " + "\t".join(COLUMNS),
    ]
    for r in manifest.records:
        t = r.tx
        lines.append("\t".join([
            r.sample_id, r.scene, r.power, str(t.x_px), str(t.y_px), _fmt(t.height),
            _fmt(t.power), _fmt(t.frequency), _fmt(r.master_x), _fmt(r.master_y), r.region or "-",
        ]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    meta: dict[str, str] = {}
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if len(parts) == 2:
                meta[parts[0]] = parts[1]
            continue
        f = line.split("\t")
        if len(f) != len(COLUMNS):
            raise ValidationError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(f)}")
        tx = TxSpec(int(f[3]), int(f[4]), float(f[5]), float(f[6]), float(f[7]))
        records.append(Record(f[0], f[1], f[2], tx, float(f[8]), float(f[9]), None if f[10] == "-" else f[10]))
    manifest = DatasetManifest(
        records=records,
        root=path.parent,
        elevations=tuple(float(v) for v in meta.get("elevations", "").split(",") if v)
        or DEFAULT_ELEVATIONS,
        mode=Mode(meta.get("mode", Mode.TIME_AVERAGED.value)),
        skipped=int(meta.get("skipped", 0)),
    )
    if check_files:
        manifest.validate()
    return manifest


def build_dataset(
    n_scenes: int,
    scene_spec: SceneSpec,
    ray_cfg: RayConfig,
    out_dir: str | os.PathLike,
    layer_elevations: Sequence[float] = DEFAULT_ELEVATIONS,
    tx_policy: TxPolicy = TxPolicy(),
    seed: int = 0,
    workers: int = 1,
) -> DatasetManifest:
    """Generate, slice, place a transmitter, simulate and persist ``n_scenes`` scenes.

    Every scene gets its own seeds and a point on a unit master map, all drawn
    up front from ``seed`` so the output does not depend on ``workers``. The
    manifest is written last; a directory without one is an incomplete build.
    """
    if n_scenes < 2:
        raise ValidationError(f"n_scenes must be >= 2, got {n_scenes}")
    scene_spec.validate()
    ray_cfg.validate()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "power").mkdir(parents=True, exist_ok=True)
    elevations = tuple(float(e) for e in layer_elevations)

    master = Rng(seed)
    plans = []
    for i in range(n_scenes):
        plans.append((i, master.next_u64(), master.next_u64(), master.uniform(), master.uniform()))

    def one(plan):
        i, scene_seed, tx_seed, mx, my = plan
        hm = generate_scene(replace(scene_spec, seed=scene_seed))
        try:
            tx = tx_policy.draw(hm, Rng(tx_seed))
        except PlacementError as exc:
            log.warning("scene %d skipped: %s", i, exc)
            return None
        occ = slice_layers(hm, elevations)
        vol = simulate_volume(hm, occ, tx, ray_cfg)
        sid = f"s{i:05d}"
        scene_rel = f"scenes/{sid}.rfg"
        power_rel = f"power/{sid}.rfg"
        write_rfg(out / scene_rel, heightmap_to_rfg(hm, tx.frequency))
        write_rfg(out / power_rel, power_to_rfg(vol, hm.resolution))
        return Record(sid, scene_rel, power_rel, tx, mx, my)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, plans))
    else:
        results = [one(p) for p in plans]
    records = [r for r in results if r is not None]
    manifest = DatasetManifest(records, out, elevations, Mode(ray_cfg.mode), n_scenes - len(records))
    save_manifest(manifest)
    return manifest


def split_by_region(manifest: DatasetManifest, boundary: float = 0.8) -> DatasetManifest:
    """Scenes west of ``boundary`` on the master map train; the rest test."""
    if not 0 < boundary < 1:
        raise ValidationError(f"boundary must lie in (0, 1), got {boundary}")
    records = [replace(r, region="train" if r.master_x < boundary else "test") for r in manifest.records]
    counts = {name: sum(r.region == name for r in records) for name in REGIONS}
    for name, count in counts.items():
        if count == 0:
            raise SplitError(f"boundary {boundary} leaves the {name} region empty")
    return replace(manifest, records=records)


@dataclass
class Arrays:
    """A manifest region loaded into memory."""

    occupancy: np.ndarray  # (N, L, H, W) uint8
    power: np.ndarray  # (N, L, H, W) float32 dBm
    txs: list[TxSpec]
    elevations: tuple[float, ...]
    sample_ids: list[str]
    mode: Mode

    def __len__(self) -> int:
        return len(self.txs)


def load_arrays(manifest: DatasetManifest) -> Arrays:
    occ, power, txs, ids = [], [], [], []
    mode = None
    for r in manifest.records:
        hm = rfg_to_heightmap(read_rfg(manifest.root / r.scene))
        vol = rfg_to_power(read_rfg(manifest.root / r.power))
        if vol.elevations != tuple(manifest.elevations):
            raise ValidationError(f"sample {r.sample_id}: power elevations {vol.elevations} != manifest")
        mode = vol.mode if mode is None else mode
        if vol.mode is not mode:
            raise ValidationError("manifest mixes power modes")
        occ.append(slice_layers(hm, manifest.elevations).planes)
        power.append(vol.values)
        txs.append(r.tx)
        ids.append(r.sample_id)
    if not txs:
        raise ValidationError("manifest selects no samples")
    return Arrays(np.stack(occ), np.stack(power), txs, tuple(manifest.elevations), ids, mode)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    target_mode: Mode = Mode.TIME_AVERAGED
    lr_schedule: str = "cosine"  # or "constant"
    augment: bool = False  # random rotation/mirror of each batch
    norm: NormSpec = field(default_factory=NormSpec)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")


def _base_inputs(data: Arrays) -> np.ndarray:
    """To3D encodings for all samples; To2D appends the elevation plane per item."""
    return np.concatenate([
        encode_input(OccupancyVolume(data.elevations, data.occupancy[i]), data.txs[i], PredictMode.TO_3D)
        for i in range(len(data))
    ])


def _dihedral(k: int, *arrays: np.ndarray) -> list[np.ndarray]:
    """One of the eight square symmetries, applied to the trailing two axes."""
    out = [np.rot90(a, k % 4, axes=(-2, -1)) for a in arrays]
    if k >= 4:
        out = [a[..., ::-1] for a in out]
    return [np.ascontiguousarray(a) for a in out]


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * (0.02 + 0.98 * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1))))


def train_model(model: Model, data: DatasetManifest | Arrays, cfg: TrainConfig,
                progress: bool = False) -> tuple[Model, list[float]]:
    """Mini-batch Adam on masked MSE of normalized power; updates ``model`` in place.

    To2D items pick one target layer uniformly at random; To3D items use the
    whole volume. The mask drops in-building pixels. Returns the model and the
    mean training loss of every epoch.
    """
    cfg.validate()
    if isinstance(data, DatasetManifest):
        if not len(data):
            raise ValidationError("training manifest is empty")
        data = load_arrays(data)
    if data.mode is not Mode(cfg.target_mode):
        raise ValidationError(f"dataset holds {data.mode.value} targets, config asks for {Mode(cfg.target_mode).value}")
    mc = model.config
    n, layers, h, w = data.power.shape
    if layers != mc.layers or (h, w) != (mc.input_size, mc.input_size):
        raise ValidationError(f"dataset volumes {data.power.shape[1:]} do not fit model config {mc}")

    dtype = next(iter(model.params.values())).dtype
    base = _base_inputs(data).astype(dtype)
    targets = normalize_power(data.power, cfg.norm, Direction.TO_UNIT).astype(dtype)
    free = data.occupancy == 0
    elev_planes = np.asarray(data.elevations, dtype=dtype) / HEIGHT_SCALE
    params = model.parameters()
    state = tc.OptimState(lr=cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        t0 = time.perf_counter()
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if mc.mode is PredictMode.TO_2D:
                k = rng.integers(0, layers, size=len(idx))
                x = np.empty((len(idx), mc.in_channels, h, w), dtype=dtype)
                x[:, :-1] = base[idx]
                x[:, -1] = elev_planes[k][:, None, None]
                y = targets[idx, k][:, None]
                m = free[idx, k][:, None]
            else:
                x, y, m = base[idx], targets[idx], free[idx]
            if not m.any():
                continue
            if cfg.augment:
                x, y, m = _dihedral(int(rng.integers(0, 8)), x, y, m)
            for p in params:
                p.grad = None
            loss = tc.masked_mse_loss(model.forward(tc.Tensor(x)), y, m)
            loss.backward()
            state.lr = _lr_at(cfg, step, total)
            tc.adam_step(params, [p.grad for p in params], state)
            losses.append(float(loss.data))
            step += 1
        history.append(float(np.mean(losses)) if losses else math.nan)
        msg = "epoch %d/%d loss %.6f (%.1fs)"
        args = (epoch + 1, cfg.epochs, history[-1], time.perf_counter() - t0)
        if progress:
            print(msg % args, flush=True)
        log.info(msg, *args)
    for p in params:
        p.grad = None
    return model, history


def histogram_overlap(pred, truth, bin_width: float = 1.0,
                      low: float = FLOOR_DBM, high: float = -40.0) -> float:
    """Sum over bins of the smaller unit-mass histogram height, in [0, 1].

    Values outside ``[low, high]`` are clipped into the end bins.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0 or t.size == 0:
        raise ValidationError("histogram_overlap needs non-empty inputs")
    if not bin_width > 0 or not high > low:
        raise ValidationError("need bin_width > 0 and high > low")
    nbins = max(1, int(math.ceil((high - low) / bin_width - 1e-9)))
    edges = low + bin_width * np.arange(nbins + 1)
    hp, _ = np.histogram(np.clip(p, low, edges[-1]), bins=edges)
    ht, _ = np.histogram(np.clip(t, low, edges[-1]), bins=edges)
    return float(np.minimum(hp / p.size, ht / t.size).sum())


@dataclass
class EvalReport:
    mae: float
    per_layer_mae: list[float]
    overlap: float
    samples: int
    timing: dict[str, float] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [
            f"samples={self.samples}",
            f"mae_db={self.mae:.4f}",
            "per_layer_mae_db=" + ",".join(f"{v:.4f}" for v in self.per_layer_mae),
            f"histogram_overlap={self.overlap:.4f}",
        ]
        out += [f"{k}={v:.6f}" for k, v in self.timing.items()]
        return out


def score_predictions(preds: np.ndarray, truths: np.ndarray, free: np.ndarray,
                      bin_width: float = 1.0, norm: NormSpec = NormSpec()) -> EvalReport:
    """Masked MAE (pooled and per layer) and histogram overlap over ``(N, L, H, W)`` grids."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    free = np.asarray(free, dtype=bool)
    if not free.any():
        raise ValidationError("evaluation mask selects no pixels")
    err = np.abs(preds - truths)
    per_layer = [
        float(err[:, k][free[:, k]].mean()) if free[:, k].any() else math.nan
        for k in range(preds.shape[1])
    ]
    overlap = histogram_overlap(preds[free], truths[free], bin_width, norm.floor, norm.ceiling)
    return EvalReport(float(err[free].mean()), per_layer, overlap, preds.shape[0])


def evaluate_model(model: Model, data: DatasetManifest | Arrays, norm: NormSpec = NormSpec(),
                   bin_width: float = 1.0) -> EvalReport:
    """Predict every sample and score against the simulator outside buildings.

    To2D models are called once per layer; To3D once per volume. Timing
    entries are per call.
    """
    if isinstance(data, DatasetManifest):
        if not len(data):
            raise ValidationError("test manifest is empty")
        data = load_arrays(data)
    preds = np.empty_like(data.power)
    times = []
    for i in range(len(data)):
        occ = OccupancyVolume(data.elevations, data.occupancy[i])
        if model.config.mode is PredictMode.TO_2D:
            for k, elev in enumerate(data.elevations):
                t0 = time.perf_counter()
                preds[i, k] = predict_layer(model, occ, data.txs[i], elev, norm).values
                times.append(time.perf_counter() - t0)
        else:
            t0 = time.perf_counter()
            preds[i] = predict_volume(model, occ, data.txs[i], norm).values
            times.append(time.perf_counter() - t0)
    report = score_predictions(preds, data.power, data.occupancy == 0, bin_width, norm)
    t = np.asarray(times)
    report.timing = {
        "predict_median_s": float(np.median(t)),
        "predict_p90_s": float(np.percentile(t, 90)),
        "predict_mean_s": float(t.mean()),
    }
    return report
