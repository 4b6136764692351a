"""Command-line front end, heatmap rendering and the prediction benchmark.

Every subcommand reads an optional ``key=value`` config file (``--config``)
and then applies its own flags on top. Exit codes: 0 success, 1 runtime
failure, 2 usage error. Failures print one line to stderr of the form
``error<TAB>kind<TAB>message``.
"""

from __future__ import annotations

import argparse
import io
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .errors import RfcovError, ShapeError, ValidationError
from .formats import (
    _atomic_write,
    heightmap_to_rfg,
    load_checkpoint,
    power_to_rfg,
    read_rfg,
    rfg_to_heightmap,
    rfg_to_power,
    save_checkpoint,
    write_rfg,
)
from .pipeline import (
    TrainConfig,
    build_dataset,
    evaluate_model,
    load_manifest,
    save_manifest,
    split_by_region,
    train_model,
)
from .raysim import Mode, PowerMap, PowerVolume, RayConfig, simulate_volume
from .scenegen import (
    DEFAULT_ELEVATIONS,
    DEFAULT_FREQUENCY,
    OccupancyVolume,
    Rng,
    SceneSpec,
    TxPolicy,
    TxSpec,
    generate_scene,
    slice_layers,
)
from .unet import Model, NormSpec, PredictMode, UNetConfig, build_model, predict_layer, predict_volume

log = logging.getLogger(__name__)

BUILDING_RGB = (128, 128, 128)
# piecewise-linear stops over the normalized power range [0, 1]
RAMP = ((0.0, (0, 0, 255)), (0.5, (255, 255, 0)), (1.0, (255, 0, 0)))


class UsageError(Exception):
    pass


# rendering ----------------------------------------------------------------

def ramp_colors(values: np.ndarray, norm: NormSpec = NormSpec()) -> np.ndarray:
    """Map dBm values to uint8 RGB through the blue -> yellow -> red ramp."""
    t = (np.clip(np.asarray(values, dtype=np.float64), norm.floor, norm.ceiling) - norm.floor) / (
        norm.ceiling - norm.floor
    )
    stops = np.array([s for s, _ in RAMP])
    rgb = np.stack([np.interp(t, stops, [c[i] for _, c in RAMP]) for i in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def render_heatmap(power: PowerMap, mask: np.ndarray | None, out: str | Path,
                   norm: NormSpec = NormSpec()) -> None:
    """Write ``power`` as a PNG; pixels where ``mask`` is set are drawn gray."""
    values = np.asarray(power.values)
    rgb = ramp_colors(values, norm)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ShapeError(f"mask {mask.shape} does not match power map {values.shape}")
        rgb[mask] = BUILDING_RGB
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    _atomic_write(out, buf.getvalue())


# benchmark ----------------------------------------------------------------

@dataclass
class TimingStats:
    median: float
    p90: float

    @classmethod
    def of(cls, samples: Sequence[float]) -> TimingStats:
        s = np.asarray(samples, dtype=np.float64)
        return cls(float(np.median(s)), float(np.percentile(s, 90)))


@dataclass
class BenchReport:
    to2d_single: TimingStats
    to2d_all: TimingStats
    to3d_all: TimingStats
    reps: int
    warmup: int

    @property
    def ratio(self) -> float:
        return self.to2d_all.median / self.to3d_all.median

    def lines(self) -> list[str]:
        out = []
        for name in ("to2d_single", "to2d_all", "to3d_all"):
            st = getattr(self, name)
            out.append(f"{name}_median_s={st.median:.6f}")
            out.append(f"{name}_p90_s={st.p90:.6f}")
        out.append(f"ratio={self.ratio:.4f}")
        out.append(f"reps={self.reps}")
        return out


def bench_predict(model_2d: Model, model_3d: Model, occ: OccupancyVolume, tx: TxSpec,
                  reps: int = 50, warmup: int = 5) -> BenchReport:
    """Time one To2D layer, five To2D layers and one To3D volume on the same input.

    Runs with BLAS pinned to one thread. Warm-up repetitions are discarded.
    """
    if reps < 10:
        raise ValidationError(f"reps must be >= 10, got {reps}")
    if warmup < 5:
        raise ValidationError(f"warmup must be >= 5, got {warmup}")
    if model_2d.config.mode is not PredictMode.TO_2D or model_3d.config.mode is not PredictMode.TO_3D:
        raise ValidationError("bench needs a To2D model and a To3D model")
    s2, s3 = model_2d.config.input_size, model_3d.config.input_size
    if s2 != s3 or model_2d.config.layers != model_3d.config.layers:
        raise ShapeError(f"model inputs differ: To2D {s2}px, To3D {s3}px")
    elevations = occ.elevations

    def single():
        predict_layer(model_2d, occ, tx, elevations[0])

    def all_2d():
        for e in elevations:
            predict_layer(model_2d, occ, tx, e)

    def all_3d():
        predict_volume(model_3d, occ, tx)

    def timed(fn: Callable[[], None]) -> list[float]:
        for _ in range(warmup):
            fn()
        out = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
        return out

    with threadpool_limits(limits=1):
        t_single, t_2d, t_3d = timed(single), timed(all_2d), timed(all_3d)
    return BenchReport(TimingStats.of(t_single), TimingStats.of(t_2d), TimingStats.of(t_3d), reps, warmup)


# config handling ----------------------------------------------------------

def _tx_triple(text: str) -> tuple[int, int, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError("expected x,y,height")
    return int(parts[0]), int(parts[1]), float(parts[2])


def _float_list(text: str) -> tuple[float, ...]:
    vals = tuple(float(p) for p in text.split(",") if p.strip())
    if not vals:
        raise ValueError("expected a comma-separated list")
    return vals


def _choice(*options: str) -> Callable[[str], str]:
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return conv


@dataclass(frozen=True)
class Key:
    name: str
    conv: Callable[[str], object]
    default: object = None
    help: str = ""
    required: bool = False


_MODES = _choice("coherent", "time_averaged")
_SCENE_KEYS = [
    Key("width", int, 64, "grid width in pixels"),
    Key("height", int, 64, "grid height in pixels"),
    Key("resolution", float, 1.0, "meters per pixel"),
    Key("density", float, 0.3, "building footprint fraction upper bound"),
    Key("min_side", float, 4.0, "smallest building side, m"),
    Key("max_side", float, 16.0, "largest building side, m"),
    Key("max_height", float, 20.0, "tallest building, m"),
]
_RAY_KEYS = [
    Key("mode", _MODES, "time_averaged", "coherent or time_averaged"),
    Key("n_rays", int, 2048, "rays launched per layer"),
    Key("max_bounces", int, 3, "reflections per ray"),
    Key("reflection_coeff", float, 0.5, "amplitude factor per bounce"),
    Key("max_range", float, float("inf"), "ray length limit, m"),
    Key("elevations", _float_list, DEFAULT_ELEVATIONS, "receiver layer heights, m"),
    Key("workers", int, 1, "threads"),
]

COMMANDS: dict[str, tuple[str, list[Key]]] = {
    "scene": ("generate a synthetic heightmap", [
        Key("out", Path, required=True, help="output .rfg"),
        Key("seed", int, 0, "scene seed"),
        *_SCENE_KEYS,
    ]),
    "simulate": ("ray-trace a power volume for one transmitter", [
        Key("scene", Path, required=True, help="heightmap .rfg"),
        Key("tx", _tx_triple, required=True, help="transmitter x,y,height"),
        Key("power", float, 0.0, "transmit power, dBm"),
        Key("frequency", float, DEFAULT_FREQUENCY, "carrier, Hz"),
        Key("out", Path, required=True, help="output .rfg"),
        *_RAY_KEYS,
    ]),
    "dataset": ("build a simulated dataset directory", [
        Key("out", Path, required=True, help="output directory"),
        Key("n_scenes", int, 200, "number of scenes"),
        Key("seed", int, 0, "master seed"),
        *_SCENE_KEYS,
        *_RAY_KEYS,
    ]),
    "split": ("assign train/test regions in a manifest", [
        Key("manifest", Path, required=True, help="dataset directory or manifest file"),
        Key("boundary", float, 0.8, "master-map x boundary"),
    ]),
    "train": ("train a UNet on a dataset", [
        Key("manifest", Path, required=True, help="dataset directory or manifest file"),
        Key("out", Path, required=True, help="output checkpoint"),
        Key("model_mode", _choice("to2d", "to3d"), "to3d", "to2d or to3d"),
        Key("depth", int, 3, "encoder stages"),
        Key("base_channels", int, 16, "width of the first stage"),
        Key("epochs", int, 20, "passes over the training region"),
        Key("batch_size", int, 16, "samples per step"),
        Key("learning_rate", float, 2e-3, "Adam step size"),
        Key("lr_schedule", _choice("cosine", "constant"), "cosine", "cosine or constant"),
        Key("augment", _choice("on", "off"), "off", "random rotations and mirrors of each batch"),
        Key("seed", int, 0, "init and shuffle seed"),
        Key("region", _choice("train", "test", "all"), "train", "manifest region to use"),
    ]),
    "predict": ("predict a power map or volume", [
        Key("model", Path, required=True, help="checkpoint"),
        Key("scene", Path, required=True, help="heightmap .rfg"),
        Key("tx", _tx_triple, required=True, help="transmitter x,y,height"),
        Key("power", float, 0.0, "transmit power, dBm"),
        Key("elevation", float, None, "target layer (To2D only)"),
        Key("elevations", _float_list, DEFAULT_ELEVATIONS, "receiver layer heights, m"),
        Key("out", Path, required=True, help="output .rfg"),
    ]),
    "eval": ("score a model against a dataset region", [
        Key("model", Path, required=True, help="checkpoint"),
        Key("manifest", Path, required=True, help="dataset directory or manifest file"),
        Key("region", _choice("train", "test", "all"), "test", "manifest region to use"),
        Key("bin_width", float, 1.0, "histogram bin width, dB"),
    ]),
    "bench": ("time To2D layer-by-layer against To3D volume prediction", [
        Key("model", Path, None, "checkpoint of either mode"),
        Key("model_2d", Path, None, "To2D checkpoint"),
        Key("model_3d", Path, None, "To3D checkpoint"),
        Key("reps", int, 50, "timed repetitions"),
        Key("warmup", int, 5, "discarded repetitions"),
        Key("seed", int, 0, "scene seed for the benchmark input"),
    ]),
    "render": ("render one layer of a power file as PNG", [
        Key("power", Path, required=True, help="power .rfg"),
        Key("scene", Path, None, "heightmap .rfg for the building mask"),
        Key("layer", int, 0, "layer index"),
        Key("out", Path, required=True, help="output .png"),
    ]),
}


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, object]:
    """Defaults, then config file, then flags."""
    keys = {k.name: k for k in COMMANDS[command][1]}
    raw = read_config(ns.config) if ns.config else {}
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for name in keys:
        flag = getattr(ns, name)
        if flag is not None:
            raw[name] = flag
    out = {}
    for name, key in keys.items():
        if name not in raw:
            if key.required:
                raise UsageError(f"missing required key {name!r}")
            out[name] = key.default
            continue
        try:
            out[name] = key.conv(raw[name])
        except ValueError as exc:
            raise UsageError(f"bad value for {name!r}: {raw[name]!r} ({exc})") from None
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> _Parser:
    parser = _Parser(prog="rfcov", description="Synthetic RF coverage scenes, simulation and UNet prediction.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (desc, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="key=value config file")
        for key in keys:
            req = " (required)" if key.required else f" (default {key.default})"
            p.add_argument("--" + key.name.replace("_", "-"), dest=key.name, help=key.help + req)
    return parser


# commands ----------------------------------------------------------------

def _scene_spec(o: dict, seed: int = 0) -> SceneSpec:
    return SceneSpec(o["width"], o["height"], o["resolution"], seed, o["density"],
                     o["min_side"], o["max_side"], o["max_height"])


def _ray_cfg(o: dict) -> RayConfig:
    return RayConfig(n_rays=o["n_rays"], max_bounces=o["max_bounces"], reflection_coeff=o["reflection_coeff"],
                     mode=Mode(o["mode"]), max_range=o["max_range"])


def _region(manifest, name):
    return manifest if name == "all" else manifest.region(name)


def cmd_scene(o: dict) -> list[str]:
    hm = generate_scene(_scene_spec(o, o["seed"]))
    write_rfg(o["out"], heightmap_to_rfg(hm))
    return [f"wrote={o['out']}", f"footprint={np.count_nonzero(hm.heights) / hm.heights.size:.4f}"]


def cmd_simulate(o: dict) -> list[str]:
    hm = rfg_to_heightmap(read_rfg(o["scene"]))
    x, y, h = o["tx"]
    tx = TxSpec(x, y, h, o["power"], o["frequency"])
    occ = slice_layers(hm, o["elevations"])
    vol = simulate_volume(hm, occ, tx, _ray_cfg(o), workers=o["workers"])
    write_rfg(o["out"], power_to_rfg(vol, hm.resolution))
    return [f"wrote={o['out']}", f"max_dbm={float(vol.values.max()):.3f}"]


def cmd_dataset(o: dict) -> list[str]:
    m = build_dataset(o["n_scenes"], _scene_spec(o), _ray_cfg(o), o["out"], o["elevations"],
                      seed=o["seed"], workers=o["workers"])
    return [f"samples={len(m)}", f"skipped={m.skipped}", f"root={m.root}"]


def cmd_split(o: dict) -> list[str]:
    m = split_by_region(load_manifest(o["manifest"]), o["boundary"])
    save_manifest(m)
    return [f"train={len(m.region('train'))}", f"test={len(m.region('test'))}"]


def cmd_train(o: dict) -> list[str]:
    manifest = load_manifest(o["manifest"])
    data = _region(manifest, o["region"])
    cfg = UNetConfig(PredictMode(o["model_mode"]), o["depth"], o["base_channels"],
                     _input_size(data), len(manifest.elevations))
    model = build_model(cfg, o["seed"])
    tcfg = TrainConfig(o["epochs"], o["batch_size"], o["learning_rate"], o["seed"], manifest.mode,
                       o["lr_schedule"], o["augment"] == "on")
    t0 = time.perf_counter()
    _, history = train_model(model, data, tcfg)
    save_checkpoint(o["out"], model)
    return [f"wrote={o['out']}", f"final_loss={history[-1]:.6f}", f"train_s={time.perf_counter() - t0:.1f}"]


def _input_size(manifest) -> int:
    if not len(manifest):
        raise ValidationError("manifest region is empty")
    hm = rfg_to_heightmap(read_rfg(manifest.root / manifest.records[0].scene))
    if hm.width_px != hm.height_px:
        raise ValidationError(f"UNet needs square scenes, got {hm.width_px}x{hm.height_px}")
    return hm.width_px


def cmd_predict(o: dict) -> list[str]:
    model = load_checkpoint(o["model"])
    hm = rfg_to_heightmap(read_rfg(o["scene"]))
    x, y, h = o["tx"]
    tx = TxSpec(x, y, h, o["power"])
    occ = slice_layers(hm, o["elevations"])
    if model.config.mode is PredictMode.TO_2D:
        if o["elevation"] is None:
            raise UsageError("a To2D model needs --elevation")
        pm = predict_layer(model, occ, tx, o["elevation"])
        vol = PowerVolume(pm.values[None], (pm.elevation,), tx, Mode.PREDICTION)
    else:
        if o["elevation"] is not None:
            raise UsageError("a To3D model predicts every layer; drop --elevation")
        vol = predict_volume(model, occ, tx)
    if tx.power:
        # models are trained on 0 dBm transmitters; power shifts outdoor pixels linearly
        floor = NormSpec().floor
        shifted = np.where(vol.values > floor, np.maximum(vol.values + np.float32(tx.power), floor), floor)
        vol = PowerVolume(shifted.astype(np.float32), vol.elevations, tx, vol.mode)
    write_rfg(o["out"], power_to_rfg(vol, hm.resolution))
    return [f"wrote={o['out']}", f"layers={vol.layers}"]


def cmd_eval(o: dict) -> list[str]:
    model = load_checkpoint(o["model"])
    report = evaluate_model(model, _region(load_manifest(o["manifest"]), o["region"]), bin_width=o["bin_width"])
    return report.lines()


def cmd_bench(o: dict) -> list[str]:
    given = [load_checkpoint(p) for p in (o["model"], o["model_2d"], o["model_3d"]) if p is not None]
    by_mode = {m.config.mode: m for m in given}
    if not by_mode:
        raise UsageError("bench needs --model, --model-2d or --model-3d")
    ref = given[0].config
    for mode in PredictMode:
        if mode not in by_mode:
            cfg = UNetConfig(mode, ref.depth, ref.base_channels, ref.input_size, ref.layers)
            by_mode[mode] = build_model(cfg, o["seed"])
    s = ref.input_size
    hm = generate_scene(SceneSpec(width_px=s, height_px=s, seed=o["seed"]))
    # default layer spacing, extended past five layers if the model has more
    occ = slice_layers(hm, tuple(2.0 + 4.0 * k for k in range(ref.layers)))
    tx = TxPolicy().draw(hm, Rng(o["seed"]))
    report = bench_predict(by_mode[PredictMode.TO_2D], by_mode[PredictMode.TO_3D], occ, tx,
                           o["reps"], o["warmup"])
    return report.lines()


def cmd_render(o: dict) -> list[str]:
    vol = rfg_to_power(read_rfg(o["power"]))
    k = o["layer"]
    if not 0 <= k < vol.layers:
        raise ValidationError(f"layer {k} outside 0..{vol.layers - 1}")
    mask = None
    if o["scene"] is not None:
        hm = rfg_to_heightmap(read_rfg(o["scene"]))
        mask = slice_layers(hm, vol.elevations).planes[k] != 0
    render_heatmap(vol.layer(k), mask, o["out"])
    return [f"wrote={o['out']}"]


HANDLERS = {
    "scene": cmd_scene,
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "split": cmd_split,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "render": cmd_render,
}


def _fail(kind: str, message: str) -> None:
    print(f"error\t{kind}\t{' '.join(str(message).split())}", file=sys.stderr)


def dispatch(argv: Sequence[str]) -> int:
    parser = make_parser()
    argv = list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        _fail("usage", "no subcommand given")
        return 2
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("no subcommand given")
        opts = resolve(ns.command, ns)
    except UsageError as exc:
        sub = argv[0] if argv[0] in COMMANDS else None
        if sub:
            parser._subparsers._group_actions[0].choices[sub].print_help(sys.stderr)
        else:
            parser.print_usage(sys.stderr)
        _fail("usage", exc)
        return 2
    try:
        for line in HANDLERS[ns.command](opts):
            print(line)
    except UsageError as exc:
        _fail("usage", exc)
        return 2
    except (RfcovError, OSError, ValueError) as exc:
        _fail(type(exc).__name__, exc)
        return 1
    return 0


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
