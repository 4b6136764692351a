import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfcov import tensorcore as tc
from rfcov.errors import SplitError, ValidationError
from rfcov.formats import read_rfg, rfg_to_power
from rfcov.pipeline import (
    MANIFEST_NAME,
    TrainConfig,
    build_dataset,
    evaluate_model,
    histogram_overlap,
    load_arrays,
    load_manifest,
    save_manifest,
    score_predictions,
    split_by_region,
    train_model,
)
from rfcov.pipeline import _dihedral
from rfcov.raysim import Mode, RayConfig, friis_fspl
from rfcov.scenegen import SceneSpec, TxPolicy
from rfcov.unet import Direction, Model, NormSpec, PredictMode, UNetConfig, build_model, normalize_power

FAST = RayConfig(n_rays=256)


def small_dataset(path, n=6, size=32, density=0.3, seed=0, mode=Mode.TIME_AVERAGED, workers=1):
    spec = SceneSpec(width_px=size, height_px=size, building_density=density)
    return build_dataset(n, spec, RayConfig(n_rays=256, mode=mode), path, seed=seed, workers=workers)


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    m = small_dataset(root, n=10)
    return split_by_region(m, 0.5)


def test_empty_scenes_give_friis_fields(tmp_path):
    m = small_dataset(tmp_path, n=2, size=24, density=0.0)
    assert len(m) == 2
    for r in m.records:
        vol = rfg_to_power(read_rfg(m.root / r.power))
        ys, xs = np.mgrid[0:24, 0:24]
        for k, e in enumerate(vol.elevations):
            d = np.sqrt((xs - r.tx.x_px) ** 2 + (ys - r.tx.y_px) ** 2 + (r.tx.height - e) ** 2)
            expected = np.vectorize(lambda v: -friis_fspl(v, r.tx.frequency))(d)
            np.testing.assert_allclose(vol.values[k], expected, atol=0.05)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_is_deterministic_and_worker_independent(tmp_path):
    a = small_dataset(tmp_path / "a", n=5, seed=3)
    b = small_dataset(tmp_path / "b", n=5, seed=3, workers=3)
    assert _tree_bytes(a.root) == _tree_bytes(b.root)
    c = small_dataset(tmp_path / "c", n=5, seed=4)
    assert _tree_bytes(a.root) != _tree_bytes(c.root)


def test_manifest_written_last_and_round_trips(ds, tmp_path):
    again = load_manifest(ds.root)
    assert again.records == load_manifest(ds.root / MANIFEST_NAME).records
    path = save_manifest(ds, tmp_path / "copy.tsv")
    text = path.read_text()
    assert text.startswith("#")
    assert all(len(line.split("\t")) == 11 for line in text.splitlines() if not line.startswith("#"))
    reread = load_manifest(path, check_files=False)
    assert reread.records == ds.records
    assert reread.elevations == ds.elevations and reread.mode is ds.mode


def test_manifest_detects_missing_file(tmp_path):
    m = small_dataset(tmp_path, n=2, size=16)
    (m.root / m.records[0].power).unlink()
    with pytest.raises(ValidationError, match="missing"):
        load_manifest(tmp_path)


def test_unsatisfiable_scenes_are_skipped(tmp_path):
    spec = SceneSpec(width_px=16, height_px=16, building_density=0.6, min_building_side=3.0,
                     max_building_side=5.0, max_building_height=20.0)
    m = build_dataset(6, spec, FAST, tmp_path, tx_policy=TxPolicy(height_range=(12.0, 12.0), max_retries=1),
                      seed=0)
    assert m.skipped + len(m) == 6
    assert load_manifest(tmp_path).skipped == m.skipped


def test_build_rejects_tiny_request(tmp_path):
    with pytest.raises(ValidationError):
        small_dataset(tmp_path, n=1)


def test_split_hundred_scenes(tmp_path):
    m = small_dataset(tmp_path, n=100, size=16)
    s = split_by_region(m, 0.8)
    train, test = s.region("train"), s.region("test")
    assert 70 <= len(train) <= 90
    assert len(train) + len(test) == len(s)
    assert not {r.sample_id for r in train.records} & {r.sample_id for r in test.records}
    assert not {(r.master_x, r.master_y) for r in train.records} & {
        (r.master_x, r.master_y) for r in test.records
    }
    assert all(r.master_x < 0.8 for r in train.records)
    assert split_by_region(s, 0.8).records == s.records


def test_split_errors(ds):
    lo = min(r.master_x for r in ds.records)
    hi = max(r.master_x for r in ds.records)
    with pytest.raises(SplitError):
        split_by_region(ds, min(0.999, hi + 1e-9))
    with pytest.raises(SplitError):
        split_by_region(ds, max(1e-6, lo - 1e-9) if lo > 1e-6 else 1e-9)
    with pytest.raises(ValidationError):
        split_by_region(ds, 1.0)


def test_histogram_overlap_examples():
    a = np.arange(10) + 0.5 - 127
    assert histogram_overlap(a, a) == 1.0
    assert histogram_overlap(a, a + 40) == 0.0
    assert histogram_overlap(a, a + 1.0) == pytest.approx(0.9)
    with pytest.raises(ValidationError):
        histogram_overlap([], a)
    with pytest.raises(ValidationError):
        histogram_overlap(a, a, bin_width=0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(1, 200), m=st.integers(1, 200))
def test_histogram_overlap_symmetric_and_bounded(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-140, -30, n), rng.uniform(-140, -30, m)
    ab, ba = histogram_overlap(a, b), histogram_overlap(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert -1e-12 <= ab <= 1 + 1e-12


def test_score_predictions_oracle_and_offset():
    rng = np.random.default_rng(0)
    truth = rng.uniform(-120, -50, (3, 5, 8, 8))
    free = rng.random(truth.shape) < 0.7
    exact = score_predictions(truth, truth, free)
    assert exact.mae == 0.0 and exact.overlap == pytest.approx(1.0, abs=1e-12)
    assert exact.per_layer_mae == [0.0] * 5
    shifted = score_predictions(truth + 3.0, truth, free)
    assert shifted.mae == pytest.approx(3.0)
    assert all(v == pytest.approx(3.0) for v in shifted.per_layer_mae)
    noisy = truth.copy()
    noisy[~free] += 1000
    assert score_predictions(noisy, truth, free).mae == 0.0


class OracleModel(Model):
    """Replays the normalized simulator targets in evaluation order."""

    def __init__(self, config, targets):
        super().__init__(config, {"unused": tc.Tensor(np.zeros(1))})
        self.targets = targets

    def forward(self, x):
        out = self.targets[self.forward_calls][None]
        self.forward_calls += 1
        return tc.Tensor(out)


def test_evaluate_oracle_model(ds):
    data = load_arrays(ds.region("test"))
    unit = normalize_power(data.power, NormSpec(), Direction.TO_UNIT)
    oracle = OracleModel(UNetConfig(PredictMode.TO_3D, depth=2, input_size=32), unit)
    report = evaluate_model(oracle, data)
    assert oracle.forward_calls == len(data)
    assert report.mae == pytest.approx(0.0, abs=1e-4)
    assert report.overlap == pytest.approx(1.0, abs=1e-3)
    assert report.samples == len(data)
    assert report.timing["predict_median_s"] > 0
    offset = OracleModel(oracle.config, unit + 3.0 / 87.0)
    assert evaluate_model(offset, data).mae == pytest.approx(3.0, abs=1e-3)


def _tiny(mode=PredictMode.TO_3D, seed=0):
    return build_model(UNetConfig(mode, depth=2, base_channels=4, input_size=32), seed)


def test_zero_learning_rate_keeps_parameters(ds):
    model = _tiny()
    before = {k: v.data.copy() for k, v in model.params.items()}
    train_model(model, ds.region("train"), TrainConfig(epochs=2, batch_size=4, learning_rate=0.0))
    for k, v in model.params.items():
        assert v.data.tobytes() == before[k].tobytes()


@pytest.mark.parametrize("mode", list(PredictMode))
def test_single_sample_memorization(ds, mode):
    data = load_arrays(ds.region("train"))
    one = type(data)(data.occupancy[:1], data.power[:1], data.txs[:1], data.elevations,
                     data.sample_ids[:1], data.mode)
    model = build_model(UNetConfig(mode, depth=2, base_channels=8, input_size=32), seed=1)
    cfg = TrainConfig(epochs=200, batch_size=1, learning_rate=3e-3, lr_schedule="constant")
    if mode is PredictMode.TO_2D:
        # one layer, so every step sees the same target
        one = type(one)(one.occupancy[:, :1], one.power[:, :1], one.txs, one.elevations[:1],
                        one.sample_ids, one.mode)
        model = build_model(UNetConfig(mode, depth=2, base_channels=8, input_size=32, layers=1), seed=1)
    _, history = train_model(model, one, cfg)
    assert history[-1] < 0.1 * history[0]


def test_dihedral_transforms_form_the_square_group():
    a = np.arange(2 * 3 * 4 * 4).reshape(2, 3, 4, 4)
    images = [_dihedral(k, a)[0] for k in range(8)]
    assert len({im.tobytes() for im in images}) == 8
    for im in images:
        assert sorted(im.ravel().tolist()) == sorted(a.ravel().tolist())
        np.testing.assert_array_equal(im[:, :, 0, 0] // 16, a[:, :, 0, 0] // 16)  # channels stay put
    x, y = _dihedral(5, a, a + 1)
    np.testing.assert_array_equal(y, x + 1)


def test_augmented_training_runs_and_is_deterministic(ds):
    cfg = TrainConfig(epochs=2, batch_size=3, seed=7, augment=True)
    h1 = train_model(_tiny(), ds.region("train"), cfg)[1]
    h2 = train_model(_tiny(), ds.region("train"), cfg)[1]
    assert h1 == h2 and all(math.isfinite(v) for v in h1)
    plain = train_model(_tiny(), ds.region("train"), replace(cfg, augment=False))[1]
    assert plain != h1


def test_training_is_deterministic(ds):
    cfg = TrainConfig(epochs=2, batch_size=3, seed=7)
    h1 = train_model(_tiny(PredictMode.TO_2D), ds.region("train"), cfg)[1]
    h2 = train_model(_tiny(PredictMode.TO_2D), ds.region("train"), cfg)[1]
    assert h1 == h2
    assert all(math.isfinite(v) for v in h1)


def test_training_input_checks(ds, tmp_path):
    with pytest.raises(ValidationError, match="targets"):
        train_model(_tiny(), ds, TrainConfig(epochs=1, target_mode=Mode.COHERENT))
    wrong = build_model(UNetConfig(PredictMode.TO_3D, depth=2, base_channels=4, input_size=64))
    with pytest.raises(ValidationError):
        train_model(wrong, ds, TrainConfig(epochs=1))
    with pytest.raises(ValidationError):
        train_model(_tiny(), ds.region("nowhere"), TrainConfig(epochs=1))
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValidationError):
        evaluate_model(_tiny(), ds.region("nowhere"))
