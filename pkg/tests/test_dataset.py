import json
import os

import numpy as np
import pytest

from rfsplat import dataset as dst
from rfsplat.dataset import (Dataset, DatasetError, SynthSpec, convert_npz,
                             generate_dataset, load_dataset, make_receivers,
                             make_times, save_dataset, split, synth_scene)
from rfsplat.renderer import AngularGrid, render, rss_from_spectrogram
from rfsplat.scene import Kind


def small_spec(**over):
    kw = dict(n_static=2, n_kinematic=1, n_transient=1, seed=5, lobes=2,
              n_frames=5, frame_rate=1.0, rx_count=(2, 2), rx_spacing=2.0)
    kw.update(over)
    return SynthSpec(**kw)


GRID = AngularGrid(H=8, W=16)


class TestSynthScene:
    def test_deterministic(self):
        a = synth_scene(small_spec())
        b = synth_scene(small_spec())
        assert np.array_equal(a.mu0, b.mu0)
        assert np.array_equal(a.psi, b.psi)
        assert a.eta_raw == b.eta_raw

    def test_counts_and_kinds(self):
        scene = synth_scene(small_spec(n_static=1, n_kinematic=0,
                                       n_transient=0))
        assert scene.K == 1
        assert scene.counts_by_kind()[Kind.STATIC] == 1

    def test_transient_supports_inside_span(self):
        spec = small_spec(n_static=0, n_kinematic=0, n_transient=5,
                          n_frames=100, frame_rate=10.0)
        scene = synth_scene(spec)
        t0, t1 = spec.t_span
        tw = scene.tw()
        lo = scene.t_c - 3 * tw
        hi = scene.t_c + 3 * tw
        assert np.all(lo >= t0 - 1e-9)
        assert np.all(hi <= t1 + 1e-9)

    def test_invariants_hold(self):
        scene = synth_scene(small_spec(n_static=3, n_kinematic=2,
                                       n_transient=2, n_frames=50,
                                       frame_rate=5.0))
        scene.validate()
        speeds = np.linalg.norm(scene.vel[scene.kind == Kind.KINEMATIC],
                                axis=-1)
        assert np.all(speeds <= 15.0)

    def test_empty_rejected(self):
        with pytest.raises(DatasetError):
            synth_scene(small_spec(n_static=0, n_kinematic=0, n_transient=0))


class TestGenerate:
    def test_sample_count(self):
        spec = small_spec(rx_count=(2, 5), n_frames=7, frame_rate=1.0)
        truth = synth_scene(spec)
        ds = generate_dataset(truth, make_receivers(spec), make_times(spec),
                              0.0, GRID, backend="numpy")
        assert len(ds) == 10 * 7
        assert ds.manifest["n_receivers"] == 10
        assert ds.manifest["n_frames"] == 7

    def test_noise_free_oracle_closure(self):
        spec = small_spec()
        truth = synth_scene(spec)
        ds = generate_dataset(truth, make_receivers(spec), make_times(spec),
                              0.0, GRID, backend="numpy")
        for s in ds.samples[:6]:
            out = render(truth, s.receiver, s.t, GRID, backend="numpy")
            clamped = np.clip(out.power_dbm, -100.0, -40.0)
            stored32 = clamped.astype(np.float32).astype(np.float64)
            assert np.array_equal(s.values, stored32)

    def test_rss_recompute(self):
        spec = small_spec()
        truth = synth_scene(spec)
        ds = generate_dataset(truth, make_receivers(spec), make_times(spec),
                              0.4, GRID, seed=9, backend="numpy")
        for s in ds.samples:
            assert abs(s.rss_dbm - rss_from_spectrogram(s.values)) < 1e-9

    def test_noise_changes_values_deterministically(self):
        spec = small_spec()
        truth = synth_scene(spec)
        args = (make_receivers(spec), make_times(spec))
        a = generate_dataset(truth, *args, 0.5, GRID, seed=3, backend="numpy")
        b = generate_dataset(truth, *args, 0.5, GRID, seed=3, backend="numpy")
        clean = generate_dataset(truth, *args, 0.0, GRID, seed=3,
                                 backend="numpy")
        assert np.array_equal(a.samples[0].values, b.samples[0].values)
        assert not np.array_equal(a.samples[0].values, clean.samples[0].values)
        assert np.all(a.samples[0].values >= -100.0)
        assert np.all(a.samples[0].values <= -40.0)


class TestPersistence:
    def _ds(self):
        spec = small_spec()
        truth = synth_scene(spec)
        return generate_dataset(truth, make_receivers(spec), make_times(spec),
                                0.0, GRID, backend="numpy")

    def test_round_trip_bytes(self, tmp_path):
        ds = self._ds()
        p1 = tmp_path / "d1"
        save_dataset(ds, p1)
        loaded = load_dataset(p1)
        p2 = tmp_path / "d2"
        save_dataset(loaded, p2)
        assert (p1 / "samples.bin").read_bytes() == (p2 / "samples.bin").read_bytes()
        assert json.loads((p1 / "manifest.json").read_text()) == \
            json.loads((p2 / "manifest.json").read_text())
        for a, b in zip(ds.samples, loaded.samples):
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.receiver, b.receiver)
            assert a.t == b.t

    def test_record_size_arithmetic(self, tmp_path):
        spec = small_spec()
        truth = synth_scene(spec)
        grid = AngularGrid(H=90, W=360)
        ds = generate_dataset(truth, make_receivers(spec)[:1],
                              make_times(spec)[:1], 0.0, grid,
                              backend="numpy")
        save_dataset(ds, tmp_path / "d")
        size = os.path.getsize(tmp_path / "d" / "samples.bin")
        assert size == 4 * (4 + 90 * 360)

    def test_truncation_detected(self, tmp_path):
        ds = self._ds()
        save_dataset(ds, tmp_path / "d")
        blob = (tmp_path / "d" / "samples.bin").read_bytes()
        (tmp_path / "d" / "samples.bin").write_bytes(blob[:-1])
        with pytest.raises(DatasetError, match="truncated"):
            load_dataset(tmp_path / "d")

    def test_version_mismatch(self, tmp_path):
        ds = self._ds()
        save_dataset(ds, tmp_path / "d")
        m = json.loads((tmp_path / "d" / "manifest.json").read_text())
        m["version"] = 99
        (tmp_path / "d" / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(DatasetError, match="version"):
            load_dataset(tmp_path / "d")

    def test_all_finite_guarantee(self, tmp_path):
        ds = self._ds()
        save_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        for s in loaded.samples:
            assert np.all(np.isfinite(s.values))


class TestSplit:
    def _ds(self, rx=(5, 2), frames=10):
        spec = small_spec(rx_count=rx, n_frames=frames, frame_rate=1.0)
        truth = synth_scene(spec)
        return generate_dataset(truth, make_receivers(spec), make_times(spec),
                                0.0, GRID, backend="numpy")

    def test_spatial_80_20(self):
        ds = self._ds(rx=(5, 2))  # 10 receivers
        train, test = split(ds, "spatial", 0.8, seed=1)
        assert len(train.receivers()) == 8
        assert len(test.receivers()) == 2
        assert set(map(tuple, train.receivers())).isdisjoint(
            set(map(tuple, test.receivers())))

    def test_temporal_70_30(self):
        ds = self._ds(rx=(2, 1), frames=100)
        train, test = split(ds, "temporal", 0.7, seed=2)
        assert len(train.frames()) == 70
        assert len(test.frames()) == 30

    def test_no_leakage(self):
        ds = self._ds()
        for mode in ("spatial", "temporal"):
            train, test = split(ds, mode, 0.75, seed=3)
            key = lambda s: (tuple(s.receiver.tolist()), s.t)
            assert {key(s) for s in train.samples}.isdisjoint(
                {key(s) for s in test.samples})
            assert len(train) + len(test) == len(ds)

    def test_deterministic(self):
        ds = self._ds()
        a = split(ds, "spatial", 0.8, seed=7)[0]
        b = split(ds, "spatial", 0.8, seed=7)[0]
        assert [s.t for s in a.samples] == [s.t for s in b.samples]

    def test_errors(self):
        ds = self._ds(rx=(1, 1))
        with pytest.raises(DatasetError):
            split(ds, "spatial", 0.8)
        with pytest.raises(DatasetError):
            split(ds, "temporal", 1.5)
        with pytest.raises(DatasetError):
            split(ds, "bogus", 0.5)


class TestConvert:
    def test_npz_ingestion(self, tmp_path):
        rng = np.random.default_rng(0)
        n, H, W = 6, 8, 16
        rx = rng.uniform(-5, 5, size=(n, 3))
        ts = np.repeat(np.arange(3.0), 2)
        sp = rng.uniform(-120, -30, size=(n, H, W))
        path = tmp_path / "ext.npz"
        np.savez(path, receivers=rx, times=ts, spectrograms=sp)
        ds = convert_npz(path)
        assert len(ds) == n
        assert ds.grid.H == H and ds.grid.W == W
        assert np.all(ds.samples[0].values >= -100.0)
        assert np.all(ds.samples[0].values <= -40.0)
        out = tmp_path / "converted"
        save_dataset(ds, out)
        assert load_dataset(out).manifest["n_frames"] == 3

    def test_missing_array(self, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(path, receivers=np.zeros((2, 3)), times=np.zeros(2))
        with pytest.raises(DatasetError, match="spectrograms"):
            convert_npz(path)

    def test_grid_mismatch(self, tmp_path):
        path = tmp_path / "ext.npz"
        np.savez(path, receivers=np.zeros((2, 3)), times=np.zeros(2),
                 spectrograms=np.full((2, 8, 16), -50.0))
        with pytest.raises(DatasetError, match="grid mismatch"):
            convert_npz(path, grid=AngularGrid(H=4, W=8))
