"""Synthetic dataset generation, persistence and train/test splitting.

The generator uses the engine's own forward model as ground truth, which
gives exact oracles for recovery experiments: a noise-free dataset is
reproduced bit-for-bit by re-rendering the generating scene at the stored
(float32) receiver/time coordinates. Optional zero-mean Gaussian noise is
applied in the dBm domain so the [-100, -40] normalization stays
meaningful.

On-disk layout: a directory with ``manifest.json`` plus ``samples.bin``
holding per-sample records of little-endian float32: rx_x, rx_y, rx_z, t,
then H*W spectrogram values row-major.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .renderer import (DBM_HI, DBM_LO, AngularGrid, render,
                       rss_from_spectrogram)
from .scene import (AsgLobe, GaussianPrimitive, Kind, Scene,
                    TemporalEnvelope)

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Raised on malformed dataset files or invalid generation specs."""


@dataclass
class ObservationSample:
    """One (receiver, time, spectrogram) observation; RSS is derived."""

    receiver: np.ndarray
    t: float
    values: np.ndarray  # (H, W) dBm, clamped to [-100, -40]
    rss_dbm: float


@dataclass
class Dataset:
    samples: list
    grid: AngularGrid
    manifest: dict

    def __len__(self) -> int:
        return len(self.samples)

    def receivers(self) -> list[tuple]:
        """Unique receiver positions in first-occurrence order."""
        seen: dict = {}
        for s in self.samples:
            seen.setdefault(tuple(s.receiver.tolist()), None)
        return list(seen.keys())

    def frames(self) -> list[float]:
        """Unique timestamps in first-occurrence order."""
        seen: dict = {}
        for s in self.samples:
            seen.setdefault(float(s.t), None)
        return list(seen.keys())

    def unit_images(self) -> np.ndarray:
        return (np.stack([s.values for s in self.samples]) - DBM_LO) / (DBM_HI - DBM_LO)


@dataclass
class SynthSpec:
    """Knobs for the seeded synthetic scene and observation generator."""

    n_static: int = 8
    n_kinematic: int = 1
    n_transient: int = 1
    rx_spacing: float = 3.0
    rx_count: tuple[int, int] = (3, 3)
    rx_height: float = 1.0
    n_frames: int = 100
    frame_rate: float = 10.0
    noise_db: float = 0.0
    seed: int = 0
    t_start: float = 0.0
    # scene-geometry ranges (meters / amplitudes), all uniform draws
    dist_range: tuple[float, float] = (8.0, 25.0)
    z_range: tuple[float, float] = (1.0, 12.0)
    scale_range: tuple[float, float] = (0.3, 1.2)
    rho_range: tuple[float, float] = (0.2, 0.6)
    # amplitudes sized so composited peaks land inside [-100, -40] dBm
    amp_range: tuple[float, float] = (0.002, 0.01)
    lam_range: tuple[float, float] = (8.0, 80.0)
    max_speed: float = 15.0
    lobes: int = 4
    eta: float = 1.0
    r_rx: float = 1.0

    def __post_init__(self):
        if self.n_static < 0 or self.n_kinematic < 0 or self.n_transient < 0:
            raise DatasetError("primitive counts must be nonnegative")
        if self.frame_rate <= 0:
            raise DatasetError("frame rate must be positive")

    @property
    def t_span(self) -> tuple[float, float]:
        return (self.t_start,
                self.t_start + self.n_frames / self.frame_rate)

    @property
    def delta_t(self) -> float:
        return 1.0 / self.frame_rate


def _random_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _random_primitive(rng, spec: SynthSpec, kind: Kind,
                      span: tuple[float, float]) -> GaussianPrimitive:
    az = rng.uniform(0.0, 2.0 * np.pi)
    dist = rng.uniform(*spec.dist_range)
    z = rng.uniform(*spec.z_range)
    mu = np.array([dist * np.cos(az), dist * np.sin(az), z])
    scale = rng.uniform(*spec.scale_range, size=3)
    rho = rng.uniform(*spec.rho_range)
    length = span[1] - span[0]
    if kind == Kind.KINEMATIC:
        heading = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(0.2, 1.0) * spec.max_speed
        vel = np.array([speed * np.cos(heading), speed * np.sin(heading), 0.0])
    else:
        vel = np.zeros(3)
    lobes = []
    for _ in range(spec.lobes):
        if kind == Kind.TRANSIENT:
            tw_hi = length / 10.0
            tw = rng.uniform(min(spec.delta_t, tw_hi), tw_hi)
            tc = rng.uniform(span[0] + 3.0 * tw, span[1] - 3.0 * tw)
        else:
            tw = 10.0 * length
            tc = 0.5 * (span[0] + span[1])
        # aim lobes toward the receiver area with directional jitter
        toward = -mu + np.array([0.0, 0.0, spec.rx_height])
        v = toward / np.linalg.norm(toward) + 0.15 * rng.normal(size=3)
        lobes.append(AsgLobe(
            v=v / np.linalg.norm(v),
            lambda_x=rng.uniform(*spec.lam_range),
            lambda_y=rng.uniform(*spec.lam_range),
            a_bar=rng.uniform(*spec.amp_range),
            psi=rng.uniform(-np.pi, np.pi),
            envelope=TemporalEnvelope(tc, tw),
        ))
    return GaussianPrimitive(mu0=mu, scale=scale, rotation=_random_quat(rng),
                             rho=rho, velocity=vel, kind=kind, lobes=lobes)


def synth_scene(spec: SynthSpec) -> Scene:
    """Seeded random ground-truth scene obeying every scene invariant."""
    total = spec.n_static + spec.n_kinematic + spec.n_transient
    if total == 0:
        raise DatasetError("a synthetic scene needs at least one primitive")
    rng = np.random.default_rng(spec.seed)
    span = spec.t_span
    prims = []
    for _ in range(spec.n_static):
        prims.append(_random_primitive(rng, spec, Kind.STATIC, span))
    for _ in range(spec.n_kinematic):
        prims.append(_random_primitive(rng, spec, Kind.KINEMATIC, span))
    for _ in range(spec.n_transient):
        prims.append(_random_primitive(rng, spec, Kind.TRANSIENT, span))
    scene = Scene.from_primitives(prims, eta=spec.eta, r_rx=spec.r_rx,
                                  t_span=span, M=spec.lobes)
    scene.validate()
    return scene


def make_receivers(spec: SynthSpec) -> np.ndarray:
    """Horizontal receiver grid centered on the origin at rx_height."""
    nx, ny = spec.rx_count
    xs = (np.arange(nx) - (nx - 1) / 2.0) * spec.rx_spacing
    ys = (np.arange(ny) - (ny - 1) / 2.0) * spec.rx_spacing
    out = np.empty((nx * ny, 3))
    i = 0
    for x in xs:
        for y in ys:
            out[i] = (x, y, spec.rx_height)
            i += 1
    return out


def make_times(spec: SynthSpec) -> np.ndarray:
    return spec.t_start + np.arange(spec.n_frames) / spec.frame_rate


def generate_dataset(truth: Scene, receivers, times, noise_db: float,
                     grid: AngularGrid, seed: int = 0,
                     backend: str = "auto") -> Dataset:
    """Render every (receiver, time) pair and package the observations.

    Coordinates are quantized to float32 before rendering so the stored
    dataset is exactly reproducible from its own records.
    """
    receivers = np.asarray(receivers, dtype=np.float32).astype(np.float64)
    times = np.asarray(times, dtype=np.float32).astype(np.float64)
    rng = np.random.default_rng(seed)
    samples = []
    for r in receivers:
        for t in times:
            out = render(truth, r, float(t), grid, backend=backend)
            values = out.power_dbm
            if noise_db > 0.0:
                values = values + rng.normal(0.0, noise_db, size=values.shape)
            values = np.clip(values, DBM_LO, DBM_HI)
            values = values.astype(np.float32).astype(np.float64)
            samples.append(ObservationSample(
                receiver=r.copy(), t=float(t), values=values,
                rss_dbm=rss_from_spectrogram(values)))
    manifest = {
        "version": FORMAT_VERSION,
        "H": grid.H, "W": grid.W,
        "theta_lo": grid.theta_lo, "theta_hi": grid.theta_hi,
        "t_span": [float(times.min()), float(times.max())],
        "frame_rate": float(1.0 / np.min(np.diff(np.unique(times))))
        if len(np.unique(times)) > 1 else 0.0,
        "n_receivers": int(len(receivers)),
        "n_frames": int(len(times)),
        "n_samples": len(samples),
        "noise_db": float(noise_db),
        "seed": int(seed),
    }
    return Dataset(samples=samples, grid=grid, manifest=manifest)


def save_dataset(ds: Dataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(ds.manifest, f, indent=1, sort_keys=True)
    H, W = ds.grid.H, ds.grid.W
    rec = np.empty((len(ds.samples), 4 + H * W), dtype="<f4")
    for i, s in enumerate(ds.samples):
        rec[i, :3] = s.receiver
        rec[i, 3] = s.t
        rec[i, 4:] = s.values.reshape(-1)
    with open(os.path.join(path, "samples.bin"), "wb") as f:
        f.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise DatasetError(f"missing manifest.json under {path!r}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(
            f"unsupported dataset version {manifest.get('version')!r}")
    H, W = int(manifest["H"]), int(manifest["W"])
    grid = AngularGrid(H=H, W=W, theta_lo=float(manifest["theta_lo"]),
                       theta_hi=float(manifest["theta_hi"]))
    rec_size = 4 * (4 + H * W)
    blob_path = os.path.join(path, "samples.bin")
    nbytes = os.path.getsize(blob_path)
    if nbytes % rec_size != 0:
        raise DatasetError("truncated samples.bin (partial record)")
    n = nbytes // rec_size
    if n != manifest.get("n_samples", n):
        raise DatasetError("sample count disagrees with manifest")
    raw = np.fromfile(blob_path, dtype="<f4").reshape(n, 4 + H * W)
    samples = []
    for i in range(n):
        values = raw[i, 4:].astype(np.float64).reshape(H, W)
        if not np.all(np.isfinite(values)):
            raise DatasetError(f"non-finite spectrogram in sample {i}")
        samples.append(ObservationSample(
            receiver=raw[i, :3].astype(np.float64), t=float(raw[i, 3]),
            values=values, rss_dbm=rss_from_spectrogram(values)))
    return Dataset(samples=samples, grid=grid, manifest=manifest)


def split(ds: Dataset, mode: str, fraction: float, seed: int = 0
          ) -> tuple[Dataset, Dataset]:
    """Deterministic train/test split.

    ``spatial`` partitions by unique receiver (all frames of a held-out
    receiver go to test); ``temporal`` partitions by frame.
    """
    if not (0.0 < fraction < 1.0):
        raise DatasetError("fraction must lie in (0, 1)")
    if mode == "spatial":
        units = ds.receivers()
        def unit_of(s):
            return tuple(s.receiver.tolist())
    elif mode == "temporal":
        units = ds.frames()
        def unit_of(s):
            return float(s.t)
    else:
        raise DatasetError(f"unknown split mode {mode!r}")
    if len(units) < 2:
        raise DatasetError("need at least 2 units to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(units))
    n_train = int(round(fraction * len(units)))
    n_train = min(max(n_train, 1), len(units) - 1)
    train_units = {units[i] for i in perm[:n_train]}
    train = [s for s in ds.samples if unit_of(s) in train_units]
    test = [s for s in ds.samples if unit_of(s) not in train_units]
    mk = dict(ds.manifest)
    return (Dataset(train, ds.grid, {**mk, "n_samples": len(train)}),
            Dataset(test, ds.grid, {**mk, "n_samples": len(test)}))


def convert_npz(src_path, grid: AngularGrid | None = None) -> Dataset:
    """Ingest an external dataset from the documented NPZ interchange schema.

    Required arrays: ``receivers`` (N, 3), ``times`` (N,), ``spectrograms``
    (N, H, W) in dBm. Optional scalars ``theta_lo``/``theta_hi`` override
    the grid's elevation range. Values are clamped to [-100, -40] dBm.
    """
    with np.load(src_path) as z:
        for key in ("receivers", "times", "spectrograms"):
            if key not in z:
                raise DatasetError(f"NPZ missing required array {key!r}")
        rx = np.asarray(z["receivers"], dtype=np.float64)
        ts = np.asarray(z["times"], dtype=np.float64)
        sp = np.asarray(z["spectrograms"], dtype=np.float64)
        if rx.ndim != 2 or rx.shape[1] != 3 or sp.ndim != 3 \
                or rx.shape[0] != ts.shape[0] or rx.shape[0] != sp.shape[0]:
            raise DatasetError("NPZ arrays have inconsistent shapes")
        th_lo = float(z["theta_lo"]) if "theta_lo" in z else 0.0
        th_hi = float(z["theta_hi"]) if "theta_hi" in z else float(np.pi / 2)
    if grid is None:
        grid = AngularGrid(H=sp.shape[1], W=sp.shape[2],
                           theta_lo=th_lo, theta_hi=th_hi)
    if (grid.H, grid.W) != sp.shape[1:]:
        raise DatasetError("grid mismatch")
    samples = []
    for i in range(rx.shape[0]):
        values = np.clip(sp[i], DBM_LO, DBM_HI)
        values = values.astype(np.float32).astype(np.float64)
        r32 = rx[i].astype(np.float32).astype(np.float64)
        samples.append(ObservationSample(
            receiver=r32, t=float(np.float32(ts[i])), values=values,
            rss_dbm=rss_from_spectrogram(values)))
    utimes = np.unique(ts)
    manifest = {
        "version": FORMAT_VERSION, "H": grid.H, "W": grid.W,
        "theta_lo": grid.theta_lo, "theta_hi": grid.theta_hi,
        "t_span": [float(ts.min()), float(ts.max())],
        "frame_rate": float(1.0 / np.min(np.diff(utimes))) if utimes.size > 1 else 0.0,
        "n_receivers": len({tuple(r) for r in rx.tolist()}),
        "n_frames": int(utimes.size),
        "n_samples": len(samples), "noise_db": 0.0, "seed": 0,
    }
    return Dataset(samples=samples, grid=grid, manifest=manifest)
