"""Three-stage fitting loop with gradient-driven transient birth and death.

Stage 1 warms up the static background on the earliest frame (spatial and
directional parameters only). Stage 2 optimizes the temporal gates
{t_c, t_w, a_bar, psi} plus kinematic velocities on full temporal batches,
running the birth/prune pass at every densify interval. Stage 3 fine-tunes
everything jointly.

The birth score of a static lobe accumulates |dL/da_{k,m}(t_b)| over the
batch timestamps of a densify window; crossing the threshold spawns a
transient primitive cloned from the parent's geometry, centered at the
timestamp that contributed most, with the minimum temporal width.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from .backward import GradientBuffer, backward
from .dataset import Dataset
from .losses import LossReport, total_loss
from .optim import DEFAULT_LR, AdamState, adam_step, project_constraints
from .renderer import DBM_HI, DBM_LO, render
from .scene import Kind, Scene, logit, sigmoid, softplus, softplus_inv

log = logging.getLogger(__name__)

A_PRUNE = 1e-4


class TrainError(ValueError):
    """Raised on invalid training configuration."""


@dataclass
class TrainConfig:
    """Loss mix, schedule and birth/death knobs; all file-overridable."""

    lambda1: float = 0.2
    lambda2: float = 0.1
    lambda_td: float = 0.5
    lambda_gate: float = 0.01
    B: int = 4
    warmup_iters: int = 2000
    gate_iters: int = 3000
    joint_iters: int = 3000
    tau: float = 0.0          # 0 -> adaptive: tau_factor * median first-window score
    tau_factor: float = 50.0
    delta_t: float = 0.0      # 0 -> use the dataset frame interval
    densify_interval: int = 200
    max_transients: int = 4000
    seed: int = 0
    backend: str = "auto"
    lr_mu0: float = DEFAULT_LR["mu0"]
    lr_log_scale: float = DEFAULT_LR["log_scale"]
    lr_quat: float = DEFAULT_LR["quat"]
    lr_rho_logit: float = DEFAULT_LR["rho_logit"]
    lr_vel: float = DEFAULT_LR["vel"]
    lr_v_raw: float = DEFAULT_LR["v_raw"]
    lr_lam_raw: float = DEFAULT_LR["lam_raw"]
    lr_abar_raw: float = DEFAULT_LR["abar_raw"]
    lr_psi: float = DEFAULT_LR["psi"]
    lr_t_c: float = DEFAULT_LR["t_c"]
    lr_log_tw: float = DEFAULT_LR["log_tw"]
    lr_eta_raw: float = DEFAULT_LR["eta_raw"]

    def __post_init__(self):
        if not (0.0 <= self.lambda1 + self.lambda2 < 1.0):
            raise TrainError("need 0 <= lambda1 + lambda2 < 1")
        if self.B < 2:
            raise TrainError("B must be >= 2 (temporal pairs)")
        if self.tau < 0.0 or self.delta_t < 0.0:
            raise TrainError("tau and delta_t must be nonnegative")
        if self.densify_interval < 1:
            raise TrainError("densify_interval must be >= 1")

    def lr_table(self) -> dict:
        return {
            "mu0": self.lr_mu0, "log_scale": self.lr_log_scale,
            "quat": self.lr_quat, "rho_logit": self.lr_rho_logit,
            "vel": self.lr_vel, "v_raw": self.lr_v_raw,
            "lam_raw": self.lr_lam_raw, "abar_raw": self.lr_abar_raw,
            "psi": self.lr_psi, "t_c": self.lr_t_c,
            "log_tw": self.lr_log_tw, "eta_raw": self.lr_eta_raw,
        }


def parse_config(path) -> TrainConfig:
    """Read the flat key = value config file (#-comments allowed)."""
    kwargs: dict = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrainError(f"{path}:{ln}: expected key = value")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise TrainError(f"{path}:{ln}: unknown config key {key!r}")
            if types[key] in ("int", int):
                kwargs[key] = int(val)
            elif types[key] in ("float", float):
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
    return TrainConfig(**kwargs)


STAGE_CLASSES = {
    1: {"mu0": True, "log_scale": True, "quat": True, "rho_logit": True,
        "v_raw": True, "lam_raw": True, "abar_raw": True, "psi": True,
        "eta_raw": True, "vel": False, "t_c": False, "log_tw": False},
    2: {"mu0": False, "log_scale": False, "quat": False, "rho_logit": False,
        "v_raw": False, "lam_raw": False, "abar_raw": True, "psi": True,
        "eta_raw": False, "vel": True, "t_c": True, "log_tw": True},
    3: {name: True for name in DEFAULT_LR},
}


class BirthTracker:
    """Per-lobe amplitude-gradient score and best-timestamp accumulator."""

    def __init__(self, scene: Scene):
        self.gamma = np.zeros((scene.K, scene.M))
        self.best_abs = np.zeros((scene.K, scene.M))
        self.best_t = np.zeros((scene.K, scene.M))

    def reset(self) -> None:
        self.gamma[...] = 0.0
        self.best_abs[...] = 0.0
        self.best_t[...] = 0.0

    def resize(self, keep: np.ndarray | None = None, grow: int = 0) -> None:
        for name in ("gamma", "best_abs", "best_t"):
            arr = getattr(self, name)
            if keep is not None:
                arr = arr[keep]
            if grow:
                arr = np.concatenate([arr, np.zeros((grow, arr.shape[1]))])
            setattr(self, name, arr)


def accumulate_birth_score(buf: GradientBuffer, tracker: BirthTracker,
                           scene: Scene) -> None:
    """Fold one batch's |dL/da_{k,m}(t_b)| into the static-lobe scores."""
    static = (scene.kind == Kind.STATIC)[:, None]
    absgrad = np.abs(buf.amp_time)  # (B, K, M)
    tracker.gamma += np.where(static, absgrad.sum(axis=0), 0.0)
    batch_best = absgrad.max(axis=0)
    batch_arg = absgrad.argmax(axis=0)
    improved = static & (batch_best > tracker.best_abs)
    tracker.best_abs = np.where(improved, batch_best, tracker.best_abs)
    tracker.best_t = np.where(improved, buf.times[batch_arg], tracker.best_t)


def birth_transients(scene: Scene, tracker: BirthTracker, tau: float,
                     delta_t: float, max_transients: int
                     ) -> tuple[Scene, int]:
    """Spawn transient primitives for static lobes whose score exceeds tau.

    Candidates are served highest score first until the transient cap.
    The newborn clones the parent geometry with halved attenuation; its
    trigger lobe copies (v, lambda, psi) at a tenth of the parent
    amplitude, centered at the best-scoring timestamp with width delta_t.
    Scores reset afterwards.
    """
    static = (scene.kind == Kind.STATIC)[:, None]
    cand = np.argwhere(static & (tracker.gamma > tau))
    if cand.size == 0:
        tracker.reset()
        return scene, 0
    scores = tracker.gamma[cand[:, 0], cand[:, 1]]
    cand = cand[np.argsort(-scores, kind="stable")]
    room = max_transients - int(np.sum(scene.kind == Kind.TRANSIENT))
    if room <= 0:
        log.info("transient cap reached; skipping %d birth candidates", len(cand))
        tracker.reset()
        return scene, 0
    if len(cand) > room:
        log.info("transient cap allows %d of %d birth candidates", room, len(cand))
        cand = cand[:room]
    born = Scene(len(cand), scene.M, scene.eta_raw, scene.r_rx, scene.t_span)
    tiny = softplus_inv(1e-6)
    for i, (k, m) in enumerate(cand):
        born.kind[i] = Kind.TRANSIENT
        born.mu0[i] = scene.mu0[k]
        born.log_scale[i] = scene.log_scale[k]
        born.quat[i] = scene.quat[k]
        rho_child = 0.5 * float(sigmoid(scene.rho_logit[k]))
        born.rho_logit[i] = logit(rho_child)
        born.vel[i] = 0.0
        # lobe 0 is the trigger lobe; the rest are near-silent copies
        order = [m] + [mm for mm in range(scene.M) if mm != m]
        for slot, mm in enumerate(order):
            born.v_raw[i, slot] = scene.v_raw[k, mm]
            born.lam_raw[i, slot] = scene.lam_raw[k, mm]
            born.psi[i, slot] = scene.psi[k, mm]
            abar_parent = float(softplus(np.asarray(scene.abar_raw[k, mm])))
            amp = 0.1 * abar_parent if slot == 0 else 1e-6
            born.abar_raw[i, slot] = softplus_inv(amp) if amp > 0 else tiny
            born.t_c[i, slot] = tracker.best_t[k, m]
            born.log_tw[i, slot] = np.log(delta_t)
    scene.append(born)
    tracker.reset()
    return scene, len(cand)


def prune_transients(scene: Scene, train_span: tuple[float, float]
                     ) -> tuple[Scene, np.ndarray]:
    """Drop transients whose lobes are all out-of-span or attenuated away.

    Returns the scene and the boolean keep mask (static/kinematic rows are
    always kept).
    """
    lo, hi = train_span
    tw = scene.tw()
    sup_lo = scene.t_c - 3.0 * tw
    sup_hi = scene.t_c + 3.0 * tw
    outside = (sup_hi < lo) | (sup_lo > hi)
    faint = scene.abar() < A_PRUNE
    dead_lobe = outside | faint
    removable = (scene.kind == Kind.TRANSIENT) & dead_lobe.all(axis=1)
    keep = ~removable
    scene.select(keep)
    return scene, keep


def _sample_batch(rng, ds: Dataset, stage: int, B: int):
    """Stage-1 batches draw receivers on the earliest frame; later stages
    draw one receiver and B frames (TD pairs are receiver-aligned)."""
    if stage == 1:
        t0 = min(ds.frames())
        pool = [i for i, s in enumerate(ds.samples) if s.t == t0]
        idx = rng.choice(len(pool), size=B, replace=len(pool) < B)
        return [pool[i] for i in idx]
    by_rx: dict = {}
    for i, s in enumerate(ds.samples):
        by_rx.setdefault(tuple(s.receiver.tolist()), []).append(i)
    keys = list(by_rx.keys())
    rx = keys[int(rng.integers(len(keys)))]
    pool = by_rx[rx]
    idx = rng.choice(len(pool), size=B, replace=len(pool) < B)
    return [pool[i] for i in idx]


def train(dataset: Dataset, config: TrainConfig, init_scene: Scene,
          out_dir=None, eval_hook=None) -> tuple[Scene, list[dict]]:
    """Fit a scene to the dataset; returns (scene, metrics rows).

    Metrics rows are emitted every densify interval with columns
    (iter, stage, l1, ssim, fourier, td, gate, total, K, n_transients,
    wall_ms). Divergence (non-finite total loss) aborts with the last
    checkpointed scene.
    """
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    scene = init_scene.copy()
    rng = np.random.default_rng(config.seed)
    grid = dataset.grid
    delta_t = config.delta_t
    if delta_t == 0.0:
        fr = dataset.manifest.get("frame_rate", 0.0)
        delta_t = 1.0 / fr if fr else scene.t_span_length / 100.0
    if delta_t > scene.t_span_length / 12.0:
        delta_t = scene.t_span_length / 12.0
    state = AdamState(scene)
    tracker = BirthTracker(scene)
    tau = config.tau if config.tau > 0.0 else None
    lr = config.lr_table()
    span = scene.t_span
    metrics: list[dict] = []
    last_good = scene.copy()
    last_report = None
    it_global = 0
    current_stage = 0
    t_wall = time.perf_counter()
    stages = ((1, config.warmup_iters), (2, config.gate_iters),
              (3, config.joint_iters))
    for stage, iters in stages:
        if iters:
            current_stage = stage
        class_mask = STAGE_CLASSES[stage]
        for _ in range(iters):
            sel = _sample_batch(rng, dataset, stage, config.B)
            samples = [(dataset.samples[i].receiver, dataset.samples[i].t)
                       for i in sel]
            targets = [(dataset.samples[i].values - DBM_LO) / (DBM_HI - DBM_LO)
                       for i in sel]
            units = []
            for r, t in samples:
                out = render(scene, r, t, grid, backend=config.backend)
                units.append(out.unit_image())
            lam_td = config.lambda_td if stage > 1 else 0.0
            lam_gate = config.lambda_gate if stage > 1 else 0.0
            report, dldu, g_tc, g_ltw = total_loss(
                units, targets, scene, [t for _, t in samples],
                config.lambda1, config.lambda2, lam_td, lam_gate)
            last_report = report
            if not np.isfinite(report.total):
                log.error("divergence at iter %d; restoring last checkpoint",
                          it_global)
                return last_good, metrics
            buf = backward(scene, samples, dldu, grid)
            if g_tc is not None:
                buf.t_c += g_tc
                buf.log_tw += g_ltw
            if stage == 2:
                accumulate_birth_score(buf, tracker, scene)
            prim_mask = (scene.kind == Kind.STATIC) if stage == 1 else None
            adam_step(scene, buf, state, lr, class_mask, prim_mask)
            project_constraints(scene, min_tw=delta_t)
            it_global += 1
            if it_global % config.densify_interval == 0:
                if stage == 2:
                    if tau is None:
                        static_scores = tracker.gamma[scene.kind == Kind.STATIC]
                        med = float(np.median(static_scores)) if static_scores.size else 0.0
                        tau = max(config.tau_factor * med, 1e-12)
                        log.info("adaptive birth threshold tau = %.3g", tau)
                    scene, keep = prune_transients(scene, span)
                    if keep.size and not keep.all():
                        state.resize(keep=keep)
                        tracker.resize(keep=keep)
                    k_before = scene.K
                    scene, n_born = birth_transients(
                        scene, tracker, tau, delta_t, config.max_transients)
                    if scene.K != k_before:
                        state.resize(grow=scene.K - k_before)
                        tracker.resize(grow=scene.K - k_before)
                metrics.append(_metrics_row(it_global, stage, report, scene,
                                            t_wall))
                t_wall = time.perf_counter()
                last_good = scene.copy()
                if out_dir is not None:
                    scene.save(os.path.join(out_dir, "checkpoint_latest.rfc"))
                if eval_hook is not None:
                    eval_hook(it_global, stage, scene)
    if last_report is not None and (not metrics or metrics[-1]["iter"] != it_global):
        metrics.append(_metrics_row(it_global, current_stage, last_report,
                                    scene, t_wall))
    if out_dir is not None:
        scene.save(os.path.join(out_dir, "checkpoint_final.rfc"))
        write_metrics_csv(metrics, os.path.join(out_dir, "metrics.csv"))
    return scene, metrics


def _metrics_row(it: int, stage: int, report: LossReport, scene: Scene,
                 t_wall: float) -> dict:
    return {
        "iter": it, "stage": stage, "l1": report.l1, "ssim": report.ssim,
        "fourier": report.fourier, "td": report.td,
        "gate": report.gate_entropy, "total": report.total, "K": scene.K,
        "n_transients": int(np.sum(scene.kind == Kind.TRANSIENT)),
        "wall_ms": (time.perf_counter() - t_wall) * 1e3,
    }


def write_metrics_csv(rows: list[dict], path) -> None:
    cols = ["iter", "stage", "l1", "ssim", "fourier", "td", "gate", "total",
            "K", "n_transients", "wall_ms"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
