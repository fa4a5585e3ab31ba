"""Per-class Adam with post-step constraint projection.

Each of the 12 raw parameter classes carries its own learning rate. After
every step the storage invariants are restored: lobe directions and
quaternions are renormalized, spreads are clamped into range, temporal
widths are projected back to the per-kind bounds, and non-kinematic
velocities are zeroed.
"""

from __future__ import annotations

import logging

import numpy as np

from .backward import GradientBuffer
from .scene import (LAMBDA_MAX, LAMBDA_MIN, PARAM_CLASSES, Kind, Scene,
                    softplus_inv)

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

DEFAULT_LR = {
    "mu0": 1.6e-4,
    "log_scale": 5e-3,
    "quat": 5e-3,
    "rho_logit": 5e-2,
    "vel": 5e-3,
    "v_raw": 1e-2,
    "lam_raw": 1e-2,
    "abar_raw": 5e-2,
    "psi": 1e-2,
    "t_c": 5e-3,
    "log_tw": 5e-3,
    "eta_raw": 5e-3,
}


class AdamState:
    """First/second moment accumulators aligned with the scene arrays."""

    def __init__(self, scene: Scene):
        self.step = 0
        self.m = {}
        self.v = {}
        for name in PARAM_CLASSES:
            arr = self._param(scene, name)
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)

    @staticmethod
    def _param(scene: Scene, name: str) -> np.ndarray:
        if name == "eta_raw":
            return np.array([scene.eta_raw])
        return getattr(scene, name)

    def resize(self, keep: np.ndarray | None = None, grow: int = 0) -> None:
        """Track scene mutations: drop pruned rows and append zero moments."""
        for name in PARAM_CLASSES:
            if name == "eta_raw":
                continue
            for d in (self.m, self.v):
                arr = d[name]
                if keep is not None:
                    arr = arr[keep]
                if grow:
                    pad = np.zeros((grow,) + arr.shape[1:])
                    arr = np.concatenate([arr, pad])
                d[name] = arr


def adam_step(scene: Scene, grads: GradientBuffer, state: AdamState,
              lr_table: dict | None = None,
              class_mask: dict | None = None,
              prim_mask: np.ndarray | None = None) -> None:
    """One bias-corrected Adam update in place.

    ``class_mask`` maps parameter-class names to booleans (absent = on);
    ``prim_mask`` restricts per-primitive classes to a subset of rows.
    Non-finite gradients skip their class with a warning.
    """
    lr_table = {**DEFAULT_LR, **(lr_table or {})}
    state.step += 1
    b1c = 1.0 - BETA1**state.step
    b2c = 1.0 - BETA2**state.step
    for name in PARAM_CLASSES:
        if class_mask is not None and not class_mask.get(name, True):
            continue
        g = grads.class_array(name)
        if not np.all(np.isfinite(g)):
            log.warning("skipping %s update: non-finite gradient", name)
            continue
        if prim_mask is not None and name != "eta_raw":
            g = g * prim_mask.reshape((-1,) + (1,) * (g.ndim - 1))
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = lr_table[name] * (m / b1c) / (np.sqrt(v / b2c) + EPS)
        if prim_mask is not None and name != "eta_raw":
            update = update * prim_mask.reshape((-1,) + (1,) * (update.ndim - 1))
        if name == "eta_raw":
            scene.eta_raw -= float(update[0])
        else:
            getattr(scene, name)[...] -= update


def project_constraints(scene: Scene, min_tw: float | None = None) -> None:
    """Restore storage invariants after an unconstrained step."""
    # renormalize directions; keeps activations exactly normalize(raw)
    n = np.linalg.norm(scene.v_raw, axis=-1, keepdims=True)
    np.divide(scene.v_raw, n, out=scene.v_raw, where=n > 0)
    qn = np.linalg.norm(scene.quat, axis=-1, keepdims=True)
    np.divide(scene.quat, qn, out=scene.quat, where=qn > 0)
    # lambda upper bound (lower bound is built into the activation)
    lam_cap = softplus_inv(LAMBDA_MAX - LAMBDA_MIN)
    np.clip(scene.lam_raw, None, lam_cap, out=scene.lam_raw)
    # temporal width bounds by kind
    span = scene.t_span_length
    static = scene.kind == Kind.STATIC
    trans = scene.kind == Kind.TRANSIENT
    scene.log_tw[static] = np.maximum(scene.log_tw[static], np.log(span))
    scene.log_tw[trans] = np.minimum(scene.log_tw[trans], np.log(span / 4.0))
    if min_tw is not None and min_tw > 0:
        scene.log_tw = np.maximum(scene.log_tw, np.log(min_tw))
    # structural: only kinematic primitives move
    scene.vel[scene.kind != Kind.KINEMATIC] = 0.0
