"""Primitive parameter storage, temporal envelopes and directional responses.

The scene keeps every learnable quantity as a raw (pre-activation) float64
array so unconstrained gradient steps cannot violate positivity or norm
constraints:

==========  =================  ====================================
class       raw storage        activation
==========  =================  ====================================
mu0         (K, 3)             identity
scale       (K, 3) log         exp
rotation    (K, 4)             normalize (unit quaternion)
rho         (K,)               logistic
velocity    (K, 3)             identity, zero unless kinematic
v           (K, M, 3)          normalize (unit lobe direction)
lambda      (K, M, 2)          1 + softplus, in [LAMBDA_MIN, LAMBDA_MAX]
a_bar       (K, M)             softplus
psi         (K, M)             identity
t_w         (K, M) log         exp
t_c         (K, M)             identity
eta         scalar             softplus
==========  =================  ====================================

Checkpoints serialize the raw values; see ``Scene.save`` for the exact
field order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import as_unit, normalize

LAMBDA_MIN = 1.0
LAMBDA_MAX = 1e4

# Effective temporal support is t_c +- SUPPORT_SIGMAS * t_w.
SUPPORT_SIGMAS = 3.0

_MAGIC = b"RFSPLT01"
CHECKPOINT_VERSION = 1


class SceneError(ValueError):
    """Raised on invalid scene construction or checkpoint I/O."""


class Kind(IntEnum):
    STATIC = 0
    KINEMATIC = 1
    TRANSIENT = 2


def softplus(x):
    """log(1 + e^x), overflow-safe."""
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise SceneError("softplus_inv requires positive input")
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise SceneError("logit requires input in (0, 1)")
    return np.log(p) - np.log1p(-p)


def _softplus_inv_or_tiny(y, floor: float = -40.0) -> float:
    """softplus_inv that maps y <= 0 to a deeply negative raw value."""
    return float(softplus_inv(y)) if y > 0.0 else floor


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


@dataclass
class TemporalEnvelope:
    """1D Gaussian amplitude envelope with center ``t_c`` and width ``t_w`` (s)."""

    t_c: float
    t_w: float

    def __post_init__(self):
        if self.t_w <= 0.0:
            raise SceneError("t_w must be positive")

    @property
    def support(self) -> tuple[float, float]:
        half = SUPPORT_SIGMAS * self.t_w
        return (self.t_c - half, self.t_c + half)


@dataclass
class AsgLobe:
    """One directional radiation lobe: direction, spreads, amplitude, phase, envelope."""

    v: np.ndarray
    lambda_x: float
    lambda_y: float
    a_bar: float
    psi: float
    envelope: TemporalEnvelope

    def __post_init__(self):
        self.v = normalize(self.v)
        if not (LAMBDA_MIN <= self.lambda_x <= LAMBDA_MAX):
            raise SceneError(f"lambda_x outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")
        if not (LAMBDA_MIN <= self.lambda_y <= LAMBDA_MAX):
            raise SceneError(f"lambda_y outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")
        if self.a_bar < 0.0:
            raise SceneError("a_bar must be nonnegative")


@dataclass
class GaussianPrimitive:
    """One scattering element: geometry, attenuation, drift and its ASG lobes."""

    mu0: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    rho: float
    velocity: np.ndarray
    kind: Kind
    lobes: list[AsgLobe] = field(default_factory=list)

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if np.any(self.scale <= 0.0):
            raise SceneError("scale entries must be positive")
        n = float(np.linalg.norm(self.rotation))
        if abs(n - 1.0) > 1e-6:
            raise SceneError("rotation quaternion must be unit length")
        if not (0.0 < self.rho < 1.0):
            raise SceneError("rho must lie in (0, 1)")
        if self.kind != Kind.KINEMATIC and np.any(self.velocity != 0.0):
            raise SceneError("only kinematic primitives may move")


def temporal_amplitude(lobe: AsgLobe, t: float) -> float:
    """Gaussian-gated linear amplitude: a_bar * exp(-(t - t_c)^2 / (2 t_w^2))."""
    env = lobe.envelope
    u = (t - env.t_c) / env.t_w
    return lobe.a_bar * float(np.exp(-0.5 * u * u))


def is_active(lobe: AsgLobe, t: float) -> bool:
    """True iff t lies in the closed support [t_c - 3 t_w, t_c + 3 t_w]."""
    lo, hi = lobe.envelope.support
    return lo <= t <= hi


def center_at(prim: GaussianPrimitive, t: float) -> np.ndarray:
    """Primitive center at time t; only kinematic primitives drift."""
    if prim.kind == Kind.KINEMATIC:
        return prim.mu0 + prim.velocity * t
    return prim.mu0.copy()


def directional_response(prim: GaussianPrimitive, d, t: float) -> complex:
    """Complex response sum over active lobes: sum_m a_m(t) e^{-j psi_m} w_m(d)."""
    from .geometry import asg_weight

    d = as_unit(d)
    out = 0.0 + 0.0j
    for lobe in prim.lobes:
        if not is_active(lobe, t):
            continue
        a = temporal_amplitude(lobe, t)
        w = asg_weight(lobe.v, lobe.lambda_x, lobe.lambda_y, d)
        out += a * np.exp(-1j * lobe.psi) * w
    return complex(out)


def covariance_of(prim: GaussianPrimitive) -> np.ndarray:
    """3x3 SPD covariance R diag(scale^2) R^T realized from the stored factors."""
    R = quat_to_rotation(prim.rotation / np.linalg.norm(prim.rotation))
    return R @ np.diag(prim.scale**2) @ R.T


# Names of the 12 learnable parameter classes, in checkpoint order.
PARAM_CLASSES = (
    "mu0",
    "log_scale",
    "quat",
    "rho_logit",
    "vel",
    "v_raw",
    "lam_raw",
    "abar_raw",
    "psi",
    "t_c",
    "log_tw",
    "eta_raw",
)


class Scene:
    """Struct-of-arrays container for all primitives plus global parameters.

    Mutation (optimizer steps, birth, prune) must happen between render or
    backward passes; reads are safe from any number of workers.
    """

    def __init__(self, K: int, M: int, eta_raw: float, r_rx: float,
                 t_span: tuple[float, float]):
        if M < 1:
            raise SceneError("scenes need at least one lobe slot per primitive")
        if r_rx <= 0.0:
            raise SceneError("r_rx must be positive")
        if not t_span[1] > t_span[0]:
            raise SceneError("t_span must be a nonempty interval")
        self.M = int(M)
        self.eta_raw = float(eta_raw)
        self.r_rx = float(r_rx)
        self.t_span = (float(t_span[0]), float(t_span[1]))
        self.kind = np.zeros(K, dtype=np.int8)
        self.mu0 = np.zeros((K, 3))
        self.log_scale = np.zeros((K, 3))
        self.quat = np.zeros((K, 4))
        self.quat[:, 0] = 1.0
        self.rho_logit = np.zeros(K)
        self.vel = np.zeros((K, 3))
        self.v_raw = np.zeros((K, M, 3))
        self.v_raw[..., 2] = 1.0
        self.lam_raw = np.zeros((K, M, 2))
        self.abar_raw = np.zeros((K, M))
        self.psi = np.zeros((K, M))
        self.t_c = np.zeros((K, M))
        self.log_tw = np.zeros((K, M))

    # -- activated views -------------------------------------------------

    @property
    def K(self) -> int:
        return self.mu0.shape[0]

    @property
    def t_span_length(self) -> float:
        return self.t_span[1] - self.t_span[0]

    def eta(self) -> float:
        return float(softplus(self.eta_raw))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def unit_quat(self) -> np.ndarray:
        return self.quat / np.linalg.norm(self.quat, axis=-1, keepdims=True)

    def rho(self) -> np.ndarray:
        return sigmoid(self.rho_logit)

    def unit_v(self) -> np.ndarray:
        return self.v_raw / np.linalg.norm(self.v_raw, axis=-1, keepdims=True)

    def lam(self) -> np.ndarray:
        return LAMBDA_MIN + softplus(self.lam_raw)

    def abar(self) -> np.ndarray:
        return softplus(self.abar_raw)

    def tw(self) -> np.ndarray:
        return np.exp(self.log_tw)

    def covariances(self) -> np.ndarray:
        R = quat_to_rotation(self.unit_quat())
        s2 = self.scales() ** 2
        return np.einsum("kab,kb,kcb->kac", R, s2, R)

    def centers_at(self, t: float) -> np.ndarray:
        mu = self.mu0.copy()
        kin = self.kind == Kind.KINEMATIC
        mu[kin] += self.vel[kin] * t
        return mu

    def amplitudes(self, t: float) -> np.ndarray:
        """(K, M) linear lobe amplitudes a_{k,m}(t), zero outside support."""
        tw = self.tw()
        u = (t - self.t_c) / tw
        a = self.abar() * np.exp(-0.5 * u * u)
        return np.where(self.active_mask(t), a, 0.0)

    def active_mask(self, t: float) -> np.ndarray:
        """(K, M) closed-interval temporal support mask."""
        return np.abs(t - self.t_c) <= SUPPORT_SIGMAS * self.tw()

    def counts_by_kind(self) -> dict[Kind, int]:
        return {k: int(np.sum(self.kind == k)) for k in Kind}

    # -- construction and item access ------------------------------------

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], eta: float,
                        r_rx: float, t_span: tuple[float, float],
                        M: int | None = None) -> "Scene":
        if M is None:
            M = max((len(p.lobes) for p in prims), default=1)
        if any(len(p.lobes) != M for p in prims):
            raise SceneError("all primitives must carry exactly M lobes")
        if eta <= 0.0:
            raise SceneError("eta must be positive (softplus-stored)")
        sc = cls(len(prims), M, float(softplus_inv(eta)), r_rx, t_span)
        span = t_span[1] - t_span[0]
        for k, p in enumerate(prims):
            sc.kind[k] = int(p.kind)
            sc.mu0[k] = p.mu0
            sc.log_scale[k] = np.log(p.scale)
            sc.quat[k] = p.rotation
            sc.rho_logit[k] = logit(p.rho)
            sc.vel[k] = p.velocity
            for m, lobe in enumerate(p.lobes):
                tw = lobe.envelope.t_w
                if p.kind == Kind.STATIC and tw < span:
                    raise SceneError("static lobes must satisfy t_w >= t_span length")
                if p.kind == Kind.TRANSIENT and tw > span / 4.0:
                    raise SceneError("transient lobes must satisfy t_w <= t_span/4")
                sc.v_raw[k, m] = lobe.v
                sc.lam_raw[k, m, 0] = _softplus_inv_or_tiny(lobe.lambda_x - LAMBDA_MIN)
                sc.lam_raw[k, m, 1] = _softplus_inv_or_tiny(lobe.lambda_y - LAMBDA_MIN)
                sc.abar_raw[k, m] = _softplus_inv_or_tiny(lobe.a_bar)
                sc.psi[k, m] = lobe.psi
                sc.t_c[k, m] = lobe.envelope.t_c
                sc.log_tw[k, m] = np.log(tw)
        return sc

    def primitive(self, k: int) -> GaussianPrimitive:
        """Activated dataclass view of primitive k (a copy, not a live view)."""
        lam = self.lam()[k]
        abar = self.abar()[k]
        tw = self.tw()[k]
        v = self.unit_v()[k]
        lobes = [
            AsgLobe(v[m], lam[m, 0], lam[m, 1], abar[m], float(self.psi[k, m]),
                    TemporalEnvelope(float(self.t_c[k, m]), float(tw[m])))
            for m in range(self.M)
        ]
        return GaussianPrimitive(
            mu0=self.mu0[k].copy(),
            scale=self.scales()[k],
            rotation=self.unit_quat()[k],
            rho=float(self.rho()[k]),
            velocity=self.vel[k].copy(),
            kind=Kind(int(self.kind[k])),
            lobes=lobes,
        )

    def copy(self) -> "Scene":
        out = Scene(self.K, self.M, self.eta_raw, self.r_rx, self.t_span)
        for name in ("kind", "mu0", "log_scale", "quat", "rho_logit", "vel",
                     "v_raw", "lam_raw", "abar_raw", "psi", "t_c", "log_tw"):
            setattr(out, name, getattr(self, name).copy())
        return out

    def append(self, other: "Scene") -> None:
        """Concatenate another scene's primitives (same M) in place."""
        if other.M != self.M:
            raise SceneError("lobe count mismatch")
        for name in ("kind", "mu0", "log_scale", "quat", "rho_logit", "vel",
                     "v_raw", "lam_raw", "abar_raw", "psi", "t_c", "log_tw"):
            setattr(self, name,
                    np.concatenate([getattr(self, name), getattr(other, name)]))

    def select(self, keep: np.ndarray) -> None:
        """Keep only the primitives flagged in the boolean mask, in place."""
        for name in ("kind", "mu0", "log_scale", "quat", "rho_logit", "vel",
                     "v_raw", "lam_raw", "abar_raw", "psi", "t_c", "log_tw"):
            setattr(self, name, getattr(self, name)[keep])

    def validate(self) -> None:
        """Raise if any structural invariant is violated."""
        counts = self.counts_by_kind()
        if sum(counts.values()) != self.K:
            raise SceneError("kind partition does not cover the scene")
        moving = (self.kind != Kind.KINEMATIC)[:, None] & (self.vel != 0.0).any(
            axis=-1, keepdims=True)
        if np.any(moving):
            raise SceneError("non-kinematic primitive has nonzero velocity")
        span = self.t_span_length
        tw = self.tw()
        if np.any(tw[self.kind == Kind.STATIC] < span * (1.0 - 1e-12)):
            raise SceneError("static lobe width below t_span")
        if np.any(tw[self.kind == Kind.TRANSIENT] > span / 4.0 * (1.0 + 1e-12)):
            raise SceneError("transient lobe width above t_span/4")
        lam = self.lam()
        if np.any(lam < LAMBDA_MIN) or np.any(lam > LAMBDA_MAX * (1.0 + 1e-9)):
            raise SceneError("lambda outside allowed range")

    # -- checkpoint I/O ---------------------------------------------------

    def save(self, path) -> None:
        """Write the checkpoint.

        Layout (little-endian): magic ``RFSPLT01``; header ``<IIIdddd`` =
        (version, K, M, eta_raw, r_rx, t_min, t_max); then K records of
        float32: kind, mu0[3], log_scale[3], quat[4], rho_logit, vel[3],
        then per lobe v_raw[3], lam_raw[2], abar_raw, psi, t_c, log_tw.
        """
        rec = np.empty((self.K, 15 + 9 * self.M), dtype="<f4")
        rec[:, 0] = self.kind
        rec[:, 1:4] = self.mu0
        rec[:, 4:7] = self.log_scale
        rec[:, 7:11] = self.quat
        rec[:, 11] = self.rho_logit
        rec[:, 12:15] = self.vel
        lob = rec[:, 15:].reshape(self.K, self.M, 9)
        lob[:, :, 0:3] = self.v_raw
        lob[:, :, 3:5] = self.lam_raw
        lob[:, :, 5] = self.abar_raw
        lob[:, :, 6] = self.psi
        lob[:, :, 7] = self.t_c
        lob[:, :, 8] = self.log_tw
        header = struct.pack("<IIIdddd", CHECKPOINT_VERSION, self.K, self.M,
                             self.eta_raw, self.r_rx, *self.t_span)
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(header)
            f.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[: len(_MAGIC)] != _MAGIC:
            raise SceneError("not a scene checkpoint (bad magic)")
        off = len(_MAGIC)
        hdr_size = struct.calcsize("<IIIdddd")
        if len(blob) < off + hdr_size:
            raise SceneError("truncated checkpoint header")
        version, K, M, eta_raw, r_rx, t0, t1 = struct.unpack_from("<IIIdddd", blob, off)
        if version != CHECKPOINT_VERSION:
            raise SceneError(f"unsupported checkpoint version {version}")
        off += hdr_size
        rec_floats = K * (15 + 9 * M)
        if len(blob) != off + 4 * rec_floats:
            raise SceneError("truncated checkpoint records")
        rec = np.frombuffer(blob, dtype="<f4", offset=off).reshape(
            K, 15 + 9 * M).astype(np.float64)
        sc = cls(K, M, eta_raw, r_rx, (t0, t1))
        sc.kind = rec[:, 0].astype(np.int8)
        if np.any(sc.kind > int(Kind.TRANSIENT)) or np.any(sc.kind < 0):
            raise SceneError("corrupt kind tag in checkpoint")
        sc.mu0 = np.ascontiguousarray(rec[:, 1:4])
        sc.log_scale = np.ascontiguousarray(rec[:, 4:7])
        sc.quat = np.ascontiguousarray(rec[:, 7:11])
        sc.rho_logit = np.ascontiguousarray(rec[:, 11])
        sc.vel = np.ascontiguousarray(rec[:, 12:15])
        lob = rec[:, 15:].reshape(K, M, 9)
        sc.v_raw = np.ascontiguousarray(lob[:, :, 0:3])
        sc.lam_raw = np.ascontiguousarray(lob[:, :, 3:5])
        sc.abar_raw = np.ascontiguousarray(lob[:, :, 5])
        sc.psi = np.ascontiguousarray(lob[:, :, 6])
        sc.t_c = np.ascontiguousarray(lob[:, :, 7])
        sc.log_tw = np.ascontiguousarray(lob[:, :, 8])
        return sc
