"""Forward splatting pass: project, depth-sort, alpha-composite, power-map.

Active primitives are projected onto the receiver-centered sphere,
depth-sorted near-to-far, and alpha-composited in the complex domain per
angular bin. A primitive contributes to a bin only when the (wrapped)
chart distance between the bin center and the projected center is at most
the coverage radius r_k; this truncation is part of the model, so the
footprint-based fast path is exactly equivalent to the naive reference.

Two implementations are provided:

* ``render``             -- vectorized record pipeline, optional numba kernel
* ``render_reference``   -- naive per-bin loop over all projected primitives
                            (the compositing oracle used by the tests)

Per-bin composites are independent and scene data is read-only during a
pass, so the fast path parallelizes over bins without any reduction
nondeterminism.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .geometry import AngularCoord, ProjectedGaussian
from .scene import Kind, Scene, quat_to_rotation

# Culling thresholds and numeric guards.
ALPHA_CULL = 1.0 / 255.0   # primitives with rho below this never render
D_MIN = 0.1                # m; primitives closer to the receiver are culled
ALPHA_MAX = 1.0 - 1e-4     # opacity clamp keeping the backward pass finite
P_FLOOR = 1e-10            # mW; maps empty bins to exactly -100 dBm

DBM_LO = -100.0
DBM_HI = -40.0


class RenderError(ValueError):
    """Raised on invalid render configuration."""


@dataclass(frozen=True)
class AngularGrid:
    """Equirectangular angular grid; bin centers sit at half-bin offsets.

    Azimuth always spans [-pi, pi); the elevation range is configurable and
    defaults to the upper hemisphere [0, pi/2).
    """

    H: int = 90
    W: int = 360
    theta_lo: float = 0.0
    theta_hi: float = np.pi / 2.0

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise RenderError("grid must have at least one bin per axis")
        if not self.theta_hi > self.theta_lo:
            raise RenderError("empty elevation range")

    @property
    def n_bins(self) -> int:
        return self.H * self.W

    @property
    def d_phi(self) -> float:
        return 2.0 * np.pi / self.W

    @property
    def d_theta(self) -> float:
        return (self.theta_hi - self.theta_lo) / self.H

    def phi_centers(self) -> np.ndarray:
        return -np.pi + (np.arange(self.W) + 0.5) * self.d_phi

    def theta_centers(self) -> np.ndarray:
        return self.theta_lo + (np.arange(self.H) + 0.5) * self.d_theta

    def bin_center(self, row: int, col: int) -> AngularCoord:
        return AngularCoord(float(self.phi_centers()[col]),
                            float(self.theta_centers()[row]))


@functools.lru_cache(maxsize=16)
def _grid_angles(grid: AngularGrid) -> tuple[np.ndarray, np.ndarray]:
    """Flattened per-bin (phi, theta), row-major (H then W)."""
    phi = np.tile(grid.phi_centers(), grid.H)
    theta = np.repeat(grid.theta_centers(), grid.W)
    return phi, theta


@functools.lru_cache(maxsize=16)
def _grid_directions(grid: AngularGrid) -> np.ndarray:
    """Unit direction of every bin center, shape (H*W, 3)."""
    phi, theta = _grid_angles(grid)
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


def wrap_delta(delta):
    """Wrap angle difference(s) to (-pi, pi]."""
    w = geo.wrap_angle(delta)
    return np.where(w == -np.pi, np.pi, w)


@dataclass
class RenderOutput:
    """Complex field, power map (dBm) and the derived scalar RSS."""

    z: np.ndarray
    power_dbm: np.ndarray
    rss_dbm: float
    grid: AngularGrid

    def unit_image(self) -> np.ndarray:
        return normalize_spectrogram(self.power_dbm, self.grid)[1]


@dataclass
class AngularSpectrogram:
    """H x W power values clamped to the [-100, -40] dBm dataset range."""

    values: np.ndarray
    grid: AngularGrid


def rss_from_spectrogram(values: np.ndarray) -> float:
    """Total power: linear-domain sum over bins, converted back to dBm."""
    v = np.asarray(values, dtype=np.float64)
    return float(10.0 * np.log10(np.sum(10.0 ** (v / 10.0))))


def normalize_spectrogram(raw_dbm: np.ndarray,
                          grid: AngularGrid | None = None
                          ) -> tuple[AngularSpectrogram, np.ndarray]:
    """Clamp to [-100, -40] dBm and return the unit-scaled image (S+100)/60."""
    clamped = np.clip(np.asarray(raw_dbm, dtype=np.float64), DBM_LO, DBM_HI)
    unit = (clamped - DBM_LO) / (DBM_HI - DBM_LO)
    return AngularSpectrogram(clamped, grid), unit


def unit_to_dbm(unit: np.ndarray) -> np.ndarray:
    """Inverse of the unit scaling on [0, 1]."""
    return np.asarray(unit, dtype=np.float64) * (DBM_HI - DBM_LO) + DBM_LO


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

class Projection:
    """Depth-ordered per-primitive quantities shared by forward and backward."""

    __slots__ = ("idx", "mu_t", "p", "depth", "mu2d", "J", "sigma3", "cov2",
                 "comp", "sp", "spinv", "r_k", "rho", "amp", "act", "eta",
                 "receiver", "t", "n")

    def __init__(self, scene: Scene, receiver, t: float):
        receiver = np.asarray(receiver, dtype=np.float64)
        act = scene.active_mask(t)
        mu_t = scene.centers_at(t)
        p_all = mu_t - receiver
        depth_all = np.linalg.norm(p_all, axis=-1)
        rho_all = scene.rho()
        keep = act.any(axis=1) & (rho_all >= ALPHA_CULL) & (depth_all >= D_MIN)
        idx = np.nonzero(keep)[0]
        # depth sort, ties broken by ascending primitive index (stable)
        order = np.argsort(depth_all[idx], kind="stable")
        idx = idx[order]
        self.idx = idx
        self.n = idx.size
        self.receiver = receiver
        self.t = float(t)
        self.eta = scene.eta()
        self.mu_t = mu_t[idx]
        self.p = p_all[idx]
        self.depth = depth_all[idx]
        phi, theta = geo.spherical_coords_vec(self.p)
        self.mu2d = np.stack([phi, theta], axis=-1)
        self.J = geo.projection_jacobian_vec(self.p)
        self.sigma3 = scene.covariances()[idx]
        c = np.einsum("kab,kbc,kdc->kad", self.J, self.sigma3, self.J)
        c = 0.5 * (c + np.swapaxes(c, -1, -2))
        c[:, 0, 0] += geo.COV_FLOOR
        c[:, 1, 1] += geo.COV_FLOOR
        self.cov2 = c
        self.comp = 1.0 + (self.eta / self.depth) ** 2
        self.sp = c * self.comp[:, None, None]
        det = self.sp[:, 0, 0] * self.sp[:, 1, 1] - self.sp[:, 0, 1] ** 2
        inv = np.empty_like(self.sp)
        inv[:, 0, 0] = self.sp[:, 1, 1] / det
        inv[:, 1, 1] = self.sp[:, 0, 0] / det
        inv[:, 0, 1] = inv[:, 1, 0] = -self.sp[:, 0, 1] / det
        self.spinv = inv
        self.r_k = 3.0 * np.sqrt(geo.eigmax_2x2_vec(
            self.sp[:, 0, 0], self.sp[:, 0, 1], self.sp[:, 1, 1]))
        self.rho = rho_all[idx]
        self.act = act[idx]
        self.amp = scene.amplitudes(t)[idx]


def project_primitives(scene: Scene, receiver, t: float) -> list[ProjectedGaussian]:
    """Project every renderable primitive at time t (depth-ordered)."""
    proj = Projection(scene, receiver, t)
    out = []
    for i in range(proj.n):
        out.append(ProjectedGaussian(
            mu2d=AngularCoord(float(proj.mu2d[i, 0]), float(proj.mu2d[i, 1])),
            sigma2d=proj.sp[i].copy(),
            depth=float(proj.depth[i]),
            coverage_radius=float(proj.r_k[i]),
            primitive_index=int(proj.idx[i]),
        ))
    return out


def depth_sort(projected: list[ProjectedGaussian]) -> list[ProjectedGaussian]:
    """Near-to-far ordering; equal depths keep ascending primitive index."""
    return sorted(projected, key=lambda g: (g.depth, g.primitive_index))


def opacity(proj: ProjectedGaussian, rho: float, q: AngularCoord) -> float:
    """Truncated Gaussian opacity of one projected primitive at a bin center."""
    dphi = float(wrap_delta(q.phi - proj.mu2d.phi))
    dth = q.theta - proj.mu2d.theta
    if dphi * dphi + dth * dth > proj.coverage_radius**2:
        return 0.0
    s = proj.sigma2d
    det = s[0, 0] * s[1, 1] - s[0, 1] ** 2
    if det <= 0.0:
        raise RenderError("singular projected covariance")
    maha = (s[1, 1] * dphi * dphi - 2.0 * s[0, 1] * dphi * dth
            + s[0, 0] * dth * dth) / det
    return min(rho * float(np.exp(-0.5 * maha)), ALPHA_MAX)


def composite_bin(scene: Scene, ordered: list[ProjectedGaussian],
                  q: AngularCoord, receiver, t: float) -> complex:
    """Front-to-back complex compositing of one angular bin.

    Primitives whose wrapped chart distance to ``q`` exceeds their coverage
    radius contribute exactly zero (and do not attenuate).
    """
    from .scene import directional_response

    receiver = np.asarray(receiver, dtype=np.float64)
    p_bin = receiver + scene.r_rx * np.array([
        np.cos(q.theta) * np.cos(q.phi),
        np.cos(q.theta) * np.sin(q.phi),
        np.sin(q.theta),
    ])
    rho = scene.rho()
    T = 1.0
    z = 0.0 + 0.0j
    for g in ordered:
        a = opacity(g, float(rho[g.primitive_index]), q)
        if a == 0.0:
            continue
        prim = scene.primitive(g.primitive_index)
        mu = prim.mu0 + prim.velocity * t if prim.kind == Kind.KINEMATIC else prim.mu0
        dvec = p_bin - mu
        nrm = float(np.linalg.norm(dvec))
        if nrm > 1e-12:
            R = directional_response(prim, dvec / nrm, t)
            z += T * a * R
        T *= 1.0 - a
    return z


def _finish(z_flat: np.ndarray, grid: AngularGrid) -> RenderOutput:
    z = z_flat.reshape(grid.H, grid.W)
    power = 10.0 * np.log10(np.abs(z) ** 2 + P_FLOOR)
    return RenderOutput(z=z, power_dbm=power,
                        rss_dbm=rss_from_spectrogram(power), grid=grid)


def render_reference(scene: Scene, receiver, t: float,
                     grid: AngularGrid | None = None) -> RenderOutput:
    """Naive sequential renderer: no footprint culling, plain per-bin loop."""
    grid = grid or AngularGrid()
    ordered = depth_sort(project_primitives(scene, receiver, t))
    z = np.zeros(grid.n_bins, dtype=np.complex128)
    phi, theta = _grid_angles(grid)
    for j in range(grid.n_bins):
        z[j] = composite_bin(scene, ordered, AngularCoord(phi[j], theta[j]),
                             receiver, t)
    return _finish(z, grid)


# ---------------------------------------------------------------------------
# record pipeline (fast path)
# ---------------------------------------------------------------------------

def build_records(proj: Projection, grid: AngularGrid
                  ) -> tuple[np.ndarray, np.ndarray]:
    """(rec_prim, rec_bin) sorted by bin, depth order preserved within bins.

    ``rec_prim`` indexes into the depth-ordered projection arrays. Only
    in-footprint records (wrapped chart distance <= r_k) are emitted, which
    is exact because the truncation is part of the compositing model.
    """
    if proj.n == 0:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    H, W = grid.H, grid.W
    dphi, dth = grid.d_phi, grid.d_theta
    ph, th = proj.mu2d[:, 0], proj.mu2d[:, 1]
    r = proj.r_k
    r0 = np.ceil((th - r - grid.theta_lo) / dth - 0.5).astype(np.int64)
    r1 = np.floor((th + r - grid.theta_lo) / dth - 0.5).astype(np.int64)
    r0 = np.clip(r0, 0, H - 1)
    r1 = np.clip(r1, -1, H - 1)
    nrows = np.maximum(r1 - r0 + 1, 0)
    full = 2.0 * r >= 2.0 * np.pi - dphi
    c0 = np.where(full, 0, np.ceil((ph - r + np.pi) / dphi - 0.5)).astype(np.int64)
    c1 = np.where(full, W - 1, np.floor((ph + r + np.pi) / dphi - 0.5)).astype(np.int64)
    ncols = np.minimum(c1 - c0 + 1, W)
    counts = nrows * ncols
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    rec_prim = np.repeat(np.arange(proj.n, dtype=np.int64), counts)
    starts = np.cumsum(counts) - counts
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    nc = np.repeat(ncols, counts)
    row = np.repeat(r0, counts) + within // nc
    col = (np.repeat(c0, counts) + within % nc) % W
    phi_c, th_c = _grid_angles(grid)
    bins = row * W + col
    dp = wrap_delta(phi_c[bins] - ph[rec_prim])
    dt_ = th_c[bins] - th[rec_prim]
    keep = dp * dp + dt_ * dt_ <= (r[rec_prim]) ** 2
    rec_prim = rec_prim[keep]
    bins = bins[keep]
    order = np.argsort(bins, kind="stable")
    return rec_prim[order], bins[order]


def _record_forward(scene: Scene, proj: Projection, rec_prim: np.ndarray,
                    rec_bin: np.ndarray, grid: AngularGrid) -> dict:
    """Per-record opacity/transmittance/response arrays (numpy path).

    Returns everything the backward pass needs; ``z`` is the flattened
    complex field.
    """
    HW = grid.n_bins
    out: dict = {"z": np.zeros(HW, dtype=np.complex128)}
    N = rec_prim.size
    out["n_records"] = N
    if N == 0:
        return out
    phi_c, th_c = _grid_angles(grid)
    dq = np.stack([
        np.asarray(wrap_delta(phi_c[rec_bin] - proj.mu2d[rec_prim, 0])),
        th_c[rec_bin] - proj.mu2d[rec_prim, 1],
    ], axis=-1)
    inv = proj.spinv[rec_prim]
    maha = (inv[:, 0, 0] * dq[:, 0] ** 2 + 2.0 * inv[:, 0, 1] * dq[:, 0] * dq[:, 1]
            + inv[:, 1, 1] * dq[:, 1] ** 2)
    e = np.exp(-0.5 * maha)
    alpha_raw = proj.rho[rec_prim] * e
    clamped = alpha_raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, alpha_raw)
    # segmented exclusive prefix product of (1 - alpha), in log space
    seg_start = np.ones(N, dtype=bool)
    seg_start[1:] = rec_bin[1:] != rec_bin[:-1]
    lg = np.log1p(-alpha)
    cs = np.cumsum(lg)
    first_idx = np.nonzero(seg_start)[0]
    seg_id = np.cumsum(seg_start) - 1
    offset = np.concatenate([[0.0], cs])[first_idx][seg_id]
    T = np.exp(cs - lg - offset)
    # responses: d depends on the bin, lobes on the primitive
    dirs = _grid_directions(grid)
    p_bin = proj.receiver[None, :] + scene.r_rx * dirs[rec_bin]
    dvec = p_bin - proj.mu_t[rec_prim]
    dn_raw = np.linalg.norm(dvec, axis=-1)
    dn = np.maximum(dn_raw, 1e-12)
    d = dvec / dn[:, None]
    v = scene.unit_v()[proj.idx]           # (n, M, 3)
    xax, yax = geo.tangent_frames_vec(v)
    lam = scene.lam()[proj.idx]
    cpsi = np.cos(scene.psi[proj.idx])
    spsi = np.sin(scene.psi[proj.idx])
    dv = np.einsum("nc,nmc->nm", d, v[rec_prim])
    dx = np.einsum("nc,nmc->nm", d, xax[rec_prim])
    dy = np.einsum("nc,nmc->nm", d, yax[rec_prim])
    front = dv > 0.0
    w = np.where(front, np.exp(-(lam[rec_prim, :, 0] * dx**2
                                 + lam[rec_prim, :, 1] * dy**2)), 0.0)
    aw = proj.amp[rec_prim] * w
    R = np.sum(aw * (cpsi[rec_prim] - 1j * spsi[rec_prim]), axis=-1)
    R = np.where(dn_raw > 1e-12, R, 0.0)  # degenerate bin-point/center overlap
    contrib = T * alpha * R
    z = np.zeros(HW, dtype=np.complex128)
    np.add.at(z, rec_bin, contrib)
    out.update(z=z, dq=dq, maha=maha, e=e, alpha_raw=alpha_raw, alpha=alpha,
               clamped=clamped, T=T, R=R, contrib=contrib, d=d, dn=dn,
               dv=dv, dx=dx, dy=dy, front=front, w=w, xax=xax, yax=yax,
               seg_start=seg_start, seg_id=seg_id)
    return out


_FAST = None
_FAST_TRIED = False


def _fast_module():
    global _FAST, _FAST_TRIED
    if not _FAST_TRIED:
        _FAST_TRIED = True
        try:
            from . import _fast
            _FAST = _fast
        except Exception:
            _FAST = None
    return _FAST


def render(scene: Scene, receiver, t: float, grid: AngularGrid | None = None,
           backend: str = "auto") -> RenderOutput:
    """Render one angular power spectrogram.

    backend: "auto" (numba kernel when available), "numba", "numpy" or
    "reference". All backends implement the same model; outputs agree to
    floating-point accumulation order.
    """
    grid = grid or AngularGrid()
    if backend == "reference":
        return render_reference(scene, receiver, t, grid)
    if backend not in ("auto", "numba", "numpy"):
        raise RenderError(f"unknown backend {backend!r}")
    proj = Projection(scene, receiver, t)
    rec_prim, rec_bin = build_records(proj, grid)
    fast = _fast_module() if backend in ("auto", "numba") else None
    if backend == "numba" and fast is None:
        raise RenderError("numba backend requested but numba is unavailable")
    if fast is not None and proj.n > 0:
        z = fast.composite(scene, proj, rec_prim, rec_bin, grid)
        return _finish(z, grid)
    fwd = _record_forward(scene, proj, rec_prim, rec_bin, grid)
    return _finish(fwd["z"], grid)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def save_spectrogram_bin(values: np.ndarray, path) -> None:
    """Flat little-endian float32, row-major (H then W)."""
    np.asarray(values, dtype="<f4").tofile(path)


def load_spectrogram_bin(path, H: int, W: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != H * W:
        raise RenderError("spectrogram file size does not match grid")
    return raw.reshape(H, W).astype(np.float64)


def save_spectrogram_csv(values: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in np.asarray(values):
            writer.writerow([repr(float(x)) for x in row])


def save_spectrogram_png(unit_image: np.ndarray, path) -> None:
    """8-bit grayscale PNG of the unit-scaled image."""
    from PIL import Image

    img = np.clip(np.asarray(unit_image) * 255.0, 0.0, 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
