"""Evaluation metrics: MSE/PSNR on unit images, RSS error, ECDFs, tiers.

MSE is computed in the unit-scaled image domain (which makes PSNR well
defined on the [-100, -40] dBm normalization); RSS errors are absolute dB
differences of the scalar received signal strength. Receivers can be
stratified into low/moderate/high dynamics tiers by the temporal standard
deviation of their ground-truth RSS.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .renderer import AngularGrid, render
from .scene import Scene

PSNR_CAP = 100.0
_PCTS = (5, 10, 25, 50, 75, 90, 95, 99)


class EvalError(ValueError):
    """Raised on empty or inconsistent evaluation inputs."""


def psnr_from_mse(mse: float) -> float:
    """10 log10(1/MSE) on unit-range images, capped at 100 dB."""
    if mse < 1e-10:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def ecdf(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF points: sorted values vs cumulative fraction."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    frac = np.arange(1, v.size + 1) / v.size
    return v, frac


@dataclass
class MetricsSummary:
    per_sample: list[dict]
    mean_mse: float
    median_mse: float
    mean_psnr: float
    mean_rss_err: float
    median_rss_err: float
    percentiles: dict
    ecdf_mse: tuple[np.ndarray, np.ndarray]
    ecdf_rss: tuple[np.ndarray, np.ndarray]

    def to_json_dict(self) -> dict:
        return {
            "n_samples": len(self.per_sample),
            "mean_mse": self.mean_mse,
            "median_mse": self.median_mse,
            "mean_psnr_db": self.mean_psnr,
            "mean_rss_abs_err_db": self.mean_rss_err,
            "median_rss_abs_err_db": self.median_rss_err,
            "percentiles": self.percentiles,
        }


def evaluate(scene: Scene, test: Dataset, backend: str = "auto"
             ) -> MetricsSummary:
    """Render every test sample and aggregate reconstruction metrics."""
    if len(test) == 0:
        raise EvalError("empty test set")
    grid: AngularGrid = test.grid
    rows = []
    for i, s in enumerate(test.samples):
        out = render(scene, s.receiver, s.t, grid, backend=backend)
        pred_unit = out.unit_image()
        tgt_unit = (s.values + 100.0) / 60.0
        mse = float(np.mean((pred_unit - tgt_unit) ** 2))
        rows.append({
            "sample_id": i,
            "rx_x": float(s.receiver[0]), "rx_y": float(s.receiver[1]),
            "rx_z": float(s.receiver[2]), "t": s.t,
            "mse": mse, "psnr": psnr_from_mse(mse),
            "rss_err_db": abs(out.rss_dbm - s.rss_dbm),
        })
    mses = np.array([r["mse"] for r in rows])
    rss = np.array([r["rss_err_db"] for r in rows])
    pct = {f"p{p}_mse": float(np.percentile(mses, p)) for p in _PCTS}
    pct.update({f"p{p}_rss_err_db": float(np.percentile(rss, p)) for p in _PCTS})
    return MetricsSummary(
        per_sample=rows,
        mean_mse=float(mses.mean()), median_mse=float(np.median(mses)),
        mean_psnr=float(np.mean([r["psnr"] for r in rows])),
        mean_rss_err=float(rss.mean()), median_rss_err=float(np.median(rss)),
        percentiles=pct, ecdf_mse=ecdf(mses), ecdf_rss=ecdf(rss),
    )


def stratify_by_dynamics(test: Dataset, summary: MetricsSummary,
                         tiers: int = 3) -> list[dict]:
    """Group receivers by the temporal std of their ground-truth RSS.

    Receivers are ranked by std (ties keep first-occurrence receiver
    order) and split into equal-count tiers, low dynamics first; returns
    per-tier mean/median RSS absolute error.
    """
    receivers = test.receivers()
    if len({s.t for s in test.samples}) < 2:
        raise EvalError("no temporal axis")
    by_rx: dict = {r: [] for r in receivers}
    for s in test.samples:
        by_rx[tuple(s.receiver.tolist())].append(s.rss_dbm)
    stds = {r: float(np.std(np.asarray(v))) for r, v in by_rx.items()}
    order = sorted(range(len(receivers)),
                   key=lambda i: (stds[receivers[i]], i))
    groups = np.array_split(np.asarray(order), tiers)
    err_by_rx: dict = {r: [] for r in receivers}
    for row in summary.per_sample:
        key = (row["rx_x"], row["rx_y"], row["rx_z"])
        err_by_rx[key].append(row["rss_err_db"])
    out = []
    names = ["low", "moderate", "high"]
    for g, idxs in enumerate(groups):
        errs = np.concatenate([np.asarray(err_by_rx[receivers[i]])
                               for i in idxs]) if len(idxs) else np.array([np.nan])
        out.append({
            "tier": names[g] if g < len(names) else f"tier{g}",
            "n_receivers": int(len(idxs)),
            "rss_std_mean": float(np.mean([stds[receivers[i]] for i in idxs]))
            if len(idxs) else float("nan"),
            "mean_rss_err_db": float(np.mean(errs)),
            "median_rss_err_db": float(np.median(errs)),
        })
    return out


def write_per_sample_csv(summary: MetricsSummary, path) -> None:
    cols = ["sample_id", "rx_x", "rx_y", "rx_z", "t", "mse", "psnr",
            "rss_err_db"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in summary.per_sample:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c]
                        for c in cols])


def write_ecdf_csv(points: tuple[np.ndarray, np.ndarray], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["value", "cum_fraction"])
        for v, c in zip(*points):
            w.writerow([repr(float(v)), repr(float(c))])


def write_summary_json(summary: MetricsSummary, path,
                       tiers: list[dict] | None = None) -> None:
    doc = summary.to_json_dict()
    if tiers is not None:
        doc["dynamics_tiers"] = tiers
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
