"""Command-line surface: synth, train, render, eval, gradcheck, convert."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="training config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=".", help="output directory or file")
    parser.add_argument("--threads", type=int, default=0,
                        help="worker threads for the render kernel (0 = all)")
    parser.add_argument("--quiet", action="store_true")


def _parse_grid(text: str):
    from .renderer import AngularGrid

    H, W = (int(x) for x in text.lower().split("x"))
    return AngularGrid(H=H, W=W)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfsplat",
                                description="time-evolving radio-field synthesis")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a ground-truth scene + dataset")
    _common(sp)
    sp.add_argument("--static", type=int, default=8)
    sp.add_argument("--kinematic", type=int, default=1)
    sp.add_argument("--transient", type=int, default=1)
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--frame-rate", type=float, default=10.0)
    sp.add_argument("--rx-count", type=int, nargs=2, default=(3, 3),
                    metavar=("NX", "NY"))
    sp.add_argument("--rx-spacing", type=float, default=3.0)
    sp.add_argument("--noise-db", type=float, default=0.0)
    sp.add_argument("--grid", default="90x360", help="HxW angular bins")

    tp = sub.add_parser("train", help="fit a scene to a dataset")
    _common(tp)
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--init", default=None, help="initial scene checkpoint")
    tp.add_argument("--init-static", type=int, default=16,
                    help="random static init size when --init is absent")

    rp = sub.add_parser("render", help="render one spectrogram from a checkpoint")
    _common(rp)
    rp.add_argument("--ckpt", required=True)
    rp.add_argument("--receiver", required=True,
                    help="comma-separated x,y,z in meters")
    rp.add_argument("--time", type=float, required=True)
    rp.add_argument("--grid", default="90x360")
    rp.add_argument("--format", choices=("bin", "csv", "png"), default="bin")

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(ep)
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--split", choices=("spatial", "temporal", "none"),
                    default="none")
    ep.add_argument("--fraction", type=float, default=0.8,
                    help="train fraction; the held-out part is evaluated")
    ep.add_argument("--grid", default=None,
                    help="optional HxW; must match the dataset grid")
    ep.add_argument("--tiers", action="store_true",
                    help="add dynamics-stratified errors to the summary")
    ep.add_argument("--plot", action="store_true",
                    help="write ECDF plots (requires matplotlib)")

    gp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _common(gp)
    gp.add_argument("--scenes", type=int, default=3)
    gp.add_argument("--probes", type=int, default=2)
    gp.add_argument("--tol", type=float, default=1e-4)

    cp = sub.add_parser("convert", help="ingest an external NPZ dataset")
    _common(cp)
    cp.add_argument("--input", required=True)
    return p


def _cmd_synth(args) -> int:
    from .dataset import (SynthSpec, generate_dataset, make_receivers,
                          make_times, save_dataset, synth_scene)

    spec = SynthSpec(n_static=args.static, n_kinematic=args.kinematic,
                     n_transient=args.transient, n_frames=args.frames,
                     frame_rate=args.frame_rate,
                     rx_count=tuple(args.rx_count),
                     rx_spacing=args.rx_spacing, noise_db=args.noise_db,
                     seed=args.seed)
    scene = synth_scene(spec)
    grid = _parse_grid(args.grid)
    ds = generate_dataset(scene, make_receivers(spec), make_times(spec),
                          spec.noise_db, grid, seed=spec.seed)
    os.makedirs(args.out, exist_ok=True)
    scene.save(os.path.join(args.out, "truth.rfc"))
    save_dataset(ds, os.path.join(args.out, "dataset"))
    if not args.quiet:
        print(f"wrote scene (K={scene.K}) and {len(ds)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .dataset import SynthSpec, load_dataset, synth_scene
    from .scene import Scene
    from .training import TrainConfig, parse_config, train

    ds = load_dataset(args.dataset)
    config = parse_config(args.config) if args.config else TrainConfig()
    if args.init:
        init = Scene.load(args.init)
    else:
        t0, t1 = ds.manifest["t_span"]
        spec = SynthSpec(n_static=args.init_static, n_kinematic=0,
                         n_transient=0,
                         n_frames=max(int(ds.manifest.get("n_frames", 1)), 1),
                         frame_rate=float(ds.manifest.get("frame_rate") or 1.0),
                         t_start=float(t0), seed=config.seed)
        init = synth_scene(spec)
    os.makedirs(args.out, exist_ok=True)
    scene, metrics = train(ds, config, init, out_dir=args.out)
    if not args.quiet:
        last = metrics[-1] if metrics else {}
        print(f"trained K={scene.K} primitives; final total loss "
              f"{last.get('total', float('nan')):.5f}; artifacts in {args.out}")
    return 0


def _cmd_render(args) -> int:
    from .renderer import (render, save_spectrogram_bin, save_spectrogram_csv,
                           save_spectrogram_png)
    from .scene import Scene

    scene = Scene.load(args.ckpt)
    receiver = np.array([float(x) for x in args.receiver.split(",")])
    if receiver.size != 3:
        raise ValueError("receiver must be x,y,z")
    grid = _parse_grid(args.grid)
    out = render(scene, receiver, args.time, grid)
    path = args.out
    if os.path.isdir(path):
        path = os.path.join(path, f"spectrogram.{args.format}")
    if args.format == "bin":
        save_spectrogram_bin(out.power_dbm, path)
    elif args.format == "csv":
        save_spectrogram_csv(out.power_dbm, path)
    else:
        save_spectrogram_png(out.unit_image(), path)
    if not args.quiet:
        print(f"rss {out.rss_dbm:.3f} dBm -> {path}")
    return 0


def _cmd_eval(args) -> int:
    from .dataset import load_dataset, split
    from .metrics import (evaluate, stratify_by_dynamics, write_ecdf_csv,
                          write_per_sample_csv, write_summary_json)
    from .scene import Scene

    scene = Scene.load(args.ckpt)
    ds = load_dataset(args.dataset)
    if args.grid is not None:
        g = _parse_grid(args.grid)
        if (g.H, g.W) != (ds.grid.H, ds.grid.W):
            raise ValueError("grid mismatch")
    test = ds
    if args.split != "none":
        _, test = split(ds, args.split, args.fraction, seed=args.seed)
    summary = evaluate(scene, test)
    tiers = stratify_by_dynamics(test, summary) if args.tiers else None
    os.makedirs(args.out, exist_ok=True)
    write_per_sample_csv(summary, os.path.join(args.out, "per_sample.csv"))
    write_ecdf_csv(summary.ecdf_mse, os.path.join(args.out, "ecdf_mse.csv"))
    write_ecdf_csv(summary.ecdf_rss, os.path.join(args.out, "ecdf_rss.csv"))
    write_summary_json(summary, os.path.join(args.out, "summary.json"), tiers)
    if args.plot:
        _write_plots(summary, args.out)
    if not args.quiet:
        print(json.dumps(summary.to_json_dict(), indent=1, sort_keys=True))
    return 0


def _write_plots(summary, out_dir) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("plotting requested but matplotlib is not installed",
              file=sys.stderr)
        return 1
    for name, points, label in (("ecdf_mse", summary.ecdf_mse, "unit-image MSE"),
                                ("ecdf_rss", summary.ecdf_rss,
                                 "RSS absolute error (dB)")):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(points[0], points[1])
        ax.set_xlabel(label)
        ax.set_ylabel("cumulative fraction")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, f"{name}.png"), dpi=120)
        plt.close(fig)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_gradcheck

    seeds = range(args.seed, args.seed + args.scenes)
    report = run_gradcheck(seeds, probes_per_class=args.probes, tol=args.tol)
    print(format_report(report))
    return 0 if report["passed"] else 1


def _cmd_convert(args) -> int:
    from .dataset import convert_npz, save_dataset

    ds = convert_npz(args.input)
    save_dataset(ds, args.out)
    if not args.quiet:
        print(f"converted {len(ds)} samples into {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "convert": _cmd_convert,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        try:
            from . import _fast
            _fast.set_num_threads(args.threads)
        except Exception:
            pass
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"rfsplat {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
