"""Command-line workbench.

Subcommands map onto the library: `theory-*` run the model-problem
oracles, `fit-*` train a single field, `sweep-*` run the benchmark
grids.  Options may come from flags or from an INI-style config file
(sections = subcommand names, `[common]` for shared keys); flags win.
Exit codes: 0 success, 1 usage/configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DivergenceError, NumericError, StructureError

COMMANDS = (
    "theory-spectrum",
    "theory-lowrank",
    "theory-align",
    "fit-image2d",
    "fit-sdf",
    "sweep-rotation",
    "sweep-resolution",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _int_list(text: str):
    return tuple(int(x) for x in text.split(",") if x)


def _float_list(text: str):
    return tuple(float(x) for x in text.split(",") if x)


def _build_parser() -> _Parser:
    p = _Parser(prog="tilted", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration and exit")
    p.add_argument("--out-dir", default=None,
                   help="output directory (default: $TILTED_OUT_DIR or ./tilted_out)")
    p.add_argument("--seed", type=int, default=None, help="override the base seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for sweep cells (1 = reference path)")
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("theory-spectrum", parents=[], help="diamond spectrum vs analytic")
    sp.add_argument("--n", type=int, default=1024)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--alpha", type=float, default=1.0 / math.sqrt(2.0))
    sp.add_argument("--plot", action="store_true")

    lr = sub.add_parser("theory-lowrank", help="rank-F error floor and PSNR rank demands")
    lr.add_argument("--sizes", type=_int_list, default=(128, 256, 512))
    lr.add_argument("--max-rank", type=int, default=32)
    lr.add_argument("--psnr-targets", type=_float_list, default=(30.0, 40.0, 50.0))
    lr.add_argument("--plot", action="store_true")

    al = sub.add_parser("theory-align", help="three-stage alternating recovery sweep")
    al.add_argument("--n", type=int, default=512)
    al.add_argument("--sigma-sq", type=float, default=1e-4)
    al.add_argument("--beta", type=float, default=0.05)
    al.add_argument("--t-rough", type=int, default=40)
    al.add_argument("--t-nu", type=int, default=2000)
    al.add_argument("--t-u", type=int, default=16)
    al.add_argument("--seeds", type=int, default=200)
    al.add_argument("--angle-tol", type=float, default=0.01)
    al.add_argument("--u-tol", type=float, default=0.2)

    f2 = sub.add_parser("fit-image2d", help="fit one 2D image and dump artifacts")
    f2.add_argument("--image", default="bricks", help="bundled texture name or PNG path")
    f2.add_argument("--image-size", type=int, default=128)
    f2.add_argument("--angle", type=float, default=30.0, help="content rotation, degrees")
    f2.add_argument("--variant", choices=("axis", "tilted"), default="tilted")
    f2.add_argument("--steps", type=int, default=800)
    f2.add_argument("--two-phase", action="store_true",
                    help="bottleneck-then-full schedule for the tilted variant")

    fs = sub.add_parser("fit-sdf", help="fit one analytic SDF and report IoU")
    fs.add_argument("--shape", choices=("sphere", "box", "rotated-box", "union2"),
                    default="rotated-box")
    fs.add_argument("--decomposition", choices=("kplanes", "vm"), default="kplanes")
    fs.add_argument("--variant", choices=("axis", "tilted"), default="tilted")
    fs.add_argument("--steps", type=int, default=1200)
    fs.add_argument("--train-points", type=int, default=200_000)
    fs.add_argument("--eval-resolution", type=int, default=64)

    sr = sub.add_parser("sweep-rotation", help="holdout PSNR across image rotations")
    sr.add_argument("--image", default="bricks")
    sr.add_argument("--image-size", type=int, default=128)
    sr.add_argument("--angles", type=_int_list, default=tuple(range(0, 181, 10)))
    sr.add_argument("--sweep-seeds", type=_int_list, default=(0, 1, 2, 3, 4))
    sr.add_argument("--steps", type=int, default=800)

    sv = sub.add_parser("sweep-resolution", help="holdout PSNR across grid resolutions")
    sv.add_argument("--image", default="bricks")
    sv.add_argument("--image-size", type=int, default=128)
    sv.add_argument("--resolutions", type=_int_list, default=(32, 64, 128, 256))
    sv.add_argument("--angle", type=float, default=30.0)
    sv.add_argument("--sweep-seeds", type=_int_list, default=(0, 1))
    sv.add_argument("--steps", type=int, default=800)
    return p


_LIST_KEYS = {"sizes", "psnr_targets", "angles", "sweep_seeds", "resolutions"}


def _apply_config(parser: _Parser, args, argv):
    """Overlay config-file values under explicit command-line flags."""
    path = Path(args.config)
    if not path.exists():
        print(f"error: config file not found: {path}", file=sys.stderr)
        raise SystemExit(1)
    ini = configparser.ConfigParser()
    ini.read(path)
    allowed_sections = {"common", args.command}
    for section in ini.sections():
        if section not in allowed_sections:
            print(f"error: unknown config section [{section}] "
                  f"(expected [common] or [{args.command}])", file=sys.stderr)
            raise SystemExit(1)
    defaults = {}
    for section in ini.sections():
        for key, raw in ini.items(section):
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                print(f"error: unknown config key '{key}' in [{section}]", file=sys.stderr)
                raise SystemExit(1)
            current = getattr(args, dest)
            if dest in _LIST_KEYS:
                defaults[dest] = (_float_list(raw) if dest == "psnr_targets"
                                  else _int_list(raw))
            elif isinstance(current, bool):
                defaults[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int) and not isinstance(current, bool):
                defaults[dest] = int(raw)
            elif isinstance(current, float):
                defaults[dest] = float(raw)
            else:
                defaults[dest] = raw
    parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _outdir(args) -> Path:
    root = args.out_dir or os.environ.get("TILTED_OUT_DIR") or "tilted_out"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_config(args):
    skip = {"config", "print_config", "command"}
    print(f"[{args.command}]" if args.command else "[common]")
    for key in sorted(vars(args)):
        if key in skip:
            continue
        val = getattr(args, key)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        print(f"{key} = {val}")


def _write_csv(path: Path, header: str, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")
    print(f"wrote {path}")


def _cmd_theory_spectrum(args, out: Path) -> int:
    from .theory import diamond_eigenvalues, sampled_diamond

    X = sampled_diamond(args.n, args.alpha)
    sing = np.linalg.svd(X, compute_uv=False)[: args.k]
    lam = diamond_eigenvalues(args.alpha, args.k)
    measured = sing * 2.0 / args.n
    rel = np.abs(measured - np.abs(lam)) / np.abs(lam)
    rows = [(k + 1, float(lam[k]), float(measured[k]), float(rel[k])) for k in range(args.k)]
    _write_csv(out / "spectrum.csv", "k,analytic_lambda,measured_scaled_sigma,relative_error", rows)
    if args.plot:
        _plot_lines(out / "spectrum.png", range(1, args.k + 1),
                    {"analytic |lambda_k|": np.abs(lam), "measured 2 sigma_k / n": measured},
                    "k", "value")
    print(f"max relative error over top {args.k}: {rel.max():.4f}")
    return 0


def _cmd_theory_lowrank(args, out: Path) -> int:
    from .theory import min_rank_for_psnr, rank_error_curve, sampled_diamond

    rows = []
    minrank_rows = []
    curves = {}
    for n in args.sizes:
        curve = rank_error_curve(sampled_diamond(n))
        curves[n] = curve
        for F in range(1, args.max_rank + 1):
            rows.append((n, F, float(curve[F]), float(curve[F] * (1 + F))))
        for target in args.psnr_targets:
            minrank_rows.append((n, target, min_rank_for_psnr(curve, target)))
    _write_csv(out / "lowrank.csv", "n,F,mse,mse_times_1_plus_F", rows)
    _write_csv(out / "minrank.csv", "n,psnr_target_db,min_rank", minrank_rows)
    if args.plot:
        _plot_lines(out / "lowrank.png", range(1, args.max_rank + 1),
                    {f"n={n}": [c * (1 + F) for F, c in
                                zip(range(1, args.max_rank + 1), curves[n][1:])]
                     for n in args.sizes},
                    "rank F", "mse * (1 + F)")
    return 0


def _cmd_theory_align(args, out: Path) -> int:
    from .theory import alternating_sweep, success_fraction

    base = args.seed if args.seed is not None else 0
    seeds = [base + i for i in range(args.seeds)]
    results = alternating_sweep(
        seeds, n=args.n, sigma=math.sqrt(args.sigma_sq), beta=args.beta,
        t_rough=args.t_rough, t_nu=args.t_nu, t_u=args.t_u,
    )
    rows = [
        (s, r.nu0, r.nu_hat, r.folded_error, r.u_error,
         int(r.folded_error <= args.angle_tol and r.u_error <= args.u_tol))
        for s, r in zip(seeds, results)
    ]
    _write_csv(out / "align.csv", "seed,nu0,nu_hat,folded_error,u_error,success", rows)
    frac = success_fraction(results, args.angle_tol, args.u_tol)
    print(f"success fraction: {frac:.3f} over {len(seeds)} seeds "
          f"(tolerances: angle {args.angle_tol}, factor {args.u_tol})")
    return 0


def _cmd_fit_image2d(args, out: Path) -> int:
    from .bench import (RotationSweepConfig, build_image_field, load_image,
                        latent_norm_image, render_image, save_png)
    from .grids import save_checkpoint
    from .theory import resample_rotate
    from .train import PointDataset, TransformSet, train_field

    seed = args.seed if args.seed is not None else 0
    base = load_image(args.image, args.image_size)
    img = np.clip(resample_rotate(base, args.angle * math.pi / 180.0), 0.0, 1.0)
    ds = PointDataset.from_image(img, seed=seed)
    sweep = RotationSweepConfig()
    tilted = args.variant == "tilted"
    train_cfg = replace(sweep.train, steps=args.steps, seed=seed, train_transforms=tilted)
    if tilted and args.two_phase:
        bneck = build_image_field(seed=1000 + seed, tilted=True,
                                  channels=sweep.phase1_channels,
                                  frequencies=sweep.frequencies)
        cfg1 = replace(train_cfg, steps=sweep.phase1_steps, batch_size=sweep.phase1_batch,
                       lr_transform=sweep.phase1_lr_transform,
                       lowpass_steps=sweep.phase1_lowpass_steps)
        bneck, _ = train_field(bneck, ds, cfg1)
        field = build_image_field(seed=2000 + seed, tilted=True,
                                  channels=sweep.channels, frequencies=sweep.frequencies)
        field.volume.transforms = TransformSet(list(bneck.volume.transforms.rotations))
    else:
        field = build_image_field(seed=1000 + seed, tilted=tilted,
                                  channels=sweep.channels, frequencies=sweep.frequencies)
    field, rep = train_field(field, ds, train_cfg)
    (out / "train_trace.csv").write_text(rep.trace_csv_text())
    (out / "summary.csv").write_text(rep.summary_csv_text())
    h, w = img.shape[:2]
    save_png(out / "reconstruction.png", render_image(field, h, w))
    save_png(out / "latent_norm.png", latent_norm_image(field, h, w))
    save_checkpoint(out / "field.tlt", field.volume,
                    extras={f"decoder_w{i}": wgt for i, wgt in enumerate(field.decoder.weights)}
                    | {f"decoder_b{i}": b for i, b in enumerate(field.decoder.biases)})
    print(f"holdout PSNR: {rep.holdout_psnr:.2f} dB; artifacts in {out}")
    return 0


def _make_shape(name: str, seed: int):
    from .bench import AnalyticSdf
    from .geometry import UnitQuaternion

    rng = np.random.default_rng(seed)
    if name == "sphere":
        return AnalyticSdf.sphere(0.6)
    if name == "box":
        return AnalyticSdf.box((0.55, 0.4, 0.3))
    if name == "rotated-box":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        return AnalyticSdf.rotated_box((0.55, 0.4, 0.3), UnitQuaternion(*q).canonical())
    if name == "union2":
        return AnalyticSdf.union((AnalyticSdf.box((0.5, 0.3, 0.25)),
                                  AnalyticSdf.sphere(0.45)))
    raise StructureError(f"unknown shape {name!r}")


def _cmd_fit_sdf(args, out: Path) -> int:
    from .bench import SdfFitConfig, sdf_fit

    seed = args.seed if args.seed is not None else 0
    shape = _make_shape(args.shape, seed)
    cfg = SdfFitConfig(decomposition=args.decomposition, tilted=(args.variant == "tilted"),
                       train_points=args.train_points, eval_resolution=args.eval_resolution)
    cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    report = sdf_fit(shape, cfg, seed=seed, config_id=f"fit_sdf_{args.decomposition}",
                     shape_name=args.shape)
    report.save(out / "sdf.csv")
    print(f"wrote {out / 'sdf.csv'}")
    for row in report.rows:
        print(f"  {row.metric} = {row.value:.4f}")
    return 0


def _cmd_sweep_rotation(args, out: Path) -> int:
    from .bench import RotationSweepConfig, rotation_sweep

    cfg = RotationSweepConfig(image=args.image, image_size=args.image_size,
                              angles_deg=tuple(args.angles),
                              seeds=tuple(args.sweep_seeds), threads=args.threads)
    cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    if args.seed is not None:
        cfg = replace(cfg, seeds=tuple(args.seed + s for s in range(len(cfg.seeds))))
    report = rotation_sweep(cfg)
    report.save(out / "rotation_sweep.csv")
    print(f"wrote {out / 'rotation_sweep.csv'} ({len(report.rows)} rows)")
    return 0


def _cmd_sweep_resolution(args, out: Path) -> int:
    from .bench import RotationSweepConfig, resolution_sweep

    base = RotationSweepConfig(image=args.image, image_size=args.image_size)
    base = replace(base, train=replace(base.train, steps=args.steps))
    report = resolution_sweep(args.image, resolutions=tuple(args.resolutions),
                              angle_deg=args.angle, seeds=tuple(args.sweep_seeds),
                              base=base, threads=args.threads)
    report.save(out / "resolution_sweep.csv")
    print(f"wrote {out / 'resolution_sweep.csv'} ({len(report.rows)} rows)")
    return 0


def _plot_lines(path: Path, xs, series: dict, xlabel: str, ylabel: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(list(xs), list(ys), marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"wrote {path}")


_HANDLERS = {
    "theory-spectrum": _cmd_theory_spectrum,
    "theory-lowrank": _cmd_theory_lowrank,
    "theory-align": _cmd_theory_align,
    "fit-image2d": _cmd_fit_image2d,
    "fit-sdf": _cmd_fit_sdf,
    "sweep-rotation": _cmd_sweep_rotation,
    "sweep-resolution": _cmd_sweep_resolution,
}


def run(argv) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None and not args.print_config:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    if args.config:
        args = _apply_config(parser, args, argv)
    if args.print_config:
        _print_config(args)
        return 0
    out = _outdir(args)
    try:
        return _HANDLERS[args.command](args, out)
    except (NumericError, DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except StructureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
