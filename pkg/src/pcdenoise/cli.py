"""``pcdenoise`` command line: generate, train, denoise, eval, schedule.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numerical failure.
"""

import argparse
import glob
import os
import sys

from . import io
from .datagen import SHAPE_KINDS, ShapeSpec, apply_noise, parse_noise, sample_shape
from .errors import InvalidInput, NumericalError, ParseError, PointCloudError
from .metrics import EvalReport, chamfer, point_to_surface
from .sampler import SamplerConfig, denoise, estimate_noise
from .schedule import (
    adaptive_schedule,
    format_schedule_table,
    linear_schedule,
    match_timestep,
)
from .score_model import NetworkConfig, NetworkScore, OracleScore, ScoreNetwork
from .trainer import TrainConfig, train, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3

MODE_NAMES = {"adaptive": "adaptive", "fixed": "fixed", "onestep": "one_step", "gdm": "gdm"}
FUSION_NAMES = {"fused": "fused", "FT": "F_T", "Ft": "F_t", "Fmean": "F_mean"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# options a config file may also set: dest -> (flags, type, default, argparse extras)
_SHARED = {
    "T": (("--T",), int, 1000, {}),
    "beta_T": (("--beta-T",), float, 2e-6, {}),
    "seed": (("--seed",), int, 0, {}),
    "patch_size": (("--patch-size",), int, 1000, {}),
}
_TRAIN = {
    "iterations": (("--iterations",), int, 1000, {}),
    "K_p": (("--kp",), int, 256, {"help": "masked points per patch"}),
    "lam": (("--lambda",), float, 0.99, {}),
    "lr": (("--lr",), float, 1e-4, {}),
    "width": (("--width",), int, 32, {}),
    "graph_k": (("--graph-k",), int, 16, {}),
    "fusion_k": (("--k-fusion",), int, 32, {}),
    "fusion": (("--fusion",), str, "fused", {"choices": sorted(FUSION_NAMES)}),
    "grad_fusion": (("--grad-fusion",), str, "weighted", {"choices": ["weighted", "const", "k1"]}),
    "checkpoint_every": (("--checkpoint-every",), int, 0, {}),
    "augment": (("--augment",), int, 1, {"help": "1 to enable rotation/scale augmentation, 0 to disable"}),
}
_SAMPLE = {
    "L": (("--L",), int, 5, {}),
    "eta": (("--eta",), float, 0.0, {}),
    "mode": (("--mode",), str, "adaptive", {"choices": sorted(MODE_NAMES)}),
    "calibration": (("--calibration",), str, "chi3", {"choices": ["raw", "chi3"]}),
    "jobs": (("--jobs",), int, 1, {}),
}


def _add_options(p, table):
    for dest, (flags, typ, _default, extra) in table.items():
        p.add_argument(*flags, dest=dest, type=typ, default=None, **extra)


def _resolve(args, tables):
    """Fill unset options from ``--config`` and then from defaults; flags win."""
    cfg = {}
    if getattr(args, "config", None):
        cfg = io.read_keyvalue(args.config)
    known = {}
    for table in tables:
        known.update(table)
    unknown = set(cfg) - set(known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for dest, (_flags, typ, default, extra) in known.items():
        if getattr(args, dest) is not None:
            continue
        if dest in cfg:
            try:
                value = typ(cfg[dest])
            except ValueError:
                raise UsageError(f"config key {dest}: bad value {cfg[dest]!r}") from None
            if "choices" in extra and value not in extra["choices"]:
                raise UsageError(f"config key {dest}: {value!r} not in {extra['choices']}")
        else:
            value = default
        setattr(args, dest, value)
    return args


def build_parser():
    p = _Parser(prog="pcdenoise", description="Adaptive score-based point cloud denoising.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="sample a clean shape and a noisy copy")
    g.add_argument("--shape", required=True, choices=SHAPE_KINDS)
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--noise", default="gaussian:0.02", help="e.g. gaussian:0.02, laplace:0.01, unidir:0,0,1:0.02")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="train a score network on clean clouds")
    t.add_argument("--data", required=True, nargs="+", help="clean XYZ/PLY files or directories of them")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--config")
    _add_options(t, _SHARED)
    _add_options(t, _TRAIN)

    d = sub.add_parser("denoise", help="denoise a noisy cloud")
    d.add_argument("input")
    d.add_argument("--output", "-o", required=True)
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", metavar="CLEAN", help="use nearest-clean-point scores from this cloud")
    d.add_argument("--report", help="write the denoising report here")
    d.add_argument("--config")
    _add_options(d, _SHARED)
    _add_options(d, _SAMPLE)

    e = sub.add_parser("eval", help="compare a denoised cloud with a reference")
    e.add_argument("denoised")
    e.add_argument("--reference", help="clean reference cloud")
    e.add_argument("--meta", help="generate sidecar; supplies the analytic shape for point-to-surface")
    e.add_argument("--shape", choices=SHAPE_KINDS, help="analytic shape with default size parameters")
    e.add_argument("--report", help="denoise report providing sigma, tau_hat and wall time")
    e.add_argument("--out", help="write the evaluation as CSV")

    s = sub.add_parser("schedule", help="print the matched timestep and aligned schedule")
    how = s.add_mutually_exclusive_group(required=True)
    how.add_argument("--sigma", type=float)
    how.add_argument("--estimate", metavar="NOISY")
    prov = s.add_mutually_exclusive_group()
    prov.add_argument("--oracle", metavar="CLEAN")
    prov.add_argument("--checkpoint")
    s.add_argument("--L", type=int, default=5)
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--beta-T", dest="beta_T", type=float, default=2e-6)
    s.add_argument("--patch-size", dest="patch_size", type=int, default=1000)
    s.add_argument("--calibration", choices=["raw", "chi3"], default="chi3")
    s.add_argument("--table", action="store_true", help="also print the full training schedule")
    return p


def _collect_inputs(paths):
    files = []
    for p in paths:
        if os.path.isdir(p):
            found = sorted(glob.glob(os.path.join(p, "*.xyz")) + glob.glob(os.path.join(p, "*.ply")))
            files.extend(found)
        else:
            files.append(p)
    if not files:
        raise UsageError("no input clouds found")
    return files


def cmd_generate(args):
    spec = ShapeSpec(args.shape, n=args.n, seed=args.seed)
    noise = parse_noise(args.noise, seed=args.seed + 1)
    clean = sample_shape(spec)
    noisy = apply_noise(clean, noise)
    os.makedirs(args.out_dir, exist_ok=True)
    io.write_xyz(os.path.join(args.out_dir, "clean.xyz"), clean)
    io.write_xyz(os.path.join(args.out_dir, "noisy.xyz"), noisy)
    meta = {f"shape.{k}": v for k, v in vars(spec).items()}
    meta["noise"] = args.noise
    meta["noise.seed"] = noise.seed
    io.write_keyvalue(os.path.join(args.out_dir, "meta.txt"), meta)
    print(f"wrote {args.out_dir}/clean.xyz, noisy.xyz, meta.txt ({spec.n} points)")
    return EXIT_OK


def cmd_train(args):
    args = _resolve(args, [_SHARED, _TRAIN])
    net_cfg = NetworkConfig(
        width=args.width,
        graph_k=args.graph_k,
        fusion_k=args.fusion_k,
        fusion_mode=FUSION_NAMES[args.fusion],
        grad_fusion_mode=args.grad_fusion,
        seed=args.seed,
    )
    cfg = TrainConfig(
        T=args.T,
        beta_T=args.beta_T,
        patch_size=args.patch_size,
        K_p=args.K_p,
        lam=args.lam,
        lr=args.lr,
        iterations=args.iterations,
        seed=args.seed,
        augment=bool(args.augment),
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=args.out_dir,
        network=net_cfg,
    )
    files = _collect_inputs(args.data)
    shapes = [io.read_points(f) for f in files]
    os.makedirs(args.out_dir, exist_ok=True)
    step = max(1, cfg.iterations // 20)

    def log(row):
        if row["iteration"] % step == 0:
            print(f"iter {row['iteration']:7d}  loss {row['loss']:.6g}  t {row['t']}", flush=True)

    net, history = train(shapes, cfg, log=log)
    write_loss_csv(os.path.join(args.out_dir, "loss.csv"), history)
    final = os.path.join(args.out_dir, "final.bin")
    net.save(final)
    print(f"wrote {final}")
    return EXIT_OK


def _provider(checkpoint=None, oracle=None):
    if oracle:
        return OracleScore(io.read_points(oracle))
    return NetworkScore(ScoreNetwork.load(checkpoint))


def cmd_denoise(args):
    args = _resolve(args, [_SHARED, _SAMPLE])
    cfg = SamplerConfig(
        eta=args.eta,
        mode=MODE_NAMES[args.mode],
        L=args.L,
        seed=args.seed,
        patch_size=args.patch_size,
        calibration=args.calibration,
        jobs=args.jobs,
        T=args.T,
        beta_T=args.beta_T,
    )
    noisy = io.read_points(args.input)
    provider = _provider(args.checkpoint, args.oracle)
    out, report = denoise(noisy, provider, cfg)
    io.write_xyz(args.output, out)
    text = report.to_text()
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def _shape_from_meta(path):
    meta = io.read_keyvalue(path)
    fields = {k[len("shape."):]: v for k, v in meta.items() if k.startswith("shape.")}
    if "kind" not in fields:
        raise ParseError("sidecar has no shape.kind", path)
    typed = {}
    for k, v in fields.items():
        if k == "kind":
            typed[k] = v
        elif k in ("n", "seed"):
            typed[k] = int(v)
        else:
            typed[k] = float(v)
    return ShapeSpec(**typed)


def cmd_eval(args):
    if not (args.reference or args.meta or args.shape):
        raise UsageError("eval needs --reference, --meta or --shape")
    shape = _shape_from_meta(args.meta) if args.meta else (ShapeSpec(args.shape) if args.shape else None)
    den = io.read_points(args.denoised)
    fields = {}
    if args.reference:
        fields["chamfer"] = chamfer(den, io.read_points(args.reference))
    else:
        fields["chamfer"] = float("nan")
    if shape is not None:
        fields["p2s_mean"] = point_to_surface(den, shape)
    if args.report:
        rep = io.read_keyvalue(args.report)
        fields["sigma_estimated"] = float(rep.get("sigma_hat", "nan"))
        fields["tau_hat"] = float(rep.get("tau_hat", "nan"))
        fields["wall_time"] = float(rep.get("wall_time", "nan"))
    report = EvalReport(**fields)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_csv())
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_schedule(args):
    if args.L < 1:
        raise UsageError("--L must be at least 1")
    sched = linear_schedule(args.T, args.beta_T)
    if args.sigma is not None:
        if args.sigma < 0:
            raise UsageError("--sigma must be non-negative")
        tau = match_timestep(sched, args.sigma**2)
        print(f"sigma = {args.sigma:.9g}")
    else:
        if not (args.oracle or args.checkpoint):
            raise UsageError("--estimate needs --oracle or --checkpoint")
        provider = _provider(args.checkpoint, args.oracle)
        noisy = io.read_points(args.estimate)
        cfg = SamplerConfig(patch_size=args.patch_size, calibration=args.calibration, T=args.T, beta_T=args.beta_T)
        est = estimate_noise(noisy, provider, cfg, sched)
        tau = est.tau_hat
        print(f"sigma_hat = {est.sigma_hat:.9g}")
    steps = adaptive_schedule(sched, tau, args.L)
    print(f"tau_hat = {tau}")
    print("schedule = " + " ".join(str(t) for t in steps.taus))
    print("steps = " + " ".join(f"{a}->{b}" for a, b in steps.steps()))
    if args.table:
        sys.stdout.write(format_schedule_table(sched))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "schedule": cmd_schedule,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        code = COMMANDS[args.command](args)
    except (UsageError, InvalidInput) as exc:
        print(f"pcdenoise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"pcdenoise: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"pcdenoise: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PointCloudError as exc:
        print(f"pcdenoise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
