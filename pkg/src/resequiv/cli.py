"""Command-line front end. Every subcommand emits CSV.

Exit status: 0 success, 1 usage error, 2 format error, 3 failed check.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataio, gradflow, network, stability, trainer, transform, trivial
from .errors import EmptyReportError, FormatError, InvalidArgument, SizeLimitError, UnsupportedError
from .params import NetworkSpec

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_CHECK = 0, 1, 2, 3

ARCHS = {
    "plain": "plain",
    "residual": "residual",
    "dominant": "dominant_only",
    "dominant-lower-dense": "dominant_lower_dense",
}


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument helpers ---------------------------------------------------------------


def _parse_kv(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise UsageError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_data(source: str, seed: int, split: str = "train", limit: int | None = None):
    """``synth[:count=..,size=..,classes=..,noise=..,seed=..]`` or ``cifar:<dir>``."""
    kind, _, rest = source.partition(":")
    if kind == "cifar":
        if not rest:
            raise UsageError("cifar data needs a directory: cifar:<dir>")
        return dataio.read_cifar10_dir(rest, split, limit)
    if kind != "synth":
        raise UsageError(f"unknown data source {source!r}; use synth:<params> or cifar:<dir>")
    kv = _parse_kv(rest)
    allowed = {"count", "size", "classes", "noise", "seed"}
    if set(kv) - allowed:
        raise UsageError(f"unknown synth parameters {sorted(set(kv) - allowed)}")
    count = int(kv.get("count", 2000))
    if split == "test":
        count = max(1, count // 5)
    if limit is not None:
        count = min(count, limit)
    return dataio.synth_dataset(
        int(kv.get("seed", seed)), count, size=int(kv.get("size", 8)),
        classes=int(kv.get("classes", 10)), split=split, noise=float(kv.get("noise", 0.25)),
    )


def _spec(args, kind: str, data) -> NetworkSpec:
    try:
        return NetworkSpec.from_depth(
            args.depth, kind=kind, base_channels=args.base, image_size=data.images.shape[-1],
            in_channels=data.images.shape[1], classes=int(args.classes or 10),
        )
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from exc


def _lr_drops(text: str):
    if text.strip().lower() in ("", "none"):
        return ()
    drops = []
    for part in text.split(","):
        e, _, d = part.partition(":")
        drops.append((int(e), float(d or 10)))
    return tuple(drops)


def _emit(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _weights(path):
    try:
        return dataio.load_weights(path)
    except OSError as exc:
        raise FormatError(f"cannot read weight file: {exc}") from exc


# -- subcommands ------------------------------------------------------------------


def cmd_train(args) -> int:
    kind = ARCHS[args.arch]
    data = load_data(args.data, args.seed, "train", args.samples)
    test = load_data(args.data, args.seed, "test") if not args.no_test else None
    spec = _spec(args, kind, data)
    init = args.init or (["kwi"] if kind == "plain" else ["hmwi"])
    if init[0] == "transfer-from":
        if len(init) != 2:
            raise UsageError("--init transfer-from needs a weight file")
        r, rspec = _weights(init[1])
        if rspec.kind not in ("residual",):
            raise FormatError(f"transfer-from expects a residual weight file, got kind {rspec.kind!r}")
        r.check_compatible(spec)
        params = transform.transform_T(r).replace(spec=spec)
    elif len(init) == 1 and init[0] in ("kwi", "hmwi"):
        params = network.build(spec, args.seed, init[0])
    else:
        raise UsageError(f"--init must be kwi, hmwi or 'transfer-from <file>', got {' '.join(init)}")
    config = trainer.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr_initial=args.lr, lr_drops=_lr_drops(args.lr_drops),
        momentum=args.momentum, decay=args.lam, decay_mode=args.decay_mode, seed=args.seed,
    )
    final, metrics = trainer.train(spec, params, data, config, test=test)
    if args.out is None:
        _emit(dataio.write_csv(metrics.rows(), metrics.COLUMNS), None)
        return EXIT_OK
    out = dataio.ensure_dir(args.out)
    dataio.write_csv(metrics.rows(), metrics.COLUMNS, out / "metrics.csv")
    dataio.save_weights(final, out / "weights.rneq")
    return EXIT_OK


def cmd_transform(args) -> int:
    params, spec = _weights(args.inp)
    if args.direction == "p2r":
        if spec.kind != "plain":
            raise FormatError(f"p2r expects a plain weight file, got kind {spec.kind!r}")
        out = transform.transform_T_inv(params)
    else:
        if spec.kind != "residual":
            raise FormatError(f"r2p expects a residual weight file, got kind {spec.kind!r}")
        out = transform.transform_T(params)
    if args.out is None:
        raise UsageError("transform needs --out <file>")
    dataio.save_weights(out, args.out)
    return EXIT_OK


def cmd_equiv_check(args) -> int:
    data = load_data(args.data, args.seed, "train")
    residual = plain = None
    if args.residual:
        residual, rspec = _weights(args.residual)
        if rspec.kind != "residual":
            raise FormatError(f"--residual expects a residual weight file, got kind {rspec.kind!r}")
    if args.plain:
        plain, pspec = _weights(args.plain)
        if pspec.kind != "plain":
            raise FormatError(f"--plain expects a plain weight file, got kind {pspec.kind!r}")
    if residual is None and plain is not None:
        residual = transform.transform_T_inv(plain)
    if residual is not None:
        spec = residual.spec
        if plain is not None:
            plain.check_compatible(spec)
    else:
        spec = _spec(args, "residual", data)
    config = trainer.TrainConfig(
        epochs=1, batch_size=args.batch, lr_initial=args.lr, lr_drops=(), momentum=args.momentum,
        decay=args.lam, seed=args.seed,
    )
    res = trainer.train_equivalent_pair(spec, data, config, seed=args.seed, iterations=args.iters,
                                        r0=residual, p0=plain)
    rows = [(t, d, res.plain_risk[t - 1] if t else float("nan"), res.residual_risk[t - 1] if t else float("nan"))
            for t, d in enumerate(res.divergence)]
    _emit(dataio.write_csv(rows, ("iteration", "divergence", "plain_risk", "residual_risk")), args.out)
    worst = float(res.divergence.max())
    if not worst <= args.tol:
        raise CheckFailed(f"max divergence {worst:.3e} exceeds tolerance {args.tol:.3e}")
    return EXIT_OK


def cmd_cushion(args) -> int:
    params, spec = _weights(args.weights)
    data = load_data(args.data, args.seed, "train", args.samples)
    if args.layer is not None:
        if args.from_ is not None or args.to is not None:
            raise UsageError("use either --layer or --from/--to")
        report = stability.layer_cushion(params, spec, args.layer, data.images)
    elif args.from_ is not None and args.to is not None:
        report = stability.interlayer_cushion(params, spec, args.from_, args.to, data.images,
                                              cap=args.cap, threads=args.threads)
    else:
        raise UsageError("cushion needs --layer or both --from and --to")
    _emit(dataio.write_csv(report.rows(), report.header), args.out)
    return EXIT_OK


def _layers(text: str, depth: int):
    if text == "all":
        return list(range(1, depth))
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--layers takes 'all' or a comma list, got {text!r}") from exc


def cmd_dgf(args) -> int:
    params, spec = _weights(args.weights)
    data = load_data(args.data, args.seed, "train", args.batch)
    entries = gradflow.dgf_report(params, spec, data.images, data.labels,
                                  _layers(args.layers, spec.depth), threads=args.threads)
    _emit(dataio.write_csv([e.row() for e in entries], gradflow.DGF_COLUMNS), args.out)
    return EXIT_OK


def cmd_trivial(args) -> int:
    cfg = trivial.TrivialConfig(
        n=args.n, L=args.L, l=args.l, p=args.p, eps=args.eps, sigma_a=args.sigma_a,
        sigma_v=args.sigma_v, trials=args.trials, seed=args.seed, sigma_a_plain=args.sigma_a_plain,
    )
    kinds = ("residual", "plain") if args.kind == "both" else (args.kind,)
    if args.sweep:
        values = [float(v) for v in args.values.split(",")] if args.values else None
        rows = trivial.sweep(cfg, args.sweep, kinds, values, threads=args.threads)
    else:
        rows = []
        for kind in kinds:
            c = cfg.with_(kind=kind)
            est = trivial.simulate_sigma(c, threads=args.threads)
            a = trivial.analytic_sigma(c) if kind == "residual" else float("nan")
            b = trivial.analytic_sigma(c, "conclusion") if kind == "residual" else float("nan")
            rows.append(("none", "", kind, est.mean, est.stderr, a, b))
    _emit(dataio.write_csv(rows, trivial.SWEEP_COLUMNS), args.out)
    return EXIT_OK


def cmd_phi(args) -> int:
    if (args.r is None) == (args.sweep is None):
        raise UsageError("phi needs exactly one of --r or --sweep lo,hi,points")
    if args.r is not None:
        rs = [args.r]
    else:
        try:
            lo, hi, pts = args.sweep.split(",")
            lo, hi, pts = float(lo), float(hi), int(pts)
        except ValueError as exc:
            raise UsageError(f"--sweep takes lo,hi,points, got {args.sweep!r}") from exc
        if lo <= 0 or hi < lo or pts < 1:
            raise UsageError("--sweep needs 0 < lo <= hi and points >= 1")
        rs = np.geomspace(lo, hi, pts)
    rows = [(float(r), trivial.phi(r), trivial.phi_approx(r, args.c)) for r in rs]
    _emit(dataio.write_csv(rows, ("r", "phi", "phi_approx")), args.out)
    return EXIT_OK


def cmd_stats(args) -> int:
    params, _ = _weights(args.weights)
    stats = transform.weight_stats(params, args.threshold).as_dict()
    _emit(dataio.write_csv([tuple(stats.values())], tuple(stats)), args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _net_flags(p, depth=8):
    p.add_argument("--depth", type=int, default=depth, help="3N+2: 5, 8, 11, 14, 17, 20, ..., 32, 44")
    p.add_argument("--base", type=int, default=16, help="channels of the first group")
    p.add_argument("--classes", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output file (a directory for train); stdout when omitted")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    parser = _Parser(prog="resequiv", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", parents=[common], help="train one network, write metrics and weights")
    p.add_argument("--arch", choices=sorted(ARCHS), default="plain")
    _net_flags(p)
    p.add_argument("--init", nargs="+", default=None, metavar="KIND",
                   help="kwi, hmwi, or 'transfer-from <residual file>'")
    p.add_argument("--decay-mode", choices=trainer.DECAY_MODES, default="standard")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-drops", default="120:10,160:10", help="epoch:divisor,... or none")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--data", default="synth")
    p.add_argument("--samples", type=int, default=None, help="use only the first N training samples")
    p.add_argument("--no-test", action="store_true", help="skip the held-out error column")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transform", parents=[common], help="apply T (r2p) or its inverse (p2r)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--direction", choices=("p2r", "r2p"), required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("equiv-check", parents=[common], help="train an equivalent pair, check divergence")
    p.add_argument("--plain", default=None, help="initial plain weights (default T of the residual)")
    p.add_argument("--residual", default=None, help="initial residual weights (default HMWI)")
    _net_flags(p)
    p.add_argument("--data", default="synth:count=256")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(func=cmd_equiv_check)

    p = sub.add_parser("cushion", parents=[common], help="per-sample layer or interlayer cushion")
    p.add_argument("--weights", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--from", dest="from_", type=int, default=None)
    p.add_argument("--to", type=int, default=None)
    p.add_argument("--data", default="synth")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--cap", type=int, default=4096, help="largest Jacobian output size")
    p.set_defaults(func=cmd_cushion)

    p = sub.add_parser("dgf", parents=[common], help="fraction sigma of dominant gradient flows")
    p.add_argument("--weights", required=True)
    p.add_argument("--layers", default="all")
    p.add_argument("--data", default="synth")
    p.add_argument("--batch", type=int, default=128)
    p.set_defaults(func=cmd_dgf)

    p = sub.add_parser("trivial", parents=[common], help="matrix-product model sigma, simulated and analytic")
    p.add_argument("--sweep", choices=sorted(trivial.SWEEPS), default=None)
    p.add_argument("--values", default=None, help="comma list overriding the sweep grid")
    p.add_argument("--kind", choices=("residual", "plain", "both"), default="both")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--L", type=int, default=10)
    p.add_argument("--l", type=int, default=5)
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--sigma-a", type=float, default=0.01)
    p.add_argument("--sigma-v", type=float, default=0.1)
    p.add_argument("--sigma-a-plain", type=float, default=None, help="plain kernel std, sqrt(2/n) by default")
    p.set_defaults(func=cmd_trivial)

    p = sub.add_parser("phi", parents=[common], help="phi(r) by quadrature and its logistic approximation")
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--sweep", default=None, metavar="LO,HI,POINTS")
    p.add_argument("--c", type=float, default=1.2)
    p.set_defaults(func=cmd_phi)

    p = sub.add_parser("stats", parents=[common], help="weight statistics of a weight file")
    p.add_argument("--weights", required=True)
    p.add_argument("--threshold", type=float, default=0.25)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (UsageError, InvalidArgument, UnsupportedError, SizeLimitError) as exc:
        print(f"resequiv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"resequiv {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (CheckFailed, EmptyReportError) as exc:
        print(f"resequiv {args.command}: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
