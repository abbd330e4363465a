"""Command-line entry point: ``rfae <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

PDES = ("burgers", "diffusion_reaction", "wave2d")
FAMILIES = ("A1", "A1_new", "A2", "A2_new1", "A2_new2", "A2_new3", "gauss_impulse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; validation errors here are status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _times(s: str):
    try:
        vals = [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"times must be comma-separated numbers, got {s!r}")
    if not vals:
        raise argparse.ArgumentTypeError("at least one time is required")
    return vals


def _positive(s: str):
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfae", description="Ricci-flow-guided autoencoders for PDE operator learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="solve a PDE family and write a dataset")
    g.add_argument("--pde", required=True, choices=PDES)
    g.add_argument("--family", required=True, choices=FAMILIES)
    g.add_argument("--n", type=_positive, required=True, help="number of initial conditions")
    g.add_argument("--nt", type=_positive, default=100, help="snapshot times per sample (default 100)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--normalize", choices=("none", "integral", "l1"), default="none", help="rescale each trajectory by its initial integral or L1 norm")
    g.add_argument("--out", required=True, help="output directory or base path")

    v = sub.add_parser("verify-geometry", help="run the analytic and finite-difference oracle suites")
    v.add_argument("--suite", default="all", help="comma-separated suites: autodiff,cigar,sphere,pipeline,sff,transform or all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="JSON report path (default: stdout)")

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True, help="TrainConfig JSON file")
    t.add_argument("--data", required=True, help="training dataset")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--mode", help="override the config's training mode")
    t.add_argument("--seed", type=int, help="override the config's seed")
    t.add_argument("--deterministic", action="store_true", help="force the deterministic flag on")

    e = sub.add_parser("eval", help="relative L1 errors of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--times", type=_times, required=True, help="comma-separated times, e.g. 0,0.5,1")
    e.add_argument("--out", help="EvalReport JSON path (a .txt table is written alongside)")

    x = sub.add_parser("export-latent", help="write chart and manifold points as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True, action="append", help="SPLIT=PATH, repeatable (e.g. train=ds/)")
    x.add_argument("--times", type=_times, required=True)
    x.add_argument("--out", required=True, help="CSV path")

    c = sub.add_parser("inspect-checkpoint", help="print a checkpoint header summary")
    c.add_argument("--ckpt", required=True)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(a):
    from .pde_data import FAMILIES as FAM, generate_dataset, normalize_dataset, write_dataset

    if FAM[a.family].pde != a.pde:
        raise UsageError(f"family {a.family} belongs to pde {FAM[a.family].pde}")
    ds = generate_dataset(a.pde, a.family, a.n, nt=a.nt, seed=a.seed)
    ds = normalize_dataset(ds, a.normalize)
    path = write_dataset(ds, a.out)
    print(f"wrote {ds.n_samples} samples to {path}")


def cmd_verify(a):
    from .verify import SUITES, run_suites

    names = [s.strip() for s in a.suite.split(",") if s.strip()]
    bad = [s for s in names if s not in SUITES + ("all",)]
    if bad:
        raise UsageError(f"unknown suite(s) {bad}; choose from {SUITES + ('all',)}")
    report = run_suites(tuple(names), seed=a.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(text + "\n")
    else:
        print(text)
    for name, s in report["suites"].items():
        for c in s["checks"]:
            print(f"{'PASS' if c['passed'] else 'FAIL'}  {name}: {c['name']} ({c['max_error']:.3g} < {c['tol']:g})", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


def cmd_train(a):
    from .nn import ConfigError
    from .pde_data import read_dataset
    from .training import TrainConfig, train

    try:
        raw = json.loads(Path(a.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config: {exc}")
    if a.mode:
        raw["mode"] = a.mode
    if a.seed is not None:
        raw["seed"] = a.seed
    if a.deterministic:
        raw["deterministic"] = True
    try:
        cfg = TrainConfig.from_dict(raw)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc))
    ds = read_dataset(a.data)
    log_every = max(1, cfg.iterations // 20)

    def progress(it, row):
        if it % log_every == 0:
            logging.getLogger("rfae").info("iter %d total %.4g", it, row["total"])

    res = train(cfg, ds, a.out, progress=progress)
    last = res.history[-1]["total"] if res.history else float("nan")
    print(f"trained {cfg.iterations} iterations, final total loss {last:.6g}; checkpoint {Path(a.out) / 'final.ckpt'}")


def cmd_eval(a):
    from .eval_export import evaluate
    from .nn import load_checkpoint
    from .pde_data import read_dataset

    bundle, _ = load_checkpoint(a.ckpt)
    ds = read_dataset(a.data)
    rep = evaluate(bundle, ds, a.times)
    if a.out:
        rep.write(a.out)
    print(rep.to_json() if not a.out else rep.table())


def _split_specs(specs):
    out = {}
    for s in specs:
        if "=" not in s:
            raise UsageError(f"--data expects SPLIT=PATH, got {s!r}")
        k, v = s.split("=", 1)
        if k not in ("train", "test", "extrapolation"):
            raise UsageError(f"split must be train, test or extrapolation, got {k!r}")
        out[k] = v
    return out


def cmd_export(a):
    from .eval_export import export_latent
    from .nn import load_checkpoint
    from .pde_data import read_dataset

    splits = _split_specs(a.data)
    bundle, _ = load_checkpoint(a.ckpt)
    datasets = {k: read_dataset(v) for k, v in splits.items()}
    path = export_latent(bundle, datasets, a.times, a.out)
    print(f"wrote {path}")


def cmd_inspect(a):
    from .nn import load_checkpoint

    bundle, header = load_checkpoint(a.ckpt)
    summary = {
        "step": header["step"],
        "n_params": header["n_params"],
        "time_scale": header["time_scale"],
        "config_hash": header["config_hash"],
        "networks": {k: {"in": s.input_dim, "out": s.output_dim, "widths": list(s.widths), "activation": s.activation, "variant": s.variant} for k, s in bundle.specs.items()},
        "mode": bundle.config.get("train", {}).get("mode"),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "verify-geometry": cmd_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-latent": cmd_export,
    "inspect-checkpoint": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[a.command](a)
    except UsageError as exc:
        print(f"rfae {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, PermissionError, ValueError) as exc:
        # bad inputs: config keys, dataset files, horizons, CFL limits
        print(f"rfae {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failures: solver blow-up, divergence, bad files
        print(f"rfae {a.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
