"""``attrdebias`` command line.

Exit codes: 0 success, 2 usage or validation error, 3 artifact mismatch,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import default_config, from_dict, load_config
from .errors import ArtifactMismatchError, ConfigError, DebiasError, NumericalDivergenceError

log = logging.getLogger("attrdebias")

EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERIC = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (JSON); default: built-in preset")
    common.add_argument("--preset", default="gender", choices=["gender", "intersectional"],
                        help="built-in config used when --config is absent")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", help="run directory (default: config 'out')")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="attrdebias", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="fit the base denoiser")
    s = sub.add_parser("train-adapters", parents=[common], help="train one adapter bank per attribute")
    s.add_argument("--checkpoint", help="base checkpoint (default: <out>/checkpoint.fgc)")
    s = sub.add_parser("sample", parents=[common], help="generate base and debiased records")
    s.add_argument("--checkpoint", help="base checkpoint (default: <out>/checkpoint.fgc)")
    s.add_argument("--banks", help="bank directory (default: <out>/banks)")
    sub.add_parser("eval", parents=[common], help="FD and fidelity of stored records")
    s = sub.add_parser("report", parents=[common], help="benchmark table and figures over run dirs")
    s.add_argument("runs", nargs="*", help="run directories (default: subdirectories of --out)")
    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    s.add_argument("--mode", choices=["adapter", "pretrain", "both"], default="both")
    s.add_argument("--tolerance", type=float, default=1e-4)
    sub.add_parser("run", parents=[common], help="pretrain, train-adapters, sample and eval in one go")
    return p


def resolve_config(args):
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("--config", f"no such file {path}")
        cfg = load_config(path)
    else:
        cfg = default_config(args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    return from_dict(cfg.to_dict())  # round trip re-validates overrides


def _echo(args, msg):
    if not args.quiet:
        print(msg)


def cmd_pretrain(args, cfg):
    out = Path(cfg.out)
    with pipeline.run_lock(out):
        res = pipeline.pretrain(cfg, out, progress=None if args.quiet else
                                lambda r: log.info("epoch %d train %.4f heldout %.4f",
                                                   r["epoch"], r["train_loss"], r["heldout_loss"]))
    _echo(args, f"pretrain: {res['checkpoint']} hash={res['content_hash'][:16]} "
                f"heldout_loss={res['final_heldout_loss']:.4f}")
    return res


def cmd_train_adapters(args, cfg):
    out = Path(cfg.out)
    with pipeline.run_lock(out):
        res = pipeline.train_adapters(cfg, out, getattr(args, "checkpoint", None), progress=None if args.quiet else
                                      lambda a, c, it, l: log.info("%s/%s step %d L_guidance %.4f L_orth %.3g",
                                                                   a, c, it, l["L_guidance"], l["L_orth"]))
    for name, meta in res.items():
        extra = ""
        if "orthogonality" in meta:
            extra = f" orthogonality={meta['orthogonality']:.3g} (random {meta['orthogonality_random_baseline']:.3g})"
        _echo(args, f"train-adapters: banks/{name}.fgb{extra}")
    return res


def cmd_sample(args, cfg):
    out = Path(cfg.out)
    with pipeline.run_lock(out):
        meta = pipeline.sample(cfg, out, getattr(args, "checkpoint", None), getattr(args, "banks", None))
    for w in meta["transfer"]:
        print(f"warning: {w['message']}", file=sys.stderr)
    _echo(args, f"sample: {', '.join(meta['sets'])} -> {out / 'records'}")
    return meta


def cmd_eval(args, cfg):
    out = Path(cfg.out)
    with pipeline.run_lock(out):
        rep = pipeline.evaluate(cfg, out)
    for set_name, res in rep["sets"].items():
        fid = res["fidelity"]["mean"]
        fid = "n/a (undersampled)" if fid is None else f"{fid:.4f}"
        for tname, per in res["fd"].items():
            for attr, r in per.items():
                _echo(args, f"eval: {set_name:>10} vs {tname}: FD[{attr}]={r['fd']:.4f} "
                            f"[{r['ci95'][0]:.4f}, {r['ci95'][1]:.4f}] fidelity={fid}")
    return rep


def cmd_report(args, cfg):
    from .report import build_benchmark, write_benchmark

    out = Path(args.out or ".")
    runs = [Path(r) for r in args.runs]
    if not runs and out.is_dir():
        runs = sorted(d for d in out.iterdir() if (d / "reports").is_dir())
    for r in runs:
        if not r.is_dir():
            raise ConfigError("runs", f"no such run directory {r}")
    table = build_benchmark(runs)
    out.mkdir(parents=True, exist_ok=True)
    figures = write_benchmark(table, out)
    _echo(args, f"report: {len(table.rows)} rows, {len(figures)} figures -> {out}")
    return table


def cmd_grad_check(args, cfg):
    from .gradcheck import run_grad_checks

    reports = run_grad_checks(args.mode, args.tolerance, seed=cfg.seed)
    ok = True
    for name, rep in reports.items():
        for line in rep.lines():
            _echo(args, f"{name}: {line}")
        ok &= rep.passed
    _echo(args, "grad-check: " + ("PASS" if ok else "FAIL"))
    if not ok:
        raise NumericalDivergenceError("finite-difference check failed")
    return reports


def cmd_run(args, cfg):
    cmd_pretrain(args, cfg)
    cmd_train_adapters(args, cfg)
    cmd_sample(args, cfg)
    return cmd_eval(args, cfg)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-adapters": cmd_train_adapters,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "report": cmd_report,
    "grad-check": cmd_grad_check,
    "run": cmd_run,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        cfg = None if args.command == "report" else resolve_config(args)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads", "must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args, cfg)
        else:
            COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArtifactMismatchError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericalDivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DebiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
