"""Command-line front end.

Subcommands ``gen-h``, ``detect``, ``tune``, ``assimilate`` and
``experiment`` each write their results plus one ``manifest.json`` into
``--out``. Exit codes: 0 success, 1 usage, 2 input or format problem,
3 numerical degeneracy. ``COVLOC_LOG`` sets the log level (default
``WARNING``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .assimilate import analyse_batch
from .core import CovarianceModel, balgovind_correlation
from .errors import (
    CovlocError,
    DegenerateGeometryError,
    DomainError,
    FactorizationError,
    FormatError,
    NumericalError,
    StrategyError,
)
from .matio import FORMATS, read_matrix, read_vector, write_matrix, write_vector
from .netgraph import (
    build_adjacency,
    fluid_communities,
    load_partition,
    partition_performance,
    partition_report,
    select_cluster_count,
)
from .tune import InnovationEnsemble, di01_global, di01_localized
from .twinlab import ExperimentConfig, generate_jacobian, run_grid

log = logging.getLogger("covloc")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _count_or_auto(text):
    if text == "auto":
        return text
    try:
        p = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer or 'auto', got {text!r}") from None
    if p < 1:
        raise argparse.ArgumentTypeError(f"cluster count must be >= 1, got {p}")
    return p


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunManifest:
    """Inputs, seed, version, file digests and timings of one run."""

    def __init__(self, command, args):
        self.command = command
        self.config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
        self.inputs = {}
        self.outputs = {}
        self.timings = {}
        self._t0 = time.perf_counter()

    def add_input(self, path):
        try:
            self.inputs[str(path)] = _digest(path)
        except OSError as exc:
            raise FormatError(f"cannot read file: {exc.strerror}", path=path) from None

    def write_output(self, out_dir, name, writer):
        path = Path(out_dir) / name
        writer(path)
        self.outputs[name] = _digest(path)

    def finish(self, out_dir, **extra):
        self.timings["total_seconds"] = time.perf_counter() - self._t0
        doc = {
            "tool": "covloc",
            "version": __version__,
            "command": self.command,
            "seed": self.config.get("seed"),
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": self.timings,
            **extra,
        }
        (Path(out_dir) / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _write_json(data):
    def writer(path):
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    return writer


def _write_text(text):
    return lambda path: Path(path).write_text(text)


# ---------------------------------------------------------------------------
# input helpers
# ---------------------------------------------------------------------------


def _read_H(path, fmt, man):
    man.add_input(path)
    H = read_matrix(path, fmt)
    return H.toarray() if sp.issparse(H) else H


def _read_stack(paths, man, name):
    """Stack vector/matrix files into an ``(N, n)`` array of pairs."""
    rows = []
    for p in paths:
        man.add_input(p)
        text = Path(p).read_text() if Path(p).exists() else ""
        if "," in text:
            M = read_matrix(p, "csv")
            rows.extend(np.atleast_2d(M))
        else:
            rows.append(read_vector(p))
    sizes = {r.size for r in rows}
    if len(sizes) != 1:
        raise DomainError(f"{name} files hold vectors of different lengths {sorted(sizes)}")
    return np.vstack(rows)


def _read_covariance(var_spec, corr_spec, n, man, name):
    """Variance file (or a single number) plus a correlation file or ``balgovind:L``."""
    if Path(var_spec).exists():
        man.add_input(var_spec)
        v = read_vector(var_spec)
    else:
        try:
            v = np.full(n, float(var_spec))
        except ValueError:
            raise FormatError(f"{name} variances: no such file and not a number: {var_spec!r}") from None
    if v.size != n:
        raise DomainError(f"{name} has {v.size} variances, expected {n}")
    if corr_spec.startswith("balgovind:"):
        try:
            L = float(corr_spec.split(":", 1)[1])
        except ValueError:
            raise FormatError(f"bad balgovind length in {corr_spec!r}") from None
        C = balgovind_correlation(n, L)
    else:
        man.add_input(corr_spec)
        C = read_matrix(corr_spec, "csv")
    return CovarianceModel(v, C)


def _partition_for(H, spec, args, man):
    net = build_adjacency(H)
    if spec == "auto":
        sel = select_cluster_count(net, p_max=args.p_max, seeds_per_p=args.seeds_per_p, seed=args.seed)
        return sel.partitions[sel.p_star]
    man.add_input(spec)
    try:
        part = load_partition(spec)
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot load partition: {exc}", path=spec) from None
    if part.labels.size != H.shape[1]:
        raise DomainError(f"partition has {part.labels.size} labels, H has {H.shape[1]} columns")
    return part


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_config(path, man, overrides):
    man.add_input(path)
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read config: {exc.strerror}", path=path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path, exc.lineno, exc.colno) from None
    if not isinstance(data, dict):
        raise FormatError("config must be a JSON object", path=path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def cmd_gen_h(args):
    man = RunManifest("gen-h", args)
    cfg = _load_config(args.config, man, {}) if args.config else ExperimentConfig()
    out = _out_dir(args)
    H, planted = generate_jacobian(cfg, args.seed)
    fmt = args.format or "csv"
    man.write_output(out, f"H.{fmt}", lambda p: write_matrix(p, H, fmt))
    planted_doc = {
        "state_labels": planted.state_labels.tolist(),
        "obs_labels": planted.obs_labels.tolist(),
        "state_positions": planted.state_positions.tolist(),
        "obs_positions": planted.obs_positions.tolist(),
    }
    man.write_output(out, "planted.json", _write_json(planted_doc))
    man.finish(out)
    print(f"H {H.shape[0]}x{H.shape[1]}, {int(np.count_nonzero(H))} nonzeros -> {out}")


def cmd_detect(args):
    man = RunManifest("detect", args)
    H = _read_H(args.H, args.format, man)
    out = _out_dir(args)
    net = build_adjacency(H)
    if args.p == "auto":
        sel = select_cluster_count(
            net, p_max=args.p_max, seeds_per_p=args.seeds_per_p, tau=args.tau, seed=args.seed,
            weighted=not args.unweighted,
        )
        part, curve = sel.partitions[sel.p_star], sel.curve
    else:
        best, curve = None, []
        scores = []
        for s in range(args.seeds_per_p):
            cand = fluid_communities(net, args.p, seed=(args.seed, args.p, s), weighted=not args.unweighted)
            q = partition_performance(net, cand).performance
            scores.append(q)
            if best is None or q > best[1]:
                best = (cand, q)
        part = best[0]
        curve = [(args.p, best[1], float(np.mean(scores)))]
    report = partition_report(net, part)
    man.write_output(out, "partition.json", _write_json(report))
    csv = "p,best_performance,mean_performance\n" + "".join(
        f"{p},{format(b, '.17g')},{format(m, '.17g')}\n" for p, b, m in curve
    )
    man.write_output(out, "performance.csv", _write_text(csv))
    man.finish(out)
    print(f"p = {part.p}, sizes = {part.sizes.tolist()}, performance = {report['performance']:.4f}")


def _tuning_inputs(args, man):
    H = _read_H(args.H, args.format, man)
    xb = _read_stack(args.xb, man, "background")
    y = _read_stack(args.y, man, "observation")
    if xb.shape[0] != y.shape[0]:
        raise DomainError(f"{xb.shape[0]} background vectors but {y.shape[0]} observation vectors")
    if xb.shape[1] != H.shape[1] or y.shape[1] != H.shape[0]:
        raise DomainError(f"vector lengths ({xb.shape[1]}, {y.shape[1]}) do not match H of shape {H.shape}")
    B = _read_covariance(args.b_var, args.b_corr, H.shape[1], man, "B")
    R = _read_covariance(args.r_var, args.r_corr, H.shape[0], man, "R")
    return H, xb, y, B, R


def cmd_tune(args):
    man = RunManifest("tune", args)
    H, xb, y, B, R = _tuning_inputs(args, man)
    out = _out_dir(args)
    ens = InnovationEnsemble(xb, y)
    extra = {}
    if args.strategy == "global":
        B2, R2, trace = di01_global(ens, B, R, H, args.qmax, args.tol)
    else:
        part = _partition_for(H, args.partition, args, man)
        extra["partition"] = part.to_dict()
        B2, R2, trace = di01_localized(ens, B, R, H, part, args.strategy, args.qmax, args.tol)
        for c, reason in sorted(trace.skipped.items()):
            print(f"warning: cluster {c} skipped: {reason}", file=sys.stderr)
    man.write_output(out, "b_variances.txt", lambda p: write_vector(p, B2.variances))
    man.write_output(out, "r_variances.txt", lambda p: write_vector(p, R2.variances))
    man.write_output(out, "b_correlation.csv", lambda p: write_matrix(p, B2.correlation, "csv"))
    man.write_output(out, "r_correlation.csv", lambda p: write_matrix(p, R2.correlation, "csv"))
    man.write_output(out, "trace.jsonl", _write_text(trace.to_jsonl()))
    man.finish(out, converged={str(k): v for k, v in trace.converged.items()}, **extra)
    print(f"{len(trace.records)} DI01 iterations, converged: {trace.converged}")


def cmd_assimilate(args):
    man = RunManifest("assimilate", args)
    H, xb, y, B, R = _tuning_inputs(args, man)
    out = _out_dir(args)
    res = analyse_batch(xb, y, B, R, H)
    man.write_output(out, "analysis.csv", lambda p: write_matrix(p, res.analyses, "csv"))
    costs = "J_b,J_o\n" + "".join(
        f"{format(b, '.17g')},{format(o, '.17g')}\n" for b, o in zip(res.cost_background, res.cost_observation)
    )
    man.write_output(out, "costs.csv", _write_text(costs))
    man.finish(out, traces={"KH": res.tr_KH, "I-HK": res.tr_ImHK})
    print(f"{res.analyses.shape[0]} analyses written to {out}")


def cmd_experiment(args):
    man = RunManifest("experiment", args)
    cfg = _load_config(args.config, man, {"root_seed": args.seed, "workers": args.workers})
    out = _out_dir(args)
    man.config["experiment"] = cfg.to_dict()
    t = time.perf_counter()
    rep = run_grid(cfg)
    man.timings["grid_seconds"] = time.perf_counter() - t
    man.write_output(out, "gains.csv", _write_text(rep.to_csv()))
    man.write_output(out, "summary.json", _write_json(rep.summary()))
    man.finish(out)
    for k, v in rep.quadrant_means().items():
        print(f"{k}: {v:.4f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_tuning_args(sp_):
    sp_.add_argument("--H", required=True, help="observation operator file")
    sp_.add_argument("--xb", nargs="+", required=True, help="background vector files (or CSV stacks)")
    sp_.add_argument("--y", nargs="+", required=True, help="observation vector files (or CSV stacks)")
    sp_.add_argument("--b-var", required=True, help="B variance file or a single variance value")
    sp_.add_argument("--b-corr", required=True, help="B correlation CSV or balgovind:L")
    sp_.add_argument("--r-var", required=True, help="R variance file or a single variance value")
    sp_.add_argument("--r-corr", required=True, help="R correlation CSV or balgovind:L")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0, or the config's)")
    common.add_argument("--format", choices=FORMATS, default=None, help="matrix file format (default: guess)")
    common.add_argument("--out", default=".", help="output directory (default: current)")

    parser = _Parser(prog="covloc", description="Graph-clustering localization for DI01 covariance tuning.")
    parser.add_argument("--version", action="version", version=f"covloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-h", parents=[common], help="generate a block-structured twin Jacobian")
    p.add_argument("--config", help="experiment config JSON (defaults otherwise)")
    p.set_defaults(func=cmd_gen_h)

    p = sub.add_parser("detect", parents=[common], help="detect state clusters of H")
    p.add_argument("H", help="observation operator file")
    p.add_argument("--p", type=_count_or_auto, default="auto", help="cluster count or 'auto' (default)")
    p.add_argument("--p-max", type=_positive_int, default=10)
    p.add_argument("--seeds-per-p", type=_positive_int, default=10)
    p.add_argument("--tau", type=float, default=0.25, help="elbow threshold")
    p.add_argument("--unweighted", action="store_true", help="ignore edge weights")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("tune", parents=[common], help="DI01 tuning of B and R variances")
    _add_tuning_args(p)
    p.add_argument("--strategy", choices=("global", "reduction", "adjustment"), default="global")
    p.add_argument("--qmax", type=_positive_int, default=10)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--partition", default="auto", help="partition JSON or 'auto'")
    p.add_argument("--p-max", type=_positive_int, default=10)
    p.add_argument("--seeds-per-p", type=_positive_int, default=10)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("assimilate", parents=[common], help="one-shot BLUE analysis")
    _add_tuning_args(p)
    p.set_defaults(func=cmd_assimilate)

    p = sub.add_parser("experiment", parents=[common], help="Monte Carlo gain grid")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--workers", type=_positive_int, default=None, help="worker processes")
    p.set_defaults(func=cmd_experiment)
    return parser


def _setup_logging():
    level = os.environ.get("COVLOC_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None and args.command != "experiment":
        args.seed = 0
    try:
        args.func(args)
    except (FormatError, DomainError, StrategyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateGeometryError, NumericalError, FactorizationError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CovlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
