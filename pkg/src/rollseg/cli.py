"""Command-line interface.

Exit codes: 0 success, 2 input/IO error, 3 data-shape error, 4 numerical
failure. The seed is taken from ``--seed``, else ``$ROLLSEG_SEED``, else 0.
Every output file starts with ``#`` header lines recording the tool
version, the command line (minus ``--jobs``) and the seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (DEFAULT_FLOOR_DB, DEFAULT_FRAME_PERIOD_S, DEFAULT_PITCH_OFFSET, FormatError,
                   NumericalError, ShapeError, _write_lines, format_float, load_activity_matrix,
                   load_corpus, load_manifest, save_pianoroll)
from .evaluation import CVConfig, leave_one_out, monte_carlo_cv, ratio_sweep
from .optimize import SimplexOptions, pitch_objective, select_beta_ht, train_ost, training_rows
from .segmentation import (HardThreshold, OptimizedSoftThreshold, SoftThreshold, Transitions,
                           estimate_transitions, load_params, load_transitions, save_params, segment)
from .synth import SynthSpec, write_corpus

log = logging.getLogger("rollseg")

SEED_ENV = "ROLLSEG_SEED"


def resolve_seed(flag):
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise FormatError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _canonical_command(argv):
    out = []
    skip = False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--jobs":
            skip = True
            continue
        if a.startswith("--jobs="):
            continue
        out.append(a)
    return shlex.join(["rollseg", *out])


def _header(args):
    return [f"rollseg {__version__}", f"command: {args.command_line}", f"seed: {args.seed}"]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_segment(args):
    X = load_activity_matrix(args.input, args.floor, args.pitch_offset, args.frame_period)
    if args.strategy == "ht":
        if args.beta is None:
            raise FormatError("--strategy ht requires --beta")
        strategy = HardThreshold(args.beta, args.min_duration)
    elif args.strategy == "st":
        if args.beta is None:
            raise FormatError("--strategy st requires --beta")
        if args.transitions:
            tr = load_transitions(args.transitions)
        else:
            tr = Transitions.constant(X.num_pitches, pitch_offset=X.pitch_offset)
        if len(tr) != X.num_pitches or tr.pitch_offset != X.pitch_offset:
            raise ShapeError(f"transitions cover pitches {tr.pitch_offset}..{tr.pitch_offset + len(tr) - 1}, "
                             f"activity covers {X.pitch_offset}..{X.pitch_offset + X.num_pitches - 1}")
        strategy = SoftThreshold(args.beta, tr, args.min_duration, args.decode)
    else:
        if not args.params:
            raise FormatError("--strategy ost requires --params")
        params = load_params(args.params)
        if len(params) != X.num_pitches or params.pitch_offset != X.pitch_offset:
            raise ShapeError(f"parameter file covers {len(params)} pitches from {params.pitch_offset}, "
                             f"activity has {X.num_pitches} from {X.pitch_offset}")
        strategy = OptimizedSoftThreshold(params, args.min_duration, args.decode)
    roll = segment(X, strategy)
    save_pianoroll(args.output, roll, _header(args))
    return 0


def _simplex(args):
    return SimplexOptions(max_iterations=args.max_iter)


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    pieces = load_corpus(manifest)
    if not pieces:
        raise FormatError(f"{args.manifest}: manifest lists no pieces")
    transitions = estimate_transitions([p.truth for p in pieces])
    roc = None
    if args.beta is None or args.roc:
        beta_sel, roc = select_beta_ht(pieces, criterion=args.criterion)
    beta = args.beta if args.beta is not None else beta_sel
    params = train_ost(pieces, beta, transitions, _simplex(args), global_pair=args.global_pair, jobs=args.jobs)
    header = _header(args) + [f"beta_ht: {format_float(beta)}"]
    save_params(args.output, params, header)
    if args.roc:
        roc_path = args.roc_out or str(Path(args.output).with_suffix("")) + ".roc.csv"
        roc.save(roc_path, _header(args) + [f"selected beta_ht: {format_float(beta_sel)}"])
        print(f"selected beta_ht: {format_float(beta_sel)}")
    if args.verify:
        bad = []
        for p, fit in enumerate(params.report.fits):
            if fit.fallback:
                continue
            obj = pitch_objective(training_rows(pieces, p), transitions.tau0[p], transitions.tau1[p])
            final = obj(np.array([params[p].alpha, params[p].beta]))
            start = obj(np.array([0.0, beta]))
            if not final <= start:
                bad.append(fit.pitch)
        if bad:
            print(f"verify failed: LMSE above the ST start for pitches {bad}", file=sys.stderr)
            return 4
        print("verify: per-pitch LMSE <= ST start LMSE for every trained pitch")
    return 0


def _parse_ratios(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise FormatError(f"cannot parse ratio list {text!r}") from None


def cmd_evaluate(args):
    manifest = load_manifest(args.manifest)
    pieces = load_corpus(manifest)
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    config = CVConfig(strategies=strategies, beta_ht=args.beta, criterion=args.criterion,
                      min_duration=args.min_duration, decode=args.decode, simplex=_simplex(args),
                      global_pair=args.global_pair, jobs=args.jobs)
    if args.mode == "loo":
        report = leave_one_out(pieces, config)
    else:
        report = monte_carlo_cv(pieces, args.ratio, args.iterations, args.seed, config)
    header = _header(args) + [f"dataset: {manifest.dataset}"]
    prefix = args.out
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    _write_lines(f"{prefix}.csv", header, report.csv_lines())
    _write_lines(f"{prefix}.txt", header, report.text_lines())
    _write_lines(f"{prefix}.summary.txt", header, report.summary_lines())
    print("\n".join(report.summary_lines()))
    if args.sweep_ratios:
        if not {"ost", "ht"} <= set(strategies):
            raise FormatError("--sweep-ratios needs both ost and ht strategies")
        ratios = _parse_ratios(args.sweep_ratios)
        points = ratio_sweep(pieces, ratios, args.iterations, args.seed, config)
        lines = ["ratio,delta_fmeas,fmeas_ost,fmeas_ht"]
        lines += [",".join(format_float(v) for v in (p.ratio, p.delta, p.a, p.b)) for p in points]
        _write_lines(f"{prefix}.sweep.csv", header, lines)
    return 0


def cmd_synth(args):
    spec = SynthSpec(num_pitches=args.pitches, num_frames=args.frames, tau0=args.tau0, tau1=args.tau1,
                     on_level_db=args.on_level, off_level_db=args.off_level, noise_std_db=args.noise_std,
                     leak_prob=args.leak_prob, leak_gain_db=args.leak_gain, floor_db=args.floor,
                     pitch_offset=args.pitch_offset, frame_period_s=args.frame_period, seed=args.seed)
    kind = "smf" if args.gt_format == "smf" else "pianoroll-csv"
    path = write_corpus(args.out_dir, spec, args.pieces, kind, _header(args), args.dataset, args.jobs)
    print(path)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_grid_options(p):
    p.add_argument("--floor", type=float, default=DEFAULT_FLOOR_DB, help="silence floor (default -8)")
    p.add_argument("--pitch-offset", type=int, default=DEFAULT_PITCH_OFFSET)
    p.add_argument("--frame-period", type=float, default=DEFAULT_FRAME_PERIOD_S)


def _add_training_options(p):
    p.add_argument("--criterion", choices=("fmeasure", "youden"), default="fmeasure",
                   help="ROC selection rule for the hard threshold")
    p.add_argument("--global", dest="global_pair", action="store_true",
                   help="fit one (alpha, beta) pair shared by all pitches")
    p.add_argument("--max-iter", type=int, default=200, help="Nelder-Mead iteration cap")
    _add_jobs_option(p)


def _add_jobs_option(p):
    p.add_argument("--jobs", type=int, default=1, help="worker processes (output does not depend on it)")


def build_parser():
    parser = argparse.ArgumentParser(prog="rollseg", description="Note segmentation of pitch activity matrices.")
    parser.add_argument("--version", action="version", version=f"rollseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment an activity CSV into a pianoroll CSV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--strategy", choices=("ht", "st", "ost"), required=True)
    p.add_argument("--beta", type=float, help="hard threshold (ht, st)")
    p.add_argument("--transitions", help="CSV with pitch,tau0,tau1 (st)")
    p.add_argument("--params", help="trained parameter CSV (ost)")
    p.add_argument("--min-duration", type=int, default=0)
    p.add_argument("--decode", choices=("posterior", "viterbi"), default="posterior")
    p.add_argument("--seed", type=int)
    _add_grid_options(p)
    _add_jobs_option(p)  # accepted for uniformity; segmentation runs in one process
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="fit per-pitch HMM parameters on a manifest")
    p.add_argument("manifest")
    p.add_argument("output")
    p.add_argument("--beta", type=float, help="start threshold; default: ROC selection")
    p.add_argument("--roc", action="store_true", help="also write the ROC table")
    p.add_argument("--roc-out", help="ROC table path (default: <output>.roc.csv)")
    p.add_argument("--verify", action="store_true", help="re-check LMSE against the ST start point")
    p.add_argument("--seed", type=int)
    _add_training_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="cross-validate segmentation strategies")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=("loo", "mc"), required=True)
    p.add_argument("--strategies", default="ht,st,ost")
    p.add_argument("--beta", type=float, help="fixed hard threshold; default: ROC selection per fold")
    p.add_argument("--ratio", type=float, default=0.5, help="training fraction (mc)")
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--sweep-ratios", help="comma-separated training fractions for an OST-HT sweep")
    p.add_argument("--min-duration", type=int, default=0)
    p.add_argument("--decode", choices=("posterior", "viterbi"), default="posterior")
    p.add_argument("--out", default="report", help="output path prefix")
    p.add_argument("--seed", type=int)
    _add_training_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus")
    p.add_argument("out_dir")
    p.add_argument("--pieces", type=int, default=8)
    p.add_argument("--frames", type=int, default=6000)
    p.add_argument("--pitches", type=int, default=88)
    p.add_argument("--tau0", type=float, default=0.01)
    p.add_argument("--tau1", type=float, default=0.05)
    p.add_argument("--on-level", type=float, default=0.0)
    p.add_argument("--off-level", type=float, default=-5.0)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--leak-prob", type=float, default=0.0)
    p.add_argument("--leak-gain", type=float, default=-1.0)
    p.add_argument("--gt-format", choices=("csv", "smf"), default="csv")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--seed", type=int)
    _add_grid_options(p)
    _add_jobs_option(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args.seed = resolve_seed(args.seed)
        args.command_line = _canonical_command(argv)
        if getattr(args, "jobs", 1) < 1:
            raise FormatError("--jobs must be >= 1")
        return args.func(args)
    except ShapeError as exc:
        print(f"rollseg: shape error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"rollseg: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (FormatError, OSError, ValueError) as exc:
        print(f"rollseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
