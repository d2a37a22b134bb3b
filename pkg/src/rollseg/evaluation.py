"""Cross-validation of segmentation strategies and evaluation reports.

Two schemes are provided. ``leave_one_out`` trains on a single piece and
tests on all the others, once per piece. ``monte_carlo_cv`` repeatedly
draws a random train/test split of a fixed ratio. In both, transitions,
the hard threshold (unless fixed) and the OST parameters are re-fitted
inside every fold from the training pieces only.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import as_pieces, format_float
from .metrics import FrameCounts, Metrics, compute_metrics, frame_counts
from .optimize import SimplexOptions, select_beta_ht, train_ost
from .segmentation import HardThreshold, OptimizedSoftThreshold, SoftThreshold, estimate_transitions, segment

STRATEGIES = ("ht", "st", "ost")
REPORT_COLUMNS = ["piece", "fold", "strategy", "tp", "fp", "fn", "tn", "tpr", "ppv", "fmeas", "acc"]


@dataclass(frozen=True)
class CVConfig:
    """What to train and evaluate in every fold.

    ``beta_ht=None`` selects the hard threshold on each fold's training
    pieces with an ROC sweep over ``roc_grid`` (default 0 to -5 in 0.1
    steps) using ``criterion``.
    """

    strategies: tuple = STRATEGIES
    beta_ht: float = None
    roc_grid: tuple = None
    criterion: str = "fmeasure"
    min_duration: int = 0
    decode: str = "posterior"
    simplex: SimplexOptions = None
    global_pair: bool = False
    jobs: int = 1

    def __post_init__(self):
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ValueError(f"unknown strategies {bad}; choose from {STRATEGIES}")


@dataclass(frozen=True)
class PieceResult:
    fold: int
    piece: str
    strategy: str
    counts: FrameCounts

    @property
    def metrics(self) -> Metrics:
        return compute_metrics(self.counts)


@dataclass(frozen=True)
class FoldInfo:
    index: int
    train_ids: tuple
    test_ids: tuple
    beta_ht: float


@dataclass
class EvaluationReport:
    mode: str
    strategies: tuple
    folds: list
    results: list
    seed: int = None
    ratio: float = None

    def rows(self, strategy, fold=None):
        return [r for r in self.results if r.strategy == strategy and (fold is None or r.fold == fold)]

    def counts(self, strategy, fold=None) -> FrameCounts:
        total = FrameCounts()
        for r in self.rows(strategy, fold):
            total = total + r.counts
        return total

    def micro(self, strategy, fold=None) -> Metrics:
        """Metrics of the summed confusion counts."""
        return compute_metrics(self.counts(strategy, fold))

    def macro(self, strategy, fold=None) -> Metrics:
        """Mean of per-piece metrics over every (fold, test piece) evaluation."""
        ms = [r.metrics for r in self.rows(strategy, fold)]
        return Metrics(*(float(np.mean([getattr(m, k) for m in ms])) for k in ("tpr", "ppv", "fmeas", "acc")))

    def fold_macro(self, strategy, metric="fmeas"):
        """Per-fold macro value of ``metric``, in fold order."""
        return np.array([getattr(self.macro(strategy, f.index), metric) for f in self.folds])

    def delta(self, a="ost", b="ht", metric="fmeas"):
        """Mean over folds of the macro difference ``a - b``."""
        return float(np.mean(self.fold_macro(a, metric) - self.fold_macro(b, metric)))

    def csv_lines(self):
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.results:
            m = r.metrics
            lines.append(",".join([r.piece, str(r.fold), r.strategy, *map(str, r.counts.as_tuple()),
                                   *(format_float(v) for v in (m.tpr, m.ppv, m.fmeas, m.acc))]))
        return lines

    def summary_lines(self):
        head = f"{'strategy':<10}{'Acc (%)':>10}{'FMeas (%)':>11}{'micro Acc':>11}{'micro FMeas':>13}"
        lines = [f"mode: {self.mode}" + (f"  ratio: {self.ratio}" if self.ratio is not None else "")
                 + f"  folds: {len(self.folds)}", head]
        for s in self.strategies:
            ma, mi = self.macro(s), self.micro(s)
            lines.append(f"{s.upper():<10}{100 * ma.acc:>10.1f}{100 * ma.fmeas:>11.1f}"
                         f"{100 * mi.acc:>11.1f}{100 * mi.fmeas:>13.1f}")
        return lines

    def text_lines(self):
        """One block per fold, then the summary."""
        lines = []
        for f in self.folds:
            lines.append(f"[fold {f.index}]")
            lines.append(f"train: {' '.join(f.train_ids)}")
            lines.append(f"test: {' '.join(f.test_ids)}")
            lines.append(f"beta_ht: {format_float(f.beta_ht)}")
            for s in self.strategies:
                m = self.macro(s, f.index)
                lines.append(f"{s}: fmeas={m.fmeas:.6f} acc={m.acc:.6f} tpr={m.tpr:.6f} ppv={m.ppv:.6f}")
            lines.append("")
        return lines + self.summary_lines()


# --------------------------------------------------------------------------
# Fold execution
# --------------------------------------------------------------------------

def train_strategies(train, config: CVConfig):
    """Fit every requested strategy on ``train``; returns (strategies, beta_ht)."""
    if config.beta_ht is None:
        grid = None if config.roc_grid is None else np.asarray(config.roc_grid, dtype=float)
        beta_ht, _ = select_beta_ht(train, grid, config.criterion)
    else:
        beta_ht = float(config.beta_ht)
    out = {}
    transitions = None
    if "st" in config.strategies or "ost" in config.strategies:
        transitions = estimate_transitions([p.truth for p in train])
    for s in config.strategies:
        if s == "ht":
            out[s] = HardThreshold(beta_ht, config.min_duration)
        elif s == "st":
            out[s] = SoftThreshold(beta_ht, transitions, config.min_duration, config.decode)
        else:
            params = train_ost(train, beta_ht, transitions, config.simplex, config.global_pair)
            out[s] = OptimizedSoftThreshold(params, config.min_duration, config.decode)
    return out, beta_ht


def run_fold(pieces, index, train_idx, test_idx, config: CVConfig):
    train = [pieces[i] for i in train_idx]
    test = [pieces[i] for i in test_idx]
    strategies, beta_ht = train_strategies(train, config)
    results = []
    for piece in test:
        for name in config.strategies:
            est = segment(piece.activity, strategies[name])
            results.append(PieceResult(index, piece.id, name, frame_counts(est, piece.truth)))
    info = FoldInfo(index, tuple(p.id for p in train), tuple(p.id for p in test), beta_ht)
    return info, results


_WORKER = {}


def _init_worker(pieces, config):
    _WORKER["pieces"] = pieces
    _WORKER["config"] = config


def _run_task(task):
    index, train_idx, test_idx = task
    return run_fold(_WORKER["pieces"], index, train_idx, test_idx, _WORKER["config"])


def _run_folds(pieces, tasks, config):
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs, initializer=_init_worker,
                                 initargs=(pieces, config)) as ex:
            done = list(ex.map(_run_task, tasks))
    else:
        done = [run_fold(pieces, *t, config) for t in tasks]
    # reassemble in fold order whatever the completion order
    done.sort(key=lambda d: d[0].index)
    folds = [d[0] for d in done]
    results = [r for d in done for r in d[1]]
    return folds, results


def leave_one_out(source, config: CVConfig = None) -> EvaluationReport:
    """Train on each piece alone and test on all the others.

    ``source`` is a manifest, a manifest path, or a list of pieces.
    """
    config = config or CVConfig()
    pieces = as_pieces(source)
    n = len(pieces)
    if n < 2:
        raise ValueError("leave-one-out needs at least 2 pieces")
    tasks = [(i, (i,), tuple(j for j in range(n) if j != i)) for i in range(n)]
    folds, results = _run_folds(pieces, tasks, config)
    return EvaluationReport("loo", tuple(config.strategies), folds, results)


def split_sizes(n, ratio):
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    k = int(math.floor(ratio * n + 0.5))
    if k < 1 or k > n - 1:
        raise ValueError(f"ratio {ratio} over {n} pieces leaves an empty train or test split")
    return k, n - k


def monte_carlo_splits(n, ratio, iterations, seed):
    k, _ = split_sizes(n, ratio)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(iterations):
        perm = rng.permutation(n)
        out.append((tuple(sorted(int(i) for i in perm[:k])), tuple(sorted(int(i) for i in perm[k:]))))
    return out


def monte_carlo_cv(source, ratio, iterations=20, seed=0, config: CVConfig = None) -> EvaluationReport:
    """Repeated random train/test splits with a fixed training fraction."""
    config = config or CVConfig()
    pieces = as_pieces(source)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    splits = monte_carlo_splits(len(pieces), ratio, iterations, seed)
    tasks = [(i, tr, te) for i, (tr, te) in enumerate(splits)]
    folds, results = _run_folds(pieces, tasks, config)
    return EvaluationReport("mc", tuple(config.strategies), folds, results, seed=seed, ratio=ratio)


@dataclass(frozen=True)
class SweepPoint:
    ratio: float
    delta: float  # mean over iterations of the macro difference
    a: float
    b: float


def ratio_sweep(source, ratios, iterations=20, seed=0, config: CVConfig = None, a="ost", b="ht",
                metric="fmeas", include_loo=False):
    """Strategy difference as a function of the training fraction.

    Returns a list of :class:`SweepPoint`; with ``include_loo`` a final
    point with ``ratio = nan`` holds the leave-one-out value.
    """
    config = config or CVConfig()
    pieces = as_pieces(source)
    out = []
    for r in ratios:
        rep = monte_carlo_cv(pieces, r, iterations, seed, config)
        out.append(SweepPoint(float(r), rep.delta(a, b, metric), float(rep.fold_macro(a, metric).mean()),
                              float(rep.fold_macro(b, metric).mean())))
    if include_loo:
        rep = leave_one_out(pieces, config)
        out.append(SweepPoint(float("nan"), rep.delta(a, b, metric), float(rep.fold_macro(a, metric).mean()),
                              float(rep.fold_macro(b, metric).mean())))
    return out
