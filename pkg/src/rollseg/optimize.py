"""Training: Nelder-Mead simplex search for per-pitch sigmoid parameters,
the squared-error (LMSE) objective, and ROC-based hard-threshold selection."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .core import NumericalError, Piece, ShapeError, check_compatible, format_float, _write_lines
from .metrics import FrameCounts, compute_metrics
from .segmentation import HmmParamSet, PitchHmmParams, Transitions, emission_odds

ALPHA_BOUNDS = (-3.0, 3.0)
BETA_BOUNDS = (-6.0, 0.0)
PENALTY_WEIGHT = 10.0


@dataclass(frozen=True)
class SimplexOptions:
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5
    initial_step: float = 0.5
    max_iterations: int = 200
    ftol: float = 1e-6
    xtol: float = 1e-4

    def __post_init__(self):
        for name in ("reflection", "expansion", "contraction", "shrink", "initial_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.expansion > self.reflection:
            raise ValueError("expansion must exceed reflection")
        if not 0 < self.contraction < 1 or not 0 < self.shrink < 1:
            raise ValueError("contraction and shrink must lie in (0, 1)")


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    evaluations: int
    trace: list = field(default_factory=list)  # best value at start, then after each iteration


def box_penalty(v, bounds, weight=PENALTY_WEIGHT):
    """Quadratic penalty on the distance outside a box; zero inside."""
    pen = 0.0
    for x, (lo, hi) in zip(v, bounds):
        if x < lo:
            pen += (lo - x) ** 2
        elif x > hi:
            pen += (x - hi) ** 2
    return weight * pen


def nelder_mead(objective: Callable, start, options: SimplexOptions = None, bounds=None,
                penalty_weight=PENALTY_WEIGHT) -> SimplexResult:
    """Minimise ``objective`` with the Nelder-Mead simplex method.

    The initial simplex is ``start`` plus one vertex per coordinate offset
    by ``options.initial_step``. Iteration stops when both the spread of
    vertex values is <= ``ftol`` and the simplex diameter is <= ``xtol``,
    or after ``max_iterations``.

    Parameters
    ----------
    objective : callable
        Maps a 1-D array to a float.
    start : array_like
    options : SimplexOptions, optional
    bounds : sequence of (low, high), optional
        Box constraints, enforced softly by adding a quadratic penalty on
        the distance outside the box.

    Returns
    -------
    SimplexResult
        ``fun`` is the (penalised) value at ``x``; never above the value at
        ``start``.
    """
    opt = options or SimplexOptions()
    x0 = np.asarray(start, dtype=float).ravel()
    n = x0.size
    nfev = 0

    def f(v):
        nonlocal nfev
        nfev += 1
        val = float(objective(v))
        if bounds is not None:
            val += box_penalty(v, bounds, penalty_weight)
        return val

    f0 = f(x0)
    if not math.isfinite(f0):
        raise NumericalError(f"objective is not finite at the start point {x0.tolist()}")

    simplex = np.empty((n + 1, n))
    simplex[0] = x0
    for i in range(n):
        simplex[i + 1] = x0
        simplex[i + 1, i] += opt.initial_step
    values = np.empty(n + 1)
    values[0] = f0
    for i in range(1, n + 1):
        values[i] = f(simplex[i])
    values[~np.isfinite(values)] = np.inf

    trace = [float(values.min())]
    converged = False
    it = 0
    while True:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        diameter = np.max(np.abs(simplex[1:] - simplex[0])) if n else 0.0
        if values[-1] - values[0] <= opt.ftol and diameter <= opt.xtol:
            converged = True
            break
        if it >= opt.max_iterations:
            break
        it += 1

        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + opt.reflection * (centroid - worst)
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + opt.expansion * (xr - centroid)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
        elif fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
        else:
            if fr < values[-1]:
                xc = centroid + opt.contraction * (xr - centroid)
                fc = f(xc)
                accept = fc <= fr
            else:
                xc = centroid + opt.contraction * (worst - centroid)
                fc = f(xc)
                accept = fc < values[-1]
            if accept:
                simplex[-1], values[-1] = xc, fc
            else:
                best = simplex[0]
                for i in range(1, n + 1):
                    simplex[i] = best + opt.shrink * (simplex[i] - best)
                    values[i] = f(simplex[i])
        values[~np.isfinite(values)] = np.inf
        trace.append(float(values.min()))

    return SimplexResult(simplex[0].copy(), float(values[0]), it, converged, nfev, trace)


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------

def lmse(posteriors, truth, pitch=None):
    """Mean squared difference between on-state posteriors and binary truth.

    Parameters
    ----------
    posteriors : array_like, shape (n_pitches, n_frames) or (n_frames,)
    truth : PianoRoll or array_like of the same shape
    pitch : int, optional
        Restrict to one row.
    """
    eta = np.asarray(posteriors, dtype=float)
    ref = np.asarray(getattr(truth, "active", truth), dtype=float)
    if eta.shape != ref.shape:
        raise ShapeError(f"posterior shape {eta.shape} does not match truth shape {ref.shape}")
    if pitch is not None:
        eta, ref = eta[pitch], ref[pitch]
    if eta.size == 0:
        raise ValueError("no cells to compare")
    return float(np.mean((eta - ref) ** 2))


@dataclass(frozen=True)
class PitchData:
    """One pitch's rows from every training piece, concatenated."""

    x: np.ndarray
    truth: np.ndarray
    starts: np.ndarray

    @property
    def active(self):
        return bool(self.truth.any())


def training_rows(training: Sequence[Piece], pitch) -> PitchData:
    xs = [np.asarray(p.activity.values[pitch], dtype=float) for p in training]
    ts = [np.asarray(p.truth.active[pitch], dtype=float) for p in training]
    starts = np.zeros(sum(len(x) for x in xs), dtype=np.bool_)
    pos = 0
    for x in xs:
        starts[pos] = True
        pos += len(x)
    return PitchData(np.concatenate(xs), np.concatenate(ts), starts)


def pitch_objective(data: PitchData, tau0, tau1):
    """LMSE of one pitch as a function of ``(alpha, beta)``."""
    n = data.x.size

    def objective(v):
        eps = emission_odds(data.x, v[0], v[1])
        return _kernels.squared_error(eps, data.truth, data.starts, tau0, tau1) / n

    return objective


def pooled_objective(datas, transitions: Transitions):
    """LMSE over all pitches' cells for one shared ``(alpha, beta)``."""
    total = sum(d.x.size for d in datas)

    def objective(v):
        sse = 0.0
        for p, d in enumerate(datas):
            eps = emission_odds(d.x, v[0], v[1])
            sse += _kernels.squared_error(eps, d.truth, d.starts, transitions.tau0[p], transitions.tau1[p])
        return sse / total

    return objective


def _check_training(training):
    training = list(training)
    if not training:
        raise ValueError("training set is empty")
    ref = training[0].activity
    for p in training[1:]:
        check_compatible(ref, p.activity, "training pieces")
    return training


@dataclass
class PitchFit:
    pitch: int
    alpha: float
    beta: float
    lmse_start: float
    lmse_final: float
    iterations: int
    converged: bool
    fallback: bool = False


@dataclass
class TrainingReport:
    fits: list
    pooled: tuple = None  # (alpha, beta) of the shared optimum, when computed

    @property
    def fallback_pitches(self):
        return [f.pitch for f in self.fits if f.fallback]


def _fit_one(args):
    data, tau0, tau1, start, options = args
    obj = pitch_objective(data, tau0, tau1)
    res = nelder_mead(obj, start, options, bounds=(ALPHA_BOUNDS, BETA_BOUNDS))
    start_val = obj(np.asarray(start, dtype=float))
    return res.x, start_val, res.fun, res.iterations, res.converged


def _map(fn, items, jobs):
    if jobs and jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    return [fn(i) for i in items]


def train_ost(training: Sequence[Piece], beta_ht_init, transitions: Transitions,
              options: SimplexOptions = None, global_pair=False, jobs=1) -> HmmParamSet:
    """Fit per-pitch ``(alpha, beta)`` by minimising LMSE with Nelder-Mead.

    Every pitch starts from ``(0, beta_ht_init)``. Pitches without any
    active ground-truth frame in ``training`` get the pooled optimum (one
    shared pair fitted over all pitches); ``global_pair=True`` assigns the
    pooled optimum to every pitch. Diagnostics are attached as
    ``result.report``.
    """
    training = _check_training(training)
    n_p = training[0].activity.num_pitches
    if len(transitions) != n_p:
        raise ShapeError(f"transitions cover {len(transitions)} pitches, training data has {n_p}")
    start = (0.0, float(beta_ht_init))
    datas = [training_rows(training, p) for p in range(n_p)]
    active = [d.active for d in datas]

    pooled = None
    if global_pair or not all(active):
        obj = pooled_objective(datas, transitions)
        res = nelder_mead(obj, start, options, bounds=(ALPHA_BOUNDS, BETA_BOUNDS))
        pooled = (float(res.x[0]), float(res.x[1]))

    fit_idx = [] if global_pair else [p for p in range(n_p) if active[p]]
    results = _map(_fit_one, [(datas[p], transitions.tau0[p], transitions.tau1[p], start, options)
                              for p in fit_idx], jobs)
    by_pitch = dict(zip(fit_idx, results))

    offset = training[0].activity.pitch_offset
    fits, per_pitch = [], []
    for p in range(n_p):
        t0, t1 = transitions.tau0[p], transitions.tau1[p]
        if p in by_pitch:
            x, s, v, nit, conv = by_pitch[p]
            a, b = float(x[0]), float(x[1])
            fits.append(PitchFit(offset + p, a, b, s, v, nit, conv))
        else:
            a, b = pooled
            obj = pitch_objective(datas[p], t0, t1)
            fits.append(PitchFit(offset + p, a, b, obj(np.array(start)), obj(np.array(pooled)), 0, True,
                                 fallback=True))
        per_pitch.append(PitchHmmParams(t0, t1, a, b))
    return HmmParamSet(per_pitch, offset, report=TrainingReport(fits, pooled))


def lmse_surface(training: Sequence[Piece], transitions: Transitions, alphas, betas, pitch=None):
    """LMSE on a grid of ``(alpha, beta)``; rows follow ``alphas``, columns ``betas``.

    With ``pitch`` set, only that pitch's rows enter the mean; otherwise
    all pitches are pooled. ``np.log10`` of the result gives a contour
    surface of the objective.
    """
    training = _check_training(training)
    alphas = np.asarray(alphas, dtype=float)
    betas = np.asarray(betas, dtype=float)
    n_p = training[0].activity.num_pitches
    pitches = range(n_p) if pitch is None else [pitch]
    sse = np.zeros((alphas.size, betas.size))
    total = 0
    for p in pitches:
        d = training_rows(training, p)
        total += d.x.size
        for i, a in enumerate(alphas):
            s = math.exp(a)
            # (x, beta) are bounded so neither factor can overflow
            base = np.exp(np.clip(s * d.x, -_kernels.ZCLIP, _kernels.ZCLIP))
            gains = np.exp(np.clip(-s * betas, -_kernels.ZCLIP, _kernels.ZCLIP))
            sse[i] += _kernels.squared_error_grid(base, gains, d.truth, d.starts,
                                                  transitions.tau0[p], transitions.tau1[p])
    return sse / total


# --------------------------------------------------------------------------
# Hard-threshold selection
# --------------------------------------------------------------------------

def default_beta_grid(low=-5.0, high=0.0, step=0.1):
    n = int(round((high - low) / step))
    return np.round(high - step * np.arange(n + 1), 10)


ROC_COLUMNS = ["threshold", "tp", "fp", "tn", "fn", "tpr", "fpr", "fmeas"]


@dataclass(frozen=True)
class RocTable:
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    def counts(self, i):
        return FrameCounts(int(self.tp[i]), int(self.fp[i]), int(self.fn[i]), int(self.tn[i]))

    @property
    def tpr(self):
        pos = self.tp + self.fn
        return np.where(pos > 0, self.tp / np.maximum(pos, 1), 0.0)

    @property
    def fpr(self):
        neg = self.fp + self.tn
        return np.where(neg > 0, self.fp / np.maximum(neg, 1), 0.0)

    @property
    def fmeas(self):
        return np.array([compute_metrics(self.counts(i)).fmeas for i in range(self.thresholds.size)])

    def save(self, path, header=None):
        tpr, fpr, fm = self.tpr, self.fpr, self.fmeas
        lines = [",".join(ROC_COLUMNS)]
        for i, th in enumerate(self.thresholds):
            lines.append(",".join([format_float(th), str(self.tp[i]), str(self.fp[i]), str(self.tn[i]),
                                   str(self.fn[i]), format_float(tpr[i]), format_float(fpr[i]),
                                   format_float(fm[i])]))
        _write_lines(path, header, lines)


def roc_table(dataset: Sequence[Piece], grid) -> RocTable:
    """Confusion counts of hard thresholding at each grid value, summed over pieces."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("threshold grid is empty")
    on = np.sort(np.concatenate([p.activity.values[p.truth.active] for p in dataset]))
    off = np.sort(np.concatenate([p.activity.values[~p.truth.active] for p in dataset]))
    # cells with x >= threshold are detected
    tp = on.size - np.searchsorted(on, grid, side="left")
    fp = off.size - np.searchsorted(off, grid, side="left")
    return RocTable(grid, tp, fp, off.size - fp, on.size - tp)


def select_beta_ht(dataset: Sequence[Piece], grid=None, criterion="fmeasure"):
    """Pick the hard threshold from an ROC sweep.

    ``criterion="fmeasure"`` maximises the frame F-measure over the whole
    dataset; ``"youden"`` maximises TPR - FPR. Ties go to the higher
    threshold.

    Returns
    -------
    beta_ht : float
    table : RocTable
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    grid = default_beta_grid() if grid is None else np.asarray(grid, dtype=float)
    table = roc_table(dataset, grid)
    if criterion == "fmeasure":
        if table.tp[0] + table.fn[0] == 0:
            raise ValueError("ground truth has no active frames, so the F-measure is undefined "
                             "at every threshold; use criterion='youden'")
        score = table.fmeas
    elif criterion == "youden":
        score = table.tpr - table.fpr
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    best = score.max()
    candidates = np.flatnonzero(score == best)
    return float(grid[candidates].max()), table
