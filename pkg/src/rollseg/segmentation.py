"""Note segmentation: hard thresholding and the per-pitch on/off HMM.

Each pitch row is an independent two-state chain starting from the off
state. Transitions are ``P(on | off) = tau0`` and ``P(off | on) = tau1``.
The observation term for the on state is a logistic function of the
log activity with slope ``exp(alpha)`` centred at ``beta`` (both on the
dB-like log10 scale).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import _kernels
from .core import (ActivityMatrix, FormatError, PianoRoll, ShapeError, _data_lines, _write_lines,
                   format_float)

EPS = 1e-4
DEFAULT_TAU0 = 0.01
DEFAULT_TAU1 = 0.05
DECODE_RULES = ("posterior", "viterbi")


def clamp_probability(p):
    return min(max(float(p), EPS), 1.0 - EPS)


@dataclass(frozen=True)
class PitchHmmParams:
    """HMM parameters for one pitch. Transition probabilities are clamped to [EPS, 1 - EPS]."""

    tau0: float
    tau1: float
    alpha: float = 0.0
    beta: float = -2.0

    def __post_init__(self):
        for name in ("tau0", "tau1", "alpha", "beta"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "tau0", clamp_probability(self.tau0))
        object.__setattr__(self, "tau1", clamp_probability(self.tau1))


@dataclass(frozen=True)
class HmmParamSet:
    """One :class:`PitchHmmParams` per pitch row, lowest pitch first.

    ``report`` carries optional training diagnostics and is ignored by
    equality.
    """

    per_pitch: tuple
    pitch_offset: int = 21
    report: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "per_pitch", tuple(self.per_pitch))
        if not self.per_pitch:
            raise ValueError("parameter set is empty")

    def __len__(self):
        return len(self.per_pitch)

    def __getitem__(self, i):
        return self.per_pitch[i]

    @property
    def alphas(self):
        return np.array([p.alpha for p in self.per_pitch])

    @property
    def betas(self):
        return np.array([p.beta for p in self.per_pitch])

    def transitions(self):
        return Transitions(np.array([p.tau0 for p in self.per_pitch]),
                           np.array([p.tau1 for p in self.per_pitch]), self.pitch_offset)


@dataclass(frozen=True)
class Transitions:
    """Per-pitch transition probabilities, as estimated from ground truth."""

    tau0: np.ndarray
    tau1: np.ndarray
    pitch_offset: int = 21
    fallback0: np.ndarray = None
    fallback1: np.ndarray = None

    def __post_init__(self):
        t0 = np.clip(np.asarray(self.tau0, dtype=float), EPS, 1 - EPS)
        t1 = np.clip(np.asarray(self.tau1, dtype=float), EPS, 1 - EPS)
        if t0.shape != t1.shape or t0.ndim != 1 or t0.size == 0:
            raise ShapeError("tau0 and tau1 must be equal-length non-empty vectors")
        object.__setattr__(self, "tau0", t0)
        object.__setattr__(self, "tau1", t1)
        for name in ("fallback0", "fallback1"):
            v = getattr(self, name)
            object.__setattr__(self, name, np.zeros(t0.size, bool) if v is None else np.asarray(v, bool))

    def __len__(self):
        return self.tau0.size

    @classmethod
    def constant(cls, num_pitches, tau0=DEFAULT_TAU0, tau1=DEFAULT_TAU1, pitch_offset=21):
        return cls(np.full(num_pitches, tau0), np.full(num_pitches, tau1), pitch_offset)

    def with_sigmoid(self, alpha, beta):
        """Parameter set with the same (alpha, beta) for every pitch."""
        return HmmParamSet([PitchHmmParams(a, b, alpha, beta) for a, b in zip(self.tau0, self.tau1)],
                           self.pitch_offset)


# --------------------------------------------------------------------------
# Strategies
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HardThreshold:
    beta_ht: float
    min_duration: int = 0

    kind = "ht"


@dataclass(frozen=True)
class SoftThreshold:
    """HMM decode with the sigmoid fixed at slope 1 (alpha = 0) and centre ``beta_ht``."""

    beta_ht: float
    transitions: Transitions
    min_duration: int = 0
    decode: str = "posterior"

    kind = "st"

    def to_params(self):
        return self.transitions.with_sigmoid(0.0, self.beta_ht)


@dataclass(frozen=True)
class OptimizedSoftThreshold:
    params: HmmParamSet
    min_duration: int = 0
    decode: str = "posterior"

    kind = "ost"

    def to_params(self):
        return self.params


SegmentationStrategy = Union[HardThreshold, SoftThreshold, OptimizedSoftThreshold]


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def _as_rolls(rolls):
    if isinstance(rolls, PianoRoll):
        return [rolls]
    return list(rolls)


def transition_counts(rolls):
    """Per-pitch counts ``n[p, i, j]`` of (q_{t-1} = i, q_t = j) with q_0 = 0 prepended."""
    rolls = _as_rolls(rolls)
    if not rolls:
        raise ValueError("no pianorolls given")
    n_p = rolls[0].num_pitches
    counts = np.zeros((n_p, 2, 2), dtype=np.int64)
    for roll in rolls:
        if roll.num_pitches != n_p:
            raise ShapeError("pianorolls have different pitch counts")
        if roll.num_frames == 0:
            raise ValueError("cannot estimate transitions from a zero-length pianoroll")
        q = np.zeros((n_p, roll.num_frames + 1), dtype=np.int64)
        q[:, 1:] = roll.active
        code = 2 * q[:, :-1] + q[:, 1:]
        for c in range(4):
            counts[:, c // 2, c % 2] += (code == c).sum(axis=1)
    return counts


def estimate_transitions(rolls, default_tau0=DEFAULT_TAU0, default_tau1=DEFAULT_TAU1):
    """Estimate per-pitch (tau0, tau1) from observed state sequences.

    Ratios with no visits to the source state fall back to the estimate
    pooled over all pitches, then to the defaults. The ``fallback0`` /
    ``fallback1`` masks of the result flag which pitches fell back.

    Parameters
    ----------
    rolls : PianoRoll or sequence of PianoRoll
        Ground truth; several rolls are pooled (each restarting from q_0 = 0).
    """
    rolls = _as_rolls(rolls)
    n = transition_counts(rolls)
    out = []
    masks = []
    for src, dst in ((0, 1), (1, 0)):
        visits = n[:, src, :].sum(axis=1)
        hits = n[:, src, dst]
        pooled_visits = visits.sum()
        if pooled_visits > 0:
            pooled = hits.sum() / pooled_visits
        else:
            pooled = default_tau0 if src == 0 else default_tau1
        tau = np.where(visits > 0, hits / np.maximum(visits, 1), pooled)
        out.append(tau)
        masks.append(visits == 0)
    return Transitions(out[0], out[1], rolls[0].pitch_offset, masks[0], masks[1])


def observation_posterior_on(x, alpha, beta):
    """Observation probability of the on state, ``logistic(e^alpha * (x - beta))``.

    Works elementwise on arrays and never overflows.
    """
    z = np.exp(alpha) * (np.asarray(x, dtype=float) - beta)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def emission_odds(x, alpha, beta):
    z = math.exp(alpha) * (np.asarray(x, dtype=float) - beta)
    return np.exp(np.clip(z, -_kernels.ZCLIP, _kernels.ZCLIP))


def _check_row(x_row):
    x = np.ascontiguousarray(x_row, dtype=float)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D row, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty observation row")
    return x


def _single_start(n):
    s = np.zeros(n, dtype=np.bool_)
    s[0] = True
    return s


def forward_backward(x_row, params: PitchHmmParams):
    """Posterior probability of the on state at every frame.

    Parameters
    ----------
    x_row : array_like, shape (T,)
        Log activity of one pitch.
    params : PitchHmmParams

    Returns
    -------
    np.ndarray, shape (T,)
        ``P(q_t = 1 | x_1 .. x_T)``, with ``P(q_1 = 1) = tau0``.
    """
    x = _check_row(x_row)
    eps = emission_odds(x, params.alpha, params.beta)
    return _kernels.posterior_on(eps, _single_start(x.size), params.tau0, params.tau1)


def viterbi(x_row, params: PitchHmmParams):
    """Most likely binary state sequence (ties resolved toward the off state)."""
    x = _check_row(x_row)
    z = math.exp(params.alpha) * (x - params.beta)
    # log-sigmoid in both directions, stable for large |z|
    log_on = -np.logaddexp(0.0, -z)
    log_off = -np.logaddexp(0.0, z)
    return _kernels.viterbi_path(log_on, log_off, _single_start(x.size), params.tau0, params.tau1).astype(bool)


def decode_posterior(posteriors, rule="posterior"):
    """Binary states from on-state posteriors: on iff posterior > 0.5."""
    if rule != "posterior":
        raise ValueError(f"decode_posterior supports only the 'posterior' rule, got {rule!r}")
    return np.asarray(posteriors) > 0.5


def hard_threshold(X: ActivityMatrix, beta_ht):
    """On iff ``X(p, t) >= beta_ht``."""
    return PianoRoll(X.values >= beta_ht, X.pitch_offset, X.grid)


def _prune_row(row, k):
    out = row.copy()
    padded = np.concatenate([[0], row.astype(np.int8), [0]])
    d = np.diff(padded)
    for s, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
        if e - s < k:
            out[s:e] = False
    return out


def prune_min_duration(roll: PianoRoll, k):
    """Zero every maximal run of active frames shorter than ``k``."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k <= 1:
        return roll
    active = np.array([_prune_row(r, k) for r in roll.active])
    return PianoRoll(active, roll.pitch_offset, roll.grid)


def posteriors(X: ActivityMatrix, params: HmmParamSet):
    """On-state posteriors for every pitch row of ``X``."""
    if len(params) != X.num_pitches:
        raise ShapeError(f"parameter set has {len(params)} pitches, activity has {X.num_pitches}")
    out = np.empty(X.values.shape)
    for p, prm in enumerate(params.per_pitch):
        out[p] = forward_backward(X.values[p], prm)
    return out


def segment(X: ActivityMatrix, strategy: SegmentationStrategy) -> PianoRoll:
    """Apply a segmentation strategy to an activity matrix."""
    if isinstance(strategy, HardThreshold):
        roll = hard_threshold(X, strategy.beta_ht)
    else:
        params = strategy.to_params()
        if len(params) != X.num_pitches:
            raise ShapeError(f"strategy covers {len(params)} pitches, activity has {X.num_pitches}")
        if strategy.decode == "viterbi":
            active = np.array([viterbi(X.values[p], prm) for p, prm in enumerate(params.per_pitch)])
        elif strategy.decode == "posterior":
            active = decode_posterior(posteriors(X, params))
        else:
            raise ValueError(f"unknown decode rule {strategy.decode!r}")
        roll = PianoRoll(active, X.pitch_offset, X.grid)
    if strategy.min_duration > 1:
        roll = prune_min_duration(roll, strategy.min_duration)
    return roll


# --------------------------------------------------------------------------
# Parameter files
# --------------------------------------------------------------------------

PARAM_COLUMNS = ["pitch", "tau0", "tau1", "alpha", "beta"]


def save_params(path, params: HmmParamSet, header=None):
    lines = [",".join(PARAM_COLUMNS)]
    for i, p in enumerate(params.per_pitch):
        lines.append(",".join([str(params.pitch_offset + i)] +
                              [format_float(v) for v in (p.tau0, p.tau1, p.alpha, p.beta)]))
    _write_lines(path, header, lines)


def _read_table(path, required):
    rows = list(_data_lines(path))
    if not rows:
        raise FormatError(f"{path}: empty parameter file")
    lineno, head = rows[0]
    cols = [c.strip() for c in head.split(",")]
    missing = [c for c in required if c not in cols]
    if missing:
        raise FormatError(f"{path}: line {lineno}: missing column(s) {missing}")
    table = []
    for lineno, s in rows[1:]:
        toks = [t.strip() for t in s.split(",")]
        if len(toks) != len(cols):
            raise FormatError(f"{path}: line {lineno}: expected {len(cols)} values, found {len(toks)}")
        try:
            rec = {c: float(t) for c, t in zip(cols, toks)}
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: non-numeric value") from None
        table.append(rec)
    if not table:
        raise FormatError(f"{path}: no parameter rows")
    pitches = [int(r["pitch"]) for r in table]
    if pitches != list(range(pitches[0], pitches[0] + len(pitches))):
        raise FormatError(f"{path}: pitch column must be consecutive ascending")
    return table, pitches[0]


def load_params(path) -> HmmParamSet:
    table, offset = _read_table(path, PARAM_COLUMNS)
    try:
        return HmmParamSet([PitchHmmParams(r["tau0"], r["tau1"], r["alpha"], r["beta"]) for r in table], offset)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_transitions(path) -> Transitions:
    """Read ``pitch,tau0,tau1`` columns (a full parameter file also works)."""
    table, offset = _read_table(path, ["pitch", "tau0", "tau1"])
    return Transitions(np.array([r["tau0"] for r in table]), np.array([r["tau1"] for r in table]), offset)


def save_transitions(path, transitions: Transitions, header=None):
    lines = ["pitch,tau0,tau1"]
    for i, (a, b) in enumerate(zip(transitions.tau0, transitions.tau1)):
        lines.append(f"{transitions.pitch_offset + i},{format_float(a)},{format_float(b)}")
    _write_lines(path, header, lines)
