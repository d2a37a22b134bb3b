"""Frame-level transcription metrics on binary pianorolls.

Recall, precision, F-measure and accuracy are computed from cell-wise
confusion counts over all (pitch, frame) cells. Accuracy ignores true
negatives: ``tp / (tp + fp + fn)``.

A ratio with a zero denominator is vacuous and scores 1: recall when the
reference has no active cell, precision when the estimate has none. The
F-measure is then 0 whenever exactly one side is empty, and every metric
is 1 when both are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import check_compatible


@dataclass(frozen=True)
class FrameCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return FrameCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def as_tuple(self):
        return (self.tp, self.fp, self.fn, self.tn)


@dataclass(frozen=True)
class Metrics:
    tpr: float
    ppv: float
    fmeas: float
    acc: float

    def as_dict(self):
        return {"tpr": self.tpr, "ppv": self.ppv, "fmeas": self.fmeas, "acc": self.acc}


def frame_counts(est, ref) -> FrameCounts:
    """Confusion counts between an estimated and a reference pianoroll."""
    check_compatible(est, ref, "estimate and reference pianorolls")
    e = np.asarray(est.active, dtype=bool)
    r = np.asarray(ref.active, dtype=bool)
    tp = int(np.count_nonzero(e & r))
    fp = int(np.count_nonzero(e & ~r))
    fn = int(np.count_nonzero(~e & r))
    return FrameCounts(tp, fp, fn, e.size - tp - fp - fn)


def compute_metrics(c: FrameCounts) -> Metrics:
    """Recall, precision, F-measure and accuracy from confusion counts."""
    tpr = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    ppv = c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
    # harmonic mean of ppv and tpr, written so that it is correctly rounded;
    # it also yields 0 when exactly one side is empty
    f_den = 2 * c.tp + c.fp + c.fn
    fmeas = 2 * c.tp / f_den if f_den else 1.0
    denom = c.tp + c.fp + c.fn
    acc = c.tp / denom if denom else 1.0
    return Metrics(tpr, ppv, fmeas, acc)
