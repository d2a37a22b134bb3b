import numpy as np
import pytest

from rollseg.evaluation import (CVConfig, leave_one_out, monte_carlo_cv, monte_carlo_splits, ratio_sweep,
                                split_sizes)
from rollseg.metrics import FrameCounts, compute_metrics, frame_counts
from rollseg.segmentation import HardThreshold, SoftThreshold, estimate_transitions, segment
from rollseg.synth import SynthSpec, generate_corpus

SMALL = SynthSpec(num_pitches=6, num_frames=400, noise_std_db=1.0, leak_prob=0.05)


@pytest.fixture(scope="module")
def corpus4():
    return generate_corpus(SMALL, 4)


def test_loo_two_pieces():
    pieces = generate_corpus(SMALL, 2)
    rep = leave_one_out(pieces, CVConfig(strategies=("ht",), beta_ht=-2.5))
    assert [(f.train_ids, f.test_ids) for f in rep.folds] == [(("piece000",), ("piece001",)),
                                                              (("piece001",), ("piece000",))]
    assert len(rep.results) == 2


def test_loo_needs_two_pieces():
    with pytest.raises(ValueError):
        leave_one_out(generate_corpus(SMALL, 1))


def test_loo_fixed_ht_is_training_independent(corpus4):
    rep = leave_one_out(corpus4, CVConfig(strategies=("ht",), beta_ht=-2.5))
    by_piece = {}
    for r in rep.results:
        by_piece.setdefault(r.piece, set()).add(r.counts)
    assert all(len(v) == 1 for v in by_piece.values())
    assert all(f.beta_ht == -2.5 for f in rep.folds)


def test_loo_aggregate_recomputed_directly():
    pieces = generate_corpus(SMALL, 3)
    rep = leave_one_out(pieces, CVConfig(strategies=("ht", "st"), beta_ht=-2.5))
    assert len(rep.results) == 3 * 2 * 2
    totals = {"ht": FrameCounts(), "st": FrameCounts()}
    for i, train in enumerate(pieces):
        tr = estimate_transitions(train.truth)
        for j, test in enumerate(pieces):
            if i == j:
                continue
            totals["ht"] += frame_counts(segment(test.activity, HardThreshold(-2.5)), test.truth)
            totals["st"] += frame_counts(segment(test.activity, SoftThreshold(-2.5, tr)), test.truth)
    for s in ("ht", "st"):
        assert rep.counts(s) == totals[s]
        assert rep.micro(s) == compute_metrics(totals[s])


def test_loo_roc_selected_per_fold(corpus4):
    rep = leave_one_out(corpus4, CVConfig(strategies=("ht",)))
    assert all(-5 <= f.beta_ht <= 0 for f in rep.folds)


def test_mc_deterministic(corpus4):
    cfg = CVConfig(strategies=("ht", "st"))
    a = monte_carlo_cv(corpus4, 0.5, 5, seed=7, config=cfg)
    b = monte_carlo_cv(corpus4, 0.5, 5, seed=7, config=cfg)
    assert a.csv_lines() == b.csv_lines() and a.text_lines() == b.text_lines()
    c = monte_carlo_cv(corpus4, 0.5, 5, seed=8, config=cfg)
    assert [f.train_ids for f in c.folds] != [f.train_ids for f in a.folds]


def test_mc_split_sizes(corpus4):
    rep = monte_carlo_cv(corpus4, 0.5, 6, seed=1, config=CVConfig(strategies=("ht",)))
    for f in rep.folds:
        assert len(f.train_ids) == 2 and len(f.test_ids) == 2
        assert not set(f.train_ids) & set(f.test_ids)


def test_mc_average_within_envelope(corpus4):
    rep = monte_carlo_cv(corpus4, 0.5, 20, seed=3, config=CVConfig(strategies=("ht", "ost")))
    for s in ("ht", "ost"):
        per_fold = rep.fold_macro(s)
        assert per_fold.size == 20
        assert per_fold.min() - 1e-12 <= per_fold.mean() <= per_fold.max() + 1e-12
        # with equal-sized test splits the fold mean equals the overall macro mean
        assert rep.macro(s).fmeas == pytest.approx(per_fold.mean(), abs=1e-12)


@pytest.mark.parametrize("n,ratio,expected", [(4, 0.5, (2, 2)), (10, 0.1, (1, 9)), (10, 0.6, (6, 4)),
                                              (5, 0.5, (3, 2)), (3, 0.2, (1, 2))])
def test_split_sizes(n, ratio, expected):
    assert split_sizes(n, ratio) == expected


@pytest.mark.parametrize("n,ratio", [(4, 0.05), (4, 0.95), (4, 0.0), (4, 1.0), (1, 0.5)])
def test_degenerate_split_rejected(n, ratio):
    with pytest.raises(ValueError):
        split_sizes(n, ratio)


def test_splits_are_seeded():
    assert monte_carlo_splits(10, 0.3, 4, 5) == monte_carlo_splits(10, 0.3, 4, 5)


def test_parallel_folds_match_serial(corpus4):
    a = leave_one_out(corpus4, CVConfig(jobs=1))
    b = leave_one_out(corpus4, CVConfig(jobs=2))
    assert a.csv_lines() == b.csv_lines()


def test_report_outputs(corpus4):
    rep = leave_one_out(corpus4, CVConfig(strategies=("ht", "st")))
    lines = rep.csv_lines()
    assert lines[0] == "piece,fold,strategy,tp,fp,fn,tn,tpr,ppv,fmeas,acc"
    assert len(lines) == 1 + 4 * 3 * 2
    text = rep.text_lines()
    assert text.count("[fold 0]") == 1 and any(l.startswith("HT") for l in text)
    row = lines[1].split(",")
    tp, fp, fn, tn = map(int, row[3:7])
    assert float(row[9]) == compute_metrics(FrameCounts(tp, fp, fn, tn)).fmeas


def test_unknown_strategy():
    with pytest.raises(ValueError):
        CVConfig(strategies=("ht", "xx"))


def test_ratio_sweep_shape(corpus4):
    pts = ratio_sweep(corpus4, [0.25, 0.5, 0.75], iterations=2, seed=0, include_loo=True)
    assert [p.ratio for p in pts[:3]] == [0.25, 0.5, 0.75] and np.isnan(pts[3].ratio)
    for p in pts:
        assert p.delta == pytest.approx(p.a - p.b, abs=1e-12)
