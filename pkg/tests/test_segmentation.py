import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_posteriors, brute_transition_counts, log_path_weights, path_log_weight
from rollseg.core import ActivityMatrix, FormatError, PianoRoll, ShapeError
from rollseg.segmentation import (EPS, HardThreshold, HmmParamSet, OptimizedSoftThreshold, PitchHmmParams,
                                  SoftThreshold, Transitions, decode_posterior, estimate_transitions,
                                  forward_backward, hard_threshold, load_params, load_transitions,
                                  observation_posterior_on, posteriors, prune_min_duration, save_params,
                                  save_transitions, segment, transition_counts, viterbi)


def roll(rows, offset=21):
    return PianoRoll(np.array(rows, dtype=bool), offset)


def act(rows, offset=21):
    return ActivityMatrix(np.array(rows, dtype=float), offset)


# ---------------------------------------------------------------- transitions

def test_transitions_hand_count():
    tr = estimate_transitions(roll([[0, 0, 1, 1, 0]]))
    assert tr.tau0[0] == pytest.approx(1 / 3, abs=0)
    assert tr.tau1[0] == 0.5


def test_transitions_all_zero_row_falls_back():
    tr = estimate_transitions(roll([[0] * 10]))
    assert tr.tau0[0] == EPS
    assert tr.tau1[0] == 0.05
    assert tr.fallback1[0] and not tr.fallback0[0]


def test_transitions_all_one_row():
    tr = estimate_transitions(roll([[1, 1, 1, 1]]))
    assert tr.tau0[0] == 1 - EPS
    assert tr.tau1[0] == EPS


def test_transitions_pooled_fallback():
    # pitch 1 never turns on: tau1 comes from the pitch-0 pooled estimate
    tr = estimate_transitions(roll([[0, 1, 1, 0, 1, 1, 1, 0], [0] * 8]))
    assert tr.tau1[1] == pytest.approx(tr.tau1[0])
    assert tr.fallback1.tolist() == [False, True]


def test_transitions_pool_several_rolls():
    a = roll([[1, 1, 0]])
    b = roll([[0, 1]])
    n = transition_counts([a, b])[0]
    # q0=0 prepended to each roll separately
    assert n.tolist() == [[1, 2], [1, 1]]


def test_zero_length_roll_rejected():
    with pytest.raises(ValueError):
        estimate_transitions(PianoRoll(np.zeros((2, 0), bool)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40))
def test_transition_counts_match_brute_force(row):
    n = transition_counts(roll([row]))[0]
    n00, n01, n10, n11 = brute_transition_counts(row)
    assert n.tolist() == [[n00, n01], [n10, n11]]


def test_params_clamped():
    p = PitchHmmParams(0.0, 1.0)
    assert (p.tau0, p.tau1) == (EPS, 1 - EPS)
    with pytest.raises(ValueError):
        PitchHmmParams(0.1, 0.1, alpha=float("nan"))


# ---------------------------------------------------------------- sigmoid

def test_sigmoid_examples():
    assert observation_posterior_on(-2.0, 1.7, -2.0) == 0.5
    assert observation_posterior_on(math.log(3), 0.0, 0.0) == pytest.approx(0.75, abs=1e-15)
    assert observation_posterior_on(math.log(3) / 2, math.log(2), 0.0) == pytest.approx(0.75, abs=1e-15)
    assert observation_posterior_on(1000.0, 0.0, 0.0) == 1.0
    assert observation_posterior_on(-1000.0, 0.0, 0.0) == 0.0


def test_sigmoid_vectorised_and_increasing():
    x = np.linspace(-8, 0, 101)
    p = observation_posterior_on(x, 0.3, -2.5)
    assert p.shape == x.shape and np.all(np.diff(p) > 0)


# ---------------------------------------------------------------- forward-backward

def test_fb_single_frame_examples():
    assert forward_backward([-2.0], PitchHmmParams(0.5, 0.3, 0.0, -2.0))[0] == pytest.approx(0.5, abs=1e-15)
    assert forward_backward([-2.0], PitchHmmParams(0.2, 0.3, 0.0, -2.0))[0] == pytest.approx(0.2, abs=1e-15)


def test_fb_three_frame_enumeration():
    x = [-1.0, -3.0, -1.0]
    got = forward_backward(x, PitchHmmParams(0.1, 0.3, 0.0, -2.0))
    np.testing.assert_allclose(got, brute_posteriors(x, 0.1, 0.3, 0.0, -2.0), rtol=0, atol=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 10), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(-3, 3),
       st.floats(-6, 0), st.integers(0, 2**32 - 1))
def test_fb_matches_enumeration(T, t0, t1, alpha, beta, seed):
    x = np.random.default_rng(seed).uniform(-8, 0, T)
    got = forward_backward(x, PitchHmmParams(t0, t1, alpha, beta))
    np.testing.assert_allclose(got, brute_posteriors(x, t0, t1, alpha, beta), rtol=0, atol=1e-10)


def test_fb_posteriors_in_unit_interval_and_complement():
    rng = np.random.default_rng(1)
    x = rng.uniform(-8, 0, 5000)
    eta = forward_backward(x, PitchHmmParams(0.01, 0.05, 2.0, -3.0))
    assert np.all((eta >= 0) & (eta <= 1))
    assert np.all(np.abs((1 - eta) + eta - 1) <= 1e-12)


def test_fb_long_row_does_not_underflow():
    rng = np.random.default_rng(2)
    x = rng.uniform(-8, 0, 2_000_000)
    eta = forward_backward(x, PitchHmmParams(1e-4, 1e-4, 3.0, -6.0))
    assert np.all(np.isfinite(eta))
    assert np.all((eta >= 0) & (eta <= 1))


def test_fb_extreme_observations_saturate():
    x = np.array([0.0] * 5 + [-8.0] * 5)
    eta = forward_backward(x, PitchHmmParams(0.5, 0.5, 3.0, -4.0))
    np.testing.assert_allclose(eta, [1.0] * 5 + [0.0] * 5, atol=1e-12)


def test_fb_rejects_empty_row():
    with pytest.raises(ValueError):
        forward_backward([], PitchHmmParams(0.1, 0.1))


def test_memoryless_chain_equals_hard_threshold():
    rng = np.random.default_rng(5)
    x = rng.uniform(-6, 0, 400)
    eta = forward_backward(x, PitchHmmParams(0.5, 0.5, 0.7, -2.3))
    assert np.array_equal(decode_posterior(eta), x >= -2.3)


# ---------------------------------------------------------------- viterbi

@settings(max_examples=150, deadline=None)
@given(st.integers(1, 10), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(-3, 3),
       st.floats(-6, 0), st.integers(0, 2**32 - 1))
def test_viterbi_matches_enumeration(T, t0, t1, alpha, beta, seed):
    x = np.random.default_rng(seed).uniform(-8, 0, T)
    path = viterbi(x, PitchHmmParams(t0, t1, alpha, beta))
    _, w = log_path_weights(x, t0, t1, alpha, beta)
    assert path.dtype == bool and path.shape == (T,)
    assert path_log_weight(path, x, t0, t1, alpha, beta) >= w.max() - 1e-9 * max(1.0, abs(w.max()))


def test_viterbi_likelihood_dominates():
    x = np.random.default_rng(0).uniform(-3, 0, 50)
    assert viterbi(x, PitchHmmParams(0.9, 0.1, 2.0, -6.0)).all()


def test_viterbi_prior_dominates_with_ties_to_off():
    x = np.full(20, -2.0)
    assert not viterbi(x, PitchHmmParams(EPS, 0.5, 0.0, -2.0)).any()


def test_viterbi_exact_tie_goes_to_off():
    # T = 1, tau0 = 0.5 and x at beta: both states weigh 0.25
    assert viterbi([-2.0], PitchHmmParams(0.5, 0.5, 0.0, -2.0)).tolist() == [False]


# ---------------------------------------------------------------- decoding and HT

def test_decode_examples():
    assert decode_posterior([0.4, 0.6]).tolist() == [False, True]
    assert decode_posterior([0.5]).tolist() == [False]
    assert decode_posterior([0.9] * 4).all()


def test_hard_threshold_examples():
    assert hard_threshold(act([[-3, -1, -2.5]]), -2).active.tolist() == [[False, True, False]]
    assert hard_threshold(act([[-2.0]]), -2.0).active.tolist() == [[True]]
    assert hard_threshold(act([[-8, -5, 0]]), -1e9).active.all()


def test_prune_examples():
    r = roll([[0, 1, 1, 0, 1, 1, 1, 0]])
    assert prune_min_duration(r, 3).active.astype(int).tolist() == [[0, 0, 0, 0, 1, 1, 1, 0]]
    assert prune_min_duration(r, 1) == r
    assert prune_min_duration(r, 0) == r
    assert prune_min_duration(roll([[0, 0, 1, 1]]), 3).active.sum() == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 6))
def test_prune_leaves_only_long_runs(row, k):
    out = prune_min_duration(roll([row]), k).active[0]
    assert not np.any(out & ~np.array(row))
    # every surviving run has length >= k and was a complete input run
    runs, cur = [], 0
    for v in list(out) + [False]:
        if v:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    assert all(r >= k for r in runs)


# ---------------------------------------------------------------- segment

def _random_case(seed, n_p=5, T=60):
    rng = np.random.default_rng(seed)
    X = act(rng.uniform(-8, 0, (n_p, T)))
    tr = Transitions(rng.uniform(0.01, 0.3, n_p), rng.uniform(0.01, 0.3, n_p))
    return rng, X, tr


def test_st_equals_ost_with_zero_slope():
    _, X, tr = _random_case(0)
    st_roll = segment(X, SoftThreshold(-2.0, tr))
    ost = OptimizedSoftThreshold(HmmParamSet([PitchHmmParams(a, b, 0.0, -2.0) for a, b in zip(tr.tau0, tr.tau1)]))
    assert segment(X, ost) == st_roll
    assert np.array_equal(posteriors(X, ost.params), posteriors(X, SoftThreshold(-2.0, tr).to_params()))


def test_all_floor_matrix_ht_is_empty():
    X = act(np.full((88, 30), -8.0))
    assert not segment(X, HardThreshold(-2.0)).active.any()


def test_single_pitch_ost_matches_enumeration():
    x = [-1.5, -2.5, -1.9]
    prm = PitchHmmParams(0.2, 0.4, 0.5, -2.0)
    out = segment(act([x]), OptimizedSoftThreshold(HmmParamSet([prm])))
    assert out.active[0].tolist() == (brute_posteriors(x, 0.2, 0.4, 0.5, -2.0) > 0.5).tolist()


def test_segment_viterbi_decode():
    x = [-1.5, -2.5, -1.9, -4, -0.5]
    prm = PitchHmmParams(0.2, 0.4, 0.5, -2.0)
    out = segment(act([x]), OptimizedSoftThreshold(HmmParamSet([prm]), decode="viterbi"))
    assert out.active[0].tolist() == viterbi(x, prm).tolist()


def test_segment_applies_min_duration():
    X = act([[0, 0, -8, 0, -8, -8]])
    assert segment(X, HardThreshold(-1, min_duration=2)).active.astype(int).tolist() == [[1, 1, 0, 0, 0, 0]]


def test_segment_pitch_mismatch():
    _, X, tr = _random_case(1, n_p=4)
    with pytest.raises(ShapeError):
        segment(X, SoftThreshold(-2.0, Transitions.constant(3)))


@pytest.mark.parametrize("seed", range(5))
def test_segment_permutation_invariance(seed):
    rng, X, tr = _random_case(seed)
    params = HmmParamSet([PitchHmmParams(a, b, al, be) for a, b, al, be in
                          zip(tr.tau0, tr.tau1, rng.uniform(-2, 2, 5), rng.uniform(-5, -1, 5))])
    perm = rng.permutation(5)
    Xp = act(X.values[perm])
    pp = HmmParamSet([params[i] for i in perm])
    for dec in ("posterior", "viterbi"):
        a = segment(X, OptimizedSoftThreshold(params, decode=dec)).active
        b = segment(Xp, OptimizedSoftThreshold(pp, decode=dec)).active
        assert np.array_equal(a[perm], b)


def test_unknown_decode_rule():
    _, X, tr = _random_case(0)
    with pytest.raises(ValueError):
        segment(X, SoftThreshold(-2.0, tr, decode="mode"))


# ---------------------------------------------------------------- files

def test_params_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ps = HmmParamSet([PitchHmmParams(*rng.uniform(0.001, 0.5, 2), rng.normal(), rng.normal() - 2)
                      for _ in range(6)], pitch_offset=30)
    save_params(tmp_path / "p.csv", ps, ["hdr"])
    back = load_params(tmp_path / "p.csv")
    assert back == ps and back.pitch_offset == 30
    tr = load_transitions(tmp_path / "p.csv")
    assert np.array_equal(tr.tau0, ps.transitions().tau0)
    save_transitions(tmp_path / "t.csv", tr)
    assert np.array_equal(load_transitions(tmp_path / "t.csv").tau1, tr.tau1)


@pytest.mark.parametrize("text", [
    "pitch,tau0,tau1,alpha\n21,0.1,0.1,0\n",
    "pitch,tau0,tau1,alpha,beta\n21,0.1,0.1,0,x\n",
    "pitch,tau0,tau1,alpha,beta\n21,0.1,0.1,0,-2\n23,0.1,0.1,0,-2\n",
    "pitch,tau0,tau1,alpha,beta\n",
])
def test_params_file_errors(tmp_path, text):
    (tmp_path / "p.csv").write_text(text)
    with pytest.raises(FormatError):
        load_params(tmp_path / "p.csv")
