import warnings
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixsurv.metrics import (brier_at, ctd_index, default_eval_grid, evaluate, integrated_brier, kaplan_meier,
                             step_eval)
from oracles import brier_oracle, ctd_oracle, km_eval, km_oracle, step_value, trapezoid


def test_km_small_examples():
    km = kaplan_meier([1, 2, 3], [1, 0, 1])
    assert km(1.0) == pytest.approx(2 / 3, abs=1e-15)
    assert km(2.5) == pytest.approx(2 / 3, abs=1e-15)
    assert km(3.0) == 0.0
    km = kaplan_meier([1, 2, 3, 4], [1, 1, 1, 1])
    np.testing.assert_allclose(km([1, 2, 3, 4]), [0.75, 0.5, 0.25, 0.0], atol=1e-15)
    assert km(0.5) == 1.0
    assert km.left_limit(2.0) == 0.75


def test_km_without_events_is_one():
    km = kaplan_meier([1.0, 2.0, 5.0], [0, 0, 0])
    assert km([0.0, 3.0, 10.0]).tolist() == [1.0, 1.0, 1.0]


def test_km_errors():
    with pytest.raises(ValueError):
        kaplan_meier([], [])
    with pytest.raises(ValueError):
        kaplan_meier([-1.0], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=1, max_size=30))
def test_km_matches_oracle(data):
    times = [float(t) for t, _ in data]
    events = [e for _, e in data]
    km = kaplan_meier(times, events)
    steps = km_oracle(times, events)
    for t in np.arange(-0.5, 9.5, 0.5):
        assert km(t) == pytest.approx(km_eval(steps, t), abs=1e-14)
        assert km.left_limit(t) == pytest.approx(km_eval(steps, t, left=True), abs=1e-14)


def test_step_eval_is_right_continuous():
    grid = [1.0, 2.0, 3.0]
    curves = np.array([[0.9, 0.5, 0.2]])
    assert step_eval(curves, grid, 0.5).tolist() == [1.0]
    assert step_eval(curves, grid, 1.0).tolist() == [0.9]
    assert step_eval(curves, grid, 2.999).tolist() == [0.5]
    assert step_eval(curves, grid, 7.0).tolist() == [0.2]
    with pytest.raises(ValueError):
        step_eval(curves, grid, [1.0, 2.0])


def random_problem(seed, n=25, g=6, ties=False):
    rng = np.random.default_rng(seed)
    grid = np.sort(rng.uniform(0, 10, g))
    curves = np.sort(rng.uniform(0, 1, (n, g)), axis=1)[:, ::-1]
    if ties:
        curves = np.round(curves, 1)
    times = rng.integers(0, 12, n).astype(float) if ties else rng.uniform(0, 11, n)
    events = rng.integers(0, 2, n)
    return curves, grid, times, events


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_ctd_matches_exhaustive_oracle(seed, ties):
    curves, grid, times, events = random_problem(seed, ties=ties)
    twice, pairs = ctd_oracle(curves, grid, times, events)
    if pairs == 0:
        with pytest.raises(ValueError):
            ctd_index(curves, grid, times, events)
        return
    assert ctd_index(curves, grid, times, events) == twice / (2 * pairs)


def test_ctd_constant_predictions_is_half():
    times = np.arange(1.0, 11.0)
    curves = np.full((10, 3), 0.4)
    assert ctd_index(curves, [0.0, 5.0, 10.0], times, np.ones(10)) == 0.5


def test_ctd_perfect_and_reversed_ordering():
    times = np.arange(1.0, 9.0)
    events = np.array([1, 1, 0, 1, 1, 0, 1, 1])
    grid = np.arange(0.0, 10.0)
    # earlier deaths get lower survival everywhere
    perfect = np.tile(times[:, None] / 10, (1, grid.size))
    assert ctd_index(perfect, grid, times, events) == 1.0
    assert ctd_index(1 - perfect, grid, times, events) == 0.0
    curves, g, t, e = random_problem(3)
    c = ctd_index(curves, g, t, e)
    assert ctd_index(1 - curves, g, t, e) == pytest.approx(1 - c, abs=1e-15)


def test_ctd_invariant_under_monotone_transform():
    curves, grid, times, events = random_problem(7)
    c = ctd_index(curves, grid, times, events)
    assert ctd_index(curves**3, grid, times, events) == c
    assert ctd_index(np.exp(curves) - 5, grid, times, events) == c


def test_ctd_without_pairs_raises():
    with pytest.raises(ValueError):
        ctd_index(np.ones((3, 2)), [0, 1], [1.0, 2.0, 3.0], [0, 0, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 12.0))
def test_brier_matches_formula_oracle(seed, t):
    _, _, times, events = random_problem(seed, ties=seed % 2 == 0)
    s_t = np.random.default_rng(seed + 1).uniform(0, 1, times.size)
    with _nowarn():
        got = brier_at(t, s_t, times, events)
    assert got == pytest.approx(brier_oracle(t, s_t, times, events), abs=1e-14)


@contextmanager
def _nowarn():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def test_brier_uncensored_examples():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.ones(4)
    assert brier_at(2.5, np.full(4, 0.5), times, events) == pytest.approx(0.25, abs=1e-15)
    perfect = (times > 2.5).astype(float)
    assert brier_at(2.5, perfect, times, events) == 0.0


def test_brier_warns_when_censoring_survival_is_zero():
    # censoring curve from another sample that is exhausted by t = 2
    external = kaplan_meier([1.0, 2.0], [1, 1])
    times = np.array([1.0, 2.5, 3.0])
    with pytest.warns(UserWarning, match="dropped"):
        b = brier_at(2.2, np.full(3, 0.5), times, [1, 1, 0], censor_km=external)
    assert b == pytest.approx(0.25 / 3, abs=1e-15)


def test_ibs_of_constant_score():
    times = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    grid = np.array([0.0, 10.0])
    curves = np.full((5, 2), 0.5)
    assert integrated_brier(curves, grid, times, np.ones(5), eval_grid=[0.5, 4.5]) == pytest.approx(0.25, abs=1e-15)


def test_ibs_is_trapezoid_over_span():
    curves, grid, times, events = random_problem(11)
    ev = np.array([1.0, 3.0, 7.0])
    b = [brier_oracle(t, [step_value(c, grid, t) for c in curves], times, events) for t in ev]
    with _nowarn():
        got = integrated_brier(curves, grid, times, events, eval_grid=ev)
    assert got == pytest.approx(trapezoid(b, ev) / 6.0, abs=1e-14)


def test_ibs_errors():
    curves, grid, times, events = random_problem(1)
    with pytest.raises(ValueError):
        integrated_brier(curves, grid, times, events, eval_grid=[2.0])
    with pytest.raises(ValueError):
        integrated_brier(curves, grid, times, events, eval_grid=[2.0, 2.0])


def test_evaluate_bundles_consistent_numbers():
    curves, grid, times, events = random_problem(5)
    ev = default_eval_grid(times, 20)
    with _nowarn():
        rep = evaluate(curves, grid, times, events, ev)
        ibs = integrated_brier(curves, grid, times, events, ev)
    assert rep.ctd == ctd_index(curves, grid, times, events)
    assert rep.ibs == ibs
    assert rep.n_comparable == ctd_oracle(curves, grid, times, events)[1]
    assert len(rep.brier) == 20 and set(rep.to_dict()) >= {"ctd", "ibs", "n_comparable"}
