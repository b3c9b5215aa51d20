import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mixsurv import MixtureSurvival
from mixsurv.estimator import check_cohort, search_groups
from conftest import TINY


def test_params_round_trip_through_clone():
    est = MixtureSurvival(**TINY, n_baseline=3, random_state=7)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "model_")


def test_unfitted_and_bad_inputs(prepared):
    cohort = prepared[0]
    with pytest.raises(NotFittedError):
        MixtureSurvival().predict(cohort)
    with pytest.raises(TypeError):
        check_cohort(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="y=None"):
        MixtureSurvival(**TINY).fit(cohort, y=np.zeros(len(cohort)))
    no_events = cohort.subset(~cohort.event)
    with pytest.raises(ValueError, match="no events"):
        MixtureSurvival(**TINY).fit(no_events)


def test_dimension_mismatch_is_reported(fitted, prepared):
    cohort = prepared[0]
    with pytest.raises(ValueError, match="clinical"):
        check_cohort(cohort, dict(fitted.dims_, clinical=fitted.dims_["clinical"] + 1))
    with pytest.raises(ValueError, match="unknown"):
        check_cohort(cohort, {k: v for k, v in fitted.dims_.items() if k != "clinical"})


def test_survival_curves_are_valid(fitted, prepared):
    cohort = prepared[0]
    curves = fitted.predict_survival_function(cohort)
    assert curves.shape == (len(cohort), len(fitted.edges_))
    np.testing.assert_allclose(curves[:, 0], 1.0, atol=1e-14)
    assert np.all(np.diff(curves, axis=1) <= 1e-15)
    assert np.all((curves >= 0) & (curves <= 1))
    t = np.linspace(0, fitted.edges_[-1], 17)
    dense = fitted.predict_survival_function(cohort, times=t)
    assert np.all(np.diff(dense, axis=1) <= 1e-15)
    at_edges = fitted.predict_survival_function(cohort, times=fitted.edges_)
    np.testing.assert_allclose(at_edges, curves, atol=1e-14)


def test_treatment_override(fitted, prepared):
    cohort = prepared[0]
    factual = fitted.predict_survival_function(cohort)
    s0 = fitted.predict_survival_function(cohort, treatment=0)
    s1 = fitted.predict_survival_function(cohort, treatment=1)
    treated = cohort.treatment == 1
    np.testing.assert_array_equal(factual[treated], s1[treated])
    np.testing.assert_array_equal(factual[~treated], s0[~treated])
    with pytest.raises(ValueError):
        fitted.predict_survival_function(cohort, treatment=2)
    curve = fitted.predict_curve(cohort, treatment=1)
    assert curve.treatment.tolist() == [1] * len(cohort)


def test_predict_is_restricted_mean(fitted, prepared):
    cohort = prepared[0]
    rmst = fitted.predict(cohort)
    curves = fitted.predict_survival_function(cohort)
    np.testing.assert_allclose(rmst, np.trapezoid(curves, fitted.edges_, axis=1), atol=0)
    assert np.all((rmst > 0) & (rmst <= fitted.edges_[-1]))


def test_score_and_likelihood(fitted, prepared):
    cohort = prepared[0]
    assert 0.0 <= fitted.score(cohort) <= 1.0
    assert np.isfinite(fitted.negative_log_likelihood(cohort))
    pk, pm = fitted.gate_distributions(cohort)
    np.testing.assert_allclose(pk.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(pm.sum(1), 1.0, atol=1e-12)
    assert fitted.transform(cohort).shape == (len(cohort), TINY["embed_dim"] + fitted.dims_["demographic"])


def test_fit_is_deterministic(prepared):
    cohort, _, masks = prepared
    train = cohort.subset(masks[0])
    a = MixtureSurvival(**TINY, random_state=3).fit(train)
    b = MixtureSurvival(**TINY, random_state=3).fit(train)
    np.testing.assert_array_equal(a.predict_survival_function(cohort), b.predict_survival_function(cohort))


def test_search_groups_picks_lowest_validation_nll(prepared):
    cohort, _, masks = prepared
    train, val = cohort.subset(masks[0]), cohort.subset(masks[1])
    best, table = search_groups(train, val, k_values=(1, 2), m_values=(2,), **TINY)
    assert [(k, m) for k, m, _ in table] == [(1, 2), (2, 2)]
    k, m, nll = min(table, key=lambda r: r[2])
    assert (best.n_baseline, best.n_response) == (k, m)
    assert best.negative_log_likelihood(val) == nll
