import math

import numpy as np
import pytest

from camsmeta.errors import DomainError, ValidationWarning
from camsmeta.model_core import (CovarianceStructure, MetaDataset,
                                 MultiStudyRecord, StudyRecord,
                                 SubgroupObservation, compose, compute_if,
                                 cov_gm, decompose, marginal_covariance,
                                 missing_observation, prevalence_from_counts)


def make_study(ya=0.1, yb=0.4, sa=0.2, sb=0.3, study_id="S1", na=None, nb=None):
    return StudyRecord.from_observations(
        study_id,
        SubgroupObservation("A", ya, sa, na),
        SubgroupObservation("B", yb, sb, nb))


def test_compute_if_hand_values():
    # sigma_a = 2, sigma_b = 1: subgroup B carries 4/5 of the information
    assert compute_if(2.0, 1.0) == pytest.approx(0.8, abs=1e-15)
    assert compute_if(1.0, 1.0) == 0.5
    assert compute_if(1.0, 2.0) == pytest.approx(0.2, abs=1e-15)


def test_compute_if_matches_precision_form():
    rng = np.random.default_rng(101)
    for _ in range(500):
        sa, sb = rng.uniform(0.05, 5.0, size=2)
        direct = compute_if(sa, sb)
        precision = (1.0 / sb**2) / (1.0 / sa**2 + 1.0 / sb**2)
        assert direct == pytest.approx(precision, abs=1e-14)
        assert 0.0 < direct < 1.0


def test_compute_if_rejects_nonpositive():
    with pytest.raises(DomainError):
        compute_if(0.0, 1.0)
    with pytest.raises(DomainError):
        compute_if(1.0, -2.0)


def test_prevalence_from_counts():
    assert prevalence_from_counts(30, 70) == pytest.approx(0.7)
    assert prevalence_from_counts(1, 0) == 0.0
    with pytest.raises(DomainError):
        prevalence_from_counts(0, 0)
    with pytest.raises(DomainError):
        prevalence_from_counts(-1, 5)


def test_observation_validation():
    with pytest.raises(DomainError):
        SubgroupObservation("A", math.nan, 1.0)
    with pytest.raises(DomainError):
        SubgroupObservation("A", 0.0, 0.0)
    with pytest.raises(DomainError):
        SubgroupObservation("A", 0.0, 1.0, count=-3)


def test_missing_observation_sentinel():
    obs = missing_observation("B")
    assert obs.estimate == 0.0
    assert obs.std_error == 100.0
    # a missing A subgroup pushes the information fraction toward 1
    s = StudyRecord.from_observations("S1", missing_observation("A"),
                                      SubgroupObservation("B", 0.2, 0.1))
    assert s.info_fraction > 0.999


def test_decompose_hand_case():
    s = make_study(ya=0.1, yb=0.4)
    g, m = decompose(s, 0.25)
    assert g == pytest.approx(0.3, abs=1e-15)
    assert m == pytest.approx(0.75 * 0.1 + 0.25 * 0.4, abs=1e-15)


def test_decompose_compose_round_trip():
    rng = np.random.default_rng(77)
    for _ in range(200):
        ya, yb = rng.normal(0, 2, size=2)
        sa, sb = rng.uniform(0.05, 3.0, size=2)
        pi = rng.uniform(0.0, 1.0)
        s = make_study(ya=ya, yb=yb, sa=sa, sb=sb)
        g, m = decompose(s, pi)
        ya2, yb2 = compose(g, m, pi)
        assert ya2 == pytest.approx(ya, abs=1e-12)
        assert yb2 == pytest.approx(yb, abs=1e-12)


def test_cov_gm_affine_and_vanishing():
    # affine in pi with the documented endpoints
    assert cov_gm(0.0, 2.0, 3.0) == pytest.approx(-2.0)
    assert cov_gm(1.0, 2.0, 3.0) == pytest.approx(3.0)
    assert cov_gm(0.5, 2.0, 3.0) == pytest.approx(0.5)
    rng = np.random.default_rng(13)
    for _ in range(300):
        sa, sb = rng.uniform(0.05, 4.0, size=2)
        pi = compute_if(sa, sb)
        assert abs(cov_gm(pi, sa**2, sb**2)) < 1e-14 * (sa**2 + sb**2)


def test_cov_gm_domain():
    with pytest.raises(DomainError):
        cov_gm(1.5, 1.0, 1.0)
    with pytest.raises(DomainError):
        cov_gm(0.5, -1.0, 1.0)


def test_marginal_covariance_against_loading_construction():
    # build the same matrix from the random-effect loadings directly
    rng = np.random.default_rng(5)
    for _ in range(100):
        sa, sb = rng.uniform(0.1, 2.0, size=2)
        tau, tg = rng.uniform(0.0, 1.0, size=2)
        pi = rng.uniform(0.01, 0.99)
        s = make_study(sa=sa, sb=sb)
        got = marginal_covariance(s, CovarianceStructure(tau, tg), pi)
        ones = np.ones((2, 1))
        load = np.array([[0.0 - pi], [1.0 - pi]])
        want = (np.diag([sa**2, sb**2]) + tau**2 * (ones @ ones.T)
                + tg**2 * (load @ load.T))
        assert np.allclose(got, want, atol=1e-14)
        assert got[0, 1] == got[1, 0]


def test_marginal_covariance_balanced_pattern():
    s = make_study(sa=0.3, sb=0.3)
    v = marginal_covariance(s, CovarianceStructure(0.0, 0.4), 0.5)
    assert v[0, 0] == pytest.approx(0.09 + 0.04)
    assert v[0, 1] == pytest.approx(-0.04)


def test_from_observations_recomputes_if():
    s = make_study(sa=0.2, sb=0.3)
    assert s.info_fraction == pytest.approx(compute_if(0.2, 0.3), abs=1e-15)


def test_from_observations_warns_on_discrepant_ifrac():
    with pytest.warns(ValidationWarning):
        StudyRecord.from_observations(
            "S1", SubgroupObservation("A", 0.0, 0.2),
            SubgroupObservation("B", 0.0, 0.3),
            reported_ifrac=0.9)


def test_from_observations_counts_proxy():
    s = make_study(na=30, nb=70)
    assert s.prevalence_proxy == pytest.approx(0.7)
    assert make_study().prevalence_proxy is None


def test_multi_study_record():
    r = MultiStudyRecord("M1", (0.1, 0.2, 0.3), (0.04, 0.09, 0.01),
                         (0.2, 0.3, 0.5))
    assert r.k == 3
    with pytest.raises(DomainError):
        MultiStudyRecord("M1", (0.1, 0.2), (0.04, 0.09), (0.3, 0.4))


def test_dataset_properties():
    data = MetaDataset((make_study(study_id="S1"),
                        make_study(study_id="S2", sa=0.4, sb=0.1)))
    assert not data.is_multi
    assert data.scale_label == "log-RR"
    assert np.allclose(data.info_fractions,
                       [compute_if(0.2, 0.3), compute_if(0.4, 0.1)])
