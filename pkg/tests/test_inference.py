import numpy as np
import pytest
from scipy import stats

from camsmeta.errors import ContractError, DomainError, IdentifiabilityWarning
from camsmeta.inference import (ESTIMATORS, GridSpec, PriorSpec,
                                cross_term_correction, ecological_evidence,
                                factorization_residual,
                                factorized_loglikelihood, fit_bim, fit_bim_k,
                                fit_bms, fit_cams, fit_overall,
                                interaction_trace, joint_loglikelihood,
                                tail_probability)
from camsmeta.contrasts import helmert_basis
from camsmeta.model_core import (CovarianceStructure, MetaDataset,
                                 MultiStudyRecord, StudyRecord,
                                 SubgroupObservation)


def make_dataset(seed=0, n=6, alpha=0.2, delta=0.6, gamma=0.3, noise=0.15):
    """Small deterministic two-subgroup dataset following the mean model."""
    rng = np.random.default_rng(seed)
    studies = []
    for i in range(n):
        pi = rng.uniform(0.15, 0.85)
        s = rng.uniform(0.1, 0.3)
        sa, sb = np.sqrt(pi) * s, np.sqrt(1.0 - pi) * s
        ya = alpha + delta * pi + rng.normal(0.0, noise) * sa
        yb = alpha + delta * pi + gamma + rng.normal(0.0, noise) * sb
        studies.append(StudyRecord.from_observations(
            f"S{i+1}", SubgroupObservation("A", ya, sa),
            SubgroupObservation("B", yb, sb)))
    return MetaDataset(tuple(studies))


def contrast_arrays(data):
    g = np.array([s.obs_b.estimate - s.obs_a.estimate for s in data.studies])
    vg = np.array([s.obs_a.std_error**2 + s.obs_b.std_error**2
                   for s in data.studies])
    return g, vg


def test_estimators_tuple():
    assert ESTIMATORS == ("BIM", "BMS", "CAMS", "OVERALL", "BIM_K")


def test_grid_axis_shape():
    nodes = GridSpec.axis(0.5, n_nodes=41, span=5.0)
    assert nodes.shape == (41,)
    assert nodes[0] == 0.0
    assert np.all(np.diff(nodes) > 0)
    assert nodes[-1] == pytest.approx(2.5)
    with pytest.raises(DomainError):
        GridSpec.axis(-1.0)


def test_prior_spec_validation():
    with pytest.raises(DomainError):
        PriorSpec(tau_scale=0.0)
    with pytest.raises(ContractError):
        PriorSpec(location_prior=(("gamma", 0, 1), ("gamma", 0, 2)))
    p = PriorSpec(location_prior=(("gamma", 0.0, 1.0),))
    assert p.location_map() == {"gamma": (0.0, 1.0)}


def test_bim_single_node_closed_form():
    # with the heterogeneity pinned at zero the posterior for gamma is the
    # precision-weighted normal, so summaries follow the closed form
    data = make_dataset(seed=1)
    g, vg = contrast_arrays(data)
    grid = GridSpec(np.array([0.0]), np.array([0.0]))
    fit = fit_bim(data, PriorSpec(), grid)
    w = 1.0 / vg
    mean = float(w @ g / w.sum())
    sd = float(1.0 / np.sqrt(w.sum()))
    s = fit.summaries["gamma"]
    assert s.median == pytest.approx(mean, abs=1e-7)
    assert s.lower == pytest.approx(mean - 1.959963984540054 * sd, abs=1e-6)
    assert s.upper == pytest.approx(mean + 1.959963984540054 * sd, abs=1e-6)
    assert s.p_positive == pytest.approx(stats.norm.sf(0.0, mean, sd),
                                         abs=1e-9)


def test_bim_conditional_moments_per_node():
    # at each tau_gamma node the conditional law has a closed form
    data = make_dataset(seed=1)
    g, vg = contrast_arrays(data)
    nodes = np.array([0.0, 0.2, 0.45])
    fit = fit_bim(data, PriorSpec(), GridSpec(np.array([0.0]), nodes))
    for idx, t in enumerate(nodes):
        w = 1.0 / (vg + t**2)
        assert fit.grid.cond_mean[0, idx, 0] == pytest.approx(
            float(w @ g / w.sum()), abs=1e-12)
        assert fit.grid.cond_cov[0, idx, 0, 0] == pytest.approx(
            1.0 / w.sum(), abs=1e-12)


def test_bim_node_weights_against_quadrature():
    # independent oracle: integrate the likelihood over gamma numerically
    # at each node and fold in the half-normal prior and trapezoid cell
    data = make_dataset(seed=2, n=5)
    g, vg = contrast_arrays(data)
    scale = 0.4
    nodes = GridSpec.axis(scale, n_nodes=31)
    grid = GridSpec(np.array([0.0]), nodes)
    fit = fit_bim(data, PriorSpec(tau_gamma_scale=scale), grid)
    _, got = fit.grid.scale_axis("tau_gamma")

    gam = np.linspace(g.min() - 6, g.max() + 6, 20001)
    log_like = np.empty(nodes.size)
    for i, t in enumerate(nodes):
        dens = np.prod(stats.norm.pdf(g[:, None], gam[None, :],
                                      np.sqrt(vg + t**2)[:, None]), axis=0)
        log_like[i] = np.log(np.trapezoid(dens, gam))
    log_prior = stats.halfnorm.logpdf(nodes, scale=scale)
    cell = np.zeros(nodes.size)
    cell[1:-1] = (nodes[2:] - nodes[:-2]) / 2
    cell[0] = (nodes[1] - nodes[0]) / 2
    cell[-1] = (nodes[-1] - nodes[-2]) / 2
    logw = log_like + log_prior + np.log(cell)
    want = np.exp(logw - logw.max())
    want /= want.sum()
    assert np.allclose(got, want, atol=5e-7)


def test_overall_conditional_moments_per_node():
    data = make_dataset(seed=3)
    pis = data.info_fractions
    m = np.array([(1 - p) * s.obs_a.estimate + p * s.obs_b.estimate
                  for p, s in zip(pis, data.studies)])
    vm = np.array([(1 - p)**2 * s.obs_a.std_error**2
                   + p**2 * s.obs_b.std_error**2
                   for p, s in zip(pis, data.studies)])
    nodes = np.array([0.0, 0.1])
    fit = fit_overall(data, PriorSpec(), GridSpec(nodes, np.array([0.0])))
    assert "tau" in fit.grid.scale_names
    for idx, t in enumerate(nodes):
        w = 1.0 / (vm + t**2)
        assert fit.grid.cond_mean[idx, 0, 0] == pytest.approx(
            float(w @ m / w.sum()), abs=1e-12)
    # with the grid collapsed to tau = 0 the summary is closed form
    flat = fit_overall(data, PriorSpec(),
                       GridSpec(np.array([0.0]), np.array([0.0])))
    w = 1.0 / vm
    assert flat.summaries["mu"].median == pytest.approx(
        float(w @ m / w.sum()), abs=1e-7)


def test_cams_parametrizations_agree():
    data = make_dataset(seed=4)
    grid = GridSpec.default(PriorSpec(), n_nodes=41)
    explicit = fit_cams(data, PriorSpec(), grid, parametrization="explicit")
    implicit = fit_cams(data, PriorSpec(), grid, parametrization="implicit")
    # same model in sheared coordinates: every reported functional matches
    for name in ("alpha", "delta", "gamma"):
        se, si = explicit.summaries[name], implicit.summaries[name]
        assert si.median == pytest.approx(se.median, abs=1e-9)
        assert si.lower == pytest.approx(se.lower, abs=1e-9)
        assert si.upper == pytest.approx(se.upper, abs=1e-9)
    with pytest.raises(ContractError):
        fit_cams(data, PriorSpec(), grid, parametrization="nope")


def test_cams_matches_bim_on_gamma():
    data = make_dataset(seed=5)
    grid = GridSpec.default(PriorSpec(), n_nodes=41)
    bim = fit_bim(data, PriorSpec(), grid)
    cams = fit_cams(data, PriorSpec(), grid)
    sb, sc = bim.summaries["gamma"], cams.summaries["gamma"]
    assert sc.median == pytest.approx(sb.median, abs=1e-10)
    assert sc.lower == pytest.approx(sb.lower, abs=1e-10)
    assert sc.p_positive == pytest.approx(sb.p_positive, abs=1e-12)
    # the heterogeneity axis marginal matches too
    _, wb = bim.grid.scale_axis("tau_gamma")
    _, wc = cams.grid.scale_axis("tau_gamma")
    assert np.max(np.abs(wb - wc)) < 1e-12


def test_cams_pi_override():
    data = make_dataset(seed=6)
    grid = GridSpec.default(PriorSpec(), n_nodes=21)
    with pytest.warns(IdentifiabilityWarning):
        forced = fit_cams(data, PriorSpec(), grid, pi_override=0.5)
    assert forced.provenance["options"]["pi_override"] == [0.5] * 6
    with pytest.raises(DomainError):
        fit_cams(data, PriorSpec(), grid, pi_override=1.5)


def test_bms_functionals():
    data = make_dataset(seed=7)
    grid = GridSpec.default(PriorSpec(), n_nodes=31)
    fit = fit_bms(data, PriorSpec(), grid)
    assert set(fit.summaries) >= {"alpha", "gamma", "mu_a", "mu_b"}
    # mu_b - mu_a = gamma holds at the functional level
    assert np.allclose(
        np.array(fit.functionals["mu_b"]) - np.array(fit.functionals["mu_a"]),
        np.array(fit.functionals["gamma"]))


def test_flat_prior_rule():
    data = make_dataset(seed=8, n=2)
    grid = GridSpec.default(PriorSpec(), n_nodes=11)
    with pytest.raises(ContractError):
        fit_cams(data, PriorSpec(), grid)
    # informative location priors lift the study-count requirement
    priors = PriorSpec(location_prior=(("alpha", 0.0, 2.0),
                                       ("delta", 0.0, 2.0),
                                       ("gamma", 0.0, 2.0)))
    fit = fit_cams(data, priors, grid)
    assert fit.summaries["gamma"].lower < fit.summaries["gamma"].upper


def test_rank_deficiency_warns():
    # equal information fractions collapse the intercept and slope columns
    rng = np.random.default_rng(9)
    studies = []
    for i in range(5):
        s = rng.uniform(0.1, 0.3)
        sa, sb = np.sqrt(0.4) * s, np.sqrt(0.6) * s
        studies.append(StudyRecord.from_observations(
            f"S{i+1}",
            SubgroupObservation("A", rng.normal(), sa),
            SubgroupObservation("B", rng.normal(), sb)))
    data = MetaDataset(tuple(studies))
    grid = GridSpec.default(PriorSpec(), n_nodes=11)
    with pytest.warns(IdentifiabilityWarning):
        fit = fit_cams(data, PriorSpec(), grid)
    # gamma stays identified even when alpha/delta are not separable
    assert np.isfinite(fit.summaries["gamma"].median)


def test_joint_loglikelihood_against_scipy():
    data = make_dataset(seed=10, n=4)
    rng = np.random.default_rng(1)
    for _ in range(20):
        alpha, delta, gamma = rng.normal(0, 1, size=3)
        het = CovarianceStructure(rng.uniform(0, 0.5), rng.uniform(0, 0.5))
        got = joint_loglikelihood(data, alpha, delta, gamma, het)
        want = 0.0
        for s in data.studies:
            p = s.info_fraction
            mean = np.array([alpha + delta * p, alpha + delta * p + gamma])
            cov = np.array([
                [s.obs_a.std_error**2 + het.tau**2 + p**2 * het.tau_gamma**2,
                 het.tau**2 - p * (1 - p) * het.tau_gamma**2],
                [het.tau**2 - p * (1 - p) * het.tau_gamma**2,
                 s.obs_b.std_error**2 + het.tau**2
                 + (1 - p)**2 * het.tau_gamma**2]])
            want += stats.multivariate_normal.logpdf(
                [s.obs_a.estimate, s.obs_b.estimate], mean, cov)
        assert got == pytest.approx(want, abs=1e-9)


def test_factorization_exact_at_if():
    data = make_dataset(seed=11)
    rng = np.random.default_rng(2)
    for _ in range(50):
        alpha, delta, gamma = rng.normal(0, 1, size=3)
        het = CovarianceStructure(rng.uniform(0, 0.4), rng.uniform(0, 0.4))
        resid = factorization_residual(data, alpha, delta, gamma, het)
        assert abs(resid) < 1e-11


def test_factorization_blocks_sum():
    data = make_dataset(seed=12)
    het = CovarianceStructure(0.1, 0.2)
    joint = joint_loglikelihood(data, 0.1, 0.5, 0.3, het)
    lg, lm = factorized_loglikelihood(data, 0.1, 0.5, 0.3, het)
    assert joint == pytest.approx(lg + lm, abs=1e-11)


def test_forced_pi_residual_matches_analytic():
    data = make_dataset(seed=13)
    rng = np.random.default_rng(3)
    for _ in range(20):
        alpha, delta, gamma = rng.normal(0, 1, size=3)
        het = CovarianceStructure(rng.uniform(0, 0.3), rng.uniform(0, 0.3))
        pi = np.full(len(data.studies), 0.5)
        resid = factorization_residual(data, alpha, delta, gamma, het, pi=pi)
        want = cross_term_correction(data, alpha, delta, gamma, het, pi=pi)
        assert resid == pytest.approx(want, abs=1e-9)
        assert abs(resid) > 0  # the cut is real away from the balance point


def test_tail_probability_matches_summary():
    data = make_dataset(seed=14)
    fit = fit_bim(data, PriorSpec(), GridSpec.default(PriorSpec(), n_nodes=31))
    p = tail_probability(fit, "gamma", 0.0)
    assert p == pytest.approx(fit.summaries["gamma"].p_positive, abs=1e-12)
    # scale axes are queryable too
    pt = tail_probability(fit, "tau_gamma", 0.05)
    assert 0.0 <= pt <= 1.0
    with pytest.raises(ContractError):
        tail_probability(fit, "nonexistent", 0.0)


def test_ecological_evidence_range():
    data = make_dataset(seed=15)
    fit = fit_cams(data, PriorSpec(), GridSpec.default(PriorSpec(), n_nodes=31))
    e = ecological_evidence(fit)
    assert 0.5 <= e <= 1.0


def test_interaction_trace_zero_node_closed_form():
    # conditioning on tau_gamma = 0 gives the fixed-effect pooled contrast
    data = make_dataset(seed=16)
    g, vg = contrast_arrays(data)
    fit = fit_bim(data, PriorSpec(), GridSpec.default(PriorSpec(), n_nodes=41))
    pt = interaction_trace(fit, [0.0])[0]
    assert pt.tau_gamma == 0.0
    w = 1.0 / vg
    assert pt.median == pytest.approx(float(w @ g / w.sum()), abs=5e-8)
    # 50% interval brackets the median
    assert pt.lower < pt.median < pt.upper


def test_interaction_trace_snaps():
    data = make_dataset(seed=17)
    fit = fit_bim(data, PriorSpec(), GridSpec.default(PriorSpec(), n_nodes=21))
    nodes = fit.grid.tau_gamma_nodes
    value = (nodes[3] + nodes[4]) / 2 + 1e-9
    pt = interaction_trace(fit, [value])[0]
    assert pt.tau_gamma in (nodes[3], nodes[4])


def test_provenance_hash_tracks_data():
    d1 = make_dataset(seed=18)
    d2 = make_dataset(seed=19)
    grid = GridSpec.default(PriorSpec(), n_nodes=11)
    f1 = fit_bim(d1, PriorSpec(), grid)
    f1b = fit_bim(d1, PriorSpec(), grid)
    f2 = fit_bim(d2, PriorSpec(), grid)
    assert f1.provenance["dataset_sha256"] == f1b.provenance["dataset_sha256"]
    assert f1.provenance["dataset_sha256"] != f2.provenance["dataset_sha256"]
    assert f1.provenance["n_studies"] == 6
    assert f1.estimator == "BIM"


def test_bim_k_matches_bim_at_k2():
    data = make_dataset(seed=20)
    multi = MetaDataset(tuple(
        MultiStudyRecord(s.study_id,
                         (s.obs_a.estimate, s.obs_b.estimate),
                         (s.obs_a.std_error**2, s.obs_b.std_error**2),
                         (1 - s.info_fraction, s.info_fraction))
        for s in data.studies), scale_label=data.scale_label)
    nodes = GridSpec.axis(0.5, 41)
    bim = fit_bim(data, PriorSpec(tau_gamma_scale=0.5),
                  GridSpec(np.array([0.0]), nodes))
    # the contrast model names its single heterogeneity scale tau, so the
    # prior scales must be matched by hand
    bk = fit_bim_k(multi, helmert_basis(2), PriorSpec(tau_scale=0.5),
                   GridSpec(nodes, np.array([0.0])))
    sb, sk = bim.summaries["gamma"], bk.summaries["gamma_1"]
    assert sk.median == sb.median
    assert sk.lower == sb.lower
    assert sk.upper == sb.upper


def test_bim_k_rejects_two_subgroup_dataset():
    data = make_dataset(seed=21)
    with pytest.raises(ContractError):
        fit_bim_k(data, helmert_basis(2))


def test_fit_rejects_multi_dataset():
    multi = MetaDataset((MultiStudyRecord("M1", (0.1, 0.2, 0.3),
                                          (0.04, 0.04, 0.04),
                                          (0.2, 0.3, 0.5)),))
    with pytest.raises(ContractError):
        fit_bim(multi)
