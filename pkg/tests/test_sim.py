import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import ndtr

from cglasso.exceptions import DataError
from cglasso.sim import (SimSpec, SimplePath, Truth, aggregate, baseline_lod_glasso, censor_top_fraction,
                         gen_censored_sample, gen_sparse_precision, load_study_config, lod_impute, metrics,
                         mu_for_censor_prob, path_auc, replicate_seed, roc_points, run_study, study_config,
                         write_report)


@given(st.integers(2, 30), st.floats(0.05, 0.6), st.integers(0, 10_000))
def test_precision_generator(p, prob, seed):
    theta = gen_sparse_precision(p, prob, seed)
    assert np.array_equal(theta, theta.T)
    assert np.linalg.eigvalsh(theta)[0] == pytest.approx(0.3, abs=1e-9)
    off = np.abs(theta[~np.eye(p, dtype=bool)])
    nz = off[off != 0]
    assert np.all((nz >= 0.3) & (nz <= 0.7))


@given(st.floats(-50, 50), st.floats(0.1, 10), st.floats(1e-12, 1 - 1e-6))
def test_mean_for_censoring_probability(u, sigma, prob):
    mu = mu_for_censor_prob(u, sigma, prob)
    assert 1 - ndtr((u - mu) / sigma) == pytest.approx(prob, rel=1e-6, abs=1e-15)


def test_censored_sample_hits_target_rate():
    spec = SimSpec(p=10, n=20_000, edge_prob=0.2, H=4, u=40.0, censor_prob=0.25, seed=1)
    ds, truth = gen_censored_sample(spec)
    rates = (ds.indicator == 1).mean(axis=0)
    assert np.allclose(rates[truth.censored_vars], 0.25, atol=0.015)
    others = np.setdiff1d(np.arange(10), truth.censored_vars)
    assert np.all(rates[others] < 0.05)
    assert np.array_equal(truth.adjacency, (truth.theta != 0) & ~np.eye(10, dtype=bool))


def test_no_censored_variables_gives_no_censoring():
    ds, truth = gen_censored_sample(SimSpec(p=6, n=100, edge_prob=0.3, H=0, seed=2))
    assert ds.n_censored == 0 and len(truth.censored_vars) == 0


def test_generator_is_seed_deterministic():
    a, ta = gen_censored_sample(SimSpec(p=5, n=30, edge_prob=0.3, H=2, seed=3))
    b, tb = gen_censored_sample(SimSpec(p=5, n=30, edge_prob=0.3, H=2, seed=3))
    assert np.array_equal(a.values, b.values, equal_nan=True) and np.array_equal(ta.theta, tb.theta)


def test_spec_validation():
    for kw in (dict(edge_prob=1.5), dict(H=9), dict(censor_prob=0.0), dict(p=0)):
        base = dict(p=5, n=10, edge_prob=0.2, H=2)
        base.update(kw)
        with pytest.raises(ValueError):
            SimSpec(**base)


@given(st.floats(0.0, 0.6))
def test_top_fraction_censoring(q):
    X = np.random.default_rng(0).standard_normal((50, 4))
    ds = censor_top_fraction(X, q)
    k = int(round(q * 50))
    assert np.all((ds.indicator == 1).sum(axis=0) == k)


def test_lod_imputation_and_baseline_start():
    ds, _ = gen_censored_sample(SimSpec(p=6, n=60, edge_prob=0.3, H=3, seed=4))
    X = lod_impute(ds)
    assert np.all(X[ds.indicator == 1] == 40.0)
    path = baseline_lod_glasso(ds, K=5)
    assert np.count_nonzero(path.thetas[0] - np.diag(np.diag(path.thetas[0]))) == 0


def test_lod_baseline_rejects_constant_imputed_column():
    from cglasso.model_core import CensoringBounds, encode_censoring
    X = np.array([[1.0, 50.0], [2.0, 60.0], [3.0, 45.0]])
    ds = encode_censoring(X, CensoringBounds.uniform(2, -np.inf, 40.0))
    with pytest.raises(DataError, match="X2"):
        baseline_lod_glasso(ds)


def test_roc_of_perfect_path():
    adj = np.zeros((4, 4), dtype=bool)
    adj[0, 1] = adj[1, 0] = adj[2, 3] = adj[3, 2] = True
    truth_theta = np.eye(4) + 0.3 * adj
    thetas = [np.eye(4), truth_theta, np.ones((4, 4)) + 3 * np.eye(4)]
    tpr, fpr = roc_points(adj, thetas)
    assert tpr.tolist() == [0.0, 1.0, 1.0] and fpr.tolist() == [0.0, 0.0, 1.0]
    assert path_auc(tpr, fpr) == pytest.approx(1.0)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
def test_auc_is_bounded(points):
    tpr = np.array([t for t, _ in points])
    fpr = np.array([f for _, f in points])
    assert 0.0 <= path_auc(tpr, fpr) <= 1.0 + 1e-12


def test_metrics_fields():
    truth = Truth(np.zeros(3), np.eye(3), np.zeros((3, 3), dtype=bool), np.array([0]))
    m = metrics(truth, SimplePath(np.array([1.0, 0.5]), [np.eye(3), 2 * np.eye(3)], [np.zeros(3), np.ones(3)]))
    assert m["mse_theta"].tolist() == [0.0, 3.0] and m["min_mse_mu"] == 0.0


def test_replicate_seeds():
    assert replicate_seed(0, 3) == replicate_seed(0, 3)
    assert len({replicate_seed(0, r) for r in range(50)}) == 50
    assert replicate_seed(1, 0) != replicate_seed(0, 0)


def test_study_config_file(tmp_path):
    f = tmp_path / "s.ini"
    f.write_text("[study]\nstudy = model2\nreplicates = 3\nlevels = 0.1,0.4\nrho_min = 0.01\n")
    cfg = load_study_config(f)
    assert cfg.study == "model2" and cfg.replicates == 3 and cfg.levels == (0.1, 0.4)
    assert cfg.k == 1 and cfg.H == 30 and cfg.rho_min == 0.01
    f.write_text("[study]\nstudy = model2\nbogus = 1\n")
    with pytest.raises(ValueError):
        load_study_config(f)
    with pytest.raises(ValueError):
        study_config("model9")


def test_small_study_report_is_worker_independent(tmp_path):
    kw = dict(p=6, H=3, k=1, K=6, rho_min=0.05)
    a = run_study("model1", replicates=3, seed=5, threads=1, **kw)
    b = run_study("model1", replicates=3, seed=5, threads=2, **kw)
    pa = write_report(a, tmp_path / "a", "test")
    pb = write_report(b, tmp_path / "b", "test")
    for key in ("replicates", "aggregate", "curves"):
        assert open(pa[key]).read() == open(pb[key]).read()
    doc = json.load(open(pa["aggregate"]))
    methods = [g["method"] for g in doc["aggregate"]["groups"]]
    assert methods == ["cglasso", "lod-glasso", "mar-em"]
    assert {"auc_mean", "min_mse_mu_mean", "min_mse_theta_mean"} <= set(doc["aggregate"]["groups"][0])
    assert open(pa["replicates"]).readline().startswith("# cglasso test config=")


def test_aggregate_groups_by_subset_size():
    rows = [{"D": 2, "max_dmu2": 1.0, "max_dtheta2": 2.0}, {"D": 2, "max_dmu2": 3.0, "max_dtheta2": 2.0},
            {"D": 5, "max_dmu2": 0.5, "max_dtheta2": None}]
    groups = aggregate("approx_vs_exact", rows)["groups"]
    assert groups[0]["max_dmu2_mean"] == 2.0 and groups[0]["replicates"] == 2
    assert groups[1]["max_dtheta2_mean"] is None


def test_other_studies_run_at_toy_size():
    rob = run_study("censor_robustness", replicates=1, seed=0, p=5, n=40, k=1, K=4, rho_min=0.05,
                    levels=(0.1,))
    assert {r["method"] for r in rob.replicates} == {"cglasso", "lod-glasso", "mar-em"}
    assert all(r["imputation_error"] >= 0 for r in rob.replicates)
    ave = run_study("approx_vs_exact", replicates=1, seed=0, p=4, K=3, rho_min=0.05, D_sizes=(2,),
                    gibbs_sweeps=500, gibbs_burn_in=50)
    assert ave.replicates[0]["D"] == 2 and ave.replicates[0]["max_dmu2"] >= 0
