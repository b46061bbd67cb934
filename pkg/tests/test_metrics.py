import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dislab.metrics import (
    METRICS_HEADER,
    DegenerateColumnWarning,
    abs_correlation,
    append_metrics_csv,
    assignment,
    completeness,
    dci,
    disentanglement,
    evaluate,
    lasso_cd,
    lasso_objective,
    lasso_regression,
    mcc,
    read_metrics_csv,
    soft_threshold,
)


def _brute_force(c):
    n = c.shape[0]
    return max(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def test_mcc_identity(rng):
    z = rng.standard_normal((200, 4))
    assert mcc(z, z) == pytest.approx(1.0, abs=1e-12)
    assert mcc(z, z, "spearman") == pytest.approx(1.0, abs=1e-12)


def test_mcc_sign_permutation(rng):
    z = rng.standard_normal((200, 5))
    est = z[:, [3, 0, 4, 1, 2]] * np.array([-1, 1, -1, -1, 1])
    assert mcc(z, est) == pytest.approx(1.0, abs=1e-12)


def test_mcc_truncates_to_common_dim(rng):
    z = rng.standard_normal((100, 3))
    est = np.hstack([z, rng.standard_normal((100, 2))])
    assert mcc(z, est) == pytest.approx(1.0)


def test_mcc_row_mismatch():
    with pytest.raises(ValueError, match="row count"):
        mcc(np.zeros((3, 2)), np.zeros((4, 2)))


def test_constant_column_warns_and_scores_zero(rng):
    z = rng.standard_normal((100, 2))
    est = z.copy()
    est[:, 1] = 3.0
    with pytest.warns(DegenerateColumnWarning):
        c = abs_correlation(z, est)
    assert np.all(c[:, 1] == 0.0)
    with pytest.warns(DegenerateColumnWarning):
        assert mcc(z, est) == pytest.approx(0.5)


def test_hungarian_matches_brute_force_5x5(rng):
    c = rng.random((5, 5))
    cols = assignment(c)
    assert sorted(cols) == list(range(5))
    assert c[np.arange(5), cols].sum() == pytest.approx(_brute_force(c), abs=1e-12)


def _brute_force_lexmin(c):
    n = c.shape[0]
    best, arg = -np.inf, None
    for p in itertools.permutations(range(n)):  # lexicographic order
        v = sum(c[i, p[i]] for i in range(n))
        if v > best:
            best, arg = v, p
    return list(arg)


def test_ties_go_to_lowest_index():
    assert assignment(np.ones((3, 3))).tolist() == [0, 1, 2]
    rng = np.random.default_rng(5)
    for _ in range(300):
        n = int(rng.integers(2, 6))
        c = rng.integers(0, 3, (n, n)).astype(float)
        assert assignment(c).tolist() == _brute_force_lexmin(c)


def test_hungarian_many_instances():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        c = rng.random((n, n))
        cols = assignment(c)
        assert c[np.arange(n), cols].sum() == pytest.approx(_brute_force(c), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_mcc_invariant_to_permutation_and_sign(seed, n):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((80, n))
    est = np.tanh(z @ rng.standard_normal((n, n)))
    perm = rng.permutation(n)
    signs = rng.choice([-1.0, 1.0], n)
    a = mcc(z, est)
    b = mcc(z, est[:, perm] * signs)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(b, abs=1e-12)


# -------------------------------------------------------------------- DCI


def test_dci_identity_and_uniform():
    assert disentanglement(np.eye(3)) == 1.0
    assert completeness(np.eye(3)) == 1.0
    assert disentanglement(np.ones((3, 3))) == pytest.approx(0.0, abs=1e-12)
    assert completeness(np.ones((3, 3))) == pytest.approx(0.0, abs=1e-12)


def test_dci_two_by_two_entropy():
    R = np.array([[0.9, 0.1], [0.1, 0.9]])
    h = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert disentanglement(R) == pytest.approx(1 - h / math.log(2), abs=1e-12)
    assert completeness(R) == pytest.approx(1 - h / math.log(2), abs=1e-12)


def test_zero_importance_column_has_no_weight():
    R = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert disentanglement(R) == 1.0
    R2 = np.array([[1.0, 0.0, 0.5], [0.0, 0.0, 0.5]])
    h = math.log(2)
    assert disentanglement(R2) == pytest.approx((1.0 * 1 + 1.0 * (1 - h / math.log(2))) / 2)


def test_negative_importance_rejected():
    with pytest.raises(ValueError):
        disentanglement(-np.eye(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dci_bounded(seed):
    R = np.random.default_rng(seed).random((4, 4))
    assert 0.0 <= disentanglement(R) <= 1.0
    assert 0.0 <= completeness(R) <= 1.0


def test_dci_needs_fifty_rows(rng):
    with pytest.raises(ValueError, match="50"):
        dci(rng.standard_normal((49, 2)), rng.standard_normal((49, 2)))


def test_dci_on_permuted_recovery(rng):
    z = rng.standard_normal((500, 3))
    d, c, i = dci(z, 2.0 * z[:, [2, 0, 1]])
    assert d > 0.99 and c > 0.99 and i < 0.01


# ------------------------------------------------------------------ LASSO


@pytest.mark.parametrize("lam", [0.0, 0.05, 0.3, 2.0])
def test_lasso_one_dimensional_closed_form(rng, lam):
    x = rng.standard_normal(60)
    y = 0.7 * x + 0.1 * rng.standard_normal(60)
    w = lasso_cd(x[:, None], y, lam)
    a = x @ x / 60
    assert w[0] == pytest.approx(soft_threshold(x @ y / 60, lam) / a, abs=1e-15)


def test_lasso_objective_monotone(rng):
    X = rng.standard_normal((100, 6))
    X[:, 1] = X[:, 0] + 0.1 * X[:, 1]
    y = X @ rng.standard_normal(6) + 0.2 * rng.standard_normal(100)
    hist = []
    lasso_cd(X, y, 0.01, history=hist)
    assert len(hist) > 1
    assert np.all(np.diff(hist) <= 1e-12)


def test_lasso_matches_kkt(rng):
    X = rng.standard_normal((200, 4))
    y = X @ np.array([1.0, 0.0, -2.0, 0.05]) + 0.1 * rng.standard_normal(200)
    lam = 0.1
    w = lasso_cd(X, y, lam, tol=1e-12)
    g = X.T @ (y - X @ w) / 200
    active = w != 0
    assert np.allclose(g[active], lam * np.sign(w[active]), atol=1e-8)
    assert np.all(np.abs(g[~active]) <= lam + 1e-8)
    assert lasso_objective(X, y, w, lam) <= lasso_objective(X, y, w + 1e-3, lam)


def test_lasso_rejects_negative_lambda(rng):
    with pytest.raises(ValueError):
        lasso_cd(np.eye(3), np.ones(3), -1.0)
    with pytest.raises(ValueError):
        lasso_regression(np.eye(3), np.eye(3), -0.1)


def test_lasso_exact_fit(rng):
    z = rng.standard_normal((300, 3))
    fit = lasso_regression(z, z, 0.0)
    assert fit.mse < 1e-6
    assert abs(fit.r2 - 1.0) < 1e-6


def test_lasso_full_shrinkage(rng):
    z = rng.standard_normal((300, 3))
    fit = lasso_regression(z, z, 1e6)
    assert np.all(fit.coef == 0.0)
    assert fit.r2 <= 0.0


def test_lasso_split_deterministic(rng):
    z = rng.standard_normal((120, 2))
    est = z + 0.3 * rng.standard_normal((120, 2))
    a = lasso_regression(est, z, seed=3)
    b = lasso_regression(est, z, seed=3)
    assert a.mse == b.mse and np.array_equal(a.coef, b.coef)


# ---------------------------------------------------------------- reports


def test_report_bounds(rng):
    z = rng.standard_normal((300, 3))
    est = np.tanh(z @ rng.standard_normal((3, 3)))
    r = evaluate(z, est, seed=2, config_digest="x")
    for v in (r.mcc, r.disentanglement, r.completeness):
        assert 0.0 <= v <= 1.0
    assert r.informativeness >= 0 and r.mse >= 0
    assert r.lasso_lambda == 1e-3


def test_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    row = {k: 0.5 for k in METRICS_HEADER} | {"run_id": "r", "penalty_kind": "L1", "seed": 0, "n_domains": 2}
    append_metrics_csv(path, row)
    append_metrics_csv(path, row)
    lines = path.read_text().splitlines()
    assert lines[0] == "run_id,seed,n_domains,alpha,beta,penalty_kind,mcc,disentanglement,completeness,informativeness,r2,mse"
    assert len(lines) == 3
    assert read_metrics_csv(path)[1]["mcc"] == "0.5"
    with pytest.raises(KeyError):
        append_metrics_csv(path, {"run_id": "x"})
