import numpy as np
import pytest

from conftest import make_design
from lfpca import (DataPanel, IdentifiabilityError, ValidationError, decompose_intrinsic,
                   estimate_sigma2, fit_panel, left_vectors, lift, load_model, save_model,
                   select_orders, variance_explained, write_panel, read_panel)
from lfpca.mom import IntrinsicCovariances
from oracle import aligned_vec_err, oracle_fit, well_separated


def covs_from(k_x, k_w, q=1):
    r = k_w.shape[0]
    return IntrinsicCovariances(k_x=np.asarray(k_x, dtype=float),
                                k_w=np.asarray(k_w, dtype=float),
                                trace_x_raw=float(np.trace(k_x)),
                                trace_w_raw=float(np.trace(k_w)), q=q, r=r)


# --- intrinsic eigendecomposition ---------------------------------------------

def test_decompose_diagonal():
    covs = covs_from(np.diag([2.0, 1.0]), np.eye(1), q=1)
    basis = decompose_intrinsic(covs, n_x=2, n_w=1)
    np.testing.assert_allclose(basis.lambda_x, [2.0, 1.0])
    np.testing.assert_allclose(np.abs(basis.a_x), np.eye(2), atol=1e-14)
    assert basis.clipped_count == 0


def test_decompose_clips_negative_eigenvalues():
    k_w = np.diag([3.0, -0.1])
    covs = covs_from(np.diag([1.0, 1.0, 1.0, 1.0]), k_w, q=1)
    basis = decompose_intrinsic(covs, n_x=1, n_w=2)
    np.testing.assert_allclose(basis.lambda_w, [3.0, 0.0])
    assert basis.clipped_w == 1 and basis.clipped_count == 1
    # the raw spectrum keeps the negative value
    np.testing.assert_allclose(basis.spectrum_w, [3.0, -0.1])


def test_decompose_rejects_excess_orders():
    covs = covs_from(np.eye(4), np.eye(2), q=1)
    with pytest.raises(ValidationError):
        decompose_intrinsic(covs, n_x=5, n_w=1)
    with pytest.raises(ValidationError):
        decompose_intrinsic(covs, n_x=1, n_w=3)


def test_decompose_sign_convention():
    vec = np.array([0.6, -0.8])
    k_w = 2.0 * np.outer(-vec, -vec)
    covs = covs_from(np.eye(2), k_w, q=0)
    basis = decompose_intrinsic(covs, n_x=1, n_w=1)
    assert basis.a_w[np.abs(basis.a_w[:, 0]).argmax(), 0] > 0


# --- sigma2 --------------------------------------------------------------------

def test_sigma2_zero_when_trace_matches():
    covs = covs_from(np.eye(2), np.diag([2.0, 1.0]), q=0)
    assert estimate_sigma2(covs, np.array([2.0, 1.0]), p=100, n_w=2) == 0.0


def test_sigma2_clamped_at_zero():
    covs = covs_from(np.eye(2), np.diag([2.0, -0.5]), q=0)
    # trace (1.5) < retained eigenvalue sum (2.0) after clipping
    assert estimate_sigma2(covs, np.array([2.0, 0.0]), p=50, n_w=2) == 0.0


def test_sigma2_positive_surplus():
    k_w = np.diag([4.0, 1.0, 0.5, 0.5])
    covs = covs_from(np.eye(2), k_w, q=0)
    got = estimate_sigma2(covs, np.array([4.0, 1.0]), p=102, n_w=2)
    assert abs(got - 1.0 / 100) < 1e-15


def test_sigma2_requires_more_voxels_than_components():
    covs = covs_from(np.eye(2), np.eye(2), q=0)
    with pytest.raises(ValidationError):
        estimate_sigma2(covs, np.ones(2), p=2, n_w=2)


# --- order selection -------------------------------------------------------------

def test_select_orders_threshold():
    n_x, n_w = select_orders(np.array([8.0, 1.0, 1.0]), np.array([8.0, 1.0, 1.0]),
                             threshold=0.9)
    assert n_x == 2 and n_w == 2


def test_select_orders_ignores_negative_mass():
    n_x, _ = select_orders(np.array([5.0, 3.0, -2.0]), np.array([1.0]), threshold=0.9)
    assert n_x == 2


def test_select_orders_cap():
    spec = np.ones(100)
    n_x, _ = select_orders(spec, spec, threshold=0.999, cap=30)
    assert n_x == 30


def test_user_override_wins(rng):
    design = make_design(rng, n_subjects=8, visits=4)
    panel = DataPanel.from_array(rng.standard_normal((30, design.n)))
    res = fit_panel(panel, design, n_x=4, n_w=4)
    assert res.model.n_x == 4 and res.model.n_w == 4


# --- lifting ---------------------------------------------------------------------

def test_lift_identity_returns_v(rng):
    arr = rng.standard_normal((20, 6))
    arr -= arr.mean(axis=1, keepdims=True)
    panel = DataPanel.from_array(arr, n_slices=3, centered=True)
    from lfpca import accumulate_gram, eigen_gram
    decomp = eigen_gram(accumulate_gram(panel))
    v = left_vectors(panel, decomp)
    phi = lift(v, np.eye(decomp.r))
    np.testing.assert_array_equal(phi.to_array(), v.to_array())


def test_lift_slice_count_invariance(rng):
    arr = rng.standard_normal((35, 8))
    a = rng.standard_normal((8, 3))
    one = lift(DataPanel.from_array(arr, n_slices=1), a).to_array()
    seven = lift(DataPanel.from_array(arr, n_slices=7), a).to_array()
    assert np.abs(one - seven).max() <= 1e-14


def test_lift_rejects_mismatched_rows(rng):
    panel = DataPanel.from_array(rng.standard_normal((10, 4)))
    with pytest.raises(ValidationError):
        lift(panel, np.zeros((5, 2)))


# --- full fit vs dense oracle -----------------------------------------------------

def fit_and_oracle(rng, p=40, n_subjects=6, visits=3, q=1, n_x=3, n_w=3, noise=1.0):
    design = make_design(rng, n_subjects=n_subjects, visits=visits, q=q)
    panel = DataPanel.from_array(noise * rng.standard_normal((p, design.n)))
    res = fit_panel(panel, design, n_x=n_x, n_w=n_w, normalize=False)
    centered = panel.to_array() - panel.to_array().mean(axis=1, keepdims=True)
    ora = oracle_fit(centered, [s.z for s in design.subjects], n_x, n_w)
    return res, ora


def test_fit_matches_dense_oracle(rng):
    res, ora = fit_and_oracle(rng)
    model = res.model
    np.testing.assert_allclose(model.lambda_x, ora["lambda_x"], rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(model.lambda_w, ora["lambda_w"], rtol=1e-8, atol=1e-12)
    assert abs(model.trace_x - ora["trace_x"]) <= 1e-8 * abs(ora["trace_x"])
    assert abs(model.trace_w - ora["trace_w"]) <= 1e-8 * abs(ora["trace_w"])
    assert abs(model.sigma2 - ora["sigma2"]) <= 1e-8 * max(ora["sigma2"], 1e-12)
    # eigenvectors where the spectrum is well separated
    stacked = np.vstack([p.to_array() for p in model.phi_x])
    for k in well_separated(ora["spectrum_x"]):
        if k < model.n_x:
            err = aligned_vec_err(ora["phi_x_stacked"][:, [k]], stacked[:, [k]])
            assert err[0] <= 1e-6
    w_est = model.phi_w.to_array()
    for k in well_separated(ora["spectrum_w"]):
        if k < model.n_w:
            err = aligned_vec_err(ora["phi_w"][:, [k]], w_est[:, [k]])
            assert err[0] <= 1e-6


def test_lifted_eigenvectors_match_dense_eigensolver(rng):
    # dense eigendecomposition of the lifted visit-level covariance agrees
    # with lifting the intrinsic eigenvectors, column by column up to sign
    res, ora = fit_and_oracle(rng, p=40)
    w_est = res.model.phi_w.to_array()
    for k in well_separated(ora["spectrum_w"]):
        if k < res.model.n_w:
            err = aligned_vec_err(ora["phi_w"][:, [k]], w_est[:, [k]])
            assert err[0] <= 1e-8


def test_stacked_orthonormality(rng):
    res, _ = fit_and_oracle(rng, p=60, n_x=4, n_w=4)
    stacked = np.vstack([p.to_array() for p in res.model.phi_x])
    assert np.abs(stacked.T @ stacked - np.eye(4)).max() <= 1e-8
    w = res.model.phi_w.to_array()
    assert np.abs(w.T @ w - np.eye(4)).max() <= 1e-8


def test_trace_equals_spectrum_sum(rng):
    res, _ = fit_and_oracle(rng)
    covs = res.covariances
    assert abs(np.trace(covs.k_x) - res.model.spectrum_x.sum()) <= 1e-10
    assert abs(np.trace(covs.k_w) - res.model.spectrum_w.sum()) <= 1e-10


def test_fit_slice_invariance(rng):
    design = make_design(rng, n_subjects=7, visits=3)
    arr = rng.standard_normal((41, design.n))
    out = {}
    for l in (1, 7):
        res = fit_panel(DataPanel.from_array(arr, n_slices=l), design, n_x=2, n_w=2)
        out[l] = res
    assert out[1].model.sigma2 == pytest.approx(out[7].model.sigma2, abs=1e-14)
    for k in range(2):
        a = out[1].model.phi_x[k].to_array()
        b = out[7].model.phi_x[k].to_array()
        assert np.abs(a - b).max() <= 1e-14


def test_fit_sigma2_invariant_to_subject_order(rng):
    design = make_design(rng, n_subjects=6, visits=3)
    arr = rng.standard_normal((30, design.n))
    res = fit_panel(DataPanel.from_array(arr), design, n_x=2, n_w=2)
    perm = rng.permutation(design.n_subjects)
    from lfpca import StudyDesign
    design_p = StudyDesign([design.subjects[i] for i in perm])
    cols = np.concatenate([np.arange(design.columns(i).start, design.columns(i).stop)
                           for i in perm])
    res_p = fit_panel(DataPanel.from_array(arr[:, cols]), design_p, n_x=2, n_w=2)
    assert res.model.sigma2 == pytest.approx(res_p.model.sigma2, abs=1e-10)


def test_fit_rejects_unidentifiable_design(rng):
    design = make_design(rng, n_subjects=8, visits=2)
    panel = DataPanel.from_array(rng.standard_normal((20, design.n)))
    with pytest.raises(IdentifiabilityError):
        fit_panel(panel, design, n_x=1, n_w=1)


# --- variance explained -----------------------------------------------------------

def test_single_component_explains_everything(rng):
    # rank-one subject-level structure, no visit-level component to speak of
    res, _ = fit_and_oracle(rng, p=30, n_x=1, n_w=1)
    model = res.model
    table = variance_explained(model)
    assert table.cumulative[-1] <= 100.0 + 1e-9
    # shares of the stacked blocks partition each eigenvalue
    total = model.trace_x + model.trace_w
    per_row = table.shares_x.sum(axis=0)
    np.testing.assert_allclose(per_row[0], 100.0 * model.lambda_x[0] / total, atol=1e-9)


def test_variance_table_csv_layout(rng, tmp_path):
    res, _ = fit_and_oracle(rng, n_x=2, n_w=2)
    table = variance_explained(res.model)
    path = tmp_path / "var.csv"
    table.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,phi_x0,phi_x1,phi_w,cumulative"
    assert lines[1].startswith("1,")
    assert lines[-1].startswith("total,")
    assert len(lines) == 2 + max(res.model.n_x, res.model.n_w) + 1 - 1


def test_variance_table_population_shares(rng):
    # Against the analytic shares implied by the generator: lambda times the
    # squared block norm over the total trace.
    from lfpca import generate_scenario1, ScenarioSpec
    spec = ScenarioSpec.curves(p=80, sigma2=0.0, seed=5, n_subjects=300, n_visits=4)
    panel, design, truth = generate_scenario1(spec)
    res = fit_panel(panel, design, n_x=4, n_w=4)
    table = variance_explained(res.model)
    lam = truth.lambda_x
    block_norm0 = np.sum(truth.phi_x[0] ** 2, axis=0)
    # population share of the intercept block of component 1
    expected = 100.0 * lam[0] * block_norm0[0] / (lam.sum() + truth.lambda_w.sum())
    got = table.shares_x[0, 0]
    assert abs(got - expected) < 2.0  # percentage points, sampling error


def test_variance_rejects_nonpositive_total():
    with pytest.raises(ValidationError):
        variance_explained(_tiny_model(trace_x=-1.0, trace_w=0.5))


def _tiny_model(trace_x, trace_w):
    from lfpca.fit import FittedModel
    panel = DataPanel.from_array(np.zeros((3, 1)))
    return FittedModel(p=3, n=4, q=0, r=1, n_x=1, n_w=1, a_x=np.ones((1, 1)),
                       a_w=np.ones((1, 1)), lambda_x=np.ones(1), lambda_w=np.ones(1),
                       phi_x=(panel,), phi_w=panel, sigma2=0.0, trace_x=trace_x,
                       trace_w=trace_w, clipped_count=0, mean=np.zeros(3),
                       spectrum_x=np.ones(1), spectrum_w=np.ones(1))


# --- persistence -------------------------------------------------------------------

def test_model_save_load_round_trip(rng, tmp_path):
    res, _ = fit_and_oracle(rng, n_x=2, n_w=2)
    save_model(res.model, tmp_path)
    loaded = load_model(tmp_path)
    np.testing.assert_array_equal(loaded.a_x, res.model.a_x)
    np.testing.assert_array_equal(loaded.lambda_w, res.model.lambda_w)
    np.testing.assert_array_equal(loaded.mean, res.model.mean)
    assert loaded.sigma2 == res.model.sigma2
    for k in range(2):
        np.testing.assert_array_equal(loaded.phi_x[k].to_array(),
                                      res.model.phi_x[k].to_array())
    assert loaded.covariate_scaling == res.model.covariate_scaling


def test_fit_file_backed_requires_workdir(rng, tmp_path):
    design = make_design(rng, n_subjects=6, visits=3)
    arr = rng.standard_normal((24, design.n))
    write_panel(DataPanel.from_array(arr), tmp_path / "p.lfpb")
    panel = read_panel(tmp_path / "p.lfpb")
    with pytest.raises(ValidationError, match="workdir"):
        fit_panel(panel, design, n_x=2, n_w=2)
    res = fit_panel(panel, design, n_x=2, n_w=2, workdir=tmp_path / "wd")
    res_mem = fit_panel(DataPanel.from_array(arr), design, n_x=2, n_w=2)
    np.testing.assert_allclose(res.model.phi_w.to_array(),
                               res_mem.model.phi_w.to_array(), atol=1e-12)


def test_power_backend_fit_matches_dense(rng):
    design = make_design(rng, n_subjects=10, visits=4)
    arr = rng.standard_normal((120, design.n))
    dense = fit_panel(DataPanel.from_array(arr), design, n_x=2, n_w=2)
    power = fit_panel(DataPanel.from_array(arr), design, n_x=2, n_w=2,
                      backend="power", rank=12, seed=4)
    assert power.model.r == 12
    # leading structure agrees with the dense path truncated to the same rank
    truncated = fit_panel(DataPanel.from_array(arr), design, n_x=2, n_w=2, rank=12)
    np.testing.assert_allclose(power.model.lambda_x, truncated.model.lambda_x, rtol=1e-6)
    np.testing.assert_allclose(np.abs(power.model.phi_w.to_array()),
                               np.abs(truncated.model.phi_w.to_array()), atol=1e-5)


def test_thread_resolution_env(monkeypatch):
    from lfpca._parallel import resolve_threads
    monkeypatch.delenv("LFPCA_THREADS", raising=False)
    assert resolve_threads(None) == 1
    assert resolve_threads(3) == 3
    monkeypatch.setenv("LFPCA_THREADS", "5")
    assert resolve_threads(None) == 5
    assert resolve_threads(2) == 2
    monkeypatch.setenv("LFPCA_THREADS", "junk")
    assert resolve_threads(None) == 1


def test_variance_single_component_is_total():
    # a model whose only mass is one subject-level component: 100% cumulative
    model = _tiny_model(trace_x=2.0, trace_w=0.0)
    model.lambda_x = np.array([2.0])
    model.lambda_w = np.array([0.0])
    table = variance_explained(model)
    assert table.cumulative[-1] == pytest.approx(100.0)
    assert table.shares_x[0, 0] == pytest.approx(100.0)
    assert table.percent_x == pytest.approx(100.0)
