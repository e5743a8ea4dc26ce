import numpy as np
import pytest

from conftest import make_design
from lfpca import (DataPanel, StudyDesign, ValidationError, fit_panel, generate_from_model,
                   read_scores_csv, reconstruct, score_blups, score_new_panel,
                   write_scores_csv)
from oracle import oracle_basis_matrix, oracle_scores


def fitted_model(rng, p=60, n_subjects=6, visits=3, n_x=2, n_w=2, q=1):
    design = make_design(rng, n_subjects=n_subjects, visits=visits, q=q)
    panel = DataPanel.from_array(rng.standard_normal((p, design.n)))
    return fit_panel(panel, design, n_x=n_x, n_w=n_w)


def test_zero_data_gives_zero_scores(rng):
    res = fitted_model(rng)
    zero = DataPanel.from_array(np.zeros((res.model.p, res.design.n)), centered=True)
    scores = score_new_panel(res.model, zero, res.design, apply_scaling=False)
    assert np.abs(scores.xi_matrix()).max() == 0.0
    assert np.abs(scores.zeta_matrix()).max() == 0.0


def test_exact_model_data_recovers_scores(rng):
    # data built exactly from the fitted basis: the predictor is the exact
    # projection, so generating scores come back to machine precision
    res = fitted_model(rng, p=80)
    panel, truth = generate_from_model(res.model, res.design, score_law="normal",
                                       sigma2=0.0, seed=11, apply_scaling=False)
    scores = score_new_panel(res.model, panel, res.design, apply_scaling=False)
    err_xi = np.abs(scores.xi_matrix() - truth.xi).max()
    err_zeta = np.abs(scores.zeta_matrix() - truth.zeta).max()
    scale = max(np.abs(truth.xi).max(), np.abs(truth.zeta).max())
    assert err_xi <= 1e-8 * scale
    assert err_zeta <= 1e-8 * scale


def test_training_scores_match_dense_normal_equations(rng):
    # the intrinsic scoring path agrees with explicitly assembled
    # p-dimensional normal equations on the centered training data
    design = make_design(rng, n_subjects=5, visits=4)
    arr = rng.standard_normal((100, design.n))
    res = fit_panel(DataPanel.from_array(arr), design, n_x=2, n_w=2)
    model = res.model
    centered = arr - model.mean[:, None]
    dense = oracle_scores([p.to_array() for p in model.phi_x], model.phi_w.to_array(),
                          [s.z for s in res.design.subjects], centered)
    for subj_scores, omega in zip(res.scores.subjects, dense):
        got = np.concatenate([subj_scores.xi, subj_scores.zeta.ravel()])
        assert np.abs(got - omega).max() <= 1e-9 * max(1.0, np.abs(omega).max())


def test_scores_residual_for_spanned_data(rng):
    # noiseless data generated from the fitted basis: residual is zero
    res = fitted_model(rng, p=70)
    model = res.model
    panel, truth = generate_from_model(model, res.design, score_law="normal",
                                       sigma2=0.0, seed=3, apply_scaling=False)
    scores = score_new_panel(model, panel, res.design, apply_scaling=False)
    arr = panel.to_array()
    for i in range(res.design.n_subjects):
        cols = res.design.columns(i)
        y_i = arr[:, cols] - model.mean[:, None]
        b = oracle_basis_matrix([p.to_array() for p in model.phi_x],
                                model.phi_w.to_array(), res.design.subjects[i].z)
        omega = np.concatenate([scores.subjects[i].xi, scores.subjects[i].zeta.ravel()])
        resid = np.linalg.norm(y_i.T.ravel() - b @ omega)
        assert resid <= 1e-8 * max(np.linalg.norm(y_i), 1e-30)


def test_scores_invariant_to_slice_count(rng):
    design = make_design(rng, n_subjects=6, visits=3)
    arr = rng.standard_normal((50, design.n))
    xi = {}
    for l in (1, 5):
        res = fit_panel(DataPanel.from_array(arr, n_slices=l), design, n_x=2, n_w=2)
        xi[l] = res.scores.xi_matrix()
    assert np.abs(xi[1] - xi[5]).max() <= 1e-10


def test_scores_invariant_to_subject_permutation(rng):
    design = make_design(rng, n_subjects=6, visits=3)
    arr = rng.standard_normal((40, design.n))
    res = fit_panel(DataPanel.from_array(arr), design, n_x=2, n_w=2)
    perm = rng.permutation(design.n_subjects)
    design_p = StudyDesign([design.subjects[i] for i in perm])
    cols = np.concatenate([np.arange(design.columns(i).start, design.columns(i).stop)
                           for i in perm])
    res_p = fit_panel(DataPanel.from_array(arr[:, cols]), design_p, n_x=2, n_w=2)
    xi = res.scores.xi_matrix()
    xi_p = res_p.scores.xi_matrix()
    assert np.abs(xi[perm] - xi_p).max() <= 1e-10


def test_rank_deficient_solve_is_flagged_not_fatal(rng):
    # more scores than informative directions: minimum-norm solution, flag set
    res = fitted_model(rng, p=30, n_subjects=4, visits=6, n_x=2, n_w=2)
    model = res.model
    # degenerate design: all covariates identical makes columns collide
    z = np.column_stack([np.ones(6), np.zeros(6) + 1.0])
    from lfpca import Subject
    design = StudyDesign([Subject("dup", z)])
    panel = DataPanel.from_array(np.zeros((model.p, 6)), centered=True)
    scores = score_new_panel(model, panel, design, apply_scaling=False)
    assert scores.subjects[0].rank_deficient or np.abs(scores.subjects[0].xi).max() == 0.0


def test_reconstruct_zero_scores_returns_mean(rng):
    res = fitted_model(rng)
    scores = score_new_panel(res.model,
                             DataPanel.from_array(np.zeros((res.model.p, res.design.n)),
                                                  centered=True),
                             res.design, apply_scaling=False)
    rec = reconstruct(res.model, scores, res.design, 0, 0)
    np.testing.assert_allclose(rec, res.model.mean, atol=1e-12)


def test_reconstruct_exact_model_data(rng):
    res = fitted_model(rng, p=50)
    panel, truth = generate_from_model(res.model, res.design, score_law="normal",
                                       sigma2=0.0, seed=9, apply_scaling=False)
    scores = score_new_panel(res.model, panel, res.design, apply_scaling=False)
    arr = panel.to_array()
    for i, j in [(0, 0), (2, 1), (res.design.n_subjects - 1, 2)]:
        rec = reconstruct(res.model, scores, res.design, i, j)
        col = res.design.column_of(i, j)
        err = np.linalg.norm(rec - arr[:, col])
        assert err <= 1e-8 * max(np.linalg.norm(arr[:, col]), 1e-30)


def test_reconstruct_rejects_unknown_visit(rng):
    res = fitted_model(rng)
    with pytest.raises(ValidationError):
        reconstruct(res.model, res.scores, res.design, 0, 99)
    with pytest.raises(ValidationError):
        reconstruct(res.model, res.scores, res.design, 99, 0)


def test_scores_csv_round_trip(rng, tmp_path):
    res = fitted_model(rng)
    path = tmp_path / "scores.csv"
    write_scores_csv(res.scores, path)
    back = read_scores_csv(path)
    np.testing.assert_array_equal(back.xi_matrix(), res.scores.xi_matrix())
    np.testing.assert_array_equal(back.zeta_matrix(), res.scores.zeta_matrix())
    assert [s.subject_id for s in back.subjects] == \
        [s.subject_id for s in res.scores.subjects]


def test_reconstruction_residual_tracks_noise_floor(rng):
    # noisy curves data: per-voxel mean squared residual of the fitted
    # reconstruction stays within a small multiple of the noise variance
    from lfpca import ScenarioSpec, generate_scenario1, fit_panel
    sigma2 = 1e-4
    spec = ScenarioSpec.curves(p=750, sigma2=sigma2, seed=13)
    panel, design, _ = generate_scenario1(spec)
    res = fit_panel(panel, design, n_x=4, n_w=4)
    arr = panel.to_array()
    cols = rng.choice(design.n, size=40, replace=False)
    total = 0.0
    for c in cols:
        i = int(np.searchsorted(res.design.col_offsets, c, side="right")) - 1
        j = c - int(res.design.col_offsets[i])
        rec = reconstruct(res.model, res.scores, res.design, i, j)
        total += float(np.mean((rec - arr[:, c]) ** 2))
    assert total / cols.size <= 3 * sigma2
