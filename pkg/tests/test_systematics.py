import numpy as np
import pytest

from skyclust.cosmomodel import SpectrumParams
from skyclust.klpipe import kl_decompose
from skyclust.mocks import ZeroPointTable, draw_zeropoints
from skyclust.pipeline import DEFAULTS, VolumeSurvey, layout_from, selection_from, weights_from
from skyclust.systematics import (ModulationProfile, build_filtered_basis, ensemble_sys_covariance, inject,
                                  inject_and_test, modulate_counts, modulation_matrix)

FID = SpectrumParams()


@pytest.fixture(scope="module")
def setup():
    v = DEFAULTS["volume"]
    layout = layout_from(DEFAULTS["layout"])
    sel = selection_from(DEFAULTS["selection"], v["d_min"], v["d_max"])
    survey = VolumeSurvey.build(layout, sel, weights_from([]), {"n_randoms": 1_000_000, "target_cells": 300})
    xvs = [survey.data_vector(survey.mock(FID, s)) for s in range(2)]
    xv = xvs[0]
    profile = ModulationProfile(sel)
    mod = modulation_matrix(survey.base_counts, xv, survey.randoms, profile, layout)
    return dict(survey=survey, layout=layout, xv=xv, xvs=xvs, mod=mod, profile=profile,
                model=survey.model(xv))


def _uniform(layout, value):
    u = np.array(layout.units())
    return ZeroPointTable(u[:, 0], u[:, 1], np.full(len(u), float(value)))


def test_profile_grows_toward_edge(setup):
    prof = setup["profile"]
    d = np.linspace(prof.peak_distance(), prof.d_range[1], 100)
    c = np.abs(prof(d))
    assert np.all(np.diff(c) >= 0)


def test_null_shift(setup):
    d = modulate_counts(setup["mod"], _uniform(setup["layout"], 0.0))
    np.testing.assert_array_equal(d, 0.0)


def test_sign_flip_and_linearity(setup):
    zp = draw_zeropoints(setup["layout"], 0.015, 4)
    d = modulate_counts(setup["mod"], zp)
    assert np.any(d != 0)
    np.testing.assert_array_equal(modulate_counts(setup["mod"], zp.scaled(-1.0)), -d)
    for a in (0.3, 2.0, -7.5):
        np.testing.assert_allclose(modulate_counts(setup["mod"], zp.scaled(a)), a * d, rtol=1e-13, atol=1e-18)


def test_edge_amplification(setup):
    d = modulate_counts(setup["mod"], _uniform(setup["layout"], 0.01))
    dist = np.linalg.norm(setup["survey"].lattice.centers[setup["xv"].index], axis=1)
    outer = dist >= np.quantile(dist, 0.95)
    amp = np.abs(d[outer]) / 0.01
    assert np.all((amp >= 5) & (amp <= 10))
    # near cells barely respond
    assert np.median(np.abs(d[dist <= np.quantile(dist, 0.1)])) / 0.01 < 1


def test_profile_range_check(setup):
    s = setup
    far = np.full(len(s["survey"].lattice), 1e4)
    with pytest.raises(ValueError):
        modulation_matrix(s["survey"].base_counts, s["xv"], s["survey"].randoms, s["profile"], s["layout"],
                          cell_distance=far)


def test_inject_null(setup):
    xv = setup["xv"]
    np.testing.assert_array_equal(inject(xv, np.zeros(len(xv))).x, xv.x)


def test_csys_null_and_scaling(setup):
    s = setup
    C0 = ensemble_sys_covariance(s["mod"], s["layout"], 0.0, K=20, seed=1)
    np.testing.assert_array_equal(C0.C, 0.0)
    C1 = ensemble_sys_covariance(s["mod"], s["layout"], 0.015, K=20, seed=1)
    C2 = ensemble_sys_covariance(s["mod"], s["layout"], 0.030, K=20, seed=1)
    np.testing.assert_allclose(C2.C, 4 * C1.C, rtol=1e-12, atol=1e-12 * np.abs(C2.C).max())
    with pytest.raises(ValueError):
        ensemble_sys_covariance(s["mod"], s["layout"], 0.015, K=1)


def test_csys_psd_rank_and_order(setup):
    s = setup
    K = 100
    Cs = ensemble_sys_covariance(s["mod"], s["layout"], 0.015, K=K, seed=3)
    C = Cs.C
    np.testing.assert_array_equal(C, C.T)
    w = np.linalg.eigvalsh(C)
    assert w.min() >= -1e-10 * np.trace(C)
    n_units = len(s["layout"].units())
    assert np.linalg.matrix_rank(C, tol=1e-10 * w.max()) <= min(K, n_units)
    # explicit accumulation of outer products in a shuffled order
    D = np.array([modulate_counts(s["mod"], draw_zeropoints(
        s["layout"], 0.015, int(np.random.SeedSequence([3, k]).generate_state(1)[0]))) for k in range(K)])
    acc = np.zeros_like(C)
    for k in np.random.default_rng(0).permutation(K):
        acc += np.outer(D[k], D[k])
    np.testing.assert_allclose(acc / K, C, rtol=0, atol=1e-12 * np.abs(C).max())


def test_filter_null_systematics(setup):
    C = setup["model"].covariance(FID)
    basis, rep = build_filtered_basis(C, np.zeros((len(C), len(C))))
    plain = kl_decompose(C)
    assert rep.n_rejected == 0
    np.testing.assert_array_equal(basis.kept, plain.kept)
    np.testing.assert_array_equal(basis.eigenvalues, plain.eigenvalues)


def test_filter_rank_one():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(40, 40))
    C = A @ A.T / 40 + np.eye(40)
    u = rng.normal(size=40)
    u /= np.linalg.norm(u)
    basis, rep = build_filtered_basis(C, 1e6 * np.outer(u, u), keep=10)
    assert rep.n_rejected == 1
    b = basis.eigenvectors[:, rep.rejected[0]]
    assert abs(b @ u) > 0.99
    assert rep.rejected[0] not in basis.kept and basis.m == 10
    with pytest.raises(ValueError):
        build_filtered_basis(C, 1e6 * np.eye(40))
    with pytest.raises(ValueError):
        build_filtered_basis(C, np.zeros((39, 39)))


def test_flagged_modes_bounded_by_units(setup):
    s = setup
    Cs = ensemble_sys_covariance(s["mod"], s["layout"], 0.015, K=100, seed=5)
    _, rep = build_filtered_basis(s["model"].covariance(FID), Cs, amplification=1e4)
    n_units = len(s["layout"].units())
    assert 0 < rep.n_rejected <= n_units


def test_three_arms_null_and_deterministic(setup):
    s = setup
    Cs = ensemble_sys_covariance(s["mod"], s["layout"], 0.0, K=10, seed=1)
    models = s["model"]
    rep = inject_and_test(s["xvs"][:1], models, FID, s["mod"], s["layout"], Cs, 0.0, seed=2)
    peaks = {r["arm"]: r["peak"] for r in rep.rows}
    assert peaks["clean"] == peaks["injected_unfiltered"] == peaks["injected_filtered"]
    np.testing.assert_array_equal(rep.biases("injected_unfiltered"), 0.0)

    Cs = ensemble_sys_covariance(s["mod"], s["layout"], 0.015, K=20, seed=1)
    a = inject_and_test(s["xvs"][:1], models, FID, s["mod"], s["layout"], Cs, 0.015, seed=2).to_text()
    b = inject_and_test(s["xvs"][:1], models, FID, s["mod"], s["layout"], Cs, 0.015, seed=2).to_text()
    assert a == b
    assert a.splitlines()[1] == "mock,arm,peak,bias,delta_lnL"


def test_flagged_modes_bounded_by_rank():
    rng = np.random.default_rng(10)
    A = rng.normal(size=(30, 30))
    C = A @ A.T / 30 + np.eye(30)
    U = rng.normal(size=(30, 3))
    _, rep = build_filtered_basis(C, 1e-3 * U @ U.T, amplification=1e6)
    assert rep.n_rejected == 3
