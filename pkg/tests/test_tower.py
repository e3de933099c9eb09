import numpy as np
import pytest

from kmsflow import tower as tw
from kmsflow.errors import NotInRelativeCommutant, NotPositive, SizeTooLarge, UnsupportedTarget
from kmsflow.matcore import Rng, sample


@pytest.fixture(scope="module")
def n3():
    return tw.build_model("diag_in_matn", 3, tensor=True)


def test_lambda_and_pp_constant():
    assert tw.InclusionModel("diag_in_matn", 4).lam == 0.25
    m = tw.InclusionModel("full_mat", 2)
    assert m.lam == 0.25 and m.pp_constant == 0.25


def test_size_gates():
    with pytest.raises(SizeTooLarge):
        tw.InclusionModel("diag_in_matn", tw.MAX_SCHUR_N + 1)
    with pytest.raises(SizeTooLarge):
        tw.TensorRep(tw.MAX_TENSOR_N + 1)
    with pytest.raises(UnsupportedTarget):
        tw.build_model("full_mat", 2, tensor=True)


def test_tensor_invariants(n3):
    _, tr = n3
    assert max(tr.invariant_residuals.values()) <= 1e-12


def test_fourier_of_matrix_units(n3):
    # F(E_jj (x) I (x) E_kk) = n^(-1/2) E_kj
    model, tr = n3
    C = np.zeros((3, 3))
    C[0, 2] = 1
    want = np.zeros((3, 3))
    want[2, 0] = 3 ** -0.5
    assert np.abs(tr.fourier(tr.emb_Nprime(C)) - want).max() < 1e-12
    assert np.abs(tw.fourier(model, C) - want).max() < 1e-15


def test_convolution_is_scaled_schur_product(n3):
    model, tr = n3
    rng = Rng(5)
    X, Y = rng.cnormal((3, 3)), rng.cnormal((3, 3))
    assert np.allclose(tw.convolve(model, X, Y), np.sqrt(3) * X * Y)
    assert np.abs(tr.convolve(X, Y) - tw.convolve(model, X, Y)).max() < 1e-12


def test_identity_multiplier_acts_as_identity():
    for kind, n in (("diag_in_matn", 3), ("full_mat", 2)):
        m = tw.InclusionModel(kind, n)
        x = Rng(1).cnormal((n, n))
        assert np.abs(m.channel(m.identity_multiplier, x) - x).max() < 1e-13


def test_e2_multiplier_scales_by_sqrt_lambda():
    m = tw.InclusionModel("diag_in_matn", 3)
    x = Rng(2).cnormal((3, 3))
    assert np.abs(m.channel(m.e2, x) - x / np.sqrt(3)).max() < 1e-13


def test_channel_is_bimodular():
    m = tw.InclusionModel("diag_in_matn", 4)
    rng = Rng(3)
    X, x = rng.cnormal((4, 4)), rng.cnormal((4, 4))
    d1, d2 = np.diag(rng.normal(4)), np.diag(rng.normal(4))
    assert np.abs(m.channel(X, d1 @ x @ d2) - d1 @ m.channel(X, x) @ d2).max() < 1e-12


def test_hat_delta_fixes_e2_and_is_trivial_on_diagonals():
    m = tw.InclusionModel("diag_in_matn", 3)
    rho = sample(Rng(4), "density", 3)
    Dl = tw.hat_delta_from_density(m, rho)
    assert np.abs(Dl @ m.xi - m.xi).max() < 1e-12
    assert np.linalg.eigvalsh(0.5 * (Dl + Dl.conj().T)).min() > -1e-12
    assert np.allclose(tw.hat_delta_from_density(m, np.diag([1.0, 2.0, 3.0])), np.eye(3))
    with pytest.raises(NotPositive):
        tw.hat_delta_from_density(m, np.diag([1.0, 0.0, 1.0]))


def test_pimsner_popa_inequality():
    m = tw.InclusionModel("diag_in_matn", 3)
    rng = Rng(6)
    for _ in range(100):
        G = rng.cnormal((3, 3))
        x = G @ G.conj().T
        assert np.linalg.eigvalsh(m.EN(x) - m.pp_constant * x).min() > -1e-12


def test_pp_identities(n3):
    model, tr = n3
    assert max(tr.pp_identities(tw.pp_basis(model))) < 1e-12


def test_relative_commutant_check(n3):
    _, tr = n3
    tr.check_Nprime(tr.emb_Nprime(np.eye(3)))
    with pytest.raises(NotInRelativeCommutant):
        tr.check_Nprime(tr.emb_M(np.roll(np.eye(3), 1, axis=0)))


def test_contragredient_is_transpose():
    X = Rng(7).cnormal((3, 3))
    assert np.array_equal(tw.contragredient(X), X.T)


def test_oracle_suite_small():
    res = tw.oracle_suite(2, Rng(8), count=20)
    assert max(res.values()) <= 1e-10
