import dataclasses

import numpy as np
import pytest
import scipy.linalg as sla

from kmsflow import directional as dr
from kmsflow import semigroup as sg
from kmsflow.errors import NotPositive
from kmsflow.matcore import Rng, sample


@pytest.fixture(scope="module")
def frame2():
    return dr.build_frame(sg.build_example_n3(2.0), Rng(0))


def _conj(rng, mats):
    U = sample(rng, "unitary", mats[0].shape[0])
    return [U @ m @ U.conj().T for m in mats]


# algebra ---------------------------------------------------------------------

def test_generate_algebra_dimensions():
    assert len(dr.generate_algebra([np.eye(3)])) == 1
    assert len(dr.generate_algebra([np.diag([1.0, 2.0, 3.0])])) == 3
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    Z = np.diag([1.0, -1.0]).astype(complex)
    assert len(dr.generate_algebra([X, Z])) == 4


@pytest.mark.parametrize("dims", [(1, 2, 2), (3,), (1, 1, 2), (2, 3)])
def test_block_decompose_planted(dims):
    rng = Rng(sum(dims) * 7 + len(dims))
    gens = [sla.block_diag(*[rng.cnormal((d, d)) for d in dims]) for _ in range(2)]
    alg = dr.generate_algebra(_conj(rng, gens))
    dec = dr.block_decompose(alg, rng)
    assert dec.dims == sorted(dims, reverse=True)
    assert dec.relation_residual() < 1e-9 and dec.unit_residual() < 1e-9


def test_block_decompose_with_multiplicity():
    rng = Rng(3)
    A, B = rng.cnormal((2, 2)), rng.cnormal((2, 2))
    gens = [sla.block_diag(np.kron(A, np.eye(2)), rng.cnormal((1, 1))),
            sla.block_diag(np.kron(B, np.eye(2)), rng.cnormal((1, 1)))]
    dec = dr.block_decompose(dr.generate_algebra(gens))
    assert dec.dims == [2, 1]
    assert dec.unit_residual() < 1e-9


def test_block_decompose_duality_on_diagonal_algebra():
    dec = dr.block_decompose(dr.generate_algebra([np.diag([1.0, 2.0, 3.0])]), require_dual=True)
    assert dec.dims == [1, 1, 1]
    assert dec.dual_residual() < 1e-12


# frame ---------------------------------------------------------------------

def test_example_frame_structure(frame2):
    rec = frame2.to_record()
    assert rec["rank"] == 2
    assert rec["block_dims"] == [2]
    assert np.allclose(sorted(frame2.mu), [2 ** -0.5, 2 ** 0.5], atol=1e-12)
    assert max(frame2.diagnostics.values()) < 1e-10
    assert np.all(frame2.omega > 0)


def test_u_diagonalizes_compression(frame2):
    u, a = frame2.u, frame2.a
    assert np.abs(u.conj().T @ a @ u - np.diag(frame2.mu)).max() < 1e-12


def test_factorized_pi_matches(frame2):
    for conv in ("pair", "column"):
        assert np.abs(frame2.Pi_factorized(conv) - frame2.Pi(conv)).max() < 1e-12


def test_unknown_convention(frame2):
    with pytest.raises(ValueError):
        frame2.weights("nope")
    with pytest.raises(ValueError):
        dr.apply_K(frame2, np.eye(3), np.zeros((2, 3, 3, 3)), "pair")


# calculus ------------------------------------------------------------------

def test_gradient_kills_N(frame2):
    G = dr.gradient(frame2, np.diag([1.0, -2.0, 0.5]))
    assert np.abs(G).max() < 1e-14


def test_adjointness_random(frame2):
    rng = Rng(11)
    m = frame2.model
    for _ in range(10):
        x = rng.cnormal((3, 3))
        Y = rng.cnormal((frame2.r, 3, 3, m.m))
        lhs = dr.grad_inner(frame2, dr.gradient(frame2, x), Y)
        rhs = m.tau(x.conj().T @ dr.divergence(frame2, Y))
        assert abs(lhs - rhs) < 1e-12


def test_K_at_mu_one_and_scalar_D():
    rng = Rng(12)
    v = rng.cnormal((3, 3, 1))
    # K_{cI, mu} is multiplication by the log mean of c/mu and c mu
    c, mu = 2.0, 3.0
    want = (c * mu - c / mu) / np.log(mu * mu)
    assert np.abs(dr.K_apply(c * np.eye(3), mu, v) - want * v).max() < 1e-13
    assert np.abs(dr.K_apply(c * np.eye(3), 1.0, v) - c * v).max() < 1e-13


def test_K_is_positive_on_hermitian_pairing():
    rng = Rng(13)
    D = sample(rng, "density", 3)
    v = rng.cnormal((3, 3))
    val = np.vdot(v, dr.K_apply(D, 1.7, v[:, :, None])[:, :, 0])
    assert val.real > 0 and abs(val.imag) < 1e-12


def test_K_rejects_non_positive_D():
    with pytest.raises(NotPositive):
        dr.K_apply(np.diag([1.0, -1.0]), 1.0, np.zeros((2, 2, 1)))


def test_weighted_gram_positive_and_broken_control(frame2):
    D = sample(Rng(14), "density", 3)
    lo, herm = dr.check_weighted_positive(frame2, D)
    assert lo > 0 and herm < 1e-12
    omega = frame2.omega.copy()
    omega[-1] = -omega[-1]
    with pytest.raises(NotPositive):
        dr.check_weighted_positive(dataclasses.replace(frame2, omega=omega), D)


def test_weighted_norm(frame2):
    D = sample(Rng(15), "density", 3)
    G = dr.gradient(frame2, Rng(16).cnormal((3, 3)))
    assert dr.weighted_norm(frame2, D, G) > 0
    with pytest.raises(NotPositive):
        dr.weighted_norm(frame2, D, np.zeros_like(G))


def test_kernel_characterizations_agree(frame2):
    assert dr.kernel_equiv_check(frame2, np.diag([1.0, 2.0, 3.0])) == (True, True, True, True)
    E12 = np.zeros((3, 3))
    E12[0, 1] = 1
    assert dr.kernel_equiv_check(frame2, E12) == (False, False, False, False)


def test_frame_for_random_generators():
    rng = Rng(17)
    for n in (3, 4):
        fr = dr.build_frame(sg.random_kms_schur(n, rng), rng)
        assert max(fr.diagnostics.values()) < 1e-8
        assert fr.r == n - 1
        assert fr.decomposition.relation_residual() < 1e-9
