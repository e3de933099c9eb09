import warnings

import numpy as np
import pytest
import scipy.linalg as sla

from kmsflow import semigroup as sg
from kmsflow.errors import (ConstraintViolated, InvalidMu, NegativeL0, NegativeTime,
                            PreconditionViolated)
from kmsflow.matcore import Rng
from kmsflow.tower import InclusionModel


@pytest.fixture(scope="module")
def ex2():
    return sg.build_example_n3(2.0)


def _cm_jumps(r0=0.6, q=0.3):
    r1 = 1 - r0
    p = q * r0 / r1
    V = [np.sqrt(p) * np.array([[0, 1], [0, 0]]), np.sqrt(q) * np.array([[0, 0], [1, 0]]),
         np.diag([np.sqrt(1 - q), np.sqrt(1 - p)])]
    return V, np.diag([r0, r1])


def test_coords_roundtrip():
    for kind, n in (("diag_in_matn", 3), ("full_mat", 2)):
        m = InclusionModel(kind, n)
        c = Rng(1).cnormal(m.m)
        assert np.allclose(sg.coords(m, sg.from_coords(m, c)), c)


def test_example_h_frozen(ex2):
    # the weak part at mu = 2 carries -1/12 and +1/12 on the last two entries
    h = sg.example_n3_h(2.0)
    assert np.allclose(np.diag(h), [0.0, -1 / 12, 1 / 12], atol=1e-15)
    assert np.allclose(ex2.y.imag, h, atol=1e-14)


def test_example_one_star_L0_frozen(ex2):
    assert np.allclose(ex2.g, np.sqrt(3) * np.diag([7 / 6, 2 / 3, 2 / 3]), atol=1e-13)


@pytest.mark.parametrize("mu", [0.5, 2.0, 5.0])
def test_example_is_kms(mu):
    rep = sg.verify_kms(sg.build_example_n3(mu))
    assert rep.all_pass, rep.as_records()
    assert not rep["gns_commutation_diagnostic"]["pass"]


def test_gns_variant_commutes():
    rep = sg.verify_kms(sg.build_example_n3(2.0, gns=True))
    assert rep.all_pass and rep["gns_commutation_diagnostic"]["pass"]


def test_example_rejects_bad_mu():
    with pytest.raises(InvalidMu):
        sg.build_example_n3(0.0)
    with pytest.warns(UserWarning):
        sg.build_example_n3(1.0)


def test_decompose_recovers_assembled_parts(ex2):
    again = sg.decompose(ex2.model, ex2.Lhat, ex2.delta)
    assert np.abs(again.L0 - ex2.L0).max() < 1e-14
    assert np.abs(again.y - ex2.y).max() < 1e-14


def test_decompose_rejects_negative_L0():
    m = InclusionModel("diag_in_matn", 3)
    with pytest.raises(NegativeL0):
        sg.decompose(m, m.identity_multiplier + (np.eye(3) - m.e2), np.eye(3))


def test_generator_parts_add_up(ex2):
    x = Rng(3).cnormal((3, 3))
    total = sg.laplacian_apply(ex2, x) + sg.weak_part_apply(ex2, x)
    assert np.abs(total - sg.generator_apply(ex2, x)).max() < 1e-13


def test_laplacian_dual_is_adjoint(ex2):
    rng = Rng(4)
    x, y = rng.cnormal((3, 3)), rng.cnormal((3, 3))
    lhs = np.trace(sg.laplacian_apply(ex2, x).conj().T @ y)
    rhs = np.trace(x.conj().T @ sg.laplacian_dual_apply(ex2, y))
    assert abs(lhs - rhs) < 1e-13


def test_semigroup_apply_matches_expm():
    rng = Rng(5)
    for gen in (sg.symmetric_schur(3, rng), sg.build_example_n3(2.0)):
        x = rng.cnormal((3, 3))
        want = (sla.expm(-0.7 * sg.superop(gen, "a")) @ x.reshape(-1)).reshape(3, 3)
        assert np.abs(sg.semigroup_apply(gen, 0.7, x) - want).max() < 1e-12
    with pytest.raises(NegativeTime):
        sg.semigroup_apply(gen, -1.0, x)


def test_solve_h_fixes_y_condition():
    gen = sg.random_kms_schur(4, Rng(6))
    c = sg.coords(gen.model, gen.y)
    cs = sg.coords(gen.model, gen.y.conj().T)
    assert np.abs(gen.delta.T @ cs - c).max() < 1e-12


def test_random_and_symmetric_generators_verify():
    rng = Rng(7)
    for gen in (sg.random_kms_schur(3, rng), sg.random_kms_schur(4, rng), sg.symmetric_schur(4, rng)):
        assert sg.verify_kms(gen).all_pass


def test_limit_map_is_idempotent_projection(ex2):
    D = np.diag([1.0, 2.0, 0.5]) + 0.1
    once = sg.limit_channel_dual(ex2, D)
    twice = sg.limit_channel_dual(ex2, once)
    assert np.abs(once - twice).max() < 1e-12
    assert np.abs(sg.semigroup_apply(ex2, 50.0, D, which="a*") - once).max() < 1e-8


def test_build_from_L0_preconditions():
    m = InclusionModel("diag_in_matn", 3)
    L0 = 0.5 * (np.eye(3) - m.e2)
    with pytest.raises(PreconditionViolated):
        sg.build_from_L0(m, L0, np.eye(3))
    P = np.eye(3) - m.e2
    gen = sg.build_from_L0(m, P * 1.5 / np.sqrt(3), np.eye(3))
    assert sg.verify_kms(gen).all_pass


def test_sandwich_rejects_non_orthogonal_delta():
    m = InclusionModel("diag_in_matn", 3)
    H = np.eye(3) - m.e2
    with pytest.raises(PreconditionViolated):
        sg.build_sandwich(m, H, np.diag([1.0, 2.0, 3.0]))


def test_carlen_maas_stationary_state():
    V, rho = _cm_jumps()
    gen = sg.build_carlen_maas(V, rho)
    rep = sg.verify_kms(gen)
    assert rep.all_pass
    # tau-normalized stationary state is rho scaled by d
    assert np.abs(sg.stationary_state(gen) - 2 * rho).max() < 1e-12
    assert not rep["tau_invariance_diagnostic"]["pass"]


def test_carlen_maas_constraints():
    V, rho = _cm_jumps()
    with pytest.raises(ConstraintViolated):
        sg.build_carlen_maas(V, np.diag([0.5, 0.5]))
    with pytest.raises(ConstraintViolated):
        sg.build_carlen_maas([2 * v for v in V], rho)


def test_relative_ergodicity_fails_for_degenerate_L0():
    m = InclusionModel("diag_in_matn", 3)
    # rank one L0 = v v^T with v = (1, 1, -2) kills the rate between sites 1 and 2
    v = np.array([1.0, 1.0, -2.0])
    H = np.outer(v, v) / 6.0
    gen = sg.assemble(m, H, 0.5 * m.one_star(H), np.eye(3))
    ok, kern, det = sg.relative_ergodicity(gen)
    assert not ok and not det["rates_ok"]
