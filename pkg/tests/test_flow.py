import math

import numpy as np
import pytest

from kmsflow import clifford as cl
from kmsflow import directional as dr
from kmsflow import flow as fl
from kmsflow import semigroup as sg
from kmsflow.errors import (CalibrationFailed, InconsistentSystem, NegativeTime, NoLinearRelation,
                            NotCalibrated, OutOfRange)
from kmsflow.matcore import Rng, sample


@pytest.fixture(scope="module")
def sym():
    gen = sg.symmetric_schur(3, Rng(1))
    return gen, dr.build_frame(gen, Rng(0))


@pytest.fixture(scope="module")
def cliff():
    cm = cl.build_clifford(0.7, 2.0)
    fr = dr.build_frame(cm.gen, Rng(0))
    return cm, fr, fl.reference_density(fr, Rng(0))


def test_rel_entropy_values():
    # tau-normalized: (1.5 log 1.5 + 0.5 log 0.5) / 2
    want = (1.5 * math.log(1.5) + 0.5 * math.log(0.5)) / 2
    assert fl.rel_entropy(np.diag([1.5, 0.5]), np.eye(2)) == pytest.approx(want, rel=1e-14)
    D = sample(Rng(2), "density", 3)
    assert abs(fl.rel_entropy(D, D)) < 1e-14


def test_nominal_kappa():
    from kmsflow.tower import InclusionModel

    assert fl.nominal_kappa(InclusionModel("diag_in_matn", 3)) == pytest.approx(3 ** 1.5 / 2)
    assert fl.nominal_kappa(InclusionModel("full_mat", 2)) == pytest.approx(4.0)


def test_calibration_exact_in_symmetric_case(sym):
    gen, fr = sym
    rep = fl.calibrate(fr)
    assert rep.strict and rep.convention == "pair"
    assert rep.kappa == pytest.approx(rep.nominal_kappa, rel=1e-12)
    assert rep.max_residual < 1e-12 and rep.kappa_spread < 1e-12
    D = sample(Rng(3), "density", 3)
    got = fl.laplacian_dual_flowform(fr, D, rep)
    assert np.abs(got - sg.laplacian_dual_apply(gen, D)).max() < 1e-12


def test_calibration_exact_for_balanced_clifford():
    cm = cl.build_clifford(0.5, 2.0)
    rep = fl.calibrate(dr.build_frame(cm.gen, Rng(0)))
    assert rep.convention == "pair"
    assert rep.kappa == pytest.approx(4.0, rel=1e-12)


def test_calibration_fails_for_n3_example():
    # no weight convention represents this generator as a gradient flow
    with pytest.raises(CalibrationFailed) as exc:
        fl.calibrate(dr.build_frame(sg.build_example_n3(2.0), Rng(0)))
    assert exc.value.residual > 0.1


def test_flowform_needs_calibration(sym):
    with pytest.raises(NotCalibrated):
        fl.laplacian_dual_flowform(sym[1], np.eye(3), None)


def test_hidden_density_symmetric_is_identity(sym):
    hd = fl.hidden_density(sym[1])
    assert hd.kind == "hidden"
    assert np.abs(hd.D - np.eye(3)).max() < 1e-12


def test_hidden_density_inconsistent_falls_back(cliff):
    cm, fr, ref = cliff
    with pytest.raises(InconsistentSystem):
        fl.hidden_density(fr, Rng(0))
    assert ref.kind == "stationary"
    assert np.abs(ref.D - np.diag([2.0, 0.5])).max() < 1e-12


def test_balanced_clifford_hidden_density():
    fr = dr.build_frame(cl.build_clifford(0.5, 2.0).gen, Rng(0))
    assert np.abs(fl.hidden_density(fr).D - np.diag([2.0, 0.5])).max() < 1e-12


def test_metric_speed_range(sym):
    _, fr = sym
    with pytest.raises(OutOfRange):
        fl.metric_speed(fr, np.eye(3), np.eye(3))
    assert fl.metric_speed(fr, np.eye(3), np.zeros((3, 3))) == 0.0


def test_speed_equals_gradient_norm_in_symmetric_case(sym):
    gen, fr = sym
    ref = fl.reference_density(fr)
    D = sample(Rng(4), "density", 3)
    sp = fl.metric_speed(fr, D, -sg.laplacian_dual_apply(gen, D))
    g2 = fl.grad_norm_sq(fr, D, ref.log)
    assert sp ** 2 == pytest.approx(g2, rel=1e-9)


def test_fisher_matches_gradient_norm(sym):
    gen, fr = sym
    ref = fl.reference_density(fr)
    D = sample(Rng(5), "density", 3)
    kappa = fl.nominal_kappa(gen.model)
    assert fl.fisher_information(gen, D, ref.log) == pytest.approx(kappa * fl.grad_norm_sq(fr, D, ref.log),
                                                                   rel=1e-10)


def test_integrate_matches_closed_form(sym):
    gen, fr = sym
    D0 = sample(Rng(6), "density", 3)
    tr = fl.integrate(gen, fr, D0, 2.0, 0.01, fl.reference_density(fr))
    assert np.abs(tr.densities[-1] - fl.closed_form(gen, D0, 2.0)).max() < 1e-10
    assert np.all(np.diff(tr.entropies) <= 1e-14)
    assert tr.halvings == 0


def test_integrate_arguments(sym):
    gen, fr = sym
    with pytest.raises(NegativeTime):
        fl.integrate(gen, fr, np.eye(3), -1.0, 0.1)


def test_csv_header(sym):
    gen, fr = sym
    tr = fl.integrate(gen, fr, sample(Rng(7), "density", 3), 0.1, 0.05, speeds=True)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,entropy,speed,bound,slack"
    assert len(lines) == 4
    assert lines[1].split(",")[3] == ""


def test_rederived_inequalities_hold_for_clifford(cliff):
    cm, fr, ref = cliff
    gen = cm.gen
    F = sg.limit_F(gen)
    beta = cl.beta(cm)
    Ds = [sample(Rng(100 + i), "density", 2) for i in range(20)]
    assert min(fl.lsi_check(gen, fr, D, beta, ref, "rederived", F) for D in Ds) >= -1e-9
    assert min(fl.entropy_decay_check(gen, fr, D, beta, 5.0, ref, constants="rederived", F=F) for D in Ds) >= -1e-9


def test_nominal_constants_fail_for_clifford(cliff):
    cm, fr, ref = cliff
    D = sample(Rng(8), "density", 2)
    assert fl.lsi_check(cm.gen, fr, D, cl.beta(cm), ref) < 0


def test_empirical_beta_is_tight(sym):
    gen, fr = sym
    ref = fl.reference_density(fr)
    Ds = [sample(Rng(200 + i), "density", 3) for i in range(5)]
    b = fl.empirical_beta(gen, fr, Ds, ref, constants="rederived")
    assert b > 0
    assert min(fl.lsi_check(gen, fr, D, b, ref, "rederived") for D in Ds) >= -1e-9
    worse = 1.1 * b
    assert (min(fl.lsi_check(gen, fr, D, worse, ref, "rederived") for D in Ds) < 0
            or min(fl.entropy_decay_check(gen, fr, D, worse, 5.0, ref, constants="rederived") for D in Ds) < 0)


def test_talagrand_symmetric_rederived(sym):
    gen, fr = sym
    ref = fl.reference_density(fr)
    Ds = [sample(Rng(5), "density", 3) for _ in range(5)]
    b = fl.empirical_beta(gen, fr, Ds, ref, constants="rederived")
    r = fl.talagrand_check(gen, fr, sample(Rng(6), "density", 3), b, ref, constants="rederived")
    assert r.margin >= -1e-6
    assert r.tail < 1e-6 * r.distance * 10


def test_talagrand_at_equilibrium(sym):
    gen, fr = sym
    ref = fl.reference_density(fr)
    r = fl.talagrand_check(gen, fr, np.eye(3, dtype=complex), 1.0, ref)
    assert r.distance == 0.0 and r.margin == r.bound


def test_intertwining_detect_rejects_unrelated():
    rng = Rng(9)
    L = rng.normal((4, 4))
    ds = [rng.normal((4, 4)), rng.normal((4, 4))]
    with pytest.raises(NoLinearRelation):
        fl.intertwining_detect(L, ds)


def test_intertwining_detect_commuting():
    L = np.diag([0.0, 1.0, 2.0, 3.0])
    # d L - L d = d for a shift that raises the eigenvalue by one
    d = np.diag([1.0, 1.0, 1.0], k=-1)
    r = fl.intertwining_detect(L, [d])
    assert r.B[0, 0] == pytest.approx(-1.0)
    assert r.exp_residual < 1e-12
