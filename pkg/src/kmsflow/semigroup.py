"""Bimodule quantum Markov semigroup generators.

A generator is carried by its Fourier multiplier ``Lhat`` in the
coordinates of :mod:`kmsflow.tower`.  Conventions used throughout:

    L(x)   = Phi_Lhat(x) = y* x + x y - Phi_L0(x)
    L_a(x) = 1/2 {g, x} - Phi_L0(x),    g = 1*L0
    L_w(x) = i [x, Im E_M(F^-1(L1))]

The modular data Delta is the matrix that enters the KMS sandwich
L^T = Delta^T L Delta^T.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (ConstraintViolated, InvalidMu, NegativeL0, NegativeTime,
                     NotErgodic, PreconditionViolated)
from .matcore import Rng, herm_eig, powm
from .tower import InclusionModel

RANGE_CUTOFF = 1e-10
KMS_TOL = 1e-9
RATE_TOL = 1e-10


@dataclass
class Generator:
    model: InclusionModel
    Lhat: np.ndarray
    L0: np.ndarray
    L1: np.ndarray
    L1_dual: np.ndarray
    scalar_part: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def g(self):
        return self.model.one_star(self.L0)

    @property
    def m(self):
        return self.model.m


def coords(model: InclusionModel, A):
    """Coefficients c with A = sum c_i a_i."""
    return np.einsum("iab,ba->i", model.a, np.asarray(A)) / model.n


def from_coords(model: InclusionModel, c):
    return np.einsum("i,iab->ab", c, model.a)


def _im(A):
    return (A - A.conj().T) / 2j


def range_projection(X, cutoff=RANGE_CUTOFF):
    U, s, _ = np.linalg.svd(np.asarray(X))
    if s.size == 0 or s[0] == 0:
        return np.zeros_like(X)
    r = int(np.sum(s > cutoff * s[0]))
    Ur = U[:, :r]
    return Ur @ Ur.conj().T


def decompose(model: InclusionModel, Lhat, delta, label="") -> Generator:
    Lhat = np.asarray(Lhat, dtype=complex)
    P = model.e2
    Q = np.eye(model.m) - P
    L0 = -Q @ Lhat @ Q
    L0h = 0.5 * (L0 + L0.conj().T)
    lo = herm_eig(L0h).values.min()
    if lo < -1e-9:
        raise NegativeL0("L0 has a negative eigenvalue", residual=float(lo))
    L1 = P @ Lhat @ Q
    L1d = Q @ Lhat @ P
    sc = P @ Lhat @ P
    g = model.one_star(L0)
    y = 0.5 * g + 1j * _im(model.EM(model.finv(L1)))
    return Generator(model, Lhat, L0, L1, L1d, sc, y, np.asarray(delta, dtype=complex), label)


def assemble(model: InclusionModel, L0, y, delta, label="") -> Generator:
    """Generator with L(x) = y* x + x y - Phi_L0(x)."""
    c = coords(model, np.asarray(y).conj().T)
    xi = model.xi
    Lhat = (np.outer(c, xi.conj()) + np.outer(xi, c.conj())) / np.sqrt(model.lam) - np.asarray(L0)
    return decompose(model, Lhat, delta, label)


def solve_h(model: InclusionModel, L0, delta):
    """Self-adjoint h in N making y = g/2 + i h satisfy Delta^T c(y*) = c(y)."""
    g = model.one_star(L0)
    Dt = np.asarray(delta).T
    I = np.eye(model.m)
    cg = coords(model, g / 2)
    ch = -1j * np.linalg.lstsq(Dt + I, (Dt - I) @ cg, rcond=None)[0]
    h = from_coords(model, ch)
    h = 0.5 * (h + h.conj().T)
    return model.EN(h) if model.kind == "diag_in_matn" else h


# ---------------------------------------------------------------------------
# application


def laplacian_apply(gen: Generator, x):
    g = gen.g
    return 0.5 * (g @ x + x @ g) - gen.model.channel(gen.L0, x)


def laplacian_dual_apply(gen: Generator, y):
    g = gen.g.conj().T
    return 0.5 * (g @ y + y @ g) - gen.model.channel(gen.L0.conj(), y)


def weak_part_apply(gen: Generator, x):
    h = _im(gen.model.EM(gen.model.finv(gen.L1)))
    return 1j * (x @ h - h @ x)


def generator_apply(gen: Generator, x):
    return gen.model.channel(gen.Lhat, x)


def schur_rates(gen: Generator):
    """c_jk with (L_a x)_jk = c_jk x_jk, diag_in_matn only."""
    if gen.model.kind != "diag_in_matn":
        raise ValueError("schur_rates needs diag_in_matn")
    G = np.sqrt(gen.model.n) * gen.L0
    d = np.diag(G)
    return 0.5 * (d[:, None] + d[None, :]) - G


def gradient_form(gen: Generator, x, y, part="full"):
    L = generator_apply if part == "full" else laplacian_apply
    yd = np.asarray(y).conj().T
    return 0.5 * (yd @ L(gen, x) + L(gen, y).conj().T @ x - L(gen, yd @ x))


def superop(gen: Generator, which="a"):
    fn = {"a": laplacian_apply, "a*": laplacian_dual_apply, "full": generator_apply,
          "w": weak_part_apply}[which]
    return gen.model.superop(lambda x: fn(gen, x))


def semigroup_apply(gen: Generator, t: float, x, which="a"):
    if t < 0:
        raise NegativeTime(f"t={t} < 0")
    x = np.asarray(x, dtype=complex)
    if which in ("a", "a*") and gen.model.kind == "diag_in_matn":
        c = schur_rates(gen)
        return np.exp(-t * (c if which == "a" else c.conj())) * x
    S = superop(gen, which)
    n = gen.model.n
    return (sla.expm(-t * S) @ x.reshape(-1)).reshape(n, n)


# ---------------------------------------------------------------------------
# kernels and limits


def _null_basis(S, tol=1e-9):
    U, s, Vh = np.linalg.svd(S)
    scale = max(s[0], 1.0) if s.size else 1.0
    r = int(np.sum(s > tol * scale))
    return Vh[r:].conj().T


def laplacian_kernel(gen: Generator, tol=1e-9):
    n = gen.model.n
    K = _null_basis(superop(gen, "a"), tol)
    return [K[:, j].reshape(n, n) for j in range(K.shape[1])]


def relative_ergodicity(gen: Generator):
    """(flag, kernel basis, details)."""
    L0 = gen.L0
    R = range_projection(L0)
    RT = range_projection(L0.T)
    range_res = float(np.abs(R - RT).max())
    kern = laplacian_kernel(gen)
    model = gen.model
    dimN = model.n if model.kind == "diag_in_matn" else 1
    in_N = all(model.in_N(k, 1e-8) for k in kern)
    if model.kind == "diag_in_matn":
        c = schur_rates(gen)
        off = ~np.eye(model.n, dtype=bool)
        rates_ok = bool(np.all(c.real[off] > RATE_TOL)) if model.n > 1 else True
    else:
        rates_ok = True
    ok = range_res <= 1e-9 and len(kern) == dimN and in_N and rates_ok
    return ok, kern, {"range_residual": range_res, "kernel_dim": len(kern), "rates_ok": rates_ok}


def limit_F(gen: Generator):
    """Multiplier of the spectral projection of L_a onto its kernel."""
    ok, _, _ = relative_ergodicity(gen)
    S = superop(gen, "a")
    R = _null_basis(S)
    Lft = _null_basis(S.conj().T)
    if R.shape[1] == 0 or R.shape[1] != Lft.shape[1]:
        raise NotErgodic("kernel of L_a is not semisimple")
    P = R @ np.linalg.solve(Lft.conj().T @ R, Lft.conj().T)
    F, res = gen.model.multiplier_of(P)
    if res > 1e-8:
        raise NotErgodic("limit map is not a bimodule map", residual=res)
    return F


def limit_channel_dual(gen: Generator, D):
    """E_Phi^*(D) from the limit multiplier."""
    F = limit_F(gen)
    return gen.model.channel(F.conj(), D)


def stationary_state(gen: Generator):
    """Stationary density of L_a* with tau = 1, from the limit multiplier."""
    rho = equilibrium_term(gen, np.eye(gen.model.n))
    rho = 0.5 * (rho + rho.conj().T)
    return rho / gen.model.tau(rho).real


def equilibrium_term(gen: Generator, D, F=None):
    """E_N(D) times 1*conj(F), the equilibrium density of the flow started at D."""
    if F is None:
        F = limit_F(gen)
    return gen.model.EN(D) @ gen.model.one_star(F.T)


# ---------------------------------------------------------------------------
# symmetry report


@dataclass
class SymmetryReport:
    checks: dict

    def __getitem__(self, k):
        return self.checks[k]

    @property
    def all_pass(self):
        return all(v["pass"] for k, v in self.checks.items() if not k.endswith("_diagnostic"))

    def as_records(self):
        return {k: {"pass": bool(v["pass"]), "residual": float(v["residual"])} for k, v in sorted(self.checks.items())}


def _rec(res, tol=KMS_TOL):
    return {"pass": bool(res <= tol), "residual": float(res)}


def verify_kms(gen: Generator, tol=KMS_TOL, state=None) -> SymmetryReport:
    model = gen.model
    Dl = gen.delta
    Dt = Dl.T
    c = {}
    hres = float(np.abs(Dl - Dl.conj().T).max())
    lo = herm_eig(0.5 * (Dl + Dl.conj().T)).values.min()
    c["delta_positive"] = {"pass": bool(hres <= tol and lo > 0), "residual": float(max(hres, -lo if lo <= 0 else 0.0))}
    c["delta_fixes_e2"] = _rec(float(np.abs(Dl @ model.xi - model.xi).max()), tol)
    R = range_projection(gen.Lhat)
    c["range_condition"] = _rec(float(np.abs(R @ Dt - R @ np.linalg.inv(Dl)).max()), tol)
    L = gen.Lhat
    c["sandwich"] = _rec(float(np.abs(L.T - Dt @ L @ Dt).max()), tol)
    c["part_L0"] = _rec(float(np.abs(gen.L0.T - Dt @ gen.L0 @ Dt).max()), tol)
    c["part_L1"] = _rec(float(np.abs(gen.L1.T.conj().T - gen.L1 @ Dt).max()), tol)
    cy = coords(model, gen.y)
    cys = coords(model, gen.y.conj().T)
    c["y_condition"] = _rec(float(np.abs(Dt @ cys - cy).max()), tol)
    one = np.eye(model.n)
    # unital Laplacian (so L_a* preserves the trace) with a faithful stationary state
    r1 = float(np.abs(laplacian_apply(gen, one)).max())
    sigma = stationary_state(gen) if state is None else np.asarray(state)
    r2 = float(np.abs(laplacian_dual_apply(gen, sigma)).max())
    lo_s = float(np.linalg.eigvalsh(0.5 * (sigma + sigma.conj().T)).min())
    c["equilibrium"] = {"pass": bool(max(r1, r2) <= tol and lo_s > 0), "residual": max(r1, r2)}
    c["tau_invariance_diagnostic"] = _rec(float(np.abs(laplacian_dual_apply(gen, one)).max()), tol)
    c["gns_commutation_diagnostic"] = _rec(float(np.abs(L @ Dl - Dl @ L).max()), tol)
    ok, kern, det = relative_ergodicity(gen)
    c["relatively_ergodic"] = {"pass": bool(ok), "residual": float(det["range_residual"])}
    c["fixed_point_dim"] = {"pass": True, "residual": 0.0, "value": len(kern)}
    return SymmetryReport(c)


# ---------------------------------------------------------------------------
# constructors


def build_from_L0(model: InclusionModel, L0, delta, q=None, label="from_L0") -> Generator:
    L0 = np.asarray(L0, dtype=complex)
    Dl = np.asarray(delta, dtype=complex)
    fails = {}
    lo = herm_eig(0.5 * (L0 + L0.conj().T)).values.min()
    if lo < -1e-9:
        fails["L0_positive"] = -lo
    fails["L0_e2"] = float(np.abs(L0 @ model.xi).max())
    g = model.one_star(L0)
    fails["one_star_unit"] = float(np.abs(g - np.eye(model.n)).max())
    fails["sandwich_L0"] = float(np.abs(L0.T - Dl.T @ L0 @ Dl.T).max())
    if q is not None:
        q = np.asarray(q)
        fails["q_fixed"] = float(np.abs(model.channel(L0.T, q) - q).max())
    bad = {k: v for k, v in fails.items() if v > 1e-9}
    if bad:
        k = max(bad, key=bad.get)
        raise PreconditionViolated(f"precondition {k} fails", residual=bad[k])
    Lhat = model.identity_multiplier - L0
    return decompose(model, Lhat, Dl, label)


def build_sandwich(model: InclusionModel, H0, delta, label="sandwich", check_one_star=True) -> Generator:
    """L0 = Delta^(1/2) H0 Delta^(1/2) with y fixed by the y-condition."""
    H0 = np.asarray(H0, dtype=complex)
    Dl = np.asarray(delta, dtype=complex)
    fails = {
        "H0_symmetric": float(np.abs(H0 - H0.T).max()),
        "H0_e2": float(np.abs(H0 @ model.xi).max()),
        "delta_T_inverse": float(np.abs(Dl.T - np.linalg.inv(Dl)).max()),
        "delta_e2": float(np.abs(Dl @ model.xi - model.xi).max()),
    }
    lo = herm_eig(0.5 * (H0 + H0.conj().T)).values.min()
    fails["H0_positive"] = max(0.0, -lo)
    S = powm(Dl, 0.5)
    L0 = S @ H0 @ S
    if check_one_star:
        g = model.one_star(L0)
        fails["one_star_scalar"] = float(np.abs(g - model.tau(g) * np.eye(model.n)).max())
    bad = {k: v for k, v in fails.items() if v > 1e-9}
    if bad:
        k = max(bad, key=bad.get)
        raise PreconditionViolated(f"precondition {k} fails", residual=bad[k])
    h = solve_h(model, L0, Dl)
    y = 0.5 * model.one_star(L0) + 1j * h
    return assemble(model, L0, y, Dl, label)


_OM = np.exp(2j * np.pi / 3)
_C1 = np.array([[1, _OM, _OM ** 2], [_OM ** 2, 1, _OM], [_OM, _OM ** 2, 1]]) / 3
_C2 = _C1.conj()
_J3 = np.ones((3, 3)) / 3
_H3 = 0.5 * np.array([[1, -1, 0], [-1, 1, 0], [0, 0, 0]]) + 0.5 * np.array([[1, 0, -1], [0, 0, 0], [-1, 0, 1]])


def example_n3_circulant(mu: float):
    """The circulant modular matrix of the n=3 example, before transposition."""
    return _J3 + mu * _C1 + _C2 / mu


def example_n3_h(mu: float):
    """Weak-part element solving the y-condition for the n=3 example.

    The coefficient is -1/12 at mu = 2, fixed by the full sandwich
    identity in these coordinates.
    """
    s = np.sqrt(mu)
    return 0.25 * (1 / s - s) / (1 / s + s) * np.diag([0.0, 1.0, -1.0])


def build_example_n3(mu: float, gns: bool = False) -> Generator:
    import warnings

    if mu <= 0:
        raise InvalidMu(f"mu must be positive, got {mu}")
    if mu == 1 and not gns:
        warnings.warn("mu = 1 gives Delta = I, the trace-symmetric case", stacklevel=2)
    model = InclusionModel("diag_in_matn", 3)
    # the sandwich identity holds with the transpose of this circulant
    Dl = example_n3_circulant(mu).T
    if gns:
        H = 2.0 / (mu + 1 / mu) * np.array([[1, -.5, -.5], [-.5, 1, -.5], [-.5, -.5, 1]])
    else:
        H = _H3
    S = powm(Dl, 0.5)
    L0 = S @ H @ S
    h = np.zeros((3, 3)) if gns else example_n3_h(mu)
    y = 0.5 * model.one_star(L0) + 1j * h
    gen = assemble(model, L0, y, Dl, label=("example_n3_gns" if gns else "example_n3"))
    gen.meta.update({"mu": mu, "H": H})
    return gen


def random_kms_schur(n: int, rng: Rng, strength: float = 1.0) -> Generator:
    """Random bimodule-KMS Schur generator on diag_in_matn(n).

    Delta = exp(i A) with A real antisymmetric and A u = 0, so that
    Delta^T = Delta^-1 and Delta e_2 = e_2.  L0 = Delta^(1/2) H Delta^(1/2)
    with H real, positive and H u = 0.
    """
    model = InclusionModel("diag_in_matn", n)
    P = np.eye(n) - np.ones((n, n)) / n
    A0 = rng.normal((n, n))
    A = P @ (A0 - A0.T) @ P
    A *= strength / max(np.linalg.norm(A, 2), 1e-12)
    Dl = sla.expm(1j * A)
    Dl = 0.5 * (Dl + Dl.conj().T)
    G = rng.normal((n, n))
    H = P @ G @ G.T @ P
    H /= np.trace(H) / (n - 1)
    S = powm(Dl, 0.5)
    L0 = S @ H @ S
    h = solve_h(model, L0, Dl)
    y = 0.5 * model.one_star(L0) + 1j * h
    gen = assemble(model, L0, y, Dl, label="random_kms_schur")
    gen.meta.update({"H": H})
    return gen


def symmetric_schur(n: int, rng: Rng | None = None) -> Generator:
    """Trace-symmetric ergodic generator with Delta = I."""
    model = InclusionModel("diag_in_matn", n)
    P = np.eye(n) - np.ones((n, n)) / n
    if rng is None:
        H = P.copy()
    else:
        G = rng.normal((n, n))
        H = P @ G @ G.T @ P
        H /= np.trace(H) / (n - 1)
    L0 = H.astype(complex)
    y = 0.5 * model.one_star(L0)
    return assemble(model, L0, y, np.eye(n), label="symmetric_schur")


def hat_delta_full(model: InclusionModel, rho, s: float):
    """Matrix of A -> rho^(-s) A rho^s on the inner index (full_mat)."""
    A = powm(rho, -s)
    B = powm(rho, s)
    return np.einsum("iab,bc,jcd,da->ij", model.a, A, model.a, B) / model.n


def build_carlen_maas(jump_ops, rho, delta_exponent: float = 0.5, d: int | None = None) -> Generator:
    """L = id - sum v_j* . v_j for jump operators with the two balance constraints."""
    V = [np.asarray(v, dtype=complex) for v in jump_ops]
    d = V[0].shape[0] if d is None else d
    model = InclusionModel("full_mat", d)
    rho = np.asarray(rho, dtype=complex)
    r1 = float(np.abs(sum(v.conj().T @ v for v in V) - np.eye(d)).max())
    r2 = float(np.abs(sum(v @ rho @ v.conj().T for v in V) - rho).max())
    if max(r1, r2) > 1e-9:
        raise ConstraintViolated("jump operators violate the balance constraints", residual=max(r1, r2))
    if herm_eig(rho).values.min() <= 0:
        raise ConstraintViolated("rho must be strictly positive")
    Phi = model.superop(lambda x: sum(v.conj().T @ x @ v for v in V))
    X, _ = model.multiplier_of(Phi)
    Lhat = model.identity_multiplier - X
    Dl = hat_delta_full(model, rho, delta_exponent)
    return decompose(model, Lhat, Dl, label="carlen_maas")
