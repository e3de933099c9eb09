"""Finite Jones tower models.

Two inclusions are supported:

* ``diag_in_matn(n)``: diagonal matrices inside M_n, index n.
* ``full_mat(d)``: scalars inside M_d, index d^2.

Both are handled by one coordinate system.  Pick a Hermitian basis
``a_i`` of M (orthonormal for tau = Tr/n) spanning the relevant part of
the relative commutant.  An element of M' n M_2 is an m x m matrix X
acting on that index, and the bimodule map it encodes is

    Phi_X(x) = lam^(1/2) * sum_ij X_ij a_i x a_j.

For diag_in_matn the basis is a_k = sqrt(n) E_kk.  Then X is the
familiar n x n matrix and Phi_X(x) = sqrt(n) x o X (entrywise product).

Elements of M_1 e_2 are rank-3 arrays ``T[p, s, i]`` standing for
sum T[p,s,i] E_ps (x) b_i with b_i = lam^(1/2) conj(a_i).  For
diag_in_matn this is exactly sum T[t,s,k] (E_ts (x) I (x) E_kk) e_2.

``TensorRep`` is the slow oracle for diag_in_matn.  It builds every
projection as an explicit n^3 x n^3 matrix and evaluates the defining
formulas (Fourier transform, convolution, multiplier formula) literally.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

from .errors import (ModelMismatch, NotInRelativeCommutant, NotPositive,
                     SizeTooLarge, UnsupportedTarget)
from .matcore import herm_eig, powm

KINDS = ("diag_in_matn", "full_mat")
MAX_TENSOR_N = 4
MAX_SCHUR_N = 32


def _herm_basis_full(d):
    """sqrt(d) times the HS-orthonormal Hermitian matrix basis of M_d."""
    out = []
    for j in range(d):
        for k in range(d):
            A = np.zeros((d, d), complex)
            if j == k:
                A[j, j] = 1.0
            elif j < k:
                A[j, k] = A[k, j] = 1 / np.sqrt(2)
            else:
                A[j, k] = 1j / np.sqrt(2)
                A[k, j] = -1j / np.sqrt(2)
            out.append(np.sqrt(d) * A)
    return np.array(out)


class InclusionModel:
    """A finite inclusion N in M with its first two tower levels in coordinates."""

    def __init__(self, kind: str, n: int):
        if kind not in KINDS:
            raise ValueError(f"unknown inclusion kind {kind!r}")
        if n < 1:
            raise ValueError("n must be positive")
        if n > MAX_SCHUR_N:
            raise SizeTooLarge(f"n={n} exceeds {MAX_SCHUR_N}")
        self.kind = kind
        self.n = n
        if kind == "diag_in_matn":
            self.lam = 1.0 / n
            self.pp_constant = 1.0 / n
            self.a = np.array([np.sqrt(n) * np.diag(np.eye(n)[k]).astype(complex) for k in range(n)])
            L = np.zeros((n * n, n * n))
            for j in range(n):
                v = np.zeros(n * n)
                v[j * n + j] = 1.0
                L += np.outer(v, v)
        else:
            self.lam = 1.0 / n ** 2
            self.pp_constant = 1.0 / n ** 2
            self.a = _herm_basis_full(n)
            v = np.eye(n).reshape(-1) / np.sqrt(n)
            L = np.outer(v, v)
        self.m = len(self.a)
        self.beta = np.sqrt(self.lam) * self.a.conj()
        Bm = self.beta.reshape(self.m, -1).T
        Bpinv = np.linalg.pinv(Bm)
        prods = np.einsum("iab,jbc->ijac", self.beta, self.beta).reshape(self.m, self.m, -1)
        self.f = np.einsum("kq,ijq->ijk", Bpinv, prods)
        self.tr = np.einsum("iaa->i", self.beta) / n
        self.one = Bpinv @ np.eye(n).reshape(-1)
        P4 = L.reshape(n, n, n, n)
        self.e1 = np.einsum("pqsr,iqr->psi", P4, Bpinv.reshape(self.m, n, n))
        self.xi = np.einsum("iaa->i", self.a) / n

    def __repr__(self):
        return f"InclusionModel({self.kind!r}, {self.n})"

    def same_as(self, other) -> bool:
        return isinstance(other, InclusionModel) and (self.kind, self.n) == (other.kind, other.n)

    # --- M level ---------------------------------------------------------
    def tau(self, x):
        return np.trace(x) / self.n

    def EN(self, x):
        x = np.asarray(x)
        if self.kind == "diag_in_matn":
            return np.diag(np.diag(x))
        return self.tau(x) * np.eye(self.n)

    def in_N(self, x, tol=1e-10) -> bool:
        return float(np.linalg.norm(x - self.EN(x))) <= tol * (1 + np.linalg.norm(x))

    # --- M' n M_2 ----------------------------------------------------------
    @cached_property
    def e2(self):
        return np.outer(self.xi, self.xi.conj())

    @cached_property
    def identity_multiplier(self):
        return self.e2 / np.sqrt(self.lam)

    def channel(self, X, x):
        """Phi_X(x) = lam^(1/2) sum X_ij a_i x a_j."""
        X = np.asarray(X)
        if self.kind == "diag_in_matn":
            return np.sqrt(self.n) * np.asarray(x) * X
        return np.sqrt(self.lam) * np.einsum("ij,iab,bc,jcd->ad", X, self.a, x, self.a)

    def one_star(self, X):
        return self.channel(X, np.eye(self.n, dtype=complex))

    @cached_property
    def _chan_basis(self):
        m, n = self.m, self.n
        # column (i,j) is vec(Phi_{E_ij}) as an n^2 x n^2 superoperator
        cols = np.zeros((n ** 4, m * m), complex)
        for i in range(m):
            for j in range(m):
                E = np.zeros((m, m), complex)
                E[i, j] = 1.0
                cols[:, i * m + j] = self.superop(lambda x, E=E: self.channel(E, x)).reshape(-1)
        return cols

    def superop(self, fn):
        """Matrix of a linear map on M_n acting on row-major vec(x)."""
        n = self.n
        I = np.eye(n * n)
        return np.array([np.asarray(fn(I[k].reshape(n, n))).reshape(-1) for k in range(n * n)]).T

    def multiplier_of(self, S):
        """Recover X with Phi_X equal to the superoperator S, plus the residual."""
        sol, res, *_ = np.linalg.lstsq(self._chan_basis, np.asarray(S).reshape(-1), rcond=None)
        X = sol.reshape(self.m, self.m)
        r = float(np.linalg.norm(self._chan_basis @ sol - np.asarray(S).reshape(-1)))
        return X, r

    # --- M_1 e_2 module ----------------------------------------------------
    def emb(self, x):
        return np.einsum("ps,i->psi", x, self.one)

    def mul(self, A, B):
        return np.einsum("pui,usj,ijk->psk", A, B, self.f)

    def adj(self, A):
        return np.conj(np.transpose(A, (1, 0, 2)))

    def EM(self, A):
        return np.einsum("psi,i->ps", A, self.tr)

    def tau1(self, A):
        return np.einsum("ppi,i->", A, self.tr) / self.n

    def inner(self, A, B):
        """<A e_2, B e_2> = lam tau_1(A* B)."""
        return self.lam * self.tau1(self.mul(self.adj(A), B))

    def act(self, X, T):
        return np.einsum("ij,psj->psi", X, T)

    def lm(self, x, T):
        return np.einsum("pu,usi->psi", x, T)

    def rm(self, T, x):
        return np.einsum("pui,us->psi", T, x)

    def finv(self, X):
        """Inverse Fourier transform of X, as an element of N' n M_1."""
        return self.act(X, self.e1) / np.sqrt(self.lam)

    def xi_mod(self, x):
        """lam^(-1/2)[x, e_1] in module coordinates."""
        X = self.emb(x)
        return (self.mul(X, self.e1) - self.mul(self.e1, X)) / np.sqrt(self.lam)

    def module_gram(self, Ts):
        return np.array([[self.inner(A, B) for B in Ts] for A in Ts])


def build_model(kind: str, n: int, tensor: bool = False):
    """Return the model, or (model, TensorRep) when tensor=True."""
    model = InclusionModel(kind, n)
    if not tensor:
        return model
    if kind != "diag_in_matn":
        raise UnsupportedTarget("TensorRep exists only for diag_in_matn")
    return model, TensorRep(n)


def contragredient(X):
    return np.asarray(X).T.copy()


def convolve(model: InclusionModel, X, Y):
    if model.kind != "diag_in_matn":
        raise UnsupportedTarget("convolution is exposed for diag_in_matn only")
    return np.sqrt(model.n) * np.asarray(X) * np.asarray(Y)


def fourier(model: InclusionModel, C):
    """Fourier transform of sum C[j,k] E_jj (x) I (x) E_kk."""
    if model.kind != "diag_in_matn":
        raise UnsupportedTarget("Fourier transform is exposed for diag_in_matn only")
    return np.asarray(C).T / np.sqrt(model.n)


def fourier_inv(model: InclusionModel, Y):
    if model.kind != "diag_in_matn":
        raise UnsupportedTarget("Fourier transform is exposed for diag_in_matn only")
    return np.sqrt(model.n) * np.asarray(Y).T


def channel_apply(model: InclusionModel, X, x):
    return model.channel(X, x)


def one_star(model: InclusionModel, X):
    return model.one_star(X)


def pp_basis(model: InclusionModel):
    """Cyclic shift powers, an orthogonal Pimsner-Popa basis."""
    if model.kind != "diag_in_matn":
        raise UnsupportedTarget("pp_basis is provided for diag_in_matn")
    n = model.n
    S = np.roll(np.eye(n), 1, axis=0).astype(complex)
    return [np.linalg.matrix_power(S, j) for j in range(n)]


def hat_delta_from_density(model: InclusionModel, rho, s: float = 1.0):
    """(rho^s)^T o rho^(-s), the bimodule modular operator of rho."""
    if model.kind != "diag_in_matn":
        raise UnsupportedTarget("hat_delta_from_density is the diag_in_matn closed form")
    e = herm_eig(rho)
    if e.values.min() <= 0:
        raise NotPositive("rho must be strictly positive", residual=float(e.values.min()))
    return powm(rho, s).T * powm(rho, -s)


def cond_exp(model: InclusionModel, target: str, x):
    """Conditional expectations available on the coordinate carriers.

    N: on M.  M: on M_1 e_2 coordinates (rank-3 arrays).  Other targets
    live on the explicit tensor carrier, see TensorRep.cond_exp.
    """
    if target == "N":
        return model.EN(x)
    if target == "M":
        return model.EM(x)
    raise UnsupportedTarget(f"target {target!r} needs TensorRep")


class RelCommElem:
    """Element of M' n M_2 with both products exposed by name."""

    __slots__ = ("model", "Y")

    def __init__(self, model: InclusionModel, Y):
        Y = np.asarray(Y, dtype=complex)
        if Y.shape != (model.m, model.m):
            raise ModelMismatch(f"expected {model.m}x{model.m}, got {Y.shape}")
        self.model = model
        self.Y = Y

    def _check(self, other):
        if not self.model.same_as(other.model):
            raise ModelMismatch("elements belong to different models")

    def dot(self, other: "RelCommElem") -> "RelCommElem":
        self._check(other)
        return RelCommElem(self.model, self.Y @ other.Y)

    def conv(self, other: "RelCommElem") -> "RelCommElem":
        self._check(other)
        return RelCommElem(self.model, convolve(self.model, self.Y, other.Y))

    def contragredient(self) -> "RelCommElem":
        return RelCommElem(self.model, self.Y.T)

    def apply(self, x):
        return self.model.channel(self.Y, x)


# ---------------------------------------------------------------------------
# tensor oracle


def _kron(*ms):
    out = np.ones((1, 1), complex)
    for m in ms:
        out = np.kron(out, m)
    return out


class TensorRep:
    """Explicit matrices on C^n (x) C^n (x) C^n for diag_in_matn(n)."""

    def __init__(self, n: int):
        if n > MAX_TENSOR_N:
            raise SizeTooLarge(f"TensorRep needs n <= {MAX_TENSOR_N}, got {n}")
        self.n = n
        self.lam = 1.0 / n
        I = np.eye(n, dtype=complex)
        self.I = I
        E = lambda j, k: np.outer(I[j], I[k])
        self.Eu = E
        J = np.ones((n, n), complex) / n
        self.e1 = sum(_kron(E(j, j), I, E(j, j)) for j in range(n))
        self.e2 = _kron(I, I, J)
        self.one = np.eye(n ** 3, dtype=complex)
        self._verify()

    # embeddings ------------------------------------------------------------
    def emb_M(self, x):
        return _kron(x, self.I, self.I)

    def emb_M1(self, T):
        """sum T[t,s,k] E_ts (x) I (x) E_kk."""
        n = self.n
        return sum(_kron(np.asarray(T)[:, :, k], self.I, self.Eu(k, k)) for k in range(n))

    def emb_rc(self, Y):
        """I (x) I (x) Y in M' n M_2."""
        return _kron(self.I, self.I, Y)

    def emb_Nprime(self, C):
        """sum C[j,k] E_jj (x) I (x) E_kk."""
        n = self.n
        return sum(C[j, k] * _kron(self.Eu(j, j), self.I, self.Eu(k, k)) for j in range(n) for k in range(n))

    # traces --------------------------------------------------------------
    def tau2(self, X):
        return np.trace(X) / self.n ** 3

    def tau1(self, X):
        # on M_1 the middle leg is the identity, so this is (Tr (x) Tr)/n^2
        return self.tau2(X)

    def tau(self, x):
        return np.trace(x) / self.n

    # partial traces --------------------------------------------------------
    def _r6(self, X):
        n = self.n
        return np.asarray(X).reshape(n, n, n, n, n, n)

    def cond_exp(self, target: str, X):
        n = self.n
        R = self._r6(X)
        if target == "M":
            # M_2 or M_1 onto M: normalized trace over legs 2 and 3
            red = np.einsum("abcdbc->ad", R) / n ** 2
            return self.emb_M(red)
        if target == "M'":
            red = np.einsum("abcabf->cf", R) / n ** 2
            return self.emb_rc(red)
        if target == "M1":
            P = [_kron(self.I, self.I, self.Eu(k, k)) for k in range(n)]
            return sum(p @ X @ p for p in P)
        if target == "N'":
            P = [_kron(self.Eu(j, j), self.I, self.I) for j in range(n)]
            return sum(p @ X @ p for p in P)
        if target == "N":
            red = np.einsum("abcdbc->ad", R) / n ** 2
            return self.emb_M(np.diag(np.diag(red)))
        raise UnsupportedTarget(f"unknown target {target!r}")

    def extract_M(self, X):
        return np.einsum("abcdbc->ad", self._r6(X)) / self.n ** 2

    def extract_rc(self, X):
        return np.einsum("abcabf->cf", self._r6(X)) / self.n ** 2

    def extract_Nprime(self, X):
        n = self.n
        R = self._r6(X)
        return np.array([[R[j, 0, k, j, 0, k] for k in range(n)] for j in range(n)])

    # defining formulas -----------------------------------------------------
    def fourier(self, X):
        """lam^(-3/2) E_M'(x e_2 e_1) for x in N' n M_1, returned as Y."""
        out = self.lam ** -1.5 * self.cond_exp("M'", X @ self.e2 @ self.e1)
        return self.extract_rc(out)

    def fourier_inv(self, Y):
        """Preimage in N' n M_1, found by solving on the basis E_jj (x) I (x) E_kk."""
        n = self.n
        cols, basis = [], []
        for j in range(n):
            for k in range(n):
                C = np.zeros((n, n))
                C[j, k] = 1
                basis.append(C)
                cols.append(self.fourier(self.emb_Nprime(C)).reshape(-1))
        A = np.array(cols).T
        c = np.linalg.solve(A, np.asarray(Y).reshape(-1))
        return sum(ci * Ci for ci, Ci in zip(c, basis))

    def check_Nprime(self, X, tol=1e-9):
        res = float(np.linalg.norm(X - self.cond_exp("N'", X)))
        if res > tol:
            raise NotInRelativeCommutant("element is not in N' n M_1", residual=res)
        return res

    def convolve(self, X, Y):
        """lam^(-9/2) E_M'(e_1 e_2 E_M1(e_2 e_1 y) E_M1(e_2 e_1 x))."""
        x, y = self.emb_rc(X), self.emb_rc(Y)
        e1, e2 = self.e1, self.e2
        inner = self.cond_exp("M1", e2 @ e1 @ y) @ self.cond_exp("M1", e2 @ e1 @ x)
        out = self.lam ** -4.5 * self.cond_exp("M'", e1 @ e2 @ inner)
        return self.extract_rc(out)

    def channel(self, Y, x):
        """lam^(-5/2) E_M(e_2 e_1 Yhat x e_1 e_2)."""
        e1, e2 = self.e1, self.e2
        out = self.lam ** -2.5 * self.cond_exp("M", e2 @ e1 @ self.emb_rc(Y) @ self.emb_M(x) @ e1 @ e2)
        return self.extract_M(out)

    def one_star(self, Y):
        return self.channel(Y, self.I)

    def hat_delta(self, rho, s=1.0):
        """lam^(-1/2) F(E_N'(rho^s e_1 rho^(-s)))."""
        a = self.emb_M(powm(rho, s))
        b = self.emb_M(powm(rho, -s))
        return self.lam ** -0.5 * self.fourier(self.cond_exp("N'", a @ self.e1 @ b))

    def module_inner(self, A, B):
        """tau_2(e_2 a* b e_2) for a, b in M_1 given as rank-3 coefficient arrays."""
        a, b = self.emb_M1(A), self.emb_M1(B)
        return self.tau2(self.e2 @ a.conj().T @ b @ self.e2)

    def choi(self, Y):
        """Choi matrix of the Schur multiplier x -> channel(Y, x)."""
        n = self.n
        C = np.zeros((n * n, n * n), complex)
        for j in range(n):
            for k in range(n):
                Ejk = self.Eu(j, k)
                C += np.kron(Ejk, self.channel(Y, Ejk))
        return C

    # conjugations ----------------------------------------------------------
    def J_apply(self, vec):
        """J on L^2(M) = C^n (x) C^n: swap legs, conjugate."""
        n = self.n
        return np.conj(np.asarray(vec).reshape(n, n).T).reshape(-1)

    def J1_apply(self, vec):
        """J_1 on L^2(M_1): swap the first two legs, conjugate."""
        n = self.n
        return np.conj(np.transpose(np.asarray(vec).reshape(n, n, n), (1, 0, 2))).reshape(-1)

    def J1_conj_op(self, X):
        """J_1 X J_1 as an operator."""
        n3 = self.n ** 3
        cols = [self.J1_apply(X @ self.J1_apply(np.eye(n3)[k])) for k in range(n3)]
        # J_1 X J_1 is linear; its k-th column is J_1 X J_1 e_k
        return np.array(cols).T

    # Pimsner-Popa in M_1 -----------------------------------------------------
    def pp_identities(self, etas):
        lhs1 = sum(self.emb_M(h).conj().T @ self.e1 @ self.emb_M(h) for h in etas)
        lhs2 = sum(h.conj().T @ h for h in etas)
        return float(np.abs(lhs1 - self.one).max()), float(np.abs(lhs2 - self.n * self.I).max())

    def _verify(self):
        e1, e2, lam = self.e1, self.e2, self.lam
        checks = {
            "e1_proj": np.abs(e1 @ e1 - e1).max() + np.abs(e1 - e1.conj().T).max(),
            "e2_proj": np.abs(e2 @ e2 - e2).max() + np.abs(e2 - e2.conj().T).max(),
            "tau1_e1": abs(self.tau1(e1) - lam),
            "EM1_e2": np.abs(self.cond_exp("M1", e2) - lam * self.one).max(),
            "tl_212": np.abs(e2 @ e1 @ e2 - lam * e2).max(),
            "tl_121": np.abs(e1 @ e2 @ e1 - lam * e1).max(),
        }
        bad = {k: v for k, v in checks.items() if v > 1e-12}
        if bad:
            raise AssertionError(f"tensor model invariants violated: {bad}")
        self.invariant_residuals = {k: float(v) for k, v in checks.items()}


def oracle_suite(n: int, rng, count: int = 200):
    """Max residuals of the coordinate backend against TensorRep on random inputs."""
    from .matcore import sample

    model = InclusionModel("diag_in_matn", n)
    tr = TensorRep(n)
    res = dict.fromkeys(("fourier_roundtrip", "fourier", "fourier_inv", "convolution", "conv_duality",
                         "channel", "one_star", "hat_delta", "module_inner"), 0.0)

    def upd(k, v):
        res[k] = max(res[k], float(v))

    for _ in range(count):
        C = rng.cnormal((n, n))
        X = rng.cnormal((n, n))
        Y = rng.cnormal((n, n))
        x = rng.cnormal((n, n))
        Fc = fourier(model, C)
        upd("fourier_roundtrip", np.abs(fourier_inv(model, Fc) - C).max())
        upd("fourier", np.abs(tr.fourier(tr.emb_Nprime(C)) - Fc).max())
        upd("fourier_inv", np.abs(tr.fourier_inv(Fc) - C).max())
        cv = convolve(model, X, Y)
        upd("convolution", np.abs(tr.convolve(X, Y) - cv).max())
        prod = tr.emb_Nprime(fourier_inv(model, Y)) @ tr.emb_Nprime(fourier_inv(model, X))
        upd("conv_duality", np.abs(tr.fourier(prod) - cv).max())
        upd("channel", np.abs(tr.channel(X, x) - model.channel(X, x)).max())
        upd("one_star", np.abs(tr.one_star(X) - model.one_star(X)).max())
        A = rng.cnormal((n, n, n))
        B = rng.cnormal((n, n, n))
        upd("module_inner", abs(tr.module_inner(A, B) - model.inner(A, B)))
    for _ in range(max(1, count // 20)):
        rho = sample(rng, "density", n)
        for s in (1.0, 0.5):
            upd("hat_delta", np.abs(tr.hat_delta(rho, s) - hat_delta_from_density(model, rho, s)).max())
    return res
