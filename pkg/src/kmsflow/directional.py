"""Directional calculus for a bimodule generator.

Block decomposition of the finite-dimensional algebra generated by the
modular data, matched matrix units, directions, derivations, gradient,
divergence, the directional matrix Pi and the weight operator K_{D,mu}.

Module elements are arrays T[p, s, i] in the coordinates of
:mod:`kmsflow.tower`; a gradient vector is a stack X[k] of those.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DecompositionFailed, NoConvergence, NonDiagonalizable,
                     NotPositive, RangeMismatch)
from .matcore import Rng, herm_eig, log_mean_array, powm
from .semigroup import Generator, range_projection

CONVENTIONS = ("pair", "column", "column_inv_sqrt")
ALG_TOL = 1e-9
CLUSTER_TOL = 1e-7


# ---------------------------------------------------------------------------
# algebra generation and block decomposition


def _orthonormal(mats, tol=ALG_TOL):
    if not mats:
        return []
    shape = mats[0].shape
    V = np.array([np.asarray(m, dtype=complex).reshape(-1) for m in mats]).T
    U, s, _ = np.linalg.svd(V, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return []
    r = int(np.sum(s > tol * max(1.0, s[0])))
    return [U[:, j].reshape(shape) for j in range(r)]


def generate_algebra(generators, max_passes=None):
    """Orthonormal (Hilbert-Schmidt) basis of the *-algebra generated by the inputs."""
    gens = [np.asarray(g, dtype=complex) for g in generators]
    if not gens:
        raise ValueError("need at least one generator")
    n = gens[0].shape[0]
    for g in gens:
        if g.ndim != 2 or g.shape != (n, n):
            raise ValueError("generators must be square and of one size")
    basis = _orthonormal(gens + [g.conj().T for g in gens])
    passes = n * n if max_passes is None else max_passes
    for _ in range(passes):
        prods = [a @ b for a in basis for b in basis]
        new = _orthonormal(basis + prods)
        if len(new) == len(basis):
            return new
        basis = new
    raise NoConvergence(f"algebra dimension still growing after {passes} passes")


@dataclass
class Block:
    dim: int
    units: np.ndarray          # units[j, k] = E_jk, shape (d, d, n, n)
    central: np.ndarray        # central projection
    dual: int | None = None


@dataclass
class BlockDecomposition:
    blocks: list
    basis: list
    unit: np.ndarray

    @property
    def dims(self):
        return [b.dim for b in self.blocks]

    def relation_residual(self):
        res = 0.0
        for a, A in enumerate(self.blocks):
            for b, Bk in enumerate(self.blocks):
                for j in range(A.dim):
                    for k in range(A.dim):
                        for s in range(Bk.dim):
                            for t in range(Bk.dim):
                                lhs = A.units[j, k] @ Bk.units[s, t]
                                rhs = A.units[j, t] if (a == b and k == s) else 0.0
                                res = max(res, float(np.abs(lhs - rhs).max()))
        return res

    def unit_residual(self):
        tot = sum(b.units[j, j] for b in self.blocks for j in range(b.dim))
        return float(np.abs(tot - self.unit).max())

    def dual_residual(self):
        res = 0.0
        for b in self.blocks:
            if b.dual is None:
                return float("inf")
            D = self.blocks[b.dual]
            for j in range(b.dim):
                for k in range(b.dim):
                    res = max(res, float(np.abs(b.units[j, k].T - D.units[k, j]).max()))
        return res


def _center(basis):
    m = len(basis)
    rows = []
    for j in range(m):
        rows.append(np.array([(basis[i] @ basis[j] - basis[j] @ basis[i]).reshape(-1) for i in range(m)]).T)
    A = np.vstack(rows)
    _, s, Vh = np.linalg.svd(A)
    r = int(np.sum(s > ALG_TOL * max(1.0, s[0] if s.size else 1.0)))
    return [sum(Vh[q, i].conj() * basis[i] for i in range(m)) for q in range(r, m)]


def _clusters(values, tol=CLUSTER_TOL):
    groups = []
    for i in np.argsort(values):
        if groups and abs(values[i] - values[groups[-1][-1]]) <= tol * max(1.0, abs(values[i])):
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def _spectral_projections(h, support):
    e = herm_eig(0.5 * (h + h.conj().T))
    V = e.vectors
    w = e.values
    supp = np.real(np.einsum("ai,ab,bi->i", V.conj(), support, V)) > 0.5
    idx = np.where(supp)[0]
    out = []
    for g in _clusters(w[idx]):
        cols = V[:, idx[g]]
        out.append(cols @ cols.conj().T)
    return out


def _in_span(basis, x):
    V = np.array([b.reshape(-1) for b in basis])
    c = V.conj() @ x.reshape(-1)
    return float(np.linalg.norm(x.reshape(-1) - V.T @ c))


def _block_units(alg, Zc, d, rng, symmetric):
    n = Zc.shape[0]
    comp = _orthonormal([Zc @ b @ Zc for b in alg])
    cs = rng.normal(len(comp)) + 1j * rng.normal(len(comp))
    h = sum(c * b for c, b in zip(cs, comp))
    h = 0.5 * (h + h.conj().T)
    if symmetric:
        h = 0.5 * (h + h.T)
    P = _spectral_projections(h, Zc)
    if len(P) != d:
        return None
    cs = rng.normal(len(comp))
    a = sum(c * b for c, b in zip(cs, comp))
    a = a + a.conj().T
    if symmetric:
        a = 0.5 * (a + a.T)
    E = np.zeros((d, d, n, n), complex)
    E[0, 0] = P[0]
    r0 = np.trace(P[0]).real
    for j in range(1, d):
        w = P[j] @ a @ P[0]
        nrm = np.sqrt(np.trace(w.conj().T @ w).real / r0)
        if nrm < 1e-8:
            return None
        E[j, 0] = w / nrm
        E[0, j] = E[j, 0].conj().T
    for j in range(d):
        for k in range(d):
            if j and k:
                E[j, k] = E[j, 0] @ E[0, k]
            elif j == k:
                E[j, k] = P[j]
    return E


def block_decompose(basis, rng: Rng | None = None, require_dual=False) -> BlockDecomposition:
    """Artin-Wedderburn decomposition of a matrix *-algebra given by a basis."""
    rng = Rng(0) if rng is None else rng
    basis = [np.asarray(b, dtype=complex) for b in basis]
    n = basis[0].shape[0]
    unit = range_projection(sum(b @ b.conj().T for b in basis))
    if _in_span(basis, unit) > 1e-7:
        raise DecompositionFailed("algebra is not unital on its support", residual=_in_span(basis, unit))
    Z = _center(basis)
    cs = rng.normal(len(Z))
    z = sum(c * b for c, b in zip(cs, Z))
    z = 0.5 * (z + z.conj().T)
    cents = _spectral_projections(z, unit)
    fp_w = np.diag(np.arange(1, n + 1, dtype=float))
    info = []
    for Zc in cents:
        dimc = len(_orthonormal([Zc @ b @ Zc for b in basis]))
        d = int(round(np.sqrt(dimc)))
        if d * d != dimc:
            raise DecompositionFailed(f"block algebra dimension {dimc} is not a square")
        info.append((-d, float(np.trace(Zc @ fp_w).real), Zc, d))
    info.sort(key=lambda t: (t[0], t[1]))
    # dual pairing through the transpose of central projections
    duals = []
    for _, _, Zc, _ in info:
        ov = [float(np.abs(np.trace(Zc.T @ Z2)).real) / max(np.trace(Z2).real, 1e-30) for _, _, Z2, _ in info]
        j = int(np.argmax(ov))
        duals.append(j if np.abs(Zc.T - info[j][2]).max() < 1e-6 else None)
    closed_T = all(_in_span(basis, b.T) < 1e-7 for b in basis)
    blocks = [None] * len(info)
    for i, (_, _, Zc, d) in enumerate(info):
        dl = duals[i] if closed_T else None
        if blocks[i] is not None:
            continue
        if dl is not None and dl != i:
            E = _block_units(basis, Zc, d, rng, False)
            if E is None:
                raise DecompositionFailed("could not build matrix units")
            blocks[i] = Block(d, E, Zc, dl)
            Ed = np.transpose(E, (1, 0, 3, 2)).copy()
            blocks[dl] = Block(d, Ed, info[dl][2], i)
            continue
        E = None
        if dl == i:
            for _ in range(8):
                E = _block_units(basis, Zc, d, rng, True)
                if E is not None:
                    break
        if E is None:
            dl = None
            for _ in range(8):
                E = _block_units(basis, Zc, d, rng, False)
                if E is not None:
                    break
        if E is None:
            raise DecompositionFailed("could not build matrix units")
        blocks[i] = Block(d, E, Zc, dl)
    dec = BlockDecomposition(blocks, basis, unit)
    rel = dec.relation_residual()
    if rel > ALG_TOL * 10:
        raise DecompositionFailed("matrix unit relations fail", residual=rel)
    if require_dual and dec.dual_residual() > 1e-6:
        raise DecompositionFailed("no dual pairing under transpose", residual=dec.dual_residual())
    return dec


# ---------------------------------------------------------------------------
# the frame


@dataclass
class DirectionalFrame:
    gen: Generator
    decomposition: BlockDecomposition | None
    f: np.ndarray            # columns: eigenvectors of L_Delta on the range of L0
    omega: np.ndarray
    S: np.ndarray            # Delta^(1/2)
    a: np.ndarray            # compression of S to the frame, = u diag(mu) u*
    mu: np.ndarray
    u: np.ndarray
    L_delta: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def r(self):
        return len(self.omega)

    @property
    def model(self):
        return self.gen.model

    def unit(self, j, k):
        return np.outer(self.f[:, j], self.f[:, k].conj())

    @property
    def B(self):
        return self.u.conj().T @ np.diag(self.omega) @ self.u

    def direction(self, k):
        """E~_k = sum_t conj(u_tk) E_kt."""
        return sum(np.conj(self.u[t, k]) * self.unit(k, t) for t in range(self.r))

    def weights(self, convention="pair"):
        """(coefficient c_kt, K-parameter m_kt) with Pi_kt = c_kt E_kt."""
        B, mu = self.B, self.mu
        if convention == "pair":
            return B, np.outer(mu, mu)
        if convention == "column":
            return B * mu[None, :], np.repeat(mu[:, None], self.r, axis=1)
        if convention == "column_inv_sqrt":
            return B * mu[None, :], np.repeat(mu[:, None] ** -0.5, self.r, axis=1)
        raise ValueError(f"unknown convention {convention!r}")

    def Pi(self, convention="pair"):
        c, _ = self.weights(convention)
        return np.array([[c[k, t] * self.unit(k, t) for t in range(self.r)] for k in range(self.r)])

    def Pi_factorized(self, convention="column"):
        """u* diag(omega) u, then units, then the diagonal weight factor."""
        B = self.u.conj().T @ np.diag(self.omega) @ self.u
        F = np.diag(self.mu) if convention != "pair" else np.eye(self.r)
        units = np.array([[self.unit(k, t) for t in range(self.r)] for k in range(self.r)])
        return np.einsum("kt,ktab->ktab", B @ F, units)

    def to_record(self):
        dec = self.decomposition
        return {
            "rank": self.r,
            "block_dims": dec.dims if dec is not None else None,
            "dual": [b.dual for b in dec.blocks] if dec is not None else None,
            "omega": [float(w) for w in self.omega],
            "mu": [float(m) for m in self.mu],
            "u_real": self.u.real.tolist(),
            "u_imag": self.u.imag.tolist(),
            "diagnostics": {k: float(v) for k, v in self.diagnostics.items()},
        }


def build_frame(gen: Generator, rng: Rng | None = None, decompose=True, cutoff=1e-10) -> DirectionalFrame:
    rng = Rng(0) if rng is None else rng
    L0 = gen.L0
    R = range_projection(L0, cutoff)
    RT = range_projection(L0.T, cutoff)
    rres = float(np.abs(R - RT).max())
    if rres > 1e-8:
        raise RangeMismatch("range of L0 differs from range of its transpose", residual=rres)
    S = powm(gen.delta, 0.5)
    St = S.T
    LD = St @ L0 @ St
    sym = float(np.abs(LD - LD.T).max())
    e = herm_eig(0.5 * (LD + LD.conj().T))
    w, V = e.values[::-1], e.vectors[:, ::-1]
    keep = w > cutoff * max(1.0, abs(w[0]))
    f = V[:, keep]
    omega = w[keep]
    leak = float(np.abs((np.eye(len(R)) - R) @ S @ f).max()) if f.size else 0.0
    a = f.conj().T @ S @ f
    a = 0.5 * (a + a.conj().T)
    ea = herm_eig(a)
    mu, u = ea.values, ea.vectors
    if mu.size and mu.min() <= 0:
        raise NonDiagonalizable("compressed Delta^(1/2) is not positive on the frame", residual=float(mu.min()))
    diag_res = float(np.abs(u.conj().T @ a @ u - np.diag(mu)).max()) if mu.size else 0.0
    dual_mu = float(np.abs(np.sort(mu) - np.sort(1 / mu)).max()) if mu.size else 0.0
    dec = None
    if decompose:
        Rl = range_projection(L0, cutoff)
        dec = block_decompose(generate_algebra([LD, gen.delta @ Rl]), rng)
    frame = DirectionalFrame(gen, dec, f, omega, S, a, mu, u, LD,
                             {"range_residual": rres, "L_delta_symmetry": sym, "support_leak": leak,
                              "diagonal_residual": diag_res, "mu_duality": dual_mu})
    recon = sum(omega[j] * np.outer(f[:, j], f[:, j].conj()) for j in range(len(omega)))
    frame.diagnostics["omega_reconstruction"] = float(np.abs(recon - LD).max()) if omega.size else 0.0
    return frame


# ---------------------------------------------------------------------------
# derivations, gradient, divergence


def _dir_finv(frame, k):
    return frame.model.finv(frame.direction(k))


def partial(frame: DirectionalFrame, k: int, x):
    """[x, F^-1(E~_k)] as a module element."""
    mdl = frame.model
    C = _dir_finv(frame, k)
    x = np.asarray(x, dtype=complex)
    return mdl.lm(x, C) - mdl.rm(C, x)


def partial_adjoint(frame: DirectionalFrame, k: int, Z):
    mdl = frame.model
    C = _dir_finv(frame, k)
    Cs = mdl.adj(C)
    return mdl.lam * mdl.EM(mdl.mul(Z, Cs) - mdl.mul(Cs, Z))


def gradient(frame: DirectionalFrame, x):
    return np.array([partial(frame, k, x) for k in range(frame.r)])


def divergence(frame: DirectionalFrame, X):
    n = frame.model.n
    out = np.zeros((n, n), complex)
    for k in range(frame.r):
        out += partial_adjoint(frame, k, X[k])
    return out


def grad_inner(frame: DirectionalFrame, X, Y):
    mdl = frame.model
    return sum(mdl.inner(X[k], Y[k]) for k in range(len(X)))


# ---------------------------------------------------------------------------
# Pi and K


def apply_Pi(frame: DirectionalFrame, X, convention="pair"):
    c, _ = frame.weights(convention)
    mdl = frame.model
    r = frame.r
    return np.array([sum(c[k, t] * mdl.act(frame.unit(k, t), X[t]) for t in range(r)) for k in range(r)])


def _k_multiplier(D, mu):
    e = herm_eig(D)
    w = e.values
    if w.min() <= 0:
        raise NotPositive("D must be strictly positive", residual=float(w.min()))
    return e.vectors, log_mean_array(w[:, None] / mu, w[None, :] * mu)


def K_apply(D, mu: float, T, inverse=False):
    """K_{D,mu}(T) = int_0^1 mu^(1-2s) D^s T D^(1-s) ds, slice by slice."""
    U, L = _k_multiplier(D, mu)
    T = np.asarray(T, dtype=complex)
    Tt = np.einsum("ta,tsk,sb->abk", U.conj(), T, U)
    Tt = Tt / L[:, :, None] if inverse else Tt * L[:, :, None]
    return np.einsum("ta,abk,sb->tsk", U, Tt, U.conj())


def apply_K(frame: DirectionalFrame, D, X, convention="column"):
    """Componentwise K_{D,m_k}; needs a convention whose parameter depends on k only."""
    _, m = frame.weights(convention)
    if convention == "pair":
        raise ValueError("the pair convention weights each (k, t) term, use apply_KPi")
    return np.array([K_apply(D, m[k, 0], X[k]) for k in range(frame.r)])


def apply_KPi(frame: DirectionalFrame, D, X, convention="pair"):
    c, m = frame.weights(convention)
    mdl = frame.model
    r = frame.r
    out = []
    for k in range(r):
        acc = 0
        for t in range(r):
            if c[k, t] == 0:
                continue
            acc = acc + c[k, t] * K_apply(D, m[k, t], mdl.act(frame.unit(k, t), X[t]))
        out.append(acc if not np.isscalar(acc) else np.zeros_like(X[0]))
    return np.array(out)


def weighted_inner(frame: DirectionalFrame, D, X, Y, convention="pair"):
    return grad_inner(frame, apply_KPi(frame, D, X, convention), Y)


def weighted_norm(frame: DirectionalFrame, D, X, convention="pair"):
    v = weighted_inner(frame, D, X, X, convention)
    if v.real <= 0:
        raise NotPositive("weighted norm is not positive", residual=float(v.real))
    return float(np.sqrt(v.real))


def traceless_basis(model):
    """Orthonormal basis of {x : E_N(x) = 0} in the trace inner product."""
    n = model.n
    out = []
    for p in range(n):
        for s in range(n):
            E = np.zeros((n, n), complex)
            E[p, s] = 1.0
            if model.kind == "diag_in_matn" and p == s:
                continue
            out.append(E)
    if model.kind == "full_mat":
        out = [E - model.tau(E) * np.eye(n) for E in out]
    return _orthonormal(out)


def weighted_gram(frame: DirectionalFrame, D, convention="pair"):
    grads = [gradient(frame, x) for x in traceless_basis(frame.model)]
    KP = [apply_KPi(frame, D, G, convention) for G in grads]
    return np.array([[grad_inner(frame, KP[a], grads[b]) for a in range(len(grads))] for b in range(len(grads))])


def check_weighted_positive(frame: DirectionalFrame, D, convention="pair", tol=1e-12):
    """(smallest eigenvalue, conjugate-symmetry residual); NotPositive when not PD."""
    G = weighted_gram(frame, D, convention)
    herm = float(np.abs(G - G.conj().T).max())
    lo = float(np.linalg.eigvalsh(0.5 * (G + G.conj().T)).min())
    if lo <= tol:
        raise NotPositive("weighted Gram matrix is not positive definite", residual=lo)
    return lo, herm


# ---------------------------------------------------------------------------
# kernel characterizations


def _psd_sqrt(A):
    e = herm_eig(0.5 * (A + A.conj().T))
    w = np.clip(e.values, 0.0, None)
    return (e.vectors * np.sqrt(w)) @ e.vectors.conj().T


def kernel_equiv_check(frame: DirectionalFrame, x, tol=1e-9):
    mdl = frame.model
    x = np.asarray(x, dtype=complex)
    scale = max(1.0, float(np.abs(x).max()))

    def comm_zero(Y):
        C = mdl.finv(Y)
        return float(np.abs(mdl.lm(x, C) - mdl.rm(C, x)).max()) <= tol * scale

    by_dir = all(float(np.abs(partial(frame, k, x)).max()) <= tol * scale for k in range(frame.r))
    by_units = all(comm_zero(frame.unit(j, k)) for j in range(frame.r) for k in range(frame.r))
    LDh = _psd_sqrt(frame.L_delta)
    L0h = _psd_sqrt(frame.gen.L0)
    return by_dir, by_units, comm_zero(LDh), comm_zero(L0h)
