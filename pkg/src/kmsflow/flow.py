"""Gradient-flow representation of the dual Laplacian and entropy inequalities.

Sign convention: the density flow is dD/dt = -L_a*(D), with L_a the
positive Laplacian of :mod:`kmsflow.semigroup`.  The flow form is

    L_a*(D) = kappa * Div K_D Pi (grad log D - grad log D_ref)

with kappa = lam^(-3/2)/2 unless a calibration says otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import directional as dr
from .errors import (CalibrationFailed, InconsistentSystem, NegativeTime,
                     NoLinearRelation, NotCalibrated, NotPositive, OutOfRange,
                     PositivityLost, TailNotBounded)
from .matcore import Rng, herm_eig, log_mean_array, logm, sample
from .semigroup import (Generator, equilibrium_term, laplacian_dual_apply,
                        limit_F, semigroup_apply, superop)

HIDDEN_TOL = 1e-7
CAL_STRICT = 1e-6
CAL_LOOSE = 1e-3
MAX_HALVINGS = 20
EIG_FLOOR = 1e-10


def nominal_kappa(model):
    return model.lam ** -1.5 / 2


def rel_entropy(rho, sigma, model=None):
    """tau(rho log rho - rho log sigma), normalized trace."""
    rho = np.asarray(rho, dtype=complex)
    sigma = np.asarray(sigma, dtype=complex)
    er = herm_eig(0.5 * (rho + rho.conj().T))
    es = herm_eig(0.5 * (sigma + sigma.conj().T))
    if er.values.min() <= 0 or es.values.min() <= 0:
        raise NotPositive("relative entropy needs strictly positive arguments",
                          residual=float(min(er.values.min(), es.values.min())))
    n = rho.shape[0]
    a = float(np.sum(er.values * np.log(er.values)))
    ls = (es.vectors * np.log(es.values)) @ es.vectors.conj().T
    b = float(np.trace(rho @ ls).real)
    return (a - b) / n


# ---------------------------------------------------------------------------
# the weighted operator x -> Div K_D Pi grad x


class _KCache:
    def __init__(self, D):
        e = herm_eig(D)
        if e.values.min() <= 0:
            raise NotPositive("D must be strictly positive", residual=float(e.values.min()))
        self.U = e.vectors
        self.w = e.values
        self.L = {}

    def apply(self, mu, T):
        key = float(mu)
        if key not in self.L:
            self.L[key] = log_mean_array(self.w[:, None] / mu, self.w[None, :] * mu)
        U = self.U
        Tt = np.einsum("ta,tsk,sb->abk", U.conj(), T, U) * self.L[key][:, :, None]
        return np.einsum("ta,abk,sb->tsk", U, Tt, U.conj())


def _KPi(frame, kc, X, convention):
    c, m = frame.weights(convention)
    mdl = frame.model
    out = []
    for k in range(frame.r):
        acc = np.zeros_like(X[0])
        for t in range(frame.r):
            if c[k, t] != 0:
                acc = acc + c[k, t] * kc.apply(m[k, t], mdl.act(frame.unit(k, t), X[t]))
        out.append(acc)
    return np.array(out)


def flow_operator(frame, D, convention="pair"):
    """Matrix of x -> Div K_D Pi grad x on row-major vec(x)."""
    n = frame.model.n
    kc = _KCache(D)
    cols = []
    for q in range(n * n):
        E = np.zeros(n * n, complex)
        E[q] = 1.0
        G = dr.gradient(frame, E.reshape(n, n))
        cols.append(dr.divergence(frame, _KPi(frame, kc, G, convention)).reshape(-1))
    return np.array(cols).T


def _herm_part(x):
    return 0.5 * (x + x.conj().T)


def _remove_N(model, x):
    return x - model.EN(x)


# ---------------------------------------------------------------------------
# hidden density and calibration


@dataclass
class HiddenDensity:
    D: np.ndarray
    log: np.ndarray
    residual: float
    kind: str                # "hidden" or "stationary"
    convention: str


def _random_densities(n, rng, count):
    return [sample(rng, "density", n) for _ in range(count)]


def _solve_log(frame, gen, Ds, kappa, convention):
    mdl = gen.model
    rows, rhs, refs = [], [], []
    for D in Ds:
        A = flow_operator(frame, D, convention)
        ref = laplacian_dual_apply(gen, D)
        rows.append(A)
        rhs.append(A @ logm(D).reshape(-1) - ref.reshape(-1) / kappa)
        refs.append(ref)
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    n = mdl.n
    x = _remove_N(mdl, _herm_part(x.reshape(n, n)))
    res = 0.0
    for D, ref in zip(Ds, refs):
        got = kappa * (flow_operator(frame, D, convention) @ (logm(D) - x).reshape(-1))
        res = max(res, float(np.linalg.norm(got - ref.reshape(-1)) / max(np.linalg.norm(ref), 1e-300)))
    return x, res


def hidden_density(frame, rng=None, samples=3, convention="pair", kappa=None):
    """Solve for log D_Delta with E_N(log D_Delta) = 0 from the master identity.

    Raises InconsistentSystem, carrying the residual and the least-squares
    solution, when no D-independent solution exists.
    """
    gen = frame.gen
    mdl = gen.model
    rng = Rng(0) if rng is None else rng
    kappa = nominal_kappa(mdl) if kappa is None else kappa
    Ds = _random_densities(mdl.n, rng, samples)
    x, res = _solve_log(frame, gen, Ds, kappa, convention)
    hd = HiddenDensity(_expm_h(x), x, res, "hidden", convention)
    if res > HIDDEN_TOL:
        raise InconsistentSystem("no density-independent hidden density", residual=res, solution=hd)
    return hd


def _expm_h(x):
    e = herm_eig(_herm_part(x))
    return (e.vectors * np.exp(e.values)) @ e.vectors.conj().T


def stationary_reference(gen: Generator):
    """Stationary density of L_a*, renormalized so that E_N(log) = 0."""
    mdl = gen.model
    rho = equilibrium_term(gen, np.eye(mdl.n))
    rho = _herm_part(rho)
    L = logm(rho)
    x = L - mdl.EN(L)
    return _expm_h(x), x


def reference_density(frame, rng=None, convention="pair"):
    """Hidden density when it exists, the normalized stationary density otherwise."""
    try:
        return hidden_density(frame, rng, convention=convention)
    except InconsistentSystem as exc:
        D, x = stationary_reference(frame.gen)
        return HiddenDensity(D, x, exc.residual, "stationary", convention)


@dataclass
class CalibrationReport:
    kappa: float
    nominal_kappa: float
    convention: str
    max_residual: float
    residuals: dict
    kappas: dict
    kappa_samples: list
    log_ref: np.ndarray
    strict: bool

    @property
    def kappa_spread(self):
        ks = np.array(self.kappa_samples)
        return float(np.abs(ks - self.kappa).max() / abs(self.kappa)) if ks.size else 0.0

    def as_record(self):
        return {
            "kappa": self.kappa, "nominal_kappa": self.nominal_kappa, "convention": self.convention,
            "max_residual": self.max_residual, "strict": self.strict,
            "residuals": dict(sorted(self.residuals.items())),
            "kappas": dict(sorted(self.kappas.items())), "kappa_spread": self.kappa_spread,
        }


def calibrate(frame, gen=None, samples=None, rng=None, conventions=dr.CONVENTIONS):
    """Fit kappa and log D_ref jointly, per weight convention, and pick the best."""
    gen = frame.gen if gen is None else gen
    mdl = gen.model
    rng = Rng(0) if rng is None else rng
    Ds = samples if samples is not None else _random_densities(mdl.n, rng, 10)
    if len(Ds) < 10:
        raise ValueError("calibration needs at least 10 densities")
    n = mdl.n
    refs = [laplacian_dual_apply(gen, D) for D in Ds]
    logs = [logm(D) for D in Ds]
    fits = {}
    for conv in conventions:
        ops = [flow_operator(frame, D, conv) for D in Ds]
        # unknowns (s, x), s = 1/kappa:  s * L*(D) + A x = A log D
        M = np.vstack([np.hstack([ref.reshape(-1, 1), A]) for ref, A in zip(refs, ops)])
        b = np.concatenate([A @ L.reshape(-1) for A, L in zip(ops, logs)])
        sol, *_ = np.linalg.lstsq(M, b, rcond=None)
        s = sol[0].real
        x = _remove_N(mdl, _herm_part(sol[1:].reshape(n, n)))
        if abs(s) < 1e-300:
            fits[conv] = (float("nan"), x, float("inf"), [])
            continue
        kappa = 1.0 / s
        res, ks = 0.0, []
        for A, L, ref in zip(ops, logs, refs):
            v = A @ (L - x).reshape(-1)
            r = ref.reshape(-1)
            res = max(res, float(np.linalg.norm(kappa * v - r) / max(np.linalg.norm(r), 1e-300)))
            ks.append(float((np.vdot(v, r) / np.vdot(v, v)).real) if np.vdot(v, v) != 0 else kappa)
        fits[conv] = (kappa, x, res, ks)
    strict = [c for c in dr.CONVENTIONS if c in fits and fits[c][2] <= CAL_STRICT]
    best = strict[0] if strict else min(fits, key=lambda c: fits[c][2])
    kappa, x, res, ks = fits[best]
    rep = CalibrationReport(kappa, nominal_kappa(mdl), best, res, {c: f[2] for c, f in fits.items()},
                            {c: f[0] for c, f in fits.items()}, ks, x, res <= CAL_STRICT)
    if not res <= CAL_LOOSE:
        raise CalibrationFailed(f"no weight convention fits, best {best} at {res:.3e}", residual=res)
    return rep


def laplacian_dual_flowform(frame, D, calibration: CalibrationReport | None):
    if calibration is None:
        raise NotCalibrated("run calibrate first")
    A = flow_operator(frame, D, calibration.convention)
    n = frame.model.n
    return calibration.kappa * (A @ (logm(D) - calibration.log_ref).reshape(-1)).reshape(n, n)


# ---------------------------------------------------------------------------
# metric and gradient


def _solve_potential(frame, D, Ddot, convention, kappa):
    mdl = frame.model
    n = mdl.n
    A = kappa * flow_operator(frame, D, convention)
    x, *_ = np.linalg.lstsq(A, np.asarray(Ddot, dtype=complex).reshape(-1), rcond=None)
    res = float(np.linalg.norm(A @ x - np.asarray(Ddot).reshape(-1)))
    return x.reshape(n, n), res


def metric_speed(frame, D, Ddot, convention="pair", kappa=None, return_potential=False):
    """Norm of the minimal tangent field X with kappa Div K_D Pi X = Ddot."""
    kappa = nominal_kappa(frame.model) if kappa is None else kappa
    Ddot = np.asarray(Ddot, dtype=complex)
    scale = max(1.0, float(np.abs(Ddot).max()))
    if float(np.abs(Ddot).max()) == 0.0:
        return (0.0, np.zeros_like(Ddot)) if return_potential else 0.0
    x, res = _solve_potential(frame, D, Ddot, convention, kappa)
    if res > 1e-7 * scale:
        raise OutOfRange("tangent vector is not in the range of the flow operator", residual=res)
    X = dr.gradient(frame, x)
    v = dr.weighted_inner(frame, D, X, X, convention).real
    sp = math.sqrt(max(v, 0.0))
    return (sp, x) if return_potential else sp


def grad_field(frame, D, log_ref):
    D = np.asarray(D, dtype=complex)
    if herm_eig(D).values.min() <= 0:
        raise NotPositive("D must be strictly positive")
    return dr.gradient(frame, logm(D) - log_ref)


def grad_norm_sq(frame, D, log_ref, convention="pair"):
    G = grad_field(frame, D, log_ref)
    return float(dr.weighted_inner(frame, D, G, G, convention).real)


def fisher_information(gen, D, log_ref):
    """tau(L_a*(D)(log D - log D_ref))."""
    return float(gen.model.tau(laplacian_dual_apply(gen, D) @ (logm(D) - log_ref)).real)


# ---------------------------------------------------------------------------
# integration


@dataclass
class FlowTrace:
    times: np.ndarray
    densities: list
    entropies: np.ndarray
    speeds: np.ndarray | None = None
    bounds: np.ndarray | None = None
    halvings: int = 0
    meta: dict = field(default_factory=dict)

    def slacks(self):
        if self.bounds is None:
            return None
        return self.bounds - (self.entropies - self.meta.get("H_eq", 0.0))

    def to_csv(self) -> str:
        lines = ["t,entropy,speed,bound,slack"]
        sl = self.slacks()
        for i, t in enumerate(self.times):
            sp = "" if self.speeds is None else repr(float(self.speeds[i]))
            bd = "" if self.bounds is None else repr(float(self.bounds[i]))
            sk = "" if sl is None else repr(float(sl[i]))
            lines.append(f"{float(t)!r},{float(self.entropies[i])!r},{sp},{bd},{sk}")
        return "\n".join(lines) + "\n"


def _rhs(gen, D):
    return -laplacian_dual_apply(gen, D)


def _rk4(gen, D, h):
    k1 = _rhs(gen, D)
    k2 = _rhs(gen, D + 0.5 * h * k1)
    k3 = _rhs(gen, D + 0.5 * h * k2)
    k4 = _rhs(gen, D + h * k3)
    return D + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _min_eig(D):
    return float(np.linalg.eigvalsh(_herm_part(D)).min())


def integrate(gen, frame, D0, T, h, ref=None, speeds=False, convention="pair"):
    """Fixed-step RK4 for dD/dt = -L_a*(D) with a positivity guard."""
    if T <= 0 or h <= 0:
        raise NegativeTime("T and h must be positive")
    D = np.asarray(D0, dtype=complex)
    if _min_eig(D) < EIG_FLOOR:
        raise NotPositive("initial density is not strictly positive")
    log_ref = np.zeros_like(D) if ref is None else ref.log
    ref_D = _expm_h(log_ref)
    steps = int(round(T / h))
    times, Ds = [0.0], [D]
    halvings = 0
    t = 0.0
    for i in range(steps):
        t_next = (i + 1) * h
        hh, sub, tries = h, 1, 0
        while True:
            Dn = D
            for _ in range(sub):
                Dn = _rk4(gen, Dn, hh)
            if _min_eig(Dn) >= EIG_FLOOR:
                break
            tries += 1
            if tries > MAX_HALVINGS:
                raise PositivityLost(f"positivity lost at step {i} (t={t:.6g})", residual=_min_eig(Dn))
            hh /= 2
            sub *= 2
        halvings += tries
        D = _herm_part(Dn)
        t = t_next
        times.append(t)
        Ds.append(D)
    H = np.array([rel_entropy(Dk, ref_D) for Dk in Ds])
    sp = None
    if speeds:
        sp = np.array([metric_speed(frame, Dk, _rhs(gen, Dk), convention) for Dk in Ds])
    return FlowTrace(np.array(times), Ds, H, sp, None, halvings,
                     {"T": T, "h": h, "reference": None if ref is None else ref.kind})


def closed_form(gen, D0, t):
    return semigroup_apply(gen, t, D0, which="a*")


# ---------------------------------------------------------------------------
# inequalities


def _rate(model, beta, constants):
    if constants == "nominal":
        return 2 * model.lam ** -1.5 * beta
    if constants == "rederived":
        return 2 * beta
    raise ValueError(f"unknown constants {constants!r}")


def equilibrium_entropy(gen, D, ref, F=None):
    eq = _herm_part(equilibrium_term(gen, D, F))
    return rel_entropy(eq, _expm_h(ref.log))


def lsi_check(gen, frame, D, beta, ref, constants="nominal", F=None):
    """RHS - LHS of the log-Sobolev inequality (negative margin is a violation)."""
    mdl = gen.model
    lhs = rel_entropy(D, _expm_h(ref.log)) - equilibrium_entropy(gen, D, ref, F)
    I = fisher_information(gen, D, ref.log)
    coef = mdl.lam ** 1.5 / (2 * beta) if constants == "nominal" else 1.0 / (2 * beta)
    return coef * I - lhs


def lsi_beta_max(gen, D, ref, constants="nominal", F=None):
    """Largest beta for which the LSI holds at D."""
    mdl = gen.model
    lhs = rel_entropy(D, _expm_h(ref.log)) - equilibrium_entropy(gen, D, ref, F)
    if lhs <= 0:
        return float("inf")
    I = fisher_information(gen, D, ref.log)
    coef = mdl.lam ** 1.5 / 2 if constants == "nominal" else 0.5
    return coef * I / lhs


def decay_trace(gen, D0, T, h, ref, F=None):
    """Entropy along the exact flow at times 0, h, ..., T."""
    times = np.arange(int(round(T / h)) + 1) * h
    refD = _expm_h(ref.log)
    Heq = equilibrium_entropy(gen, D0, ref, F)
    H = np.array([rel_entropy(_herm_part(closed_form(gen, D0, t)), refD) for t in times])
    return times, H, Heq


def entropy_decay_check(gen, frame, D0, beta, T, ref, h=0.05, constants="nominal", F=None, trace=None):
    """Minimum over the trace of bound(t) - (H_t - H_eq)."""
    times, H, Heq = trace if trace is not None else decay_trace(gen, D0, T, h, ref, F)
    gap0 = H[0] - Heq
    bound = np.exp(-_rate(gen.model, beta, constants) * times) * gap0
    return float(np.min(bound - (H - Heq)))


def empirical_beta(gen, frame, densities, ref, T=5.0, h=0.05, constants="nominal", rel=1e-4, F=None):
    """Largest beta passing both the decay check and the LSI over the sample."""
    F = limit_F(gen) if F is None else F
    traces = [decay_trace(gen, D, T, h, ref, F) for D in densities]
    b_lsi = min(lsi_beta_max(gen, D, ref, constants, F) for D in densities)

    def ok(beta):
        return all(entropy_decay_check(gen, frame, None, beta, T, ref, h, constants, F, tr) >= 0 for tr in traces)

    hi = b_lsi if math.isfinite(b_lsi) else 1e3
    if ok(hi):
        return hi
    lo = 0.0
    while hi - lo > rel * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class TalagrandResult:
    distance: float
    bound: float
    margin: float
    tail: float
    T_star: float


def talagrand_check(gen, frame, D, beta, ref, h=0.02, convention="pair", constants="nominal",
                    F=None, T_max=60.0):
    """Path length of the flow from D against 2 lam^(3/2) sqrt(dH / beta)."""
    mdl = gen.model
    refD = _expm_h(ref.log)
    Heq = equilibrium_entropy(gen, D, ref, F)
    gap = rel_entropy(D, refD) - Heq
    # the nominal constant pairs with the nominal LSI; the LSI with
    # 1/(2 beta) and kappa = lam^(-3/2)/2 gives 2 lam^(3/4) instead
    coef = 2 * mdl.lam ** 1.5 if constants == "nominal" else 2 * mdl.lam ** 0.75
    bound = coef * math.sqrt(max(gap, 0.0) / beta)
    if gap <= 1e-14:
        return TalagrandResult(0.0, bound, bound, 0.0, 0.0)
    # spectral gap of L_a off its kernel gives the speed decay rate
    ev = np.linalg.eigvals(superop(gen, "a*"))
    ev = ev[np.abs(ev) > 1e-9]
    if ev.size == 0 or ev.real.min() <= 0:
        raise TailNotBounded("no positive spectral gap")
    gap_rate = float(ev.real.min())
    dist, t, sp_prev = 0.0, 0.0, None
    speeds = []
    while True:
        t += h
        Dt = _herm_part(closed_form(gen, D, t))
        sp = metric_speed(frame, Dt, _rhs(gen, Dt), convention)
        speeds.append(sp)
        dist += h * sp    # right endpoint
        if sp_prev is not None and sp > sp_prev * (1 + 1e-9) and sp > 1e-12:
            raise TailNotBounded("speed is not decreasing along the flow", residual=sp - sp_prev)
        sp_prev = sp
        if len(speeds) >= 20:
            r = math.log(speeds[-20] / sp) / (19 * h) if sp > 0 else gap_rate
            rate = min(r, gap_rate)
            tail = sp / rate if rate > 0 else float("inf")
            if tail <= 1e-6 * dist or sp == 0.0:
                break
        if t > T_max:
            raise TailNotBounded("tail not certified before T_max")
    # the right-endpoint sum already under-counts a decreasing speed; add the
    # left-endpoint correction to make the estimate an upper bound
    dist_upper = dist + h * (metric_speed(frame, D, _rhs(gen, D), convention) - speeds[-1])
    total = dist_upper + tail
    return TalagrandResult(total, bound, bound - total, tail, t)


# ---------------------------------------------------------------------------
# intertwining


@dataclass
class IntertwiningResult:
    B: np.ndarray
    beta: float
    residual: float
    exp_residual: float


def intertwining_detect(L, derivations, t_samples=(0.1, 0.5, 1.0), target=None, gate=1e-9):
    """Constant B with d_a L - L' d_a = sum_c B_ac d_c for superoperator matrices."""
    import scipy.linalg as sla

    Lt = L if target is None else target
    G = np.stack([d.reshape(-1) for d in derivations], 1)
    rows, res = [], 0.0
    for d in derivations:
        r = (d @ L - Lt @ d).reshape(-1)
        c, *_ = np.linalg.lstsq(G, r, rcond=None)
        res = max(res, float(np.linalg.norm(G @ c - r)))
        rows.append(c)
    B = np.array(rows)
    if res > gate:
        raise NoLinearRelation("derivations are not intertwined by a constant matrix", residual=res)
    eres = 0.0
    for t in t_samples:
        Et = sla.expm(-t * B)
        Pt = sla.expm(-t * L)
        Ptt = sla.expm(-t * Lt)
        for a, d in enumerate(derivations):
            lhs = d @ Pt
            rhs = sum(Et[a, c] * Ptt @ derivations[c] for c in range(len(derivations)))
            eres = max(eres, float(np.abs(lhs - rhs).max()))
    beta = float(np.linalg.eigvals(B).real.min())
    return IntertwiningResult(B, beta, res, eres)
