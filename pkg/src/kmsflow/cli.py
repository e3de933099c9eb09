"""Batch front-end: config validation, check orchestration, reports.

Exit codes: 0 every check passed, 1 some check failed, 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import math
import platform
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import clifford as cl
from . import directional as dr
from . import flow as fl
from . import semigroup as sg
from .errors import ConfigInvalid, KmsFlowError
from .matcore import Rng, sample
from .tower import MAX_SCHUR_N, MAX_TENSOR_N, InclusionModel, oracle_suite

CHECKS = ("model_check", "kms", "frame", "calibrate", "master_identity", "flow", "lsi", "decay",
          "talagrand", "clifford")

_matrix = {
    "oneOf": [
        {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        {"type": "object", "additionalProperties": False, "required": ["re"],
         "properties": {"re": {"type": "array"}, "im": {"type": "array"}}},
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["generator"],
    "properties": {
        "inclusion": {
            "type": "object", "additionalProperties": False, "required": ["kind", "n"],
            "properties": {"kind": {"enum": ["diag_in_matn", "full_mat"]},
                           "n": {"type": "integer", "minimum": 1},
                           "tensor": {"type": "boolean"}},
        },
        "generator": {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {
                "kind": {"enum": ["example_n3", "schur_L0", "sandwich", "carlen_maas", "clifford",
                                  "random_kms", "symmetric"]},
                "mu": {"type": "number", "exclusiveMinimum": 0},
                "gns": {"type": "boolean"},
                "a": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "convention": {"type": "string"},
                "L0": _matrix, "H0": _matrix, "rho": _matrix,
                "jump_ops": {"type": "array", "items": _matrix},
                "delta_exponent": {"type": "number"},
                "seed": {"type": "integer", "minimum": 0},
                "strength": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "delta": {
            "type": "object", "additionalProperties": False,
            "properties": {"matrix": _matrix, "density": _matrix, "s": {"type": "number"}},
        },
        "flow": {
            "type": "object", "additionalProperties": False,
            "properties": {"T": {"type": "number", "exclusiveMinimum": 0},
                           "step": {"type": "number", "exclusiveMinimum": 0},
                           "seed": {"type": "integer", "minimum": 0},
                           "densities": {"type": "integer", "minimum": 1},
                           "beta": {"type": "number", "exclusiveMinimum": 0},
                           "constants": {"enum": ["nominal", "rederived"]}},
        },
        "checks": {"type": "array", "items": {"enum": list(CHECKS)}},
        "tolerances": {
            "type": "object", "additionalProperties": False,
            "properties": {"tol": {"type": "number", "exclusiveMinimum": 0}},
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

DEFAULT_TOL = 1e-7


def _mat(spec):
    if isinstance(spec, dict):
        re = np.asarray(spec["re"], dtype=float)
        im = np.asarray(spec.get("im", np.zeros_like(re)), dtype=float)
        return re + 1j * im
    return np.asarray(spec, dtype=complex)


def validate_config(cfg) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigInvalid(f"config: {exc.message}") from exc
    inc = cfg.get("inclusion")
    if inc:
        n = inc["n"]
        if inc.get("tensor") and n > MAX_TENSOR_N:
            raise ConfigInvalid(f"TensorRep supports n <= {MAX_TENSOR_N}, got {n}")
        if n > MAX_SCHUR_N:
            raise ConfigInvalid(f"n={n} exceeds {MAX_SCHUR_N}")
    return cfg


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return validate_config(cfg)


# ---------------------------------------------------------------------------
# building


def build_generator(cfg, seed):
    g = cfg["generator"]
    inc = cfg.get("inclusion", {})
    kind = g["kind"]
    try:
        if kind == "example_n3":
            return sg.build_example_n3(g.get("mu", 2.0), gns=g.get("gns", False)), None
        if kind == "clifford":
            cm = cl.build_clifford(g.get("a", 0.7), g.get("mu", 2.0), g.get("convention", cl.CONVENTIONS[0]))
            return cm.gen, cm
        if kind == "random_kms":
            return sg.random_kms_schur(inc.get("n", 3), Rng(g.get("seed", seed)), g.get("strength", 1.0)), None
        if kind == "symmetric":
            return sg.symmetric_schur(inc.get("n", 3), Rng(g.get("seed", seed))), None
        if kind == "carlen_maas":
            return sg.build_carlen_maas([_mat(v) for v in g["jump_ops"]], _mat(g["rho"]),
                                        g.get("delta_exponent", 0.5)), None
        model = InclusionModel(inc.get("kind", "diag_in_matn"), inc.get("n", 3))
        delta = _delta(cfg, model)
        if kind == "schur_L0":
            return sg.build_from_L0(model, _mat(g["L0"]), delta), None
        if kind == "sandwich":
            return sg.build_sandwich(model, _mat(g["H0"]), delta), None
    except KeyError as exc:
        raise ConfigInvalid(f"generator {kind!r} needs {exc.args[0]!r}") from exc
    raise ConfigInvalid(f"unknown generator kind {kind!r}")


def _delta(cfg, model):
    d = cfg.get("delta")
    if not d:
        raise ConfigInvalid("this generator needs a delta specification")
    if "matrix" in d:
        return _mat(d["matrix"])
    if "density" in d:
        rho = _mat(d["density"])
        s = d.get("s", 0.5)
        if model.kind == "diag_in_matn":
            from .tower import hat_delta_from_density
            return hat_delta_from_density(model, rho, s)
        return sg.hat_delta_full(model, rho, s)
    raise ConfigInvalid("delta needs 'matrix' or 'density'")


# ---------------------------------------------------------------------------
# checks


def _rec(check, ok, margin, residual, seed, **extra):
    r = {"check": check, "pass": bool(ok),
         "margin": None if margin is None else _num(margin),
         "residual": None if residual is None else _num(residual), "seed": seed}
    r.update({k: _jsonable(v) for k, v in extra.items()})
    return r


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else repr(v)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        if np.iscomplexobj(v):
            return {"re": v.real.tolist(), "im": v.imag.tolist()} if np.abs(v.imag).max() > 0 else v.real.tolist()
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


class Context:
    def __init__(self, cfg, seed, tol):
        self.cfg = cfg
        self.seed = seed
        self.tol = tol
        self.gen, self.cm = build_generator(cfg, seed)
        self._frame = None
        self._ref = None
        self._F = None
        self._beta = None
        self.traces = {}

    @property
    def flowcfg(self):
        return self.cfg.get("flow", {})

    @property
    def fseed(self):
        return self.flowcfg.get("seed", self.seed)

    @property
    def frame(self):
        if self._frame is None:
            self._frame = dr.build_frame(self.gen, Rng(self.seed))
        return self._frame

    @property
    def ref(self):
        if self._ref is None:
            self._ref = fl.reference_density(self.frame, Rng(self.seed))
        return self._ref

    @property
    def F(self):
        if self._F is None:
            self._F = sg.limit_F(self.gen)
        return self._F

    def densities(self, count=None):
        count = self.flowcfg.get("densities", 10) if count is None else count
        rng = Rng(self.fseed)
        return [sample(rng, "density", self.gen.model.n) for _ in range(count)]

    @property
    def constants(self):
        return self.flowcfg.get("constants", "nominal")

    def beta(self):
        if self._beta is None:
            if "beta" in self.flowcfg:
                self._beta = (self.flowcfg["beta"], "configured")
            elif self.cm is not None:
                self._beta = (cl.beta(self.cm), "intertwining")
            else:
                b = fl.empirical_beta(self.gen, self.frame, self.densities(), self.ref,
                                      constants=self.constants, F=self.F)
                self._beta = (b, "empirical")
        return self._beta


def check_model_check(ctx):
    n = ctx.gen.model.n
    if ctx.gen.model.kind != "diag_in_matn" or n > MAX_TENSOR_N:
        return [_rec("model_check", True, None, 0.0, ctx.seed, skipped="no tensor oracle for this model")]
    res = oracle_suite(n, Rng(ctx.seed), 50)
    worst = max(res.values())
    return [_rec("model_check", worst <= ctx.tol, ctx.tol - worst, worst, ctx.seed, residuals=res)]


def check_kms(ctx):
    rep = sg.verify_kms(ctx.gen)
    out = []
    for k, v in sorted(rep.checks.items()):
        ok = v["pass"] if not k.endswith("_diagnostic") else True
        out.append(_rec(f"kms.{k}", ok, None, v["residual"], ctx.seed,
                        **({"diagnostic_pass": v["pass"]} if k.endswith("_diagnostic") else {})))
    return out


def check_frame(ctx):
    fr = ctx.frame
    worst = max(fr.diagnostics.values())
    D = ctx.densities(1)[0]
    try:
        lo, herm = dr.check_weighted_positive(fr, D)
        pos = True
    except KmsFlowError as exc:
        lo, herm, pos = exc.residual, None, False
    return [_rec("frame", worst <= 1e-8 and pos, lo, worst, ctx.seed, frame=fr.to_record())]


def _calibration(ctx):
    try:
        return fl.calibrate(ctx.frame, rng=Rng(ctx.seed)), None
    except KmsFlowError as exc:
        return None, exc


def check_calibrate(ctx):
    rep, err = _calibration(ctx)
    if rep is None:
        return [_rec("calibrate", False, None, err.residual, ctx.seed, error=str(err))]
    return [_rec("calibrate", rep.strict, CAL_MARGIN - rep.max_residual, rep.max_residual, ctx.seed,
                 calibration=rep.as_record())]


CAL_MARGIN = fl.CAL_STRICT


def check_master_identity(ctx):
    rep, err = _calibration(ctx)
    if rep is None:
        return [_rec("master_identity", False, None, err.residual, ctx.seed, error=str(err))]
    worst = 0.0
    for D in ctx.densities(20):
        ref = sg.laplacian_dual_apply(ctx.gen, D)
        got = fl.laplacian_dual_flowform(ctx.frame, D, rep)
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    return [_rec("master_identity", worst <= ctx.tol, ctx.tol - worst, worst, ctx.seed,
                 convention=rep.convention, kappa=rep.kappa)]


def check_flow(ctx):
    T = ctx.flowcfg.get("T", 5.0)
    h = ctx.flowcfg.get("step", 0.01)
    D0 = ctx.densities(1)[0]
    tr = fl.integrate(ctx.gen, ctx.frame, D0, T, h, ctx.ref, speeds=True)
    exact = fl.closed_form(ctx.gen, D0, T)
    err = float(np.abs(tr.densities[-1] - exact).max())
    mono = float(np.max(np.diff(tr.entropies))) if len(tr.entropies) > 1 else 0.0
    beta, src = ctx.beta()
    Heq = fl.equilibrium_entropy(ctx.gen, D0, ctx.ref, ctx.F)
    rate = fl._rate(ctx.gen.model, beta, ctx.constants)
    tr.bounds = np.exp(-rate * tr.times) * (tr.entropies[0] - Heq)
    tr.meta["H_eq"] = Heq
    ctx.traces["flow"] = tr
    ok = err <= max(ctx.tol, 1e-8) and mono <= 1e-12
    return [_rec("flow", ok, -mono, err, ctx.fseed, T=T, step=h, halvings=tr.halvings, reference=ctx.ref.kind,
                 beta=beta, beta_source=src, min_slack=float(np.min(tr.slacks())))]


def check_lsi(ctx):
    beta, src = ctx.beta()
    m = min(fl.lsi_check(ctx.gen, ctx.frame, D, beta, ctx.ref, ctx.constants, ctx.F) for D in ctx.densities())
    return [_rec("lsi", m >= -1e-9, m, None, ctx.fseed, beta=beta, beta_source=src, constants=ctx.constants,
                 reference=ctx.ref.kind)]


def check_decay(ctx):
    beta, src = ctx.beta()
    T = ctx.flowcfg.get("T", 5.0)
    m = min(fl.entropy_decay_check(ctx.gen, ctx.frame, D, beta, T, ctx.ref, constants=ctx.constants, F=ctx.F)
            for D in ctx.densities())
    return [_rec("decay", m >= -1e-9, m, None, ctx.fseed, beta=beta, beta_source=src, constants=ctx.constants)]


def check_talagrand(ctx):
    beta, src = ctx.beta()
    out = []
    for i, D in enumerate(ctx.densities(2)):
        try:
            r = fl.talagrand_check(ctx.gen, ctx.frame, D, beta, ctx.ref, constants=ctx.constants, F=ctx.F)
        except KmsFlowError as exc:
            out.append(_rec(f"talagrand.{i}", False, None, exc.residual, ctx.fseed, error=str(exc)))
            continue
        out.append(_rec(f"talagrand.{i}", r.margin >= -1e-6, r.margin, r.tail, ctx.fseed, distance=r.distance,
                        bound=r.bound, beta=beta, beta_source=src, constants=ctx.constants))
    return out


def check_clifford(ctx):
    if ctx.cm is None:
        return [_rec("clifford", True, None, 0.0, ctx.seed, skipped="not a clifford generator")]
    return [clifford_record(ctx.cm.a, ctx.cm.mu, ctx.seed)]


def clifford_record(a, mu, seed):
    conv = cl.discover_convention()
    cm = cl.build_clifford(a, mu, conv)
    r = cl.intertwining_constants(cm)
    Bd = cl.target_B(a, mu)
    err = float(np.abs(r.B - Bd).max())
    exp_res = max(cl.exp_intertwining_residual(cm, t) for t in (0.1, 0.5, 1.0))
    b = cl.beta(cm)
    return _rec("clifford", err <= 1e-10 and exp_res <= 1e-8, 1e-10 - err, max(err, r.residual), seed,
                a=a, b=1 - a, mu=mu, B=r.B, beta=b, convention=conv, exp_residual=exp_res)


RUNNERS = {
    "model_check": check_model_check, "kms": check_kms, "frame": check_frame, "calibrate": check_calibrate,
    "master_identity": check_master_identity, "flow": check_flow, "lsi": check_lsi, "decay": check_decay,
    "talagrand": check_talagrand, "clifford": check_clifford,
}


def fingerprint():
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def run(cfg, seed=0, tol=None, checks=None, timing=False):
    cfg = validate_config(cfg)
    tol = cfg.get("tolerances", {}).get("tol", DEFAULT_TOL) if tol is None else tol
    ctx = Context(cfg, seed, tol)
    names = checks if checks is not None else cfg.get("checks", ["kms"])
    records = []
    for name in names:
        t0 = time.perf_counter()
        try:
            recs = RUNNERS[name](ctx)
        except KmsFlowError as exc:
            recs = [_rec(name, False, None, exc.residual, seed, error=f"{type(exc).__name__}: {exc}")]
        if timing:
            ms = (time.perf_counter() - t0) * 1e3
            for r in recs:
                r["runtime_ms"] = round(ms, 3)
        records.extend(recs)
    report = {"records": records, "all_pass": all(r["pass"] for r in records), "environment": fingerprint(),
              "seed": seed, "tol": tol}
    return report, ctx


# ---------------------------------------------------------------------------
# entry point


SUBCOMMANDS = {
    "model-check": ["model_check"],
    "verify": ["kms"],
    "frame": ["frame"],
    "flow": ["flow"],
    "lsi": ["lsi", "decay"],
    "talagrand": ["talagrand"],
    "calibrate": ["calibrate"],
    "run": None,
}


def _parser():
    p = argparse.ArgumentParser(prog="kmsflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    for name in list(SUBCOMMANDS) + ["clifford"]:
        s = sub.add_parser(name)
        s.add_argument("--config", required=(name != "clifford"))
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default=None)
        s.add_argument("--tol", type=float, default=None)
        s.add_argument("--json", action="store_true", help="print the report as JSON")
        s.add_argument("--timing", action="store_true", help="add runtime_ms to records")
        if name == "flow":
            s.add_argument("--T", type=float, default=None)
            s.add_argument("--step", type=float, default=None)
        if name == "clifford":
            s.add_argument("--a", type=float, nargs="*", default=[0.2, 0.5, 0.7])
            s.add_argument("--mu", type=float, nargs="*", default=[0.5, 1.0, 2.0, 3.0])
    return p


def _emit(report, args, csv=None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.cmd}.json").write_text(text + "\n")
        if csv is not None:
            (out / "flow.csv").write_text(csv)
    if args.json or not args.out:
        print(text)
    elif csv is not None and not args.out:
        print(csv, end="")


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "clifford":
            recs = [clifford_record(a, mu, args.seed) for a in args.a for mu in args.mu]
            report = {"records": recs, "all_pass": all(r["pass"] for r in recs), "environment": fingerprint(),
                      "seed": args.seed}
            _emit(report, args)
            return 0 if report["all_pass"] else 1
        cfg = load_config(args.config)
        if args.cmd == "flow":
            fcfg = dict(cfg.get("flow", {}))
            if args.T is not None:
                fcfg["T"] = args.T
            if args.step is not None:
                fcfg["step"] = args.step
            cfg = dict(cfg, flow=fcfg)
        report, ctx = run(cfg, args.seed, args.tol, SUBCOMMANDS[args.cmd], args.timing)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KmsFlowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    csv = ctx.traces["flow"].to_csv() if "flow" in ctx.traces else None
    if args.cmd == "flow" and not args.json and not args.out:
        print(csv, end="")
    else:
        _emit(report, args, csv)
    return 0 if report["all_pass"] else 1


if __name__ == "__main__":
    sys.exit(main())
