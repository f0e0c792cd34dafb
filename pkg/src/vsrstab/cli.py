"""Command-line front end.

Each run takes an optional JSON config (``--config``); flags given on the
command line override config fields, and anything left unset falls back to
the subcommand defaults.  The fully resolved config is written next to the
reports as ``resolved_config.json`` and can be fed back with ``--config``.

Exit codes: 0 success, 1 violation or counterexample, 2 inconclusive,
64 configuration error, 70 internal error.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import io
import json
import math
import os
import secrets
import sys
import traceback

import numpy as np

from . import __version__
from .bounds import envelope_check, lemma1_probe
from .certifier import (
    Mode,
    Verdict,
    candidate_from_config,
    certify_decrease,
    check_sandwich,
    check_structural,
    default_grid,
    max_sampling_period,
)
from .errors import (
    ConfigError,
    DomainMismatch,
    InvalidExpression,
    InvalidSpec,
    NoneCertified,
    OriginNotFixed,
    VsrError,
)
from .example import example_certificate, example_closed_loop, example_coeffs, example_ttilde, verify_example
from .falsifier import Budget, FalsificationProblem, claim_from_config, falsify, replay_witness
from .models import ball_points, parse_model
from .trajectory import ErrorSpec, SamplingSpec, ScenarioSpec, make_scenarios, simulate_batch

EXIT_OK, EXIT_VIOLATION, EXIT_INCONCLUSIVE, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 64, 70

PAPER_CERT = {"alpha1": "pow(s,2)", "alpha2": "pow(s,2)", "alpha3": "3*pow(s,4)+pow(s,2)", "rho": "s/0.025"}

DEFAULTS = {
    "simulate": {
        "model": "paper_example", "x0": [1.0], "K_steps": 100,
        "periods": {"mode": "constant", "T_max": 0.1, "theta": 0.5},
        "errors": {"mode": "zero", "bound": 0.0},
        "witness": None, "claim": None,
    },
    "certify": {
        "model": "paper_example", "mode": "siss", "V": "pow(s,2)", **PAPER_CERT,
        "M": 1.0, "E": 0.025, "T_bound": 0.06,
        "grid": {"points": 33, "T_points": 32, "lhs_samples": 4096},
        "lipschitz": None, "search_T_hi": None, "sandwich_points": 401,
    },
    "structural": {
        "model": "paper_example", "T_probe": 0.06, "eps_grid": [0.01, 0.05, 0.1, 0.5, 1.0],
        "M_grid": [0.25, 0.5, 1.0, 2.0], "E_grid": [0.0, 0.01, 0.025, 0.05], "points": 17, "T_points": 32,
    },
    "bounds": {
        "model": "paper_example", "certificate": dict(PAPER_CERT), "from_certificate": None,
        "M0": 1.0, "E0": 0.0, "R": 0.0, "T_bound": 0.06,
        "ensemble": {"count": 1000, "horizon": 200, "errors": "sphere"},
        "t_grid": [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        "s_grid": [0.0, 0.005, 0.01, 0.015, 0.02, 0.025],
    },
    "falsify": {
        "model": "paper_example",
        "claim": {"type": "envelope", **PAPER_CERT, "M0": 1.0, "E0": 0.025, "T_bound": 0.06},
        "budget": {"restarts": 1000, "iterations": 30, "horizon": 100, "climbers": 4, "blocks": 8},
    },
    "probe": {
        "model": "paper_example", "M": 1.0, "D": 0.0, "T_probe": 0.06, "eps_grid": [0.01, 0.1, 0.5],
        "L_grid": [0.5, 1.0, 2.0, 5.0, 10.0], "count": 200, "horizon": 200, "delta_candidates": None,
    },
    "example": {
        "M": 1.0, "K": 0.025, "x_points": 2001, "e_points": 101, "T_points": 64,
        "M_table": [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
        "ensemble": {"count": 200, "horizon": 200},
    },
}

RANDOMIZED = {"simulate", "certify", "bounds", "falsify", "probe", "example"}

# (flag, config key, parser) per subcommand; parser "json" accepts JSON text
FLAGS = {
    "simulate": [("--model", "model", "model"), ("--x0", "x0", "json"), ("--periods-spec", "periods", "json"),
                 ("--errors-spec", "errors", "json"), ("--K-steps", "K_steps", int),
                 ("--witness", "witness", str), ("--claim", "claim", "json")],
    "certify": [("--model", "model", "model"), ("--mode", "mode", str), ("--V", "V", str),
                ("--alpha1", "alpha1", str), ("--alpha2", "alpha2", str), ("--alpha3", "alpha3", str),
                ("--rho", "rho", str), ("--M", "M", float), ("--E", "E", float), ("--D", "E", float),
                ("--T-bound", "T_bound", float), ("--grid", "grid", "json"), ("--lipschitz", "lipschitz", float),
                ("--search-T-hi", "search_T_hi", float)],
    "structural": [("--model", "model", "model"), ("--T-probe", "T_probe", float),
                   ("--eps-grid", "eps_grid", "json"), ("--M-grid", "M_grid", "json"),
                   ("--E-grid", "E_grid", "json"), ("--points", "points", int)],
    "bounds": [("--model", "model", "model"), ("--from-certificate", "from_certificate", str),
               ("--ensemble", "ensemble", "json"), ("--M0", "M0", float), ("--E0", "E0", float),
               ("--R", "R", float), ("--T-bound", "T_bound", float)],
    "falsify": [("--model", "model", "model"), ("--claim", "claim", "json_or_file"), ("--budget", "budget", "json")],
    "probe": [("--model", "model", "model"), ("--M", "M", float), ("--D", "D", float),
              ("--T-probe", "T_probe", float), ("--eps-grid", "eps_grid", "json"), ("--L-grid", "L_grid", "json"),
              ("--count", "count", int), ("--horizon", "horizon", int)],
    "example": [("--M", "M", float), ("--K", "K", float), ("--x-points", "x_points", int),
                ("--e-points", "e_points", int), ("--T-points", "T_points", int)],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _json_arg(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON value {text!r}: {exc}") from None


def _model_arg(text):
    return _json_arg(text) if text.lstrip().startswith("{") else text


def _json_or_file(text):
    if text.lstrip().startswith("{"):
        return _json_arg(text)
    return _read_json(text)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None


_TYPES = {"json": _json_arg, "model": _model_arg, "json_or_file": _json_or_file}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vsrstab", description="Stability workbench for sampled-data systems with varying sampling.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in FLAGS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file; flags override its fields")
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default=".", help="output directory")
        for flag, key, kind in flags:
            sp.add_argument(flag, dest=key, type=_TYPES.get(kind, kind), default=argparse.SUPPRESS)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags."""
    cfg = copy.deepcopy(DEFAULTS[command])
    cfg["seed"] = None
    if args.config:
        data = _read_json(args.config)
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        if data.get("command", command) != command:
            raise ConfigError(f"config is for {data['command']!r}, not {command!r}")
        data = {k: v for k, v in data.items() if k != "command"}
        unknown = set(data) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg.update(data)
    for flag_key in {key for _, key, _ in FLAGS[command]} | {"seed"}:
        if hasattr(args, flag_key):
            cfg[flag_key] = getattr(args, flag_key)
    if command in RANDOMIZED and cfg["seed"] is None:
        cfg["seed"] = secrets.randbits(31)
    return cfg


class Runner:
    def __init__(self, command, cfg, out, workers):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.workers = max(1, int(workers))
        self.written = []

    def write_json(self, name, obj):
        self._write(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")

    def write_csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self._write(name, buf.getvalue())

    def _write(self, name, text):
        os.makedirs(self.out, exist_ok=True)
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        self.written.append(path)


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj) + 0.0
        return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@contextlib.contextmanager
def config_phase():
    """Errors raised while interpreting the config become ConfigError."""
    try:
        yield
    except ConfigError:
        raise
    except (InvalidSpec, InvalidExpression, DomainMismatch, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from None


def _verdict_code(verdict):
    return {Verdict.CERTIFIED: EXIT_OK, Verdict.VIOLATED: EXIT_VIOLATION}.get(verdict, EXIT_INCONCLUSIVE)


# ---------------------------------------------------------------- subcommands

def cmd_simulate(r: Runner):
    c = r.cfg
    with config_phase():
        if c["witness"]:
            wit = _read_json(c["witness"])
            model = parse_model(wit.get("model", c["model"]))
            claim_cfg = c["claim"] if c["claim"] is not None else wit.get("claim")
            claim = claim_from_config(claim_cfg, model) if claim_cfg else None
        else:
            model = parse_model(c["model"])
            K = int(c["K_steps"])
            ps = dict(c["periods"])
            if "values" in ps:
                ps["values"] = tuple(ps["values"])
                K = len(ps["values"])
            sampling = SamplingSpec(**{"seed": c["seed"], **ps, "length": K})
            es = dict(c["errors"])
            for key in ("vector", "values"):
                if key in es:
                    es[key] = tuple(map(tuple, es[key])) if key == "values" else tuple(es[key])
            errors = ErrorSpec(**{"seed": c["seed"], **es, "length": K, "dim": model.q})
            from .trajectory import gen_errors, gen_sampling
            P = gen_sampling(sampling)
            E = gen_errors(errors)
            x0 = np.asarray(c["x0"], dtype=float).reshape(model.n)
    if c["witness"]:
        ens, violation = replay_witness(model, wit, claim)
    else:
        ens = simulate_batch(model, x0[None], P[None], E[None])
        violation = None
    traj = ens.trajectory(0)
    r._write("traj.csv", traj.to_csv())
    report = {"steps": len(traj.periods), "diverged_at": traj.diverged_at,
              "final_state": traj.states[-1], "final_time": traj.elapsed[len(traj.states) - 1]}
    if c["witness"]:
        report["replayed_violation"] = (None if violation is None else
                                        dict(zip(("k", "lhs", "rhs") if len(violation) == 3 else ("k", "margin"),
                                                 violation)))
    r.write_json("simulate.json", report)
    return EXIT_VIOLATION if violation is not None else EXIT_OK


def cmd_certify(r: Runner):
    c = r.cfg
    with config_phase():
        model = parse_model(c["model"])
        mode = Mode(c["mode"])
        cand = candidate_from_config({**c, "rho": c["rho"] if mode is Mode.SISSVSR else None}, model.n)
        g = c["grid"]
        grid = default_grid(model.n, model.q, cand.M, cand.E, points=int(g.get("points", 33)),
                            T_points=int(g.get("T_points", 32)), lhs_samples=int(g.get("lhs_samples", 4096)),
                            seed=c["seed"])
        sandwich_pts = ball_points(cand.M, model.n, int(c["sandwich_points"]))
        T_bound = float(c["T_bound"])
    sandwich = check_sandwich(cand, sandwich_pts)
    out = {"sandwich": sandwich.to_dict()}
    if c["search_T_hi"]:
        try:
            search = max_sampling_period(model, cand, mode, float(c["search_T_hi"]), grid=grid, workers=r.workers)
            rep = search.report
            out["period_search"] = {"T_max_certified": search.T_max_certified, "prefix": search.prefix,
                                    "scan": [{"T": T, "verdict": v, "min_margin": m} for T, v, m in search.scan]}
        except NoneCertified as exc:
            rep = exc.report
            out["period_search"] = {"T_max_certified": None, "error": str(exc)}
    else:
        rep = certify_decrease(model, cand, mode, T_bound, grid, lipschitz=c["lipschitz"], workers=r.workers)
    out["decrease"] = rep.to_dict()
    verdict = rep.verdict
    if sandwich.verdict is Verdict.VIOLATED:
        verdict = Verdict.VIOLATED
    elif sandwich.verdict is Verdict.INCONCLUSIVE and verdict is Verdict.CERTIFIED:
        verdict = Verdict.INCONCLUSIVE
    out["verdict"] = verdict.value
    r.write_json("certify.json", out)
    return _verdict_code(verdict)


def cmd_structural(r: Runner):
    c = r.cfg
    with config_phase():
        model = parse_model(c["model"])
        args = (float(c["T_probe"]), list(c["eps_grid"]), list(c["M_grid"]), list(c["E_grid"]))
    try:
        rep = check_structural(model, *args, points=int(c["points"]), T_points=int(c["T_points"]))
    except OriginNotFixed as exc:
        r.write_json("structural.json", {"origin_residual": exc.residual, "error": str(exc)})
        return EXIT_VIOLATION
    r.write_json("structural.json", rep.to_dict())
    r.write_csv("delta.csv", ["arg", "value"], zip(rep.eps_grid, rep.delta_table))
    r.write_csv("C.csv", ["M", "E", "value"],
                [(m, e, rep.C_table[i][j]) for i, m in enumerate(rep.M_grid) for j, e in enumerate(rep.E_grid)])
    return EXIT_OK


def cmd_bounds(r: Runner):
    from .falsifier import envelope_from_certificate
    from .comparison import comparison_fn

    c = r.cfg
    with config_phase():
        model = parse_model(c["model"])
        cert = dict(c["certificate"])
        if c["from_certificate"]:
            cert.update(_read_json(c["from_certificate"]))
        a1, a2, a3 = (comparison_fn(cert[k]) for k in ("alpha1", "alpha2", "alpha3"))
        rho = comparison_fn(cert["rho"]) if cert.get("rho") else None
        M0, E0, T_bound = float(c["M0"]), float(c["E0"]), float(c["T_bound"])
        env = envelope_from_certificate(model, a1, a2, a3, rho, M0, E0, T_bound, float(c["R"]))
        ecfg = c["ensemble"]
        K = int(ecfg.get("horizon", 200))
        spec = ScenarioSpec(int(ecfg.get("count", 1000)), M0, model.n, SamplingSpec("uniform", T_bound, K),
                            ErrorSpec(ecfg.get("errors", "sphere") if E0 > 0 else "zero", E0, model.q, K),
                            seed=c["seed"])
        x0, P, E = make_scenarios(spec)
    ens = simulate_batch(model, x0, P, E, workers=r.workers)
    rep = envelope_check(ens, env.beta, env.gamma, env.R)
    out = rep.to_dict()
    out["M_inflated"] = env.config["M_inflated"]
    out["caveats"] = ["finite ensemble evidence only; not a proof"]
    r.write_json("envelope.json", out)
    t_grid = [float(t) for t in c["t_grid"]]
    r.write_csv("beta.csv", ["arg", "value"], [(t, float(env.beta(M0, t))) for t in t_grid])
    if env.gamma is not None:
        r.write_csv("gamma.csv", ["arg", "value"], [(float(s), float(env.gamma(float(s)))) for s in c["s_grid"]])
    return EXIT_VIOLATION if rep.violations else EXIT_OK


def cmd_falsify(r: Runner):
    c = r.cfg
    with config_phase():
        model = parse_model(c["model"])
        claim_cfg = c["claim"] if isinstance(c["claim"], dict) else _read_json(c["claim"])
        claim = claim_from_config(claim_cfg, model)
        budget = Budget(**{**c["budget"], "seed": c["seed"]})
    res = falsify(FalsificationProblem(model, claim, budget), workers=r.workers)
    out = res.to_dict()
    if res.found:
        out["model"] = c["model"]
        r.write_json("witness.json", out)
        r.write_json("falsify.json", {"result": "Witness", "violation": out["violation"],
                                      "scenarios_evaluated": out["scenarios_evaluated"]})
        return EXIT_VIOLATION
    r.write_json("falsify.json", out)
    return EXIT_OK


def cmd_probe(r: Runner):
    c = r.cfg
    with config_phase():
        model = parse_model(c["model"])
        kwargs = dict(count=int(c["count"]), horizon=int(c["horizon"]), seed=c["seed"],
                      delta_candidates=c["delta_candidates"], workers=r.workers)
        args = (float(c["M"]), float(c["D"]), float(c["T_probe"]), list(c["eps_grid"]), list(c["L_grid"]))
    tab = lemma1_probe(model, *args, **kwargs)
    r.write_json("probe.json", tab.to_dict())
    r.write_csv("delta.csv", ["arg", "value"], zip(tab.eps_grid, tab.delta_table))
    r.write_csv("C.csv", ["arg", "value"], zip(tab.L_grid, tab.C_table))
    r.write_csv("attract.csv", ["arg", "value"], zip(tab.eps_grid, tab.attract_table))
    return EXIT_OK


def cmd_example(r: Runner):
    from .bounds import beta_from_certificate

    c = r.cfg
    with config_phase():
        M, K = float(c["M"]), float(c["K"])
        cert = example_certificate(M, K)
        M_table = [float(m) for m in c["M_table"]]
        ecfg = c["ensemble"]
    rep = verify_example(M, K, int(c["x_points"]), int(c["e_points"]), int(c["T_points"]), workers=r.workers)
    out = {"coefficients": dict(zip("abcd", example_coeffs(K))), "K": K, "M": M, "Ttilde": cert.Ttilde,
           "certification": rep.to_dict()}
    code = _verdict_code(rep.verdict)
    if M > 0:
        steps = int(ecfg.get("horizon", 200))
        spec = ScenarioSpec(int(ecfg.get("count", 200)), M, 1, SamplingSpec("uniform", cert.Ttilde, steps),
                            ErrorSpec("zero", 0.0, 1, steps), seed=c["seed"])
        x0, P, E = make_scenarios(spec)
        ens = simulate_batch(example_closed_loop(), x0, P, E, workers=r.workers)
        env = envelope_check(ens, beta_from_certificate(cert.alpha1, cert.alpha2, cert.alpha3))
        out["envelope"] = env.to_dict()
        if env.violations:
            code = EXIT_VIOLATION
    r.write_json("example.json", out)
    r.write_csv("coefficients.csv", ["arg", "value"], zip("abcd", example_coeffs(K)))
    r.write_csv("ttilde.csv", ["arg", "value"], [(m, example_ttilde(m, K)) for m in M_table])
    return code


HANDLERS = {"simulate": cmd_simulate, "certify": cmd_certify, "structural": cmd_structural,
            "bounds": cmd_bounds, "falsify": cmd_falsify, "probe": cmd_probe, "example": cmd_example}


def run(argv=None) -> int:
    """Run one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        cfg = resolve_config(args.command, args)
        runner = Runner(args.command, cfg, args.out, args.workers)
        runner.write_json("resolved_config.json", {"command": args.command, **cfg})
        code = HANDLERS[args.command](runner)
    except ConfigError as exc:
        print(f"vsrstab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VsrError as exc:
        print(f"vsrstab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        print(f"vsrstab: internal error: {exc}", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return EXIT_INTERNAL
    print(json.dumps({"command": args.command, "exit": code, "files": runner.written}))
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
