"""Command-line interface.

Every run writes its outputs to ``--out`` (or ``$THINLEVY_OUT``, default
the current directory) followed by ``manifest-<command>.json`` listing the
SHA-256 digest of each output.  Exit codes: 0 success, 1 numerical failure,
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .numerics import InversionConfig, NumericalError, QuadratureSpec, zeta_em
from .process import Measure, ModelParams, TruncationScheme, eval_path, hitting_time, sample_clocks

OUT_ENV = "THINLEVY_OUT"

# key -> (type, validator, description)
CONFIG_SCHEMA: dict[str, tuple[type, Callable[[float], bool], str]] = {
    "model.tau": (float, lambda x: 3.0 < x < 4.0, "in (3, 4)"),
    "model.beta_tilde": (float, math.isfinite, "finite"),
    "graph.lambda": (float, math.isfinite, "finite"),
    "trunc.N": (int, lambda x: x >= 1000, ">= 1000"),
    "mc.reps": (int, lambda x: x >= 100, ">= 100"),
    "mc.seed": (int, lambda x: 0 <= x < 2**64, "a 64-bit unsigned integer"),
    "quad.abs_tol": (float, lambda x: x > 0, "> 0"),
    "quad.rel_tol": (float, lambda x: x > 0, "> 0"),
    "inversion.order": (int, lambda x: x in (8, 10, 12, 14, 16), "one of 8, 10, 12, 14, 16"),
}

DEFAULTS = {
    "model.tau": 3.5, "model.beta_tilde": 0.0, "graph.lambda": 0.0, "trunc.N": 100_000,
    "mc.reps": 10_000, "mc.seed": 0, "quad.abs_tol": 1e-10, "quad.rel_tol": 1e-8, "inversion.order": 14,
}

FLAG_KEYS = {
    "tau": "model.tau", "beta_tilde": "model.beta_tilde", "lam": "graph.lambda", "N": "trunc.N",
    "reps": "mc.reps", "seed": "mc.seed", "abs_tol": "quad.abs_tol", "rel_tol": "quad.rel_tol",
    "order": "inversion.order",
}


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


def load_config(path: Optional[str]) -> dict:
    """Read a flat JSON object of documented keys; unknown keys are rejected."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a flat JSON object")
    unknown = sorted(set(raw) - set(CONFIG_SCHEMA))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _check(k, v) for k, v in raw.items()}


def _check(key: str, value):
    typ, ok, desc = CONFIG_SCHEMA[key]
    try:
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        value = typ(value)
    except (TypeError, ValueError):
        raise UsageError(f"{key} must be {typ.__name__}, got {value!r}") from None
    if not ok(value):
        raise UsageError(f"{key} must be {desc}, got {value!r}")
    return value


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    cfg.update(load_config(getattr(args, "config", None)))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = _check(key, value)
    QuadratureSpec(abs_tol=cfg["quad.abs_tol"], rel_tol=cfg["quad.rel_tol"])
    InversionConfig(order=cfg["inversion.order"])
    return cfg


# ---------------------------------------------------------------------------
# output


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    return str(x)


def emit_csv(rows: Iterable[dict], schema: Sequence[str], path: Optional[str] = None) -> str:
    """CSV text with a header row, 17 significant digits and LF line endings.

    Written atomically to ``path`` when given.
    """
    schema = list(schema)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(schema)
    for row in rows:
        if set(row) != set(schema):
            raise ValueError(f"row keys {sorted(row)} do not match schema {schema}")
        writer.writerow([format_value(row[k]) for k in schema])
    text = buf.getvalue()
    if path is not None:
        atomic_write(path, text)
    return text


def parse_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def sha256_file(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: Optional[int]
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None
    outputs: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def record(self, path: str) -> None:
        self.outputs[os.path.basename(path)] = sha256_file(path)

    def write(self, path: str) -> None:
        self.finished = time.time()
        atomic_write(path, dump_json(self.__dict__))

    @staticmethod
    def verify(path: str) -> bool:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        return all(sha256_file(os.path.join(base, name)) == digest for name, digest in data["outputs"].items())


class Run:
    """Collects output files for one command and writes the manifest last."""

    def __init__(self, args: argparse.Namespace, cfg: dict, argv: Sequence[str]):
        self.out = args.out or os.environ.get(OUT_ENV) or "."
        self.command = args.command
        self.manifest = RunManifest(list(argv), cfg, cfg.get("mc.seed"))

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def csv(self, name: str, rows, schema) -> str:
        p = self.path(name)
        emit_csv(rows, schema, p)
        self.manifest.record(p)
        return p

    def append_csv(self, name: str, row: dict, schema) -> str:
        p = self.path(name)
        existing = ""
        if os.path.exists(p):
            with open(p, encoding="utf-8", newline="") as fh:
                existing = fh.read()
            if existing and existing.splitlines()[0].split(",") != list(schema):
                raise UsageError(f"{p} has a different header; refusing to append")
        body = emit_csv([row], schema)
        atomic_write(p, existing + body.split("\n", 1)[1] if existing else body)
        self.manifest.record(p)
        return p

    def json(self, name: str, obj) -> str:
        p = self.path(name)
        atomic_write(p, dump_json(obj))
        self.manifest.record(p)
        return p

    def finish(self) -> None:
        self.manifest.write(self.path(f"manifest-{self.command}.json"))


# ---------------------------------------------------------------------------
# helpers


def parse_range(text: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
                raise ValueError
            a, b, h = parts
            k = int(math.floor((b - a) / h + 1e-9))
            return [a + i * h for i in range(k + 1)]
        values = [float(p) for p in text.split(",") if p.strip()]
        if not values:
            raise ValueError
        return values
    except ValueError:
        raise UsageError(f"cannot parse range {text!r}; use a:b:step or a,b,c") from None


def _params(cfg: dict) -> ModelParams:
    return ModelParams(tau=cfg["model.tau"], beta_tilde=cfg["model.beta_tilde"])


def _params_dict(cfg: dict) -> dict:
    return {"tau": cfg["model.tau"], "beta_tilde": cfg["model.beta_tilde"], "N": cfg["trunc.N"]}


def _table(cfg: dict):
    from .ratefn import solve_theta_star
    return solve_theta_star(_params(cfg))


def _endgame(cfg: dict, table):
    from .endgame import build_endgame
    return build_endgame(table, InversionConfig(order=cfg["inversion.order"]))


# ---------------------------------------------------------------------------
# commands


def cmd_ratefn(args, cfg, run: Run) -> None:
    from .ratefn import i_e, small_p_variance_constant, variance_fns
    table = _table(cfg)
    ps = np.linspace(0.0, 1.0, args.points)
    rows = []
    for p in ps:
        iv, jv, gv = variance_fns(float(p), table)
        rows.append({"p": float(p), "I_E": i_e(float(p), table), "I_V": iv, "J_V": jv, "G_V": gv})
    run.csv("ratefn.csv", rows, ["p", "I_E", "I_V", "J_V", "G_V"])
    summary = {"params": _params_dict(cfg), "theta_star": table.theta_star, "I": table.I,
               "zeta_alpha": table.zeta_alpha, "zeta_2alpha": table.zeta_2alpha, "B": table.B,
               "I_V1": table.density.I_V1, "small_p_variance_constant": small_p_variance_constant(table.params)}
    if args.with_endgame:
        eg = _endgame(cfg, table)
        summary.update({"kappa": eg.kappa, "A": eg.A, "D": eg.D})
    run.json("ratefn.json", summary)
    print(dump_json(summary), end="")


def cmd_tail(args, cfg, run: Run) -> None:
    from .endgame import predict_log_tails
    from .ratefn import log_phi, theta_star_u
    table = _table(cfg)
    eg = _endgame(cfg, table)
    rows = []
    for u in parse_range(args.u):
        if u <= 0:
            raise UsageError("u must be positive")
        lsu, lh1 = predict_log_tails(u, table, eg)
        rows.append({"u": u, "theta_u": theta_star_u(u, table), "log_phi": log_phi(u, table),
                     "p_su_pred": math.exp(lsu), "p_h1_pred": math.exp(lh1),
                     "log_p_su_pred": lsu, "log_p_h1_pred": lh1})
    schema = ["u", "log_phi", "p_su_pred", "p_h1_pred"]
    if args.verbose_columns:
        schema += ["theta_u", "log_p_su_pred", "log_p_h1_pred"]
    run.csv("tail.csv", [{k: r[k] for k in schema} for r in rows], schema)


NAIVE_MAX_U = 3.0


def cmd_estimate(args, cfg, run: Run) -> None:
    from .mc import estimate_h1_tail, estimate_su_positive
    if args.method == "naive" and args.u > NAIVE_MAX_U:
        raise UsageError(f"naive Monte Carlo is refused beyond u={NAIVE_MAX_U}: the event probability "
                         f"is too small for direct sampling at desk scale; use --method tilted_is")
    params = _params(cfg)
    scheme = TruncationScheme(N=cfg["trunc.N"])
    fn = estimate_su_positive if args.target == "su" else estimate_h1_tail
    est = fn(params, args.u, args.method, cfg["mc.reps"], cfg["mc.seed"], scheme)
    out = {"target": args.target, "u": args.u, "estimate": est.value, "se": est.std_error,
           "ess": est.effective_sample_size, "log_estimate": est.log_value, "log_se": est.log_std_error,
           "log_normalizer": est.log_normalizer, "theta": est.theta, "reps": est.reps,
           "method": est.method, "seed": cfg["mc.seed"], "params": _params_dict(cfg)}
    run.json(f"estimate-{args.target}.json", out)
    schema = ["target", "u", "method", "reps", "seed", "estimate", "se", "log_estimate", "ess"]
    run.append_csv("estimates.csv", {k: out[k] for k in schema}, schema)
    print(dump_json(out), end="")


def cmd_simulate_process(args, cfg, run: Run) -> None:
    params = _params(cfg)
    scheme = TruncationScheme(N=cfg["trunc.N"])
    if args.measure == "tilted":
        if args.theta is None:
            from .ratefn import theta_star_u
            theta = theta_star_u(args.u, _table(cfg))
        else:
            theta = args.theta
        measure = Measure.tilted(theta)
    else:
        measure = Measure.original()
    sample = sample_clocks(params, args.u, scheme, measure, cfg["mc.seed"], args.replica)
    grid = np.linspace(0.0, args.u, args.points)
    rows = []
    for t in grid:
        pv = eval_path(sample, float(t))
        rows.append({"t": pv.t, "value": pv.value, "head_part": pv.head_part,
                     "tail_mean_part": pv.tail_mean_part, "tail_noise_part": pv.tail_noise_part})
    run.csv("path.csv", rows, ["t", "value", "head_part", "tail_mean_part", "tail_noise_part"])
    run.json("sample.json", json.loads(sample.to_json()))
    print(dump_json({"hitting_time": hitting_time(sample), "S_u": eval_path(sample, args.u).value}), end="")


def cmd_simulate_graph(args, cfg, run: Run) -> None:
    from .graphsim import graph_ensemble
    res = graph_ensemble(args.n, cfg["model.tau"], cfg["graph.lambda"], args.graph_reps, cfg["mc.seed"], args.kernel)
    run.csv("graph.csv", res.rows(), ["n", "replica", "c1_ordered", "c_vertex1", "m", "nu_n"])
    run.manifest.notes.append("weights use w_n = x0 at i = n (Pareto form) instead of the inverse-function value 0")


def cmd_scale_function(args, cfg, run: Run) -> None:
    from .endgame import g_scale
    eg = _endgame(cfg, _table(cfg))
    rows = []
    for v in parse_range(args.v):
        W, g = g_scale(v, eg)
        rows.append({"v": v, "W": W, "g": g})
    run.csv("scale_function.csv", rows, ["v", "W", "g"])


def cmd_benchmark_bm(args, cfg, run: Run) -> None:
    from .mc import bm_pittel_benchmark
    res = bm_pittel_benchmark(args.bm_lambda, args.u, args.bm_reps,
                              args.dt, cfg["mc.seed"])
    out = {"lambda": args.bm_lambda, "u": args.u, "dt": args.dt, "p_longest": res.longest_excursion.value,
           "se_longest": res.longest_excursion.std_error, "p_endpoint": res.endpoint_positive.value,
           "se_endpoint": res.endpoint_positive.std_error, "pittel": res.pittel, "log_phi": res.log_phi,
           "theta_u": res.theta_u, "ratio_to_pittel": res.longest_excursion.value / res.pittel}
    run.json("benchmark_bm.json", out)
    print(dump_json(out), end="")


def _validation_checks(cfg: dict) -> list[tuple[str, Callable[[], bool]]]:
    from .endgame import build_endgame
    from .ratefn import i_e, rate_lambda, solve_theta_star, variance_fns
    params = _params(cfg)
    state: dict = {}

    def table():
        if "table" not in state:
            state["table"] = solve_theta_star(params)
        return state["table"]

    def identity():
        t = table()
        iv1 = variance_fns(1.0, t)[0]
        return all(abs(iv1 - (a + b - 2 * c)) < 1e-8
                   for a, b, c in (variance_fns(p, t) for p in np.linspace(0.1, 0.9, 9)))

    def endgame_order():
        eg = build_endgame(table())
        return 0 < eg.A < eg.D and abs(eg.psi(0.0)) < 1e-12

    return [
        ("zeta_em(0) = -1/2", lambda: zeta_em(0.0)[0] == -0.5),
        ("Lambda(0) = 0", lambda: abs(rate_lambda(0.0, params)) < 1e-10),
        ("theta* > 0 and I > 0", lambda: table().theta_star > 0 and table().I > 0),
        ("I_E(1) = 0", lambda: abs(i_e(1.0, table())) < 1e-6),
        ("I_E(0.5) > 0", lambda: i_e(0.5, table()) > 0),
        ("variance identity", identity),
        ("0 < A < D and psi(0) = 0", endgame_order),
    ]


def cmd_validate(args, cfg, run: Run) -> int:
    rows, failed = [], 0
    for name, check in _validation_checks(cfg):
        try:
            ok = bool(check())
            detail = ""
        except NumericalError as exc:
            ok, detail = False, str(exc)
        failed += not ok
        rows.append({"check": name, "passed": ok, "detail": detail})
        print(f"{'PASS' if ok else 'FAIL'}  {name}{'  ' + detail if detail else ''}")
    run.csv("validate.csv", rows, ["check", "passed", "detail"])
    return 1 if failed else 0


COMMANDS = {
    "ratefn": cmd_ratefn, "tail": cmd_tail, "estimate": cmd_estimate,
    "simulate-process": cmd_simulate_process, "simulate-graph": cmd_simulate_graph,
    "scale-function": cmd_scale_function, "benchmark-bm": cmd_benchmark_bm, "validate": cmd_validate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--tau", type=float)
    common.add_argument("--beta-tilde", dest="beta_tilde", type=float)
    common.add_argument("--N", dest="N", type=int, help="head cutoff of the truncation")
    common.add_argument("--seed", type=int)
    common.add_argument("--order", type=int, help="Gaver-Stehfest order")

    p = _Parser(prog="thinlevy", description="Thinned Levy process laboratory")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ratefn", parents=[common], help="rate functions and theta*")
    s.add_argument("--points", type=int, default=11)
    s.add_argument("--with-endgame", action="store_true", help="also report kappa, A and D")

    s = sub.add_parser("tail", parents=[common], help="predicted tail probabilities")
    s.add_argument("--u", required=True, help="a:b:step or comma list")
    s.add_argument("--verbose-columns", action="store_true")

    s = sub.add_parser("estimate", parents=[common], help="Monte Carlo tail estimate")
    s.add_argument("--target", choices=("su", "h1"), required=True)
    s.add_argument("--u", type=float, required=True)
    s.add_argument("--method", choices=("naive", "tilted_is"), default="tilted_is")
    s.add_argument("--reps", type=int)

    s = sub.add_parser("simulate-process", parents=[common], help="one sample path")
    s.add_argument("--u", type=float, required=True)
    s.add_argument("--measure", choices=("original", "tilted"), default="original")
    s.add_argument("--theta", type=float)
    s.add_argument("--replica", type=int, default=0)
    s.add_argument("--points", type=int, default=257)

    s = sub.add_parser("simulate-graph", parents=[common], help="critical graph ensemble")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--reps", dest="graph_reps", type=int, default=10)
    s.add_argument("--kernel", choices=("nr", "cl", "grg"), default="nr")

    s = sub.add_parser("scale-function", parents=[common], help="scale function W and g = kappa W")
    s.add_argument("--v", required=True, help="a:b:step or comma list")

    s = sub.add_parser("benchmark-bm", parents=[common], help="Brownian benchmark against the Pittel tail")
    s.add_argument("--lambda", dest="bm_lambda", type=float, default=0.0)
    s.add_argument("--u", type=float, default=2.0)
    s.add_argument("--reps", dest="bm_reps", type=int, default=2000)
    s.add_argument("--dt", type=float, default=1e-3)

    s = sub.add_parser("validate", parents=[common], help="quick invariant suite")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.reps = getattr(args, "reps", None)
        cfg = resolve_config(args)
        run = Run(args, cfg, argv)
        code = COMMANDS[args.command](args, cfg, run) or 0
        run.finish()
        return code
    except UsageError as exc:
        print(f"thinlevy: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ZeroDivisionError, FloatingPointError) as exc:
        print(f"thinlevy: numerical failure: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"thinlevy: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
