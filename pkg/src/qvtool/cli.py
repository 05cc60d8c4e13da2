"""Experiment runner: ``qvtool <command> --config exp.toml [--strict] [--out DIR]``.

Exit codes: 0 on success, 1 on a configuration error, 2 when a verdict is
Inconclusive and ``--strict`` is given.  All report floats are written with
17 significant digits and every report embeds the config hash and version.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .generators import KINDS, PathRecipe, expected_qv, generate
from .partitions import (PartitionSequence, Verdict, check_condition_C, check_left_approximation,
                         check_UC, dyadic_sequence, explicit_sequence, load_explicit_csv,
                         oscillation_controlled_sequence, uniform_sequence, vanishing_verdict)
from .paths import CadlagPath
from .quadratic import (BilinearForm, abs_continuity_check, check_crossnorm,
                        default_reporting_times, density_estimate, qv_limit, unit_density_check)
from .transform import (SmoothFunction, c1_smooth_transform, integral_qv, ito_report,
                        rough_fv_decompose)

COMMANDS = ("qv", "ito", "c1", "intqv", "density", "decompose", "check", "paths")


class ConfigError(ValueError):
    pass


# -- output formatting ---------------------------------------------------------------

def fmt(x) -> str:
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
        return format(x, ".17g")
    return str(x)


def to_json(obj, indent: int = 0) -> str:
    """Deterministic JSON with 17-significant-digit floats (non-finite as strings)."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(to_json(v) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent + 1) for v in seq) + "\n" + end + "]"
    if obj is None:
        return "null"
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return json.dumps(obj.value)
    if isinstance(obj, (bool, np.bool_, int, np.integer)):
        return fmt(obj)
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(float(obj)) else json.dumps(fmt(obj))
    return json.dumps(str(obj))


@dataclass
class Run:
    config: dict
    base: Path
    out: Path
    strict: bool
    config_hash: str
    files: list = field(default_factory=list)

    def stamp(self, payload: dict) -> dict:
        return {**payload, "config_sha256": self.config_hash, "version": __version__}

    def write_json(self, name: str, payload: dict) -> None:
        target = self.out / name
        target.write_text(to_json(self.stamp(payload)) + "\n", encoding="utf-8")
        self.files.append(target)

    def write_csv(self, name: str, header: list, rows) -> None:
        target = self.out / name
        with open(target, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_sha256={self.config_hash} version={__version__}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
        self.files.append(target)


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- config interpretation ---------------------------------------------------------------

_PATH_KEYS = {"name", "kind", "seed", "csv", "horizon"}


def build_paths(config: dict, base: Path) -> dict[str, CadlagPath]:
    specs = config.get("paths")
    if not specs:
        raise ConfigError("config needs at least one [[paths]] entry")
    horizon = float(config.get("horizon", 1.0))
    seed = int(config.get("seed", 0))
    out = {}
    for i, spec in enumerate(specs):
        name = spec.get("name", "X" if i == 0 else f"path{i}")
        if name in out:
            raise ConfigError(f"duplicate path name {name!r}")
        if "csv" in spec:
            out[name] = CadlagPath.from_csv(base / spec["csv"])
            continue
        kind = spec.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"path {name!r}: unknown kind {kind!r}; choose from {', '.join(KINDS)}")
        params = {k: v for k, v in spec.items() if k not in _PATH_KEYS}
        recipe = PathRecipe(kind, int(spec.get("seed", seed)), float(spec.get("horizon", horizon)), params)
        out[name] = generate(recipe)
    return out


def recipes(config: dict) -> dict[str, PathRecipe]:
    horizon = float(config.get("horizon", 1.0))
    seed = int(config.get("seed", 0))
    out = {}
    for i, spec in enumerate(config.get("paths", [])):
        if "kind" in spec:
            params = {k: v for k, v in spec.items() if k not in _PATH_KEYS}
            out[spec.get("name", "X" if i == 0 else f"path{i}")] = PathRecipe(
                spec["kind"], int(spec.get("seed", seed)), float(spec.get("horizon", horizon)), params)
    return out


def pick(paths: dict, config: dict, section: str, role: str, default: str | None = None,
         required: bool = True) -> CadlagPath | None:
    name = config.get(section, {}).get(role, default)
    if name is None:
        if required:
            raise ConfigError(f"[{section}] needs {role!r}")
        return None
    if name not in paths:
        raise ConfigError(f"[{section}] {role} = {name!r} is not a configured path")
    return paths[name]


def build_sequence(config: dict, base: Path, paths: dict, horizon: float) -> PartitionSequence:
    spec = config.get("partition", {"kind": "dyadic", "n_max": 12})
    kind = spec.get("kind", "dyadic")
    if kind == "dyadic":
        seq = dyadic_sequence(horizon, int(spec.get("n_max", 12)), int(spec.get("n_min", 0)))
        if "levels" in spec:
            seq = seq.select([int(v) for v in spec["levels"]])
        return seq
    if kind == "uniform":
        return uniform_sequence(horizon, [int(c) for c in spec["counts"]])
    if kind == "explicit":
        if "file" in spec:
            return load_explicit_csv(base / spec["file"])
        return explicit_sequence(spec["levels"])
    if kind == "oscillation":
        names = spec.get("family", list(paths))
        family = [paths[n] for n in names]
        return oscillation_controlled_sequence(family, [float(e) for e in spec["eps"]],
                                               spec.get("norm", "euclidean"))
    raise ConfigError(f"unknown partition kind {kind!r}")


def build_form(config: dict, d: int) -> BilinearForm:
    spec = config.get("form", {"kind": "inner"})
    kind = spec.get("kind", "inner")
    norm = spec.get("norm", "euclidean")
    cn = spec.get("crossnorm", "projective")
    check_crossnorm(cn, norm)
    if kind == "inner":
        return BilinearForm.inner(d, norm)
    if kind == "outer":
        return BilinearForm.outer(d, cn, norm)
    if kind == "coefficients":
        return BilinearForm.coefficients(spec["coeffs"], norm)
    raise ConfigError(f"unknown form kind {kind!r}")


def build_function(config: dict, d: int) -> SmoothFunction:
    spec = config.get("function", {})
    preset = spec.get("preset")
    if preset == "norm_sq":
        return SmoothFunction.norm_sq(d)
    if preset == "sin":
        return SmoothFunction.sin(d)
    if preset == "bilinear_ax":
        return SmoothFunction.bilinear_ax(d)
    if preset == "custom_poly":
        return SmoothFunction.custom_poly(spec["coeffs"], d)
    if preset == "identity":
        return SmoothFunction.identity(d)
    if preset == "linear":
        return SmoothFunction.linear(spec["matrix"])
    if preset == "constant":
        return SmoothFunction.constant(spec["value"], d)
    raise ConfigError(f"unknown function preset {preset!r}")


def reporting_times(config: dict, section: str, seq: PartitionSequence) -> np.ndarray:
    times = config.get(section, {}).get("times")
    if times is None:
        return default_reporting_times(seq)
    return np.unique(np.asarray(times, dtype=float))


def preflight(config: dict, seq: PartitionSequence, X: CadlagPath) -> dict:
    """Advisory condition checks stamped into calculus reports."""
    if not config.get("preflight", True):
        return {}
    reports = list(check_condition_C(seq, X)) + [check_left_approximation(seq, X)]
    return {r.condition: r.verdict.value for r in reports}


def _flat(a: np.ndarray) -> list:
    return np.asarray(a).reshape(-1).tolist()


def _value_header(prefix: str, shape: tuple) -> list[str]:
    n = int(np.prod(shape)) if shape else 1
    if n == 1:
        return [prefix]
    idx = np.ndindex(*shape)
    return [prefix + "_" + "".join(str(i + 1) for i in ix) for ix in idx]


# -- commands ---------------------------------------------------------------------------

def cmd_qv(run: Run) -> int:
    cfg = run.config
    paths = build_paths(cfg, run.base)
    X = pick(paths, cfg, "qv", "x", "X")
    Y = pick(paths, cfg, "qv", "y", cfg.get("qv", {}).get("x", "X"))
    seq = build_sequence(cfg, run.base, paths, X.horizon)
    B = build_form(cfg, X.dim)
    opts = cfg.get("qv", {})
    times = reporting_times(cfg, "qv", seq)
    qv, est = qv_limit(B, X, Y, seq, times, float(cfg.get("tolerance", 1e-6)),
                       bool(opts.get("richardson", False)))
    shape = B.shape
    header = ["level", "t"] + _value_header("q", shape)
    rows = [[lev, t, *_flat(v)] for lev, vals in zip(est.levels, est.values)
            for t, v in zip(times, vals)]
    run.write_csv("qv_levels.csv", header, rows)
    run.write_csv("qv_limit.csv", ["t"] + _value_header("q", shape),
                  [[t, *_flat(v)] for t, v in zip(qv.times, qv.values)])
    payload = {k: v for k, v in est.to_dict().items() if k not in ("times", "limit")}
    payload.update({"form": B.kind, "shape": list(shape), "final": _flat(qv.values[-1]),
                    "jump_times": qv.jump_times.tolist(),
                    "jump_values": [_flat(v) for v in qv.jump_values]})
    run.write_json("qv_estimate.json", payload)
    print(f"qv: verdict {est.verdict.value}, limit at T = {to_json(_flat(qv.values[-1]))}")
    return verdict_exit(run, est.verdict)


def _ito_inputs(run: Run, section: str):
    cfg = run.config
    paths = build_paths(cfg, run.base)
    X = pick(paths, cfg, section, "x", "X")
    A = pick(paths, cfg, section, "a", None, required=False)
    seq = build_sequence(cfg, run.base, paths, X.horizon)
    f = build_function(cfg, X.dim)
    return cfg, X, A, seq, f


def cmd_ito(run: Run) -> int:
    cfg, X, A, seq, f = _ito_inputs(run, "ito")
    times = reporting_times(cfg, "ito", seq)
    rep = ito_report(f, A, X, seq, times)
    run.write_csv("ito_levels.csv", rep.header(), rep.rows())
    norms = rep.residual_norms()
    tol = float(cfg.get("tolerance", 1e-6))
    verdict = Verdict.PASS if norms[-1] <= 1e-12 else vanishing_verdict(norms.tolist(), tol)
    payload = rep.summary()
    payload.update({"function": f.name, "verdict": verdict.value,
                    "preflight": preflight(cfg, seq, X)})
    run.write_json("ito_summary.json", payload)
    print(f"ito: residual by level {to_json(norms.tolist())}, verdict {verdict.value}")
    return verdict_exit(run, verdict)


def cmd_c1(run: Run) -> int:
    cfg, X, A, seq, f = _ito_inputs(run, "c1")
    times = reporting_times(cfg, "c1", seq)
    res = c1_smooth_transform(f, A, X, seq, times, float(cfg.get("tolerance", 1e-6)))
    shape = (f.q, f.q)
    header = ["t"] + _value_header("direct", shape) + _value_header("formula", shape)
    rows = [[t, *_flat(a), *_flat(b)] for t, a, b in zip(times, res.direct.values, res.formula.values)]
    run.write_csv("c1.csv", header, rows)
    payload = res.to_dict()
    payload.update({"function": f.name, "preflight": preflight(cfg, seq, X)})
    run.write_json("c1_summary.json", payload)
    print(f"c1: final relative gap {fmt(res.final_gap)}, verdict {res.estimate.verdict.value}")
    return verdict_exit(run, res.estimate.verdict)


def cmd_intqv(run: Run) -> int:
    cfg, X, A, seq, f = _ito_inputs(run, "intqv")
    times = reporting_times(cfg, "intqv", seq)
    res = integral_qv(f, A, X, seq, times, tol=float(cfg.get("tolerance", 1e-6)))
    shape = (f.q, f.q)
    header = ["t"] + _value_header("lhs", shape) + _value_header("rhs", shape)
    rows = [[t, *_flat(a), *_flat(b)] for t, a, b in zip(times, res.lhs.values, res.rhs.values)]
    run.write_csv("intqv.csv", header, rows)
    payload = res.to_dict()
    payload.update({"function": f.name, "preflight": preflight(cfg, seq, X)})
    run.write_json("intqv_summary.json", payload)
    print(f"intqv: final relative gap {fmt(res.final_gap)}, verdict {res.estimate.verdict.value}")
    return verdict_exit(run, res.estimate.verdict)


def cmd_density(run: Run) -> int:
    cfg = run.config
    paths = build_paths(cfg, run.base)
    X = pick(paths, cfg, "density", "x", "X")
    seq = build_sequence(cfg, run.base, paths, X.horizon)
    opts = cfg.get("density", {})
    tol = float(cfg.get("tolerance", 1e-6))
    times = reporting_times(cfg, "density", seq)
    cn = opts.get("crossnorm", cfg.get("form", {}).get("crossnorm", "projective"))
    tensor, est_t = qv_limit(BilinearForm.outer(X.dim, cn), X, X, seq, times, tol)
    scalar, est_s = qv_limit(BilinearForm.inner(X.dim), X, X, seq, times, tol)
    cells = opts.get("cells", 16)
    if isinstance(cells, int):
        edges = np.linspace(0.0, X.horizon, cells + 1)
    else:
        edges = np.asarray(cells, dtype=float)
    dens = density_estimate(tensor, scalar, edges, kind=cn)
    check = unit_density_check(dens, tensor, scalar)
    shape = (X.dim, X.dim)
    header = ["t_left", "t_right", "mass"] + _value_header("q", shape) + ["norm"]
    norms = dens.norms()
    rows = [[dens.edges[i], dens.edges[i + 1], dens.mass[i], *_flat(dens.q[i]), norms[i]]
            for i in range(len(dens.mass))]
    run.write_csv("density.csv", header, rows)
    rng_pairs = int(opts.get("pairs", 50))
    idx = np.linspace(0, len(times) - 1, rng_pairs + 1).astype(int)
    pairs = list(zip(times[idx[:-1]], times[idx[1:]]))
    ac = abs_continuity_check(tensor, scalar, 1.0, pairs, 1e-6, cn)
    verdict = est_t.verdict if est_s.verdict is Verdict.PASS else est_s.verdict
    run.write_json("density_summary.json", {"unit_density": check.to_dict(),
                                            "abs_continuity": ac.to_dict(),
                                            "verdict": verdict.value})
    print(f"density: {len(dens.mass)} cells, abs-continuity ok = {ac.ok}, verdict {verdict.value}")
    return verdict_exit(run, verdict)


def cmd_decompose(run: Run) -> int:
    cfg, X, A, seq, f = _ito_inputs(run, "decompose")
    times = reporting_times(cfg, "decompose", seq)
    level = cfg.get("decompose", {}).get("level")
    part = seq.finest if level is None else seq.level(level)
    dec = rough_fv_decompose(f, A, X, part, times)
    q = f.q
    header = ["t"] + [f"{n}{'' if q == 1 else '_' + str(i + 1)}" for n in ("Y", "C", "D", "lhs", "residual")
                      for i in range(q)]
    run.write_csv("decompose.csv", header, dec.rows())
    err = dec.reconstruction_error()
    payload = {"function": f.name, "max_reconstruction_error": float(np.max(err)),
               "max_residual": float(np.max(np.sqrt(np.sum(dec.residual ** 2, axis=1)))),
               "C_jumps": len(dec.C.jump_times), "D_jump_times": dec.D.jump_times.tolist(),
               "preflight": preflight(cfg, seq, X)}
    run.write_json("decompose_summary.json", payload)
    print(f"decompose: max reconstruction error {fmt(payload['max_reconstruction_error'])}")
    return 0


def cmd_check(run: Run) -> int:
    cfg = run.config
    paths = build_paths(cfg, run.base)
    opts = cfg.get("check", {})
    X = pick(paths, cfg, "check", "x", "X")
    seq = build_sequence(cfg, run.base, paths, X.horizon)
    tol = float(opts.get("tolerance", 1e-9))
    t_grid = opts.get("t_grid")
    eps_grid = opts.get("eps_grid")
    reports = list(check_condition_C(seq, X, t_grid, eps_grid, tol))
    reports.append(check_left_approximation(seq, X, t_grid, tol))
    family = opts.get("family")
    if family:
        reports.extend(check_UC(seq, [paths[n] for n in family], t_grid, eps_grid, tol))
    for r in reports:
        line = f"{r.condition}: {r.verdict.value}"
        if r.witness is not None:
            line += f"  witness {to_json(r.witness).replace(chr(10), ' ')}"
        print(line)
    run.write_json("check.json", {"reports": [r.to_dict() for r in reports]})
    verdicts = [r.verdict for r in reports]
    return verdict_exit(run, Verdict.INCONCLUSIVE if Verdict.INCONCLUSIVE in verdicts else Verdict.PASS)


def cmd_paths(run: Run) -> int:
    """Export every configured path in the CSV path format."""
    paths = build_paths(run.config, run.base)
    recs = recipes(run.config)
    summary = {}
    for name, path in paths.items():
        path.to_csv(run.out / f"path_{name}.csv")
        run.files.append(run.out / f"path_{name}.csv")
        exp = expected_qv(recs[name]) if name in recs else None
        summary[name] = {"dim": path.dim, "horizon": path.horizon, "samples": len(path.grid),
                         "jumps": len(path.jump_times),
                         "expected_scalar_qv_T": None if exp is None else float(exp.scalar(path.horizon))}
    run.write_json("paths.json", summary)
    print(f"paths: wrote {len(paths)} file(s)")
    return 0


HANDLERS = {"qv": cmd_qv, "ito": cmd_ito, "c1": cmd_c1, "intqv": cmd_intqv, "density": cmd_density,
            "decompose": cmd_decompose, "check": cmd_check, "paths": cmd_paths}


def verdict_exit(run: Run, verdict: Verdict) -> int:
    if run.strict and verdict is Verdict.INCONCLUSIVE:
        print("strict mode: inconclusive verdict", file=sys.stderr)
        return 2
    return 0


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qvtool", description="Pathwise quadratic variation experiments.")
    p.add_argument("--version", action="version", version=f"qvtool {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=(HANDLERS[name].__doc__ or "").strip() or None)
        sp.add_argument("--config", required=True, help="TOML experiment config")
        sp.add_argument("--strict", action="store_true", help="exit 2 on an Inconclusive verdict")
        sp.add_argument("--out", default=None, help="output directory (default: config 'out' or .)")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    cfg_path = Path(args.config)
    try:
        raw = cfg_path.read_bytes()
        config = tomllib.loads(raw.decode("utf-8"))
    except (OSError, UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    base = cfg_path.resolve().parent
    out = Path(args.out) if args.out else base / config.get("out", ".")
    run = Run(config, base, out, args.strict, config_hash(config))
    try:
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](run)
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
