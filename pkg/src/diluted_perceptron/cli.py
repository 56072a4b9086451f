"""Command-line experiment runner.

Every command resolves its parameters from built-in defaults, then an
optional flat ``key = value`` config file, then command-line flags, and
writes ``manifest.json`` plus its data files into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import CapacityError, NumericalError, ParameterError
from .exact_gibbs import disorder_samples, enumerate_gibbs, summarize
from .fixed_point import PopulationMeasure, solve_fixed_point
from .free_energy import build_rs_curve, compare_pN_vs_F, magnetization_law_test
from .model import (BoundedPotential, Instance, ModelParams, check_conditions,
                    nominal_m, sample_instance)
from .streams import SEED_MASK, substream

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_NUMERICAL = 0, 2, 3, 4

REQUIRED = object()


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(" ", "").split(",") if t]


def _seed(text: str) -> int:
    s = int(text, 0) if isinstance(text, str) else int(text)
    if not 0 <= s <= SEED_MASK:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return s


def _rounding(text: str) -> str:
    if text not in ("nearest", "stochastic"):
        raise ValueError("m_rounding must be 'nearest' or 'stochastic'")
    return text


COMMON = {
    "seed": (_seed, 0),
    "workers": (int, 1),
    "out_dir": (str, "."),
}

SCHEMAS = {
    "check-conditions": {
        "alpha": (float, REQUIRED),
        "gamma0": (float, REQUIRED),
        "potential": (str, REQUIRED),
    },
    "exact": {
        "N": (int, None),
        "M": (int, None),
        "alpha": (float, None),
        "gamma": (float, None),
        "potential": (str, REQUIRED),
        "instance": (str, None),
    },
    "decorrelation": {
        "alpha": (float, REQUIRED),
        "gamma": (float, REQUIRED),
        "potential": (str, REQUIRED),
        "N_list": (_int_list, REQUIRED),
        "n_samples": (int, 2000),
        "all_pairs": (_bool, False),
        "m_rounding": (_rounding, "nearest"),
        "chunk_size": (int, 512),
    },
    "fixed-point": {
        "alpha": (float, REQUIRED),
        "gamma": (float, REQUIRED),
        "potential": (str, REQUIRED),
        "pop_size": (int, 100_000),
        "tol": (float, 1e-3),
        "max_iter": (int, 200),
        "out": (str, "population.bin"),
    },
    "magnetization-law": {
        "alpha": (float, REQUIRED),
        "gamma": (float, REQUIRED),
        "potential": (str, REQUIRED),
        "N": (int, REQUIRED),
        "m": (int, 1),
        "n_disorder": (int, 512),
        "pop_size": (int, 100_000),
        "tol": (float, 1e-3),
        "population": (str, None),
        "pool_all_sites": (_bool, False),
        "m_rounding": (_rounding, "nearest"),
    },
    "free-energy": {
        "alpha": (float, REQUIRED),
        "gamma_max": (float, 2.0),
        "gamma": (float, None),
        "potential": (str, REQUIRED),
        "grid": (int, 17),
        "pop_size": (int, 100_000),
        "n_mc": (int, 20_000),
        "n_disorder": (int, 2000),
        "N_list": (_int_list, "8,12,16,20"),
        "m_rounding": (_rounding, "nearest"),
    },
}

HELP = {
    "check-conditions": "evaluate the high-temperature conditions",
    "exact": "exact Gibbs quantities of one instance",
    "decorrelation": "disorder-averaged exact statistics per N",
    "fixed-point": "solve the magnetization fixed point by population dynamics",
    "magnetization-law": "compare exact magnetizations with the fixed point",
    "free-energy": "replica-symmetric free energy against exact p_N",
}


class ConfigError(ParameterError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    params: dict
    seed: int = 0
    workers: int = 1
    out_dir: Path = Path(".")

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "params": {k: self.params[k] for k in sorted(self.params)},
            "seed": self.seed,
            "workers": self.workers,
            "version": __version__,
        }


def _normalize(key: str) -> str:
    return key.strip().replace("-", "_")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[_normalize(key)] = value.strip()
    return values


def load_config(command: str, path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve defaults, then the config file at ``path``, then ``overrides``."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = {**SCHEMAS[command], **COMMON}
    raw = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        raw[_normalize(key)] = value
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    resolved = {}
    for key, (conv, default) in schema.items():
        if key in raw and raw[key] is not None:
            try:
                resolved[key] = conv(raw[key]) if isinstance(raw[key], str) else raw[key]
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        elif default is REQUIRED:
            raise ConfigError(f"missing required parameter {key!r} for {command}")
        elif isinstance(default, str) and conv is not str:
            resolved[key] = conv(default)
        else:
            resolved[key] = default
    seed = resolved.pop("seed")
    workers = resolved.pop("workers")
    out_dir = Path(resolved.pop("out_dir"))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return ExperimentConfig(command, resolved, seed, workers, out_dir)


# --- output helpers ------------------------------------------------------------

@dataclass
class _Outputs:
    root: Path
    written: list = field(default_factory=list)

    def path(self, name: str) -> Path:
        p = self.root / name
        self.written.append(p)
        return p

    def json(self, name: str, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv(self, name: str, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])

    def discard(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


# --- commands ------------------------------------------------------------------

def _potential(p) -> BoundedPotential:
    return BoundedPotential.parse(p["potential"])


def _run_check_conditions(cfg, out):
    p = cfg.params
    report = check_conditions(p["alpha"], p["gamma0"], _potential(p))
    out.json("conditions.json", report.as_dict())
    return report.as_dict()


def _run_exact(cfg, out):
    p = cfg.params
    u = _potential(p)
    if p["instance"]:
        inst = Instance.from_json(Path(p["instance"]).read_text())
    else:
        N, M, alpha, gamma = p["N"], p["M"], p["alpha"], p["gamma"]
        if N is None or gamma is None:
            raise ConfigError("exact needs N and gamma (or an instance file)")
        if alpha is None:
            if M is None:
                raise ConfigError("exact needs alpha or M")
            alpha = M / N
        if M is not None and nominal_m(alpha, N) != M:
            raise ConfigError(f"M={M} is inconsistent with alpha*N={alpha * N}")
        params = ModelParams(N, alpha, gamma)
        inst = sample_instance(params, substream(cfg.seed, "instance", N))
    summary = enumerate_gibbs(inst, u)
    result = {
        "N": inst.N,
        "M": inst.M,
        "log_Z": summary.log_Z,
        "pN": summary.log_Z / inst.N,
        "magnetizations": summary.magnetizations.tolist(),
    }
    with open(out.path("instance.json"), "w") as fh:
        fh.write(inst.to_json())
        fh.write("\n")
    out.json("gibbs.json", result)
    return result


def _run_decorrelation(cfg, out):
    p = cfg.params
    u = _potential(p)
    names = ["pN", "decorrelation"] + (["pair_decorrelation"] if p["all_pairs"] else [])
    summaries = []
    for N in p["N_list"]:
        params = ModelParams(N, p["alpha"], p["gamma"], m_rounding=p["m_rounding"])
        data = disorder_samples(params, u, p["n_samples"], cfg.seed, all_pairs=p["all_pairs"],
                                chunk_size=p["chunk_size"], workers=cfg.workers)
        rows = ((cfg.seed, s, name, float(data[name][s]))
                for name in names for s in range(p["n_samples"]))
        out.csv(f"decorrelation_N{N}.csv", ["seed", "sample_index", "statistic_name", "value"], rows)
        for name in names:
            d = summarize(name, data[name]).as_dict()
            d["params"] = {"N": N, "alpha": p["alpha"], "gamma": p["gamma"],
                           "potential": u.descriptor, "m_rounding": p["m_rounding"]}
            summaries.append(d)
    out.json("summary.json", summaries)
    return summaries


def _run_fixed_point(cfg, out):
    p = cfg.params
    u = _potential(p)
    pop, report = solve_fixed_point(p["alpha"], p["gamma"], u, p["pop_size"], p["tol"],
                                    p["max_iter"], cfg.seed, workers=cfg.workers)
    pop.save(out.path(p["out"]))
    pop.to_csv(out.path(Path(p["out"]).stem + ".csv"))
    result = {
        "iterations": report.iterations,
        "final_step_w1": report.final_step_w1,
        "trajectory": report.trajectory,
        "converged": report.converged,
        "plateau": report.plateau,
        "conditions_ok": report.conditions_ok,
        "mean": pop.mean(),
    }
    out.json("convergence.json", result)
    return result


def _run_magnetization_law(cfg, out):
    p = cfg.params
    u = _potential(p)
    if p["population"]:
        pop = PopulationMeasure.load(p["population"])
        if not (math.isclose(pop.alpha, p["alpha"]) and math.isclose(pop.gamma, p["gamma"])):
            raise ConfigError("population file was solved for different alpha/gamma")
    else:
        pop, _ = solve_fixed_point(p["alpha"], p["gamma"], u, p["pop_size"], p["tol"],
                                   seed=cfg.seed, workers=cfg.workers)
    law = magnetization_law_test(p["alpha"], u, p["gamma"], p["N"], p["m"], p["n_disorder"],
                                 pop, cfg.seed, m_rounding=p["m_rounding"],
                                 pool_all_sites=p["pool_all_sites"], workers=cfg.workers)
    header = ["sample_index"] + [f"m{i + 1}" for i in range(p["m"])]
    out.csv("magnetizations.csv", header,
            ([s] + [float(v) for v in row] for s, row in enumerate(law.magnetizations)))
    result = {"joint_w1": law.joint_w1, "marginal_w1": law.marginal_w1}
    out.json("law.json", result)
    return result


def _run_free_energy(cfg, out):
    p = cfg.params
    u = _potential(p)
    gamma = p["gamma_max"] if p["gamma"] is None else p["gamma"]
    curve = build_rs_curve(p["alpha"], u, p["gamma_max"], p["grid"], p["pop_size"],
                           p["n_mc"], cfg.seed, workers=cfg.workers)
    out.csv("rs_curve.csv", ["gamma", "G", "G_err", "F", "F_err"],
            ([float(g), float(G[0]), float(G[1]), float(F), float(e)]
             for g, G, F, e in zip(curve.gamma_grid, curve.G_values, curve.F_values,
                                   curve.F_errors)))
    report = compare_pN_vs_F(p["alpha"], u, gamma, p["N_list"], p["n_disorder"], curve,
                             cfg.seed, m_rounding=p["m_rounding"], workers=cfg.workers)
    out.csv("comparison.csv", ["N", "pN", "pN_err", "F", "F_err", "abs_diff"],
            ([r.N, r.pN_mean, r.pN_stderr, r.F_value, r.F_error, r.abs_diff]
             for r in report.rows))
    result = {
        "gamma": gamma,
        "F0": curve.F0,
        "quadrature_delta": curve.quadrature_delta,
        "coarse": curve.coarse,
        "fitted_decay": report.fitted_decay,
        "fitted_intercept": report.fitted_intercept,
    }
    out.json("free_energy.json", result)
    return result


RUNNERS = {
    "check-conditions": _run_check_conditions,
    "exact": _run_exact,
    "decorrelation": _run_decorrelation,
    "fixed-point": _run_fixed_point,
    "magnetization-law": _run_magnetization_law,
    "free-energy": _run_free_energy,
}


def run(cfg: ExperimentConfig) -> dict:
    """Execute ``cfg``; on any failure the files written so far are removed."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = _Outputs(cfg.out_dir)
    try:
        result = RUNNERS[cfg.command](cfg, out)
        out.json("manifest.json", cfg.manifest())
    except BaseException:
        out.discard()
        raise
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diluted-perceptron")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", default=None, help="flat key = value file")
        for key in list(schema) + list(COMMON):
            flag = "--" + key.replace("_", "-")
            sp.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar="VALUE")
    return parser


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    path = args.pop("config")
    try:
        cfg = load_config(command, path, args)
        result = run(cfg)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParameterError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
