"""Command-line entry point: config parsing, dispatch and plot-data emission.

Config files are YAML (JSON is a subset) with five sections::

    model:      {preset: c}             # or inline tables, see README
    noise:      {kind: white}
    solver:     {N: 64, gridSize: 256, dt: 0.001, T: 0.25, alpha: 0.0}
    experiment: {M: 2000, alphaLadder: [1.0, 0.1, 0.01], seedBase: 0}
    output:     {archive: runs, emitPlots: false}

Every key is optional; unknown keys are rejected with their full path.
Exit codes: 0 pass, 1 fail, 2 invalid (blow-up excess) or bad input.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import drift as dr
from . import fpe
from . import harness as H
from . import noise as nz
from .solver import SolverConfig

SUBCOMMANDS = {
    "simulate": "simulate",
    "energy": "energy",
    "moment2m": "moment2m",
    "lyapunov": "lyapunov",
    "alpha-converge": "alphaConvergence",
    "gronwall": "gronwall",
    "fpe-check": "fpeCheck",
    "audit": "hypothesisAudit",
    "noise-diag": "noiseDiagnostics",
}

ARCHIVE_ENV = "SPDE_FPE_ARCHIVE"

# section -> key -> default (None: derived or optional)
SCHEMA = {
    "model": {"preset": "c", "f": None, "m": None, "m1": None, "c1": None, "c2": None,
              "g1": None, "g2": None, "K": None, "L": None, "oneSidedL": None,
              "decomposition": None},
    "noise": {"kind": "white", "rho": None, "scale": 1.0, "weights": None,
              "delta": 0.2, "delta1": 0.2, "theta": 0.3, "q": 5},
    "solver": {"N": 64, "gridSize": 256, "dt": 1e-3, "T": 0.25, "s": 0.0,
               "scheme": "exponentialEulerX", "alpha": 0.0, "blowupThreshold": 1e3,
               "blockSize": 256},
    "experiment": {"M": 2000, "alphaLadder": [1.0, 0.1, 0.01], "seedBase": 0,
                   "sampleEvery": 10, "x0": {1: 1.0}, "tolerances": {},
                   "gronwallSeeds": 64, "gronwallDeltas": [1e-3, 1e-4, 1e-5],
                   "initialStates": [], "overrideAudit": False},
    "output": {"archive": None, "emitPlots": False},
}

TOLERANCE_KEYS = {"stderrMult": "stderr_mult", "cTime": "c_time", "margin": "margin",
                  "blowupLimit": "blowup_limit", "energyIdentity": "energy_identity",
                  "energyViolationFraction": "energy_violation_fraction",
                  "deltaAgreement": "delta_agreement", "linearRatio": "linear_ratio"}
DECOMPOSITION_KEYS = {"f1", "f2", "C"}


class ConfigError(ValueError):
    pass


def _reject_unknown(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown key {where!r}")


def _poly(value, path):
    if value is None:
        return None
    try:
        return dr.Poly([tuple(m) for m in value])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: expected a list of [coef, i, j, l] monomials") from exc


def _build_model(sec: dict) -> dr.DriftModel:
    try:
        base = dr.preset(sec["preset"])
    except KeyError as exc:
        raise ConfigError(f"model.preset: unknown preset {sec['preset']!r}") from exc
    d = base.to_dict()
    for key in ("f", "c1", "c2", "g1", "g2"):
        if sec[key] is not None:
            _poly(sec[key], f"model.{key}")
            d[key] = sec[key]
    for key in ("m", "m1", "K", "L"):
        if sec[key] is not None:
            d[key] = sec[key]
    if sec["oneSidedL"] is not None:
        d["one_sided_L"] = sec["oneSidedL"]
    if sec["decomposition"] is not None:
        _reject_unknown(sec["decomposition"], DECOMPOSITION_KEYS, "model.decomposition")
        d["decomposition"] = sec["decomposition"]
    inline = any(sec[k] is not None for k in SCHEMA["model"] if k != "preset")
    if inline:
        d["name"] = f"{base.name}-custom"
    try:
        return dr.DriftModel.from_dict(d)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def _build_noise(sec: dict, N: int) -> nz.CovarianceSpec:
    kw = {k: sec[k] for k in ("delta", "delta1", "theta", "q")}
    kind = sec["kind"]
    try:
        if kind == "white":
            return nz.CovarianceSpec.white(N, **kw)
        if kind == "powerDecay":
            if sec["rho"] is None:
                raise ConfigError("noise.rho: required for powerDecay")
            return nz.CovarianceSpec.power_decay(N, float(sec["rho"]), float(sec["scale"]), **kw)
        if kind == "custom":
            w = sec["weights"]
            if w is None or len(w) != N:
                raise ConfigError(f"noise.weights: need {N} weights for custom noise")
            return nz.CovarianceSpec.custom(np.asarray(w, float), **kw)
        if kind == "zero":
            return nz.CovarianceSpec.zero(N, **kw)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"noise: {exc}") from exc
    raise ConfigError(f"noise.kind: unknown kind {kind!r}")


def _state(value, N, path):
    if isinstance(value, dict):
        x = np.zeros(N)
        for k, a in value.items():
            k = int(k)
            if not 1 <= k <= N:
                raise ConfigError(f"{path}: mode {k} outside 1..{N}")
            x[k - 1] = float(a)
        return x
    x = np.asarray(value, float)
    if x.shape != (N,):
        raise ConfigError(f"{path}: expected {N} coefficients or a {{mode: amplitude}} map")
    return x


def resolve(raw: dict) -> dict:
    """Validate a raw mapping and fill in defaults; returns the resolved tree."""
    raw = raw or {}
    _reject_unknown(raw, SCHEMA, "")
    out = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section) or {}
        _reject_unknown(given, keys, section)
        out[section] = {k: copy.deepcopy(given.get(k, v)) for k, v in keys.items()}
    tol = out["experiment"]["tolerances"] or {}
    _reject_unknown(tol, TOLERANCE_KEYS, "experiment.tolerances")
    solver = out["solver"]
    if not 0.0 <= float(solver["alpha"]) <= 1.0:
        raise ConfigError(f"solver.alpha: {solver['alpha']} outside [0, 1]")
    for a in out["experiment"]["alphaLadder"]:
        if not 0.0 <= float(a) <= 1.0:
            raise ConfigError(f"experiment.alphaLadder: {a} outside [0, 1]")
    x0 = out["experiment"]["x0"]
    if isinstance(x0, dict):
        out["experiment"]["x0"] = {int(k): float(v) for k, v in x0.items()}
    return out


def parse_config(path) -> dict:
    """Read and validate a YAML/JSON config file."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    return resolve(raw)


def build_spec(cfg: dict, name: str, seed: int | None = None, threads: int = 1) -> H.ExperimentSpec:
    s = cfg["solver"]
    try:
        solver = SolverConfig(N=int(s["N"]), grid_size=int(s["gridSize"]), dt=float(s["dt"]),
                              T=float(s["T"]), s=float(s["s"]), scheme=s["scheme"],
                              alpha=float(s["alpha"]), blowup_threshold=float(s["blowupThreshold"]),
                              block_size=int(s["blockSize"]))
        solver.eigensystem()
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc
    N = solver.N
    e = cfg["experiment"]
    tol = {TOLERANCE_KEYS[k]: float(v) for k, v in (e["tolerances"] or {}).items()}
    try:
        return H.ExperimentSpec(
            name=name, model=_build_model(cfg["model"]), noise=_build_noise(cfg["noise"], N),
            solver=solver, M=int(e["M"]), alpha_ladder=tuple(float(a) for a in e["alphaLadder"]),
            seed=int(e["seedBase"] if seed is None else seed),
            x0=_state(e["x0"], N, "experiment.x0"), tolerances=tol,
            sample_every=int(e["sampleEvery"]), gronwall_seeds=int(e["gronwallSeeds"]),
            gronwall_deltas=tuple(float(d) for d in e["gronwallDeltas"]),
            initial_states=tuple(_state(x, N, "experiment.initialStates") for x in e["initialStates"]),
            threads=threads, override_audit=bool(e["overrideAudit"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"experiment: {exc}") from exc


def echo_config(cfg: dict, seed: int) -> str:
    """Resolved config with the effective seed, sufficient to rerun bit-identically."""
    cfg = copy.deepcopy(cfg)
    cfg["experiment"]["seedBase"] = int(seed)
    # output settings do not affect results
    cfg["output"] = dict(SCHEMA["output"])
    return yaml.safe_dump(cfg, sort_keys=True)


# ---------------------------------------------------------------------------
# plot data

COLUMN_DOCS = {
    "alpha": "regularisation parameter",
    "t": "time",
    "ratio": "E J^2(t, X(t)) / J^2(t, x)",
    "state": "index of the initial state",
    "mean_lhs": "ensemble mean of |Y|^2 + int |Y|_V^2",
    "bound": "analytic or fitted upper bound",
    "min_pathwise_slack": "minimum over paths of the pathwise energy slack",
    "moment": "ensemble mean of |X|_{L^2m}^{2m}",
    "stderr": "Monte Carlo standard error",
    "weak_error": "max over test directions of |E psi(X_alpha(T)) - E psi(X_0(T))|",
    "delta": "initial perturbation size",
    "seed": "noise path index",
    "residual_re": "real part of the Fokker-Planck residual",
    "residual_im": "imaginary part of the Fokker-Planck residual",
    "budget": "3 stderr + c_time dt",
    "r": "threshold level",
    "prob": "empirical P(sup_t |W_A(t)|_inf >= r)",
    "h": "test direction",
    "max_ratio": "max |<F - F_alpha, h>| / (alpha J^2)",
    "c_h": "sup norm of h",
    "norm_H": "|X(t)|_H",
    "L2m_integral": "int_0^t |X|_{L^2m}^{2m} ds",
    "J2_integral": "int_0^t J^2(s, X(s)) ds",
    "test_function": "test function id",
    "verdict": "pass/fail",
}

ALPHA_SERIES = ("energy", "moment2m", "lyapunov_ratio", "weak_error")

# series prefix -> (x column, y columns, grouping column or None, log-y)
LAYOUT = {
    "energy": ("t", ["mean_lhs", "bound"], "alpha", False),
    "moment2m": ("t", ["moment"], "alpha", False),
    "lyapunov_ratio": ("t", ["ratio"], "alpha", False),
    "weak_error": ("alpha", ["weak_error"], None, True),
    "contraction": ("seed", ["ratio", "bound"], "delta", False),
    "fpe_residual": ("t", ["residual_re", "residual_im", "budget"], None, False),
    "fernique_tail": ("r", ["prob"], None, True),
    "trajectory": ("t", ["norm_H"], None, False),
    "approx_ratio": (None, [], None, False),
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def _series_from(obj) -> dict:
    if isinstance(obj, H.ExperimentReport):
        return obj.series
    reps = [obj] if isinstance(obj, fpe.FPEReport) else list(obj)
    out = {}
    for r in reps:
        out[f"fpe_residual_{r.test_function}"] = {
            "columns": ["t", "residual_re", "residual_im", "stderr", "budget"],
            "rows": [(float(t), float(z.real), float(z.imag), float(s), float(b))
                     for t, z, s, b in zip(r.times, r.residual, r.stderr, r.budget)]}
    return out


def emit_plot_data(obj, out_path, render: bool = True) -> list[Path]:
    """Write one tab-delimited file per series plus a sidecar column header.

    ``obj`` is an :class:`ExperimentReport`, an FPE report or a list of them.
    With ``render`` a PNG is drawn next to each data file.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, s in sorted(_series_from(obj).items()):
        if not s["rows"]:
            if name.split("_alpha")[0] in ALPHA_SERIES:
                warnings.warn(f"series {name!r} is empty (empty alpha ladder); no file written")
            else:
                warnings.warn(f"series {name!r} is empty; no file written")
            continue
        cols = s["columns"]
        data = out / f"{name}.tsv"
        lines = ["\t".join(cols)] + ["\t".join(_fmt(v) for v in row) for row in s["rows"]]
        data.write_text("\n".join(lines) + "\n")
        side = out / f"{name}.columns"
        side.write_text("".join(f"{i}\t{c}\t{COLUMN_DOCS.get(c, '')}\n" for i, c in enumerate(cols)))
        written += [data, side]
        if render:
            png = _render(name, s, out / f"{name}.png")
            if png is not None:
                written.append(png)
    return written


def _layout(name):
    for prefix, lay in LAYOUT.items():
        if name.startswith(prefix):
            return lay
    return None


def _render(name, series, path: Path):
    lay = _layout(name)
    if lay is None or lay[0] is None:
        return None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xcol, ycols, group, logy = lay
    cols = series["columns"]
    arr = np.array(series["rows"], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = [None] if group is None else sorted(set(arr[:, cols.index(group)]))
    for g in groups:
        sel = arr if g is None else arr[arr[:, cols.index(group)] == g]
        for y in ycols:
            label = y if g is None else f"{y} {group}={g:g}"
            ax.plot(sel[:, cols.index(xcol)], sel[:, cols.index(y)], marker=".", label=label)
    if logy:
        ax.set_yscale("log")
    if xcol == "alpha":
        ax.set_xscale("log")
    ax.set_xlabel(xcol)
    ax.set_title(name)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# entry point

EXIT = {"pass": 0, "fail": 1, "invalid": 2}


def dispatch(cfg: dict, subcommand: str, seed: int | None = None, threads: int = 1,
             archive: str | None = None, emit_plots: bool | None = None, out=None) -> int:
    out = sys.stdout if out is None else out
    name = SUBCOMMANDS[subcommand]
    spec = build_spec(cfg, name, seed, threads)
    report = H.run_experiment(spec)
    root = H.archive_root(archive or cfg["output"]["archive"])
    run_id = H.persist_run(report, root, echo_config(cfg, spec.seed))
    out.write(report.table())
    for k, v in report.values.items():
        if k in ("record", "fpe_table"):
            continue
        out.write(f"# {k}: {json.dumps(v, default=H._json_default, sort_keys=True)}\n")
    if "fpe_table" in report.values:
        out.write(report.values["fpe_table"])
    out.write(f"# archived {root / run_id}\n")
    if emit_plots if emit_plots is not None else cfg["output"]["emitPlots"]:
        emit_plot_data(report, root / run_id / "plots")
        out.write(f"# plots {root / run_id / 'plots'}\n")
    return EXIT[report.status]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spde-fpe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in SUBCOMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", required=True, help="YAML or JSON run config")
        sp.add_argument("--seed", type=int, default=None, help="overrides experiment.seedBase")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (results unchanged)")
        sp.add_argument("--archive", default=None, help=f"archive root (default ${ARCHIVE_ENV} or ./runs)")
        sp.add_argument("--emit-plots", action="store_true", help="write plot data and figures")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(args.config)
        return dispatch(cfg, args.command, args.seed, args.threads, args.archive,
                        True if args.emit_plots else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
