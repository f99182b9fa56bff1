"""Experiment drivers behind the command line: config handling, runs, CSV/SVG output.

A config is one JSON document. Its top level holds ``command``, ``seed``,
usually ``model`` and ``scheme`` blocks, and exactly one block named after
the command. Every output file starts with ``#`` comment lines carrying the
full resolved config, so feeding that JSON back reproduces the file.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from . import analysis, verify
from .model import MissingConstants, ModelSpec, PRESETS, get_preset
from .scheme import SchemeConfig, SimulationResult, simulate, simulate_coupled, steps_for
from .svg import Series, line_chart

log = logging.getLogger(__name__)

COMMANDS = ("simulate", "rate", "chaos", "check", "control", "figures")


class ConfigError(ValueError):
    pass


_SCHEME_DEFAULTS = {
    "kind": "explicit_em",
    "dt": 0.01,
    "horizon": 3.0,
    "steps": None,
    "n": 1000,
    "paths": 100,
    "implicit_tol": 1e-12,
    "implicit_max_iter": 100,
    "obs_gap": None,
    "divergence_threshold": 1e12,
}


def _defaults(command: str) -> dict:
    scheme = dict(_SCHEME_DEFAULTS)
    base: dict[str, Any] = {"command": command, "seed": 0}
    if command == "simulate":
        base.update(model={"name": "opinion", "params": {}}, scheme=scheme, simulate={"per_path": True})
    elif command == "rate":
        base.update(
            model={"name": "opinion", "params": {}},
            scheme=scheme,
            rate={"dts": [0.005, 0.3, 0.4], "window": [0.5, 3.0], "as_window": None},
        )
    elif command == "chaos":
        scheme.update(paths=200, horizon=None)
        base.update(
            model={"name": "linear", "params": {}},
            scheme=scheme,
            chaos={
                "n_list": [8, 16, 32, 64, 128, 256, 512, 1024],
                "t_eval": 1.0,
                "t_sweep": [0.5, 1.0, 2.0],
                "n_sweep": 256,
                "n_ref": None,
                "q": 8.0,
            },
        )
    elif command == "check":
        base.update(
            model={"name": "opinion", "params": {}},
            check={
                "assumptions": ["A2.1", "A2.2"],
                "samples": 10000,
                "radius": 10.0,
                "atoms": 16,
                "slack": 1e-9,
                "fit": False,
                "constants": {},
            },
        )
    elif command == "control":
        scheme.update(horizon=10.0)
        base.update(
            model={"name": "feedback", "params": {}},
            scheme=scheme,
            control={"gains": [[0.0, 0.0], [7.0, 8.0], [12.0, 10.0]], "delta": 0.05},
        )
    elif command == "figures":
        base.update(figures={"only": None, "paths_scale": 1.0})
    else:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    return base


def default_config(command: str) -> dict:
    return copy.deepcopy(_defaults(command))


_NULLABLE = {"horizon", "steps", "obs_gap", "n_ref", "window", "as_window", "only"}


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _merge(default: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(default)
    for key, val in user.items():
        where = f"{path}.{key}" if path else key
        if key not in default:
            raise ConfigError(f"{where}: unknown field")
        ref = default[key]
        if val is None and key in _NULLABLE:
            out[key] = None
        elif isinstance(ref, dict) and key not in ("params", "constants"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(ref, val, where)
        elif isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = dict(val)
        elif isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{where}: expected true or false")
            out[key] = val
        elif _is_number(ref):
            if not _is_number(val):
                raise ConfigError(f"{where}: expected a number, got {val!r}")
            out[key] = val
        elif isinstance(ref, str):
            if not isinstance(val, str):
                raise ConfigError(f"{where}: expected a string")
            out[key] = val
        elif isinstance(ref, list):
            if not isinstance(val, list):
                raise ConfigError(f"{where}: expected a list")
            out[key] = val
        else:
            out[key] = val
    return out


def resolve_config(command: str, user: Optional[dict] = None, seed: Optional[int] = None) -> dict:
    """Merge a user document over the command's defaults and validate it."""
    user = dict(user or {})
    if user.get("command", command) != command:
        raise ConfigError(f"command: config is for {user['command']!r}, not {command!r}")
    others = [c for c in COMMANDS if c != command and c in user]
    if others:
        raise ConfigError(f"{others[0]}: block for another command; exactly one command block is allowed")
    cfg = _merge(_defaults(command), user, "")
    if seed is not None:
        cfg["seed"] = seed
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2**64:
        raise ConfigError("seed: expected an integer in [0, 2^64)")
    if "model" in cfg:
        name = cfg["model"]["name"]
        if name not in PRESETS:
            raise ConfigError(f"model.name: unknown model {name!r}; choose from {sorted(PRESETS)}")
        try:
            build_model(cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.params: {exc}") from None
    sc = cfg.get("scheme")
    if sc is not None:
        if sc["kind"] not in ("explicit_em", "backward_em"):
            raise ConfigError("scheme.kind: expected explicit_em or backward_em")
        if not (_is_number(sc["dt"]) and 0 < sc["dt"] < 1):
            raise ConfigError(f"scheme.dt: must lie in (0, 1), got {sc['dt']}")
        for k in ("n", "paths", "implicit_max_iter"):
            if not isinstance(sc[k], int) or sc[k] < 1:
                raise ConfigError(f"scheme.{k}: expected a positive integer")
        if sc["steps"] is not None and (not isinstance(sc["steps"], int) or sc["steps"] < 0):
            raise ConfigError("scheme.steps: expected a nonnegative integer or null")
        if sc["horizon"] is not None and not (_is_number(sc["horizon"]) and sc["horizon"] >= 0):
            raise ConfigError("scheme.horizon: expected a nonnegative number or null")
        if cfg["command"] in ("simulate", "rate", "control") and sc["steps"] is None and sc["horizon"] is None:
            raise ConfigError("scheme: set steps or horizon")
    cmd = cfg["command"]
    block = cfg[cmd]
    if cmd == "rate":
        dts = block["dts"]
        if not dts or any(not (_is_number(d) and 0 < d < 1) for d in dts):
            raise ConfigError("rate.dts: expected a nonempty list of stepsizes in (0, 1)")
        for key in ("window", "as_window"):
            w = block[key]
            if w is not None and (len(w) != 2 or not all(_is_number(v) for v in w) or w[0] >= w[1]):
                raise ConfigError(f"rate.{key}: expected [start, end] with start < end, or null")
    elif cmd == "chaos":
        nl = block["n_list"]
        if not nl or any(not isinstance(n, int) or n < 1 for n in nl) or sorted(set(nl)) != nl:
            raise ConfigError("chaos.n_list: expected strictly ascending positive integers")
        if not _is_number(block["t_eval"]) or block["t_eval"] <= 0:
            raise ConfigError("chaos.t_eval: expected a positive time")
        if any(not _is_number(t) or t < 0 for t in block["t_sweep"]):
            raise ConfigError("chaos.t_sweep: expected nonnegative times")
        if not isinstance(block["n_sweep"], int) or block["n_sweep"] < 1:
            raise ConfigError("chaos.n_sweep: expected a positive integer")
        if block["n_ref"] is not None and (not isinstance(block["n_ref"], int) or block["n_ref"] < max(nl + [block["n_sweep"]])):
            raise ConfigError("chaos.n_ref: must be an integer >= every requested N")
        try:
            analysis.theoretical_chaos_exponent(build_model(cfg).d, block["q"])
        except ValueError as exc:
            raise ConfigError(f"chaos.q: {exc}") from None
    elif cmd == "check":
        for a in block["assumptions"]:
            if a not in verify.ASSUMPTIONS:
                raise ConfigError(f"check.assumptions: unknown id {a!r}; choose from {verify.ASSUMPTIONS}")
        try:
            verify.AssumptionCheckConfig(block["samples"], block["radius"], block["atoms"], block["slack"], 0)
        except ValueError as exc:
            raise ConfigError(f"check: {exc}") from None
    elif cmd == "control":
        if cfg["model"]["name"] != "feedback":
            raise ConfigError("model.name: control runs need the feedback model")
        delta = block["delta"]
        ratio = delta / sc["dt"] if _is_number(delta) else float("nan")
        if not (delta > 0 and abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)):
            raise ConfigError("control.delta: must be a positive multiple of scheme.dt")
        for g in block["gains"]:
            if len(g) != 2 or not all(_is_number(v) for v in g):
                raise ConfigError("control.gains: expected a list of [k1, k2] pairs")
    elif cmd == "figures":
        only = block["only"]
        if only is not None and any(i not in range(1, 13) for i in only):
            raise ConfigError("figures.only: figure ids run from 1 to 12")
        if not _is_number(block["paths_scale"]) or not 0 < block["paths_scale"] <= 1:
            raise ConfigError("figures.paths_scale: expected a number in (0, 1]")


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def build_model(cfg: dict) -> ModelSpec:
    return get_preset(cfg["model"]["name"], cfg["model"].get("params") or {})


def scheme_config(cfg: dict, model: ModelSpec, **override) -> SchemeConfig:
    sc = {**cfg["scheme"], **override}
    steps = sc["steps"] if sc["steps"] is not None else steps_for(sc["horizon"], sc["dt"])
    obs_gap = sc["obs_gap"]
    if obs_gap is None and model.uses_observation:
        obs_gap = model.params.get("delta_obs")
    return SchemeConfig(
        kind=sc["kind"],
        dt=sc["dt"],
        steps=steps,
        n=sc["n"],
        paths=sc["paths"],
        seed=cfg["seed"],
        implicit_tol=sc["implicit_tol"],
        implicit_max_iter=sc["implicit_max_iter"],
        obs_gap=obs_gap,
        divergence_threshold=sc["divergence_threshold"],
    )


# --- output helpers ---------------------------------------------------------


def config_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path: str, cfg: dict, columns, rows, notes: Optional[dict] = None) -> str:
    lines = [f"# config: {config_json(cfg)}", f"# seed: {cfg['seed']}"]
    for k, v in (notes or {}).items():
        lines.append(f"# {k}: {_cell(v)}")
    lines.append(",".join(columns))
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def write_svg(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _log10(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v > 0, np.log10(np.where(v > 0, v, 1.0)), np.nan)


def _mean_cols(d: int) -> list[str]:
    return ["mean"] if d == 1 else [f"mean_{k}" for k in range(d)]


def series_rows(res: SimulationResult):
    for r in res.records:
        yield [r.step, r.time, r.mean_square, *r.mean, r.max_norm, r.implicit_iters, r.diverged]


def per_path_rows(res: SimulationResult):
    steps, paths = res.mean_square.shape
    for k in range(steps):
        t = k * res.config.dt
        for p in range(paths):
            yield [k, t, p, res.mean_square[k, p], *res.mean[k, p], res.max_norm[k, p], res.implicit_iters[k, p], res.diverged[k, p]]


def write_series(prefix: str, cfg: dict, res: SimulationResult, per_path: bool = True) -> list[str]:
    d = res.mean.shape[-1]
    cols = ["step", "time", "mean_square", *_mean_cols(d), "max_norm", "implicit_iters", "diverged"]
    files = [write_csv(prefix + ".csv", cfg, cols, series_rows(res))]
    if per_path:
        pcols = cols[:2] + ["path"] + cols[2:]
        files.append(write_csv(prefix + "_paths.csv", cfg, pcols, per_path_rows(res)))
    return files


def _first_divergence(res: SimulationResult) -> Optional[float]:
    hit = np.flatnonzero(res.diverged.any(axis=1))
    return float(res.times[hit[0]]) if hit.size else None


@dataclass
class RunOutcome:
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    failed: bool = False


# --- simulate ----------------------------------------------------------------


def run_simulate(cfg: dict, out: str, threads: int = 1) -> RunOutcome:
    os.makedirs(out, exist_ok=True)
    model = build_model(cfg)
    sc = scheme_config(cfg, model)
    res = simulate(model, sc, threads=threads)
    files = write_series(os.path.join(out, "series"), cfg, res, cfg["simulate"]["per_path"])
    ms = res.path_mean_square
    svg = line_chart(
        [Series("path average", res.times, _log10(ms))],
        title=f"{model.name}: log10 mean square ({sc.kind}, dt={sc.dt:g}, N={sc.n}, M={sc.paths})",
        xlabel="t",
        ylabel="log10 E|Y|^2",
    )
    files.append(write_svg(os.path.join(out, "series.svg"), svg))
    return RunOutcome(
        files,
        {
            "steps_run": len(res.times) - 1,
            "diverged": res.any_diverged,
            "diverged_time": _first_divergence(res),
            "final_mean_square": float(ms[-1]),
        },
    )


# --- rate sweep ---------------------------------------------------------------


def _theory_ms(model: ModelSpec, dt: float) -> Optional[float]:
    try:
        a1, a2, b1, b2 = model.constants.require("a1", "a2", "b1", "b2")
        return analysis.ms_rate_equation(dt, a1, a2, b1, b2)[1]
    except (MissingConstants, analysis.RateDomainError) as exc:
        log.warning("no theoretical mean-square rate at dt=%g: %s", dt, exc)
        return None


def _theory_as(model: ModelSpec, dt: float) -> Optional[float]:
    try:
        b1, b2, c1, c2 = model.constants.require("b1", "b2", "c1", "c2")
        return analysis.as_rate_equation(dt, b1, b2, c1, c2)[1]
    except (MissingConstants, analysis.RateDomainError) as exc:
        log.warning("no theoretical almost-sure rate at dt=%g: %s", dt, exc)
        return None


def _pick_window(times, window, label: str, dt: float):
    if window is not None:
        n = int(analysis._window_mask(np.asarray(times), window).sum())
        if n >= 10:
            return tuple(window), ""
        log.warning("%s window %s holds %d points at dt=%g; using the last two-thirds of the horizon", label, window, n, dt)
        return analysis.default_window(times), f"{label} window fallback"
    return analysis.default_window(times), ""


def rate_sweep(cfg: dict, threads: int = 1):
    """One simulation per stepsize; horizon per stepsize is max(horizon, 15 dt)."""
    model = build_model(cfg)
    block = cfg["rate"]
    base = cfg["scheme"]
    rows, curves = [], []
    for dt in block["dts"]:
        horizon = base["horizon"] if base["steps"] is None else base["steps"] * base["dt"]
        horizon = max(horizon, 15 * dt)
        sc = scheme_config(cfg, model, dt=dt, steps=steps_for(horizon, dt))
        res = simulate(model, sc, threads=threads)
        curves.append((dt, res))
        row = {"dt": dt, "theta_star": _theory_ms(model, dt), "xi_star": _theory_as(model, dt), "note": ""}
        if res.any_diverged:
            log.warning("run diverged at dt=%g; empirical rates left empty", dt)
            row.update(note="diverged")
        else:
            w, note = _pick_window(res.times, block["window"], "ms", dt)
            rep = analysis.estimate_rate(res.times, res.path_mean_square, w)
            aw, anote = _pick_window(res.times, block["as_window"] or block["window"], "as", dt)
            prep = analysis.pathwise_rates(res.times, res.mean_square, aw)
            row.update(
                empirical_ms_rate=rep.empirical_rate,
                ms_r_squared=rep.r_squared,
                window_start=w[0],
                window_end=w[1],
                empirical_as_median=prep.median,
                empirical_as_min=prep.min,
                empirical_as_max=prep.max,
                note=";".join(x for x in (note, anote) if x),
            )
        rows.append(row)
    return rows, curves


RATE_COLUMNS = [
    "dt",
    "empirical_ms_rate",
    "theta_star",
    "empirical_as_median",
    "empirical_as_min",
    "empirical_as_max",
    "xi_star",
    "ms_r_squared",
    "window_start",
    "window_end",
    "note",
]


def run_rate(cfg: dict, out: str, threads: int = 1) -> RunOutcome:
    os.makedirs(out, exist_ok=True)
    rows, curves = rate_sweep(cfg, threads)
    files = [
        write_csv(
            os.path.join(out, "rates.csv"),
            cfg,
            RATE_COLUMNS,
            ([r.get(c) for c in RATE_COLUMNS] for r in rows),
            notes={"convention": "empirical_* are signed slopes; theta_star and xi_star are positive decay rates"},
        )
    ]
    svg = line_chart(
        [Series(f"dt={dt:g}", res.times, _log10(res.path_mean_square)) for dt, res in curves],
        title="log10 mean square for several stepsizes",
        xlabel="t",
        ylabel="log10 E|Y|^2",
    )
    files.append(write_svg(os.path.join(out, "rates.svg"), svg))
    return RunOutcome(files, {"rows": rows})


# --- chaos ---------------------------------------------------------------------


def chaos_experiment(cfg: dict, threads: int = 1):
    model = build_model(cfg)
    block = cfg["chaos"]
    times = [block["t_eval"], *block["t_sweep"]]
    horizon = max(times)
    n_all = sorted(set(block["n_list"]) | {block["n_sweep"]})
    sc = scheme_config(cfg, model, steps=steps_for(horizon, cfg["scheme"]["dt"]), n=max(n_all))
    res = simulate_coupled(model, sc, n_all, n_ref=block["n_ref"], threads=threads)

    def at(t):
        return int(round(t / sc.dt))

    e_eval = [float(res.errors[n_all.index(n), at(block["t_eval"])]) for n in block["n_list"]]
    i_sweep = n_all.index(block["n_sweep"])
    sweep = [(t, float(res.errors[i_sweep, at(t)])) for t in block["t_sweep"]]
    report = None
    if len(block["n_list"]) >= 4 and all(e > 0 for e in e_eval):
        report = analysis.fit_chaos_rate(block["n_list"], e_eval, d=model.d, q=block["q"], t_eval=block["t_eval"])
    return res, e_eval, sweep, report


def run_chaos(cfg: dict, out: str, threads: int = 1) -> RunOutcome:
    os.makedirs(out, exist_ok=True)
    model = build_model(cfg)
    block = cfg["chaos"]
    res, e_eval, sweep, rep = chaos_experiment(cfg, threads)
    notes = {"reference": res.reference, "n_ref": res.n_ref}
    declared_q = model.constants.q
    if declared_q is not None and declared_q <= 2:
        notes["q_note"] = f"model declares q={declared_q:g}; the rate needs q > 2, using q={block['q']:g}"
    fitted = []
    if rep is not None:
        notes.update(slope=rep.slope, slope_se=rep.slope_se, prefactor=rep.prefactor, theoretical_exponent=rep.theoretical_exponent, q=rep.q)
        fitted = [rep.prefactor * n**rep.slope for n in block["n_list"]]
    rows = [[n, block["t_eval"], e, fitted[i] if fitted else None] for i, (n, e) in enumerate(zip(block["n_list"], e_eval))]
    files = [write_csv(os.path.join(out, "chaos.csv"), cfg, ["N", "t_eval", "e_N", "fit_e_N"], rows, notes)]
    files.append(
        write_csv(
            os.path.join(out, "chaos_time.csv"),
            cfg,
            ["N", "t", "e_N"],
            ([block["n_sweep"], t, e] for t, e in sweep),
        )
    )
    series = [Series("e_N", np.log10(block["n_list"]), _log10(e_eval), markers=True)]
    if rep is not None:
        series.append(Series(f"fit slope {rep.slope:.3f}", np.log10(block["n_list"]), _log10(fitted)))
        ref = [e_eval[0] * (n / block["n_list"][0]) ** rep.theoretical_exponent for n in block["n_list"]]
        series.append(Series(f"slope {rep.theoretical_exponent:g}", np.log10(block["n_list"]), _log10(ref)))
    svg = line_chart(series, title=f"coupled error at t={block['t_eval']:g}", xlabel="log10 N", ylabel="log10 e_N")
    files.append(write_svg(os.path.join(out, "chaos.svg"), svg))
    summary = {"e_N": dict(zip(block["n_list"], e_eval)), "t_sweep": sweep}
    if rep is not None:
        summary.update(slope=rep.slope, slope_se=rep.slope_se, theoretical_exponent=rep.theoretical_exponent)
    return RunOutcome(files, summary)


# --- check ---------------------------------------------------------------------


def run_check(cfg: dict, out: str, threads: int = 1) -> RunOutcome:
    os.makedirs(out, exist_ok=True)
    block = cfg["check"]
    model = build_model(cfg)
    if block["constants"]:
        try:
            model = model.with_constants(**block["constants"])
        except TypeError as exc:
            raise ConfigError(f"check.constants: {exc}") from None
    vcfg = verify.AssumptionCheckConfig(block["samples"], block["radius"], block["atoms"], block["slack"], cfg["seed"])
    rows, lines, failed = [], [], False
    for a in block["assumptions"]:
        row = {"assumption": a, "verdict": "", "constants": "", "witness": "", "lhs": None, "rhs": None, "fitted": ""}
        try:
            res = verify.check_assumption(model, a, vcfg)
            row.update(verdict=res.verdict, constants=json.dumps(res.constants, sort_keys=True))
            if res.witness is not None:
                w = res.witness
                row.update(
                    witness=json.dumps({"part": w.part, "index": w.index, "x": w.x.tolist(), "y": w.y.tolist()}),
                    lhs=w.lhs,
                    rhs=w.rhs,
                )
            failed |= not res.passed
        except MissingConstants as exc:
            row.update(verdict="missing", constants=",".join(exc.names))
            failed = True
        except verify.UnsupportedAssumption as exc:
            row.update(verdict="unsupported", witness=str(exc))
            failed = True
        if block["fit"]:
            try:
                fit = verify.fit_constants(model, a, vcfg)
                row["fitted"] = json.dumps({k: round(v, 6) for k, v in fit.constants.items()}, sort_keys=True)
            except verify.Infeasible as exc:
                row["fitted"] = f"infeasible: {exc}"
            except verify.UnsupportedAssumption as exc:
                row["fitted"] = f"unsupported: {exc}"
        rows.append(row)
        lines.append(f"{a:6s} {row['verdict']:12s} {row['constants']} {row['fitted']}".rstrip())
    cols = ["assumption", "verdict", "constants", "witness", "lhs", "rhs", "fitted"]
    files = [
        write_csv(
            os.path.join(out, "check.csv"),
            cfg,
            cols,
            ([r[c] for c in cols] for r in rows),
            notes={"scope": "sampled falsifier; a pass is evidence, not proof"},
        )
    ]
    return RunOutcome(files, {"table": lines, "rows": rows}, failed=failed)


# --- control -------------------------------------------------------------------


def control_summary(res: SimulationResult) -> dict:
    ms = res.path_mean_square
    t = res.times
    out = {"diverged": res.any_diverged, "diverged_time": _first_divergence(res)}
    if res.any_diverged:
        return out
    i1 = int(np.searchsorted(t, 1.0 - 1e-9))
    if i1 < len(t):
        out["ms_at_t1"] = float(ms[i1])
        out["max_ms_after_t1"] = float(ms[i1:].max())
        out["bounded"] = bool(out["max_ms_after_t1"] <= 10 * out["ms_at_t1"])
    try:
        out["rate"] = analysis.estimate_rate(t, ms).empirical_rate
    except ValueError as exc:
        log.warning("no control rate: %s", exc)
    return out


CONTROL_COLUMNS = ["k1", "k2", "diverged", "diverged_time", "ms_at_t1", "max_ms_after_t1", "bounded", "rate"]


def run_control(cfg: dict, out: str, threads: int = 1) -> RunOutcome:
    os.makedirs(out, exist_ok=True)
    block = cfg["control"]
    files, rows, curves = [], [], []
    for k1, k2 in block["gains"]:
        params = {**cfg["model"]["params"], "k1": k1, "k2": k2, "delta_obs": block["delta"]}
        sub = {**cfg, "model": {"name": "feedback", "params": params}}
        model = build_model(sub)
        sc = scheme_config(sub, model, obs_gap=block["delta"])
        res = simulate(model, sc, threads=threads)
        files += write_series(os.path.join(out, f"control_k1_{k1:g}_k2_{k2:g}"), cfg, res, per_path=False)
        summ = control_summary(res)
        rows.append({"k1": k1, "k2": k2, **summ})
        curves.append((k1, k2, res))
    files.append(write_csv(os.path.join(out, "control.csv"), cfg, CONTROL_COLUMNS, ([r.get(c) for c in CONTROL_COLUMNS] for r in rows)))
    svg = line_chart(
        [Series(f"k1={k1:g}, k2={k2:g}", r.times, _log10(r.path_mean_square)) for k1, k2, r in curves],
        title="feedback control: log10 mean square",
        xlabel="t",
        ylabel="log10 E|Y|^2",
    )
    files.append(write_svg(os.path.join(out, "control.svg"), svg))
    return RunOutcome(files, {"rows": rows})


# --- figures -------------------------------------------------------------------


@dataclass(frozen=True)
class FigureRecipe:
    id: int
    name: str
    title: str
    build: Callable


def _fig_cfg(seed: int, model: str, params: dict, **scheme) -> dict:
    sc = dict(_SCHEME_DEFAULTS)
    sc.update(scheme)
    return {"command": "simulate", "seed": seed, "model": {"name": model, "params": params}, "scheme": sc, "simulate": {"per_path": False}}


class _FigureContext:
    def __init__(self, seed: int, out: str, threads: int, paths_scale: float):
        self.seed, self.out, self.threads, self.scale = seed, out, threads, paths_scale
        self.cache: dict = {}

    def paths(self, m: int) -> int:
        return max(1, int(round(m * self.scale)))

    def run(self, key: str, cfg: dict) -> SimulationResult:
        if key not in self.cache:
            model = build_model(cfg)
            self.cache = {key: simulate(model, scheme_config(cfg, model), threads=self.threads)}
        return self.cache[key]

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)


def _ms_figure(ctx, fig, key, cfg, label):
    res = ctx.run(key, cfg)
    files = write_series(ctx.path(f"fig{fig.id:02d}_{fig.name}"), cfg, res, per_path=False)
    svg = line_chart([Series(label, res.times, _log10(res.path_mean_square))], title=fig.title, xlabel="t", ylabel="log10 E|Y|^2")
    files.append(write_svg(ctx.path(f"fig{fig.id:02d}_{fig.name}.svg"), svg))
    return files


def _paths_figure(ctx, fig, key, cfg):
    res = ctx.run(key, cfg)
    prefix = ctx.path(f"fig{fig.id:02d}_{fig.name}")
    d = res.mean.shape[-1]
    cols = ["step", "time", "path", "mean_square", *_mean_cols(d), "max_norm", "implicit_iters", "diverged"]
    files = [write_csv(prefix + ".csv", cfg, cols, per_path_rows(res))]
    series = [
        Series(f"path {p}" if p < 3 else "", res.times, _log10(res.mean_square[:, p]), width=0.6)
        for p in range(res.mean_square.shape[1])
    ]
    svg = line_chart(series, title=fig.title, xlabel="t", ylabel="log10 (1/N) sum |Y^i|^2")
    files.append(write_svg(prefix + ".svg", svg))
    return files


def _opinion_cfg(ctx):
    return _fig_cfg(ctx.seed, "opinion", {}, dt=0.01, horizon=3.0, n=1000, paths=ctx.paths(100))


def _feedback_cfg(ctx, k1, k2):
    return _fig_cfg(ctx.seed, "feedback", {"k1": k1, "k2": k2, "delta_obs": 0.05}, dt=0.01, horizon=10.0, n=1000, paths=ctx.paths(100), obs_gap=0.05)


def _fig_rate(ctx, fig):
    cfg = {
        "command": "rate",
        "seed": ctx.seed,
        "model": {"name": "opinion", "params": {}},
        "scheme": {**_SCHEME_DEFAULTS, "n": 1000, "paths": ctx.paths(100), "horizon": 3.0},
        "rate": {"dts": [0.005, 0.3, 0.4], "window": [0.5, 3.0], "as_window": None},
    }
    rows, curves = rate_sweep(cfg, ctx.threads)
    prefix = ctx.path(f"fig{fig.id:02d}_{fig.name}")
    files = [write_csv(prefix + ".csv", cfg, RATE_COLUMNS, ([r.get(c) for c in RATE_COLUMNS] for r in rows))]
    files.append(
        write_csv(
            prefix + "_series.csv",
            cfg,
            ["dt", "step", "time", "mean_square"],
            ([dt, k, k * dt, v] for dt, res in curves for k, v in enumerate(res.path_mean_square)),
        )
    )
    svg = line_chart([Series(f"dt={dt:g}", r.times, _log10(r.path_mean_square)) for dt, r in curves], title=fig.title, xlabel="t", ylabel="log10 E|Y|^2")
    files.append(write_svg(prefix + ".svg", svg))
    return files


def _fig_linear(ctx, fig):
    prefix = ctx.path(f"fig{fig.id:02d}_{fig.name}")
    runs = []
    for n in (10, 100, 1000):
        cfg = _fig_cfg(ctx.seed, "linear", {}, dt=0.01, horizon=3.0, n=n, paths=ctx.paths(100))
        model = build_model(cfg)
        runs.append((n, simulate(model, scheme_config(cfg, model), threads=ctx.threads)))
    header = _fig_cfg(ctx.seed, "linear", {}, dt=0.01, horizon=3.0, n=1000, paths=ctx.paths(100))
    header["figure"] = {"n_values": [10, 100, 1000]}
    rows = ([n, k, k * 0.01, v, r.mean_square[k, 0]] for n, r in runs for k, v in enumerate(r.path_mean_square))
    files = [write_csv(prefix + ".csv", header, ["N", "step", "time", "mean_square", "path0_mean_square"], rows)]
    svg1 = line_chart([Series(f"N={n}", r.times, _log10(r.path_mean_square)) for n, r in runs], title=fig.title + " (100 paths)", xlabel="t", ylabel="log10 E|Y|^2")
    svg2 = line_chart([Series(f"N={n}", r.times, _log10(r.mean_square[:, 0])) for n, r in runs], title=fig.title + " (one path)", xlabel="t", ylabel="log10 (1/N) sum |Y^i|^2")
    files.append(write_svg(prefix + ".svg", svg1))
    files.append(write_svg(prefix + "_one_path.svg", svg2))
    return files


def _cubic_cfg(ctx, rho1, rho2, paths):
    return _fig_cfg(ctx.seed, "cubic", {"rho1": rho1, "rho2": rho2}, kind="backward_em", dt=0.004, horizon=2.0, n=300, paths=ctx.paths(paths))


FIGURES: list[FigureRecipe] = [
    FigureRecipe(1, "opinion_ms", "opinion model: mean-square decay", lambda c, f: _ms_figure(c, f, "opinion", _opinion_cfg(c), "M paths")),
    FigureRecipe(2, "opinion_paths", "opinion model: per-path decay", lambda c, f: _paths_figure(c, f, "opinion", _opinion_cfg(c))),
    FigureRecipe(3, "opinion_stepsizes", "opinion model: three stepsizes", _fig_rate),
    FigureRecipe(4, "linear_particles", "linear model: particle counts", _fig_linear),
    FigureRecipe(5, "feedback_none_ms", "no control: mean square", lambda c, f: _ms_figure(c, f, "fb0", _feedback_cfg(c, 0.0, 0.0), "k=(0,0)")),
    FigureRecipe(6, "feedback_none_paths", "no control: per path", lambda c, f: _paths_figure(c, f, "fb0", _feedback_cfg(c, 0.0, 0.0))),
    FigureRecipe(7, "feedback_7_8_ms", "k1=7, k2=8: mean square", lambda c, f: _ms_figure(c, f, "fb78", _feedback_cfg(c, 7.0, 8.0), "k=(7,8)")),
    FigureRecipe(8, "feedback_7_8_paths", "k1=7, k2=8: per path", lambda c, f: _paths_figure(c, f, "fb78", _feedback_cfg(c, 7.0, 8.0))),
    FigureRecipe(9, "feedback_12_10_ms", "k1=12, k2=10: mean square", lambda c, f: _ms_figure(c, f, "fb1210", _feedback_cfg(c, 12.0, 10.0), "k=(12,10)")),
    FigureRecipe(10, "feedback_12_10_paths", "k1=12, k2=10: per path", lambda c, f: _paths_figure(c, f, "fb1210", _feedback_cfg(c, 12.0, 10.0))),
    FigureRecipe(11, "cubic_bem_ms", "cubic model, backward EM: mean square", lambda c, f: _ms_figure(c, f, "cubic01", _cubic_cfg(c, 0.0, 1.0, 500), "rho=(0,1)")),
    FigureRecipe(12, "cubic_bem_paths", "cubic model, backward EM: per path", lambda c, f: _paths_figure(c, f, "cubic10", _cubic_cfg(c, 1.0, 0.0, 30))),
]


def run_figures(cfg: dict, out: str, threads: int = 1) -> RunOutcome:
    """Run the canned recipes one after another; a failing figure is recorded and skipped."""
    target = os.path.join(out, "figures")
    os.makedirs(target, exist_ok=True)
    block = cfg["figures"]
    ctx = _FigureContext(cfg["seed"], target, threads, block["paths_scale"])
    wanted = set(block["only"] or range(1, 13))
    rows, files, failed = [], [], False
    for fig in FIGURES:
        if fig.id not in wanted:
            continue
        try:
            made = fig.build(ctx, fig)
            files += made
            rows.append([fig.id, fig.name, "ok", ";".join(os.path.basename(p) for p in made)])
        except Exception as exc:  # keep going; the manifest records the failure
            log.error("figure %d failed: %s", fig.id, exc)
            rows.append([fig.id, fig.name, f"error: {exc}", ""])
            failed = True
    files.append(write_csv(os.path.join(target, "manifest.csv"), cfg, ["id", "name", "status", "files"], rows))
    return RunOutcome(files, {"figures": len(rows), "errors": sum(r[2] != "ok" for r in rows)}, failed=failed)


RUNNERS = {
    "simulate": run_simulate,
    "rate": run_rate,
    "chaos": run_chaos,
    "check": run_check,
    "control": run_control,
    "figures": run_figures,
}
