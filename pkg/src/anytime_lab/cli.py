"""Command-line front end: scenario loading, bound curves, simulations and reproduction runs.

Exit codes: 0 when every check passes, 1 on a tolerance failure, 2 on a
usage or configuration error. Worker processes for Monte Carlo runs come
from the ANYTIME_LAB_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import bounds
from .bounds import RateError
from .channels import ErasureChannel
from .necessity_embedding import (
    EmbeddingParams,
    SuccessiveDecoderState,
    code_from_controller,
    cross_stream_deviation,
    embed,
    propagation_bound,
    successive_decode,
)
from .observer_controller import ClosedLoop, LoopConfig
from .simulator import Scenario, compare_schemes, moment_series, run, trial_erasures, write_moments_csv, write_traces_csv
from .state_space import StateSpaceModel, StructureError, intrinsic_delay, is_observable, is_reachable, unstable_spectrum

EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE = 0, 1, 2

# acceptance tolerances of the reproduction run
TOL_CAPACITY = 1e-3
TOL_ALPHA_H = 1e-2
TOL_ALPHA_L = 2e-3
TOL_SPHERE = 1e-3
GEOMETRY_MARGIN = 1e-3
REF_CAPACITY = 0.3795
REF_ALPHA_H = 1.11
REF_ALPHA_L = 0.196
PROPAGATION_MAX_DELAY = 20


class ConfigError(ValueError):
    """Malformed or invalid scenario file."""


_TOP_KEYS = {"name", "model", "channel", "code", "paired", "simulation", "siso", "necessity"}
_MODEL_KEYS = {"A", "eigen_log2", "B_u", "B_w", "C_y", "omega", "gamma", "omega0"}
_CODE_KEYS = {"rates", "priorities", "transport", "discipline", "feedback", "superstep", "dance_factor"}
_PAIRED_KEYS = _CODE_KEYS | {"name"}
_SIM_KEYS = {"horizon", "trials", "eta", "seed", "disturbance", "noise", "window"}
_SISO_KEYS = {"transform", "B_u", "C_y", "gamma", "steps", "feedback"}
_NEC_KEYS = {"embed_rates", "stride", "max_delay", "eps_prime", "blocks", "block_horizon"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


@dataclass
class ScenarioFile:
    """A parsed scenario file: the main scenario plus optional paired, SISO and necessity sections."""

    scenario: Scenario
    eigen_log2: tuple
    paired: Scenario | None = None
    window: tuple[int, int] | None = None
    siso: dict | None = None
    necessity: dict | None = None
    raw: dict = field(default_factory=dict)


def _build_model(sec: dict) -> tuple[StateSpaceModel, tuple]:
    _check_keys(sec, _MODEL_KEYS, "model")
    if ("A" in sec) == ("eigen_log2" in sec):
        raise ConfigError("model: give exactly one of 'A' or 'eigen_log2'")
    d = {k: v for k, v in sec.items() if k != "eigen_log2"}
    if "eigen_log2" in sec:
        d["A"] = np.diag([2.0 ** float(v) for v in sec["eigen_log2"]]).tolist()
    try:
        model = StateSpaceModel.from_dict(d)
    except (ValueError, StructureError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    logs = tuple(unstable_spectrum(model.A).log_magnitudes)
    return model, logs


def _loop_config(sec: dict, where: str) -> LoopConfig:
    _check_keys(sec, _PAIRED_KEYS if where == "paired" else _CODE_KEYS, where)
    args = {k: v for k, v in sec.items() if k != "name"}
    if "rates" in args:
        args["rates"] = tuple(float(r) for r in args["rates"])
    if args.get("priorities") is not None:
        args["priorities"] = tuple(int(p) for p in args["priorities"])
    try:
        return LoopConfig(**args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def check_rate_demand(rates, logs) -> None:
    """Every unstable coordinate needs a stream faster than log2|lambda|."""
    if len(rates) != len(logs):
        raise RateError(f"need one rate per unstable eigenvalue: got {len(rates)}, need {len(logs)}")
    for k, (r, l) in enumerate(zip(rates, logs)):
        if not r > l:
            raise RateError(
                f"stream {k}: rate {r} is not above log2|lambda| = {l:.6g}; "
                "stabilization demands rate log2|lambda| + epsilon on every unstable eigenvalue"
            )


def parse_scenario(data: dict, where: str = "<scenario>") -> ScenarioFile:
    _check_keys(data, _TOP_KEYS, "top level")
    for req in ("model", "channel", "code", "simulation"):
        if req not in data:
            raise ConfigError(f"missing section {req!r}")
    model, logs = _build_model(data["model"])
    _check_keys(data["channel"], {"beta"}, "channel")
    beta = data["channel"].get("beta")
    if not isinstance(beta, (int, float)) or not 0.0 <= beta < 1.0:
        raise ConfigError(f"channel: beta must lie in [0, 1), got {beta!r}")
    loop = _loop_config(data["code"], "code")
    sim = data["simulation"]
    _check_keys(sim, _SIM_KEYS, "simulation")
    try:
        check_rate_demand(loop.rates, logs)
    except RateError as exc:
        raise ConfigError(f"code: {exc}") from exc
    window = tuple(int(v) for v in sim["window"]) if "window" in sim else None
    try:
        scen = Scenario(
            model,
            float(beta),
            loop,
            int(sim.get("horizon", 1000)),
            int(sim.get("trials", 10)),
            float(sim.get("eta", 3.0)),
            int(sim.get("seed", 0)),
            sim.get("disturbance", "iid"),
            sim.get("noise", "iid"),
            None,
            str(data.get("name", Path(where).stem)),
        )
    except ValueError as exc:
        raise ConfigError(f"simulation: {exc}") from exc
    paired = None
    if "paired" in data:
        psec = dict(data["paired"])
        name = psec.pop("name", "paired")
        _check_keys(data["paired"], _PAIRED_KEYS, "paired")
        try:
            pcfg = replace(loop, **{k: (tuple(v) if isinstance(v, list) else v) for k, v in psec.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"paired: {exc}") from exc
        paired = replace(scen, loop=pcfg, name=name)
    siso = data.get("siso")
    if siso is not None:
        _check_keys(siso, _SISO_KEYS, "siso")
    nec = data.get("necessity")
    if nec is not None:
        _check_keys(nec, _NEC_KEYS, "necessity")
    return ScenarioFile(scen, logs, paired, window, siso, nec, data)


def load_scenario(path) -> ScenarioFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_scenario(data, str(path))


def shipped_path(name: str = "example.json") -> Path:
    return Path(str(resources.files("anytime_lab") / "data" / name))


def siso_model(sf: ScenarioFile) -> StateSpaceModel:
    """The single-input single-output version of the example with scalar U and Y.

    A~ = T^-1 A T, which gives the upper-right entry 2^0.05 - 2^0.34; the
    other order, T A T^-1, flips that sign and makes [1, 1] unobservable.
    """
    s = sf.siso
    if s is None:
        raise ConfigError("scenario has no 'siso' section")
    T = np.asarray(s["transform"], dtype=float)
    A = sf.scenario.model.A
    At = np.linalg.inv(T) @ A @ T
    return StateSpaceModel(At, s["B_u"], np.eye(A.shape[0]), s["C_y"], sf.scenario.model.omega, float(s.get("gamma", 0.0)))


# -- output helpers ----------------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        wr.writerows(rows)


@dataclass
class Check:
    name: str
    value: float | str
    target: str
    passed: bool

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.value} (target {self.target})"


# -- bounds-curve -----------------------------------------------------------------------------


def bounds_curve(beta: float, rate_h: float, out: Path, eta: float, eigen_log2) -> dict[str, Path]:
    """Plot-ready CSVs for the capacity curve, sphere-packing, low-priority bound, rho sweep and eta lines."""
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    files["anytime_capacity"] = out / "anytime_capacity.csv"
    _write_csv(files["anytime_capacity"], ["rate", "alpha"], bounds.anytime_capacity_curve(beta))
    files["sphere_packing"] = out / "sphere_packing.csv"
    _write_csv(files["sphere_packing"], ["rate", "exponent"], bounds.sphere_packing_curve(beta))
    if beta > 0:
        files["low_priority"] = out / "low_priority.csv"
        _write_csv(files["low_priority"], ["rate_l", "exponent"], bounds.low_priority_curve(rate_h, beta))
        files["rho_sweep"] = out / "rho_sweep.csv"
        _write_csv(files["rho_sweep"], ["rho", "rate_l", "exponent"], bounds.rho_sweep(rate_h, beta))
    rows = []
    for l in eigen_log2:
        for r in np.linspace(0.0, 1.0, 101):
            rows.append((l, float(r), eta * float(r)))
    files["eta_lines"] = out / "eta_lines.csv"
    _write_csv(files["eta_lines"], ["eigen_log2", "rate", "exponent"], rows)
    return files


def read_curve(path: Path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return data[:, 0], data[:, 1]


def alpha_on_curve(path: Path, rate: float) -> float:
    """Exponent of the emitted capacity curve at a given rate (linear interpolation)."""
    r, a = read_curve(path)
    order = np.argsort(r)
    return float(np.interp(rate, r[order], a[order]))


# -- checks shared by rate-region and reproduce-example ---------------------------------------


def bound_checks(beta: float, rates, eigen_log2, eta: float) -> list[Check]:
    r_h, r_l = rates
    total = r_h + r_l
    alpha_star = eta * max(eigen_log2)
    cap = bounds.bec_anytime_capacity(alpha_star, beta)
    checks = []
    feasible = cap > total
    checks.append(
        Check(
            "undifferentiated verdict",
            f"C_any({alpha_star:.4g}) = {cap:.4f} {'>' if feasible else '<'} {total:.3f} => undifferentiated {'feasible' if feasible else 'infeasible'}",
            "computed",
            True,
        )
    )
    a_h = bounds.bec_anytime_capacity_inverse(r_h, beta)
    a_l = bounds.low_priority_exponent(r_h, r_l, beta)
    t_h, t_l = eta * eigen_log2[0], eta * eigen_log2[1]
    met = a_h > t_h and a_l > t_l
    checks.append(
        Check(
            "prioritized verdict",
            f"alpha_H = {a_h:.4f} vs {t_h:.4g}, alpha_L >= {a_l:.4f} vs {t_l:.4g} => {'alpha targets met' if met else 'alpha targets missed'}",
            "computed",
            True,
        )
    )
    return checks


def reference_checks(beta: float, rates, eigen_log2, eta: float) -> list[Check]:
    """Numerical reference values of the differentiated-service example."""
    r_h, r_l = rates
    alpha_star = eta * max(eigen_log2)
    cap = bounds.bec_anytime_capacity(alpha_star, beta)
    a_h = bounds.bec_anytime_capacity_inverse(r_h, beta)
    a_l = bounds.low_priority_exponent(r_h, r_l, beta)
    sp = bounds.sphere_packing(r_h, beta)
    return [
        Check("anytime capacity at eta*log2(lambda_1)", round(cap, 5), f"{REF_CAPACITY} +- {TOL_CAPACITY}", abs(cap - REF_CAPACITY) <= TOL_CAPACITY),
        Check("undifferentiated infeasible", f"{cap:.4f} < {r_h + r_l:.3f}", "strict", cap < r_h + r_l),
        Check("high-priority reliability", round(a_h, 5), f"{REF_ALPHA_H} +- {TOL_ALPHA_H}", abs(a_h - REF_ALPHA_H) <= TOL_ALPHA_H),
        Check("low-priority reliability", round(a_l, 5), f"{REF_ALPHA_L} +- {TOL_ALPHA_L}", abs(a_l - REF_ALPHA_L) <= TOL_ALPHA_L),
        Check("low-priority equals sphere-packing at R_H", round(abs(a_l - sp), 6), f"<= {TOL_SPHERE}", abs(a_l - sp) <= TOL_SPHERE),
    ]


def geometry_checks(curve_dir: Path, beta: float, rates, eigen_log2, eta: float) -> list[Check]:
    r_h, r_l = rates
    total = round(r_h + r_l, 2)  # the point plotted at rate 0.39
    alpha_star = eta * max(eigen_log2)
    a_curve = alpha_on_curve(curve_dir / "anytime_capacity.csv", total)
    a_h = bounds.bec_anytime_capacity_inverse(r_h, beta)
    a_l = bounds.low_priority_exponent(r_h, r_l, beta)
    line_h, line_l = eta * eigen_log2[0], eta * eigen_log2[1]
    return [
        Check(
            "undifferentiated point above the capacity curve",
            f"curve alpha({total}) = {a_curve:.4f} vs {alpha_star:.4g}",
            f"margin >= {GEOMETRY_MARGIN}",
            alpha_star - a_curve >= GEOMETRY_MARGIN,
        ),
        Check("high-priority point above its eta line", f"{a_h:.4f} vs {line_h:.4g}", f"margin >= {GEOMETRY_MARGIN}", a_h - line_h >= GEOMETRY_MARGIN),
        Check("low-priority point above its eta line", f"{a_l:.4f} vs {line_l:.4g}", f"margin >= {GEOMETRY_MARGIN}", a_l - line_l >= GEOMETRY_MARGIN),
    ]


def region_checks(sf: ScenarioFile) -> list[Check]:
    sc = sf.scenario
    demand = bounds.stabilizability_demand(sc.model, sc.eta)
    cap = bounds.capacity_function(sc.beta)
    q = demand.query()
    inner = bounds.inner_bound_contains(q, cap)
    outer = bounds.outer_bound_contains(q, cap)
    targets = ", ".join(f"(R={t.rate:.4g}, alpha={t.alpha:.4g})" for t in demand.targets)
    return [
        Check("stabilizability demand", targets, "computed", True),
        Check("multiplexing inner bound contains demand", str(inner), "computed", True),
        Check("demultiplexing outer bound contains demand", str(outer), "computed", True),
    ]


def structure_checks(sf: ScenarioFile) -> list[Check]:
    m = siso_model(sf)
    theta = intrinsic_delay(m)
    return [
        Check("SISO system observable", str(is_observable(m.A, m.C_y)), "True", is_observable(m.A, m.C_y)),
        Check("SISO system reachable", str(is_reachable(m.A, m.B_u)), "True", is_reachable(m.A, m.B_u)),
        Check("SISO intrinsic delay", theta, "0", theta == 0),
    ]


def dance_check(sf: ScenarioFile, seed: int) -> Check:
    """Explicit feedback replaced by the dance on the SISO system, with extremal observation noise."""
    m = siso_model(sf)
    steps = int(sf.siso.get("steps", 10000))
    cfg = replace(sf.scenario.loop, feedback=sf.siso.get("feedback", "dance"))
    sc = replace(sf.scenario, model=m, loop=cfg, horizon=steps, trials=1, seed=seed, noise="extremal")
    tr = run(sc, workers=1)[0]
    return Check(
        f"dance demodulation errors over {steps} steps",
        tr.dance_errors,
        "0",
        tr.dance_errors == 0 and not tr.diverged,
    )


def moment_checks(sf: ScenarioFile, trials: int | None, horizon: int | None, out: Path | None) -> tuple[list[Check], object]:
    a = sf.scenario
    if trials:
        a = replace(a, trials=trials)
    if horizon:
        a = replace(a, horizon=horizon)
    if sf.paired is None:
        raise ConfigError("the paired comparison needs a 'paired' section")
    b = replace(sf.paired, trials=a.trials, horizon=a.horizon, seed=a.seed)
    window = sf.window if sf.window and not horizon else (a.horizon // 2, a.horizon)
    rep = compare_schemes(a, b, window)
    if out is not None:
        rep.write_csv(out / "paired_moments.csv")
    sa, sb = rep.slopes
    label = " (finite-horizon proxy)"
    return [
        Check("paired runs share erasure sequences", str(rep.same_erasures), "True", rep.same_erasures),
        Check(
            f"{a.name} moment slope not significantly positive{label}",
            f"slope {sa.slope:.3g}, 95% CI [{sa.lo:.3g}, {sa.hi:.3g}], diverged {sa.diverged_fraction:.3f}",
            "CI lower <= 0 and no divergence",
            not sa.unstable,
        ),
        Check(
            f"{b.name} moment slope significantly positive or diverged{label}",
            f"slope {sb.slope:.3g}, 95% CI [{sb.lo:.3g}, {sb.hi:.3g}], diverged {sb.diverged_fraction:.3f}",
            "CI lower > 0 or divergence",
            sb.unstable,
        ),
    ], rep


# -- necessity round trip --------------------------------------------------------------------


def random_block(rng: np.random.Generator, n: int, lam: float) -> np.ndarray:
    return lam * np.eye(n) + np.triu(rng.uniform(-2.0, 2.0, size=(n, n)), 1)


def algebraic_roundtrip(rng: np.random.Generator, blocks: int, horizon: int) -> tuple[int, int]:
    """(exact recoveries, attempts) of embed -> successive_decode on random blocks with zero deviation."""
    ok = 0
    for _ in range(blocks):
        n = int(rng.integers(1, 4))
        lam = float(rng.uniform(1.05, 4.0))
        rate = float(rng.uniform(0.3, 0.95)) * math.log2(lam)
        t = int(rng.integers(1, horizon + 1))
        J = random_block(rng, n, lam)
        ps = [EmbeddingParams(lam, rate) for _ in range(n)]
        bits = [list(2 * rng.integers(0, 2, ps[0].nbits(t)) - 1) for _ in range(n)]
        dec = successive_decode(SuccessiveDecoderState(embed(ps, bits, J, t)), ps, J, t)
        ok += all(dec[i] == bits[i] for i in range(n))
    return ok, blocks


def propagation_audit(rng: np.random.Generator, eps_prime: float, max_delay: int = PROPAGATION_MAX_DELAY, horizon: int = 80) -> list[tuple]:
    """Worst-case cross-stream deviation versus the propagation bound on random 2x2 and 3x3 blocks."""
    rows = []
    for n in (2, 3):
        lam = float(rng.uniform(1.5, 3.5))
        rate = 0.7 * math.log2(lam)
        J = random_block(rng, n, lam)
        p = EmbeddingParams(lam, rate)
        for i in range(1, n):
            for j in range(i):
                for d in range(1, max_delay + 1):
                    dev = cross_stream_deviation(p, J, horizon, d, i, j)
                    bound = propagation_bound(d, eps_prime, J, p, j, i)
                    rows.append((n, i, j, d, dev, bound, dev <= bound))
    return rows


def necessity_roundtrip(sf: ScenarioFile, out: Path | None) -> list[Check]:
    nec = sf.necessity or {}
    sc = sf.scenario
    rng = np.random.default_rng([sc.seed, 1])
    eps_prime = float(nec.get("eps_prime", 0.1))
    ok, tot = algebraic_roundtrip(rng, int(nec.get("blocks", 25)), int(nec.get("block_horizon", 200)))
    audit = propagation_audit(rng, eps_prime)
    checks = [
        Check("embed/decode exact recovery on random blocks", f"{ok}/{tot}", "all", ok == tot),
        Check(f"cross-stream deviation within the propagation bound, d <= {PROPAGATION_MAX_DELAY}", f"{sum(r[-1] for r in audit)}/{len(audit)}", "all", all(r[-1] for r in audit)),
    ]
    if "embed_rates" in nec:
        loop = ClosedLoop(sc.model, sc.loop)
        erasures = trial_erasures(sc, 0) if sc.loop.transport == "code" else None
        rep = code_from_controller(
            loop,
            sc.model,
            [float(r) for r in nec["embed_rates"]],
            sc.horizon,
            np.random.default_rng([sc.seed, 2]),
            erasures,
            int(nec.get("stride", 1)),
            eps_prime,
            int(nec.get("max_delay", 20)),
        )
        if out is not None:
            rep.write_csv(out / "roundtrip.csv")
        checks.append(
            Check(
                "controller round trip: wrong bits whose half-gap exceeds the state bound",
                rep.errors_beyond_gap,
                "0",
                rep.errors_beyond_gap == 0 and loop.box_violations == 0,
            )
        )
    if out is not None:
        _write_csv(out / "propagation_audit.csv", ["n", "stream", "target", "delay", "deviation", "bound", "within"], audit)
    return checks


# -- command handlers ----------------------------------------------------------------------


def _report(checks: list[Check], out: Path | None, name: str = "summary.csv") -> int:
    for c in checks:
        print(c.line())
    if out is not None:
        _write_csv(out / name, ["check", "value", "target", "pass"], [(c.name, c.value, c.target, c.passed) for c in checks])
    return EXIT_OK if all(c.passed for c in checks) else EXIT_TOLERANCE


def cmd_bounds_curve(args) -> int:
    sf = load_scenario(args.config or shipped_path())
    ErasureChannel(args.beta)
    files = bounds_curve(args.beta, args.rh, Path(args.out), sf.scenario.eta, sf.eigen_log2)
    for k, p in files.items():
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_rate_region(args) -> int:
    sf = load_scenario(args.config)
    sc = sf.scenario
    checks = region_checks(sf)
    if len(sc.loop.rates) == 2 and len(sf.eigen_log2) == 2 and sc.beta > 0:
        checks += bound_checks(sc.beta, sc.loop.rates, sf.eigen_log2, sc.eta)
    return _report(checks, None)


def cmd_simulate(args) -> int:
    sf = load_scenario(args.config)
    sc = sf.scenario
    if args.trials is not None:
        sc = replace(sc, trials=args.trials)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    out = Path(args.out)
    traces = run(sc)
    if sc.trials >= 2:
        write_moments_csv(moment_series(traces, sc.eta), out / "moments.csv")
    if args.traces:
        write_traces_csv(traces, out / "traces.csv")
    rows = [(tr.trial, tr.max_norm, tr.box_violations, tr.diverged, tr.dance_errors) for tr in traces]
    _write_csv(out / "trials.csv", ["trial", "max_norm", "box_violations", "diverged", "dance_errors"], rows)
    checks = [
        Check("box violations", sum(r[2] for r in rows), "0", all(r[2] == 0 for r in rows)),
        Check("diverged trials", sum(r[3] for r in rows), "0", not any(r[3] for r in rows)),
    ]
    return _report(checks, out)


def cmd_reproduce_example(args) -> int:
    sf = load_scenario(args.config or shipped_path())
    sc = sf.scenario
    if args.eta is not None:
        sf.scenario = sc = replace(sc, eta=args.eta)
        if sf.paired is not None:
            sf.paired = replace(sf.paired, eta=args.eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = "structure"
    try:
        checks = structure_checks(sf)
        stage = "demand"
        checks += region_checks(sf)
        stage = "bounds"
        checks += bound_checks(sc.beta, sc.loop.rates, sf.eigen_log2, sc.eta)
        if args.eta is None:
            checks += reference_checks(sc.beta, sc.loop.rates, sf.eigen_log2, sc.eta)
            stage = "curves"
            bounds_curve(sc.beta, sc.loop.rates[0], out / "curves", sc.eta, sf.eigen_log2)
            checks += geometry_checks(out / "curves", sc.beta, sc.loop.rates, sf.eigen_log2, sc.eta)
        stage = "dance"
        if sf.siso is not None:
            checks.append(dance_check(sf, sc.seed))
        if not args.skip_simulation:
            stage = "simulation"
            mc, _ = moment_checks(sf, args.trials, args.horizon, out)
            checks += mc
    except (ValueError, ArithmeticError) as exc:
        print(f"stage {stage} failed: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    return _report(checks, out)


def cmd_necessity_roundtrip(args) -> int:
    sf = load_scenario(args.config)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    return _report(necessity_roundtrip(sf, out), out, "necessity_summary.csv")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anytime-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bounds-curve", help="emit anytime-capacity, sphere-packing and low-priority curves")
    b.add_argument("--beta", type=float, required=True)
    b.add_argument("--rh", type=float, required=True, help="high-priority rate")
    b.add_argument("--out", required=True)
    b.add_argument("--config", help="scenario supplying eta and eigenvalue rates (default: shipped example)")
    b.set_defaults(func=cmd_bounds_curve)

    s = sub.add_parser("simulate", help="Monte Carlo closed-loop runs of a scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--traces", action="store_true", help="also write the per-step traces CSV")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reproduce-example", help="run the differentiated-service pipeline with pass/fail checks")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="scenario file (default: shipped example)")
    r.add_argument("--eta", type=float, help="override the moment order")
    r.add_argument("--trials", type=int)
    r.add_argument("--horizon", type=int)
    r.add_argument("--skip-simulation", action="store_true")
    r.set_defaults(func=cmd_reproduce_example)

    g = sub.add_parser("rate-region", help="stabilizability demand and rate-region verdicts")
    g.add_argument("--config", required=True)
    g.set_defaults(func=cmd_rate_region)

    n = sub.add_parser("necessity-roundtrip", help="embed bits through a controller and decode them back")
    n.add_argument("--config", required=True)
    n.add_argument("--out")
    n.set_defaults(func=cmd_necessity_roundtrip)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, RateError, StructureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
