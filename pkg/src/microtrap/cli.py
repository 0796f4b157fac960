"""Command-line entry point: JSON config in, CSV and grid files out.

Exit codes: 0 success, 1 computation failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime
import hashlib
import json
import logging
import math
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import constants as C

from . import __version__, reproduce
from .analysis import (DriveConfig, IonSpecies, SaddleError, UntrappedError, analyze_fields, trap_depth,
                       trap_fields, zone_voltages)
from .circuit import (BreakdownLimits, CircuitModel, Resonator, ScalingModel, check_operating_point,
                      depth_scaling, dissipation, loaded_resonance, power_density_scaling, quality_factor)
from .dynamics import IonState, SimOptions, Tickle, TickleScanError, default_tickle_electrode, tickle_scan
from .fields import BasisSet, PotentialBasis, SolverError, iter_bases
from .geometry import GeometryError, GeometryParams, GridSpec, read_grid, voxelize, build_trap, write_grid
from .heating import (NoiseModel, RamanConfig, boiloff_analysis, fit_heating_rate, lamb_dicke,
                      noise_to_heating, quanta_rate_to_ev, simulate_raman_experiment, thermal_field_noise)
from .shuttle import (FilterModel, InfeasibleWaveformError, apply_filter, axial_model, simulate_transport,
                      solve_waveform)

log = logging.getLogger("microtrap")

GRID_PRESETS = {"default": 2e-6, "high": 1e-6}


class ConfigError(ValueError):
    pass


# --- configuration ------------------------------------------------------------

def _data(name):
    return json.loads(resources.files("microtrap").joinpath("data", name).read_text())


def default_config() -> dict:
    return _data("paper.json")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dc_V":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, grid=None, seed=None) -> dict:
    """Validate a user config and fill missing entries from the bundled paper config."""
    schema = _data("config.schema.json")
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(user, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    cfg = _merge(default_config(), user)
    if grid is not None:
        cfg["grid"]["spacing_m"] = GRID_PRESETS[grid]
    if seed is not None:
        cfg["rng_seed"] = int(seed)
    jsonschema.validate(cfg, schema)
    try:
        GeometryParams.from_dict(cfg["geometry"])
    except GeometryError as exc:
        raise ConfigError(f"config error at geometry: {exc}") from exc
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class Run:
    """Resolved configuration plus output helpers shared by the subcommands."""

    def __init__(self, cfg, out=None, threads=1):
        self.cfg = cfg
        self.out = Path(out or cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = max(1, int(threads))
        self.hash = config_hash(cfg)
        self.seed = int(cfg["rng_seed"])
        self._bases = None
        self.results = {}

    def header(self) -> str:
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        return (f"# microtrap {__version__}\n# config_sha256: {self.hash}\n"
                f"# rng_seed: {self.seed}\n# created: {stamp}\n")

    def path(self, name) -> Path:
        return self.out / name

    def write_rows(self, name, fieldnames, rows):
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            fh.write(self.header())
            wr = csv.writer(fh)
            wr.writerow(fieldnames)
            for r in rows:
                wr.writerow([_fmt(v) for v in r])
        return p

    def write_table(self, name, mapping):
        return self.write_rows(name, ["quantity", "value"], mapping.items())

    # --- physical objects from the config ---

    @property
    def params(self) -> GeometryParams:
        return GeometryParams.from_dict(self.cfg["geometry"])

    def mask(self):
        p = self.params
        return voxelize(build_trap(p), GridSpec.for_params(p, self.cfg["grid"]["spacing_m"]))

    def drive(self, electrodes) -> DriveConfig:
        d = self.cfg["drive"]
        dc = zone_voltages(electrodes, d["zone_segment"], d["endcap_V"], d["center_V"], d["other_V"])
        dc.update({int(k): float(v) for k, v in d["dc_V"].items()})
        species = IonSpecies(d["mass_u"] * C.atomic_mass, d["charge_e"] * C.e,
                             f"{d['mass_u']:g} u, {d['charge_e']:+d} e")
        return DriveConfig(d["V0_V"], 2 * math.pi * d["f_rf_Hz"], dc, species)

    @property
    def stray(self):
        E = np.asarray(self.cfg["drive"]["stray_field_V_per_m"], float)
        return E if np.any(E) else None


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return v


# --- solve --------------------------------------------------------------------

def _cache_key(mask, tol, method) -> str:
    h = hashlib.sha256(mask.digest().encode())
    h.update(f"{tol:.17g} {method}".encode())
    return h.hexdigest()[:16]


def cmd_solve(run: Run) -> BasisSet:
    """Basis potentials for every electrode, cached by a hash of (mask, tol)."""
    if run._bases is not None:
        return run._bases
    g = run.cfg["grid"]
    mask = run.mask()
    key = _cache_key(mask, g["tol"], g["method"])
    cdir = run.path("bases") / key
    meta_path = cdir / "report.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        log.info("basis cache hit %s", cdir)
        cached = True
    else:
        cdir.mkdir(parents=True, exist_ok=True)
        meta = []
        t0 = time.perf_counter()
        # bases are written as they finish so fine grids never hold all of them in memory
        for b in iter_bases(mask, g["tol"], g["method"]):
            write_grid(cdir / f"basis_{b.electrode_id:02d}.grid", mask.origin, mask.spacing, b.values)
            meta.append({"electrode": b.electrode_id, "label": b.label.name,
                         "iterations": b.iterations, "residual": b.residual})
        log.info("solved %d bases in %.1f s", len(meta), time.perf_counter() - t0)
        mask.save(cdir / "mask.grid")
        meta_path.write_text(json.dumps(meta, indent=1))
        cached = False
    bases = []
    for m in meta:
        _, _, vals = read_grid(cdir / f"basis_{m['electrode']:02d}.grid", "<f8", mmap=True)
        bases.append(PotentialBasis(m["electrode"], vals, mask, m["residual"], m["iterations"]))
    run.write_rows("solve_report.csv", ["electrode", "label", "iterations", "residual"],
                   [(m["electrode"], m["label"], m["iterations"], m["residual"]) for m in meta])
    run.results["solve"] = {"cache_hit": cached, "dir": str(cdir)}
    run._bases = BasisSet(mask, bases)
    return run._bases


# --- analyze ------------------------------------------------------------------

def cmd_analyze(run: Run):
    bases = cmd_solve(run)
    drive = run.drive(bases.labels)
    seed = run.cfg["analysis"]["seed_m"]
    if seed is None:
        k = run.cfg["drive"]["zone_segment"]
        seed = (run.params.segment_center(k), 0.0, 0.0)
    tf = trap_fields(bases, drive, run.stray)
    sa = analyze_fields(tf, seed)
    dr = trap_depth(tf.U, sa.r0) if run.cfg["analysis"]["depth"] else None
    row = sa.as_row()
    if dr is not None:
        row.update({"depth_eV": dr.depth, "saddle_x_m": dr.saddle_position[0],
                    "saddle_y_m": dr.saddle_position[1], "saddle_z_m": dr.saddle_position[2],
                    "escape_tilt_deg": dr.escape_tilt_angle})
    run.write_table("analysis.csv", row)
    if not sa.stable:
        log.warning("unstable: Mathieu parameters outside the first stability region (q = %.3f)", sa.q)
        print(f"unstable: q = {sa.q:.3f}, a = {np.round(sa.mathieu_a, 4).tolist()}")
    f = sa.omega / (2 * np.pi)
    comp = [("f_axial_Hz", f[0], 1.0e6, 0.2), ("f_transverse1_Hz", f[1], 3.3e6, 0.2),
            ("f_transverse2_Hz", f[2], 4.3e6, 0.2), ("q", sa.q, 0.62, 0.2),
            ("axis_tilt_deg", sa.axis_tilt, 40.0, 0.25)]
    if dr is not None:
        comp += [("depth_eV", dr.depth, 0.08, 0.3), ("escape_tilt_deg", dr.escape_tilt_angle, 37.0, 10 / 37)]
    rows = [(n, v, t, tol, abs(v - t) <= tol * abs(t)) for n, v, t, tol in comp]
    run.write_rows("comparison.csv", ["quantity", "computed", "published", "rel_tol", "pass"], rows)
    for n, v, t, tol, ok in rows:
        print(f"{n:18s} {v:12.5g}  published {t:8.4g}  {'pass' if ok else 'FAIL'}")
    run.results["analyze"] = (sa, dr)
    return sa, dr


# --- tickle -------------------------------------------------------------------

def cmd_tickle(run: Run):
    bases = cmd_solve(run)
    sa, _ = run.results.get("analyze") or cmd_analyze(run)
    drive = run.drive(bases.labels)
    c = run.cfg["tickle"]
    eid = c["electrode"] if c["electrode"] is not None else default_tickle_electrode(bases, sa)
    opt = SimOptions(duration=c["duration_s"], gamma=c["gamma_per_s"], tickle=Tickle(eid, c["amplitude_V"], 0.0),
                     rng_seed=run.seed)
    spec = tickle_scan(bases, drive, (c["f_min_Hz"], c["f_max_Hz"]), c["n_points"], opt,
                       state0=IonState(sa.r0), floor=c["floor"], threads=run.threads)
    spec.write_csv(run.path("tickle_spectrum.csv"), run.header())
    modes = sa.omega_mathieu / (2 * np.pi)
    rows = []
    for f, r in zip(spec.peaks, spec.peak_response):
        i = int(np.argmin(np.abs(modes - f)))
        rows.append((f, r, sa.labels[i], modes[i], f / modes[i] - 1))
    run.write_rows("tickle_peaks.csv", ["peak_Hz", "response_m", "mode", "hessian_Hz", "rel_diff"], rows)
    run.results["tickle"] = spec
    return spec


# --- shuttle ------------------------------------------------------------------

def cmd_shuttle(run: Run):
    bases = cmd_solve(run)
    drive = run.drive(bases.labels)
    c = run.cfg["shuttle"]
    kw = dict(n_samples=c["n_samples"], regularization=c["regularization"],
              transverse_weight=c["transverse_weight"], voltage_bound=c["voltage_bound_V"])
    w_ax = 2 * math.pi * c["target_f_axial_Hz"]
    wf = solve_waveform(bases, drive, c["zone_a_m"], c["zone_b_m"], c["duration_s"], w_ax, **kw)
    wf.write_csv(run.path("waveform.csv"), run.header())
    filt = FilterModel(c["filter"]["C_F"], c["filter"]["R_ohm"])
    rows, gains = [], []
    moving = not np.allclose(c["zone_a_m"], c["zone_b_m"])
    if moving:
        am = axial_model(bases, drive, wf)
        for T in c["durations_s"]:
            w = wf if T == wf.duration else solve_waveform(bases, drive, c["zone_a_m"], c["zone_b_m"], T, w_ax, **kw)
            r = simulate_transport(bases, drive, w, rng_seed=run.seed, axial=am)
            rows.append((T, 0, r.quanta, r.energy_gain, r.position_error, r.max_lag))
            gains.append(r.quanta)
        wr = wf.resample(min(wf.sample_period, 0.1 * filt.tau))
        wfl = apply_filter(wr, filt)
        wfl.write_csv(run.path("waveform_filtered.csv"), run.header())
        r = simulate_transport(bases, drive, wfl, rng_seed=run.seed, axial=am)
        rows.append((wf.duration, 1, r.quanta, r.energy_gain, r.position_error, r.max_lag))
    run.write_rows("transport.csv", ["duration_s", "filtered", "quanta", "energy_J", "position_error_m",
                                     "max_lag_m"], rows)
    rep = check_operating_point(drive.V0, drive.Omega, static_voltages=wf.voltages.ravel())
    for msg in rep.violations + rep.warnings:
        log.warning(msg)
    run.results["shuttle"] = {"max_voltage": float(np.abs(wf.voltages).max()), "gains": gains,
                              "bound": c["voltage_bound_V"], "filter": filt}
    return wf


# --- heat ---------------------------------------------------------------------

def cmd_heat(run: Run):
    c = run.cfg["heat"]
    d = run.cfg["drive"]
    species = IonSpecies(d["mass_u"] * C.atomic_mass, d["charge_e"] * C.e)
    rc = c["raman"]
    raman = RamanConfig(rc["wavelength_m"], math.radians(rc["beam_angle_deg"]), math.radians(rc["axis_angle_deg"]),
                        rc["detuning_Hz"], rc["beatnote_Hz"], rc["probe_time_s"])
    omega = 2 * math.pi * c["f_axial_Hz"]
    noise = NoiseModel(c["S_E_ref_V2_per_m2_Hz"], c["d_ref_m"], c["distance_exponent"])
    rate = noise_to_heating(noise, c["d_m"], omega, species)
    eta = lamb_dicke(raman, omega, species)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        data = simulate_raman_experiment(c["nbar0"], rate, eta, c["R0_rad_per_s"], c["delays_s"],
                                         c["probe_times_s"], c["shots"], rng_seed=run.seed)
        fit = fit_heating_rate(data, eta)
    for w in {str(w.message) for w in caught}:
        log.warning(w)
    data.write_csv(run.path("raman_dataset.csv"), run.header())
    run.write_rows("heating.csv", ["nbar_rate", "eta", "fit_error"], [(fit.nbar_rate, fit.eta, fit.fit_error)])
    depth = c["depth_eV"]
    if depth is None:
        an = run.results.get("analyze")
        depth = an[1].depth if an and an[1] is not None else reproduce.PAPER_DEPTH
    cold = quanta_rate_to_ev(rate, omega)
    boil = boiloff_analysis(depth, boil_time=c["boil_time_s"], cold_rate=cold)
    j = c["johnson"]
    S_J = thermal_field_noise(j["R_ohm"], j["T_K"], j["d_m"])
    summary = {"injected_rate_per_s": rate, "fitted_rate_per_s": fit.nbar_rate, "fit_error_per_s": fit.fit_error,
               "eta": eta, "depth_eV": depth, "boil_time_s": boil.boil_time,
               "dark_power_eV_per_s": boil.dark_power, "cold_power_eV_per_s": cold,
               "boil_ratio": boil.ratio_to_cold_rate, "johnson_S_E": S_J,
               "johnson_distance_m": j["d_m"], "anomalous_to_johnson": noise.S_E(c["d_m"]) / S_J}
    run.write_table("heating_summary.csv", summary)
    run.results["heat"] = summary
    return summary


# --- circuit ------------------------------------------------------------------

def cmd_circuit(run: Run):
    c = run.cfg["circuit"]
    d = run.cfg["drive"]
    omega = 2 * math.pi * d["f_rf_Hz"]
    rz = c["resonator"]
    model = CircuitModel(c["C_F"], c["R_S_ohm"], c["tan_delta"], Resonator(rz["unloaded_Q"], rz["f_self_Hz"]))
    Q = quality_factor(model, omega)
    P_model = float(dissipation(d["V0_V"], c["C_F"], omega, Q))
    P_meas = float(dissipation(d["V0_V"], c["C_F"], omega, c["Q_measured"]))
    res = loaded_resonance(model.resonator, c["C_F"], rz["f_loaded_Hz"])
    b = c["breakdown"]
    limits = BreakdownLimits(b["static_limit_V"], b["rf_limit_V"], b["rf_limit_f_Hz"], b["warn_V"])
    dc = run.drive([lab for lab, _ in build_trap(run.params)]).dc_voltages.values()
    rep = check_operating_point(d["V0_V"], omega, limits, list(dc))
    table = {"Q": Q, "Q_measured": c["Q_measured"], "P_D_W": P_model, "P_D_measured_Q_W": P_meas,
             "C_self_F": res["C_self"], "f_loaded_Hz": res["f_loaded"], "operating_point_ok": rep.ok,
             "violations": "; ".join(rep.violations), "warnings": "; ".join(rep.warnings)}
    run.write_table("circuit.csv", table)
    for msg in rep.violations:
        print(f"breakdown: {msg}")
    run.results["circuit"] = table
    return table


# --- scaling ------------------------------------------------------------------

def cmd_scaling(run: Run):
    c = run.cfg["scaling"]
    D_ref = c["D_ref_eV"]
    if D_ref is None:
        # calibrate against the solved depth at the configured geometry
        _, dr = run.results.get("analyze") or cmd_analyze(run)
        if dr is None:
            raise ValueError("scaling calibration needs the trap depth; enable analysis.depth or set D_ref_eV")
        D_ref = dr.depth
    circ = run.results.get("circuit") or cmd_circuit(run)
    model = ScalingModel(c["sigma_exponent"], c["power_density_exponent"], calibration=(c["s_ref_m"], D_ref))
    h = c["h_m"]
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for s in np.geomspace(c["s_min_m"], c["s_max_m"], c["n_points"]):
            D = depth_scaling(s, h, model)
            I0 = power_density_scaling(s, model, 1.0, c["s_ref_m"], h)
            # electrode area and drive held fixed, so total power follows the power density
            rows.append((s, s / h, D.value, I0.value, circ["P_D_W"] * I0.value, circ["Q"], D.in_range))
    run.write_rows("scaling.csv", ["s_m", "s_over_h", "D_eV", "I0_rel", "P_D_W", "Q", "in_range"], rows)
    run.results["scaling"] = rows
    return rows


# --- reproduce ----------------------------------------------------------------

def cmd_reproduce(run: Run):
    R = reproduce
    rc = run.cfg["reproduce"]
    t0 = time.perf_counter()
    bases = cmd_solve(run)
    sa, dr = cmd_analyze(run)
    crit = [R.criterion_secular(sa, time.perf_counter() - t0), R.criterion_stability(sa), R.criterion_tilts(sa, dr),
            R.criterion_depth(dr)]
    if rc["tickle"]:
        try:
            spec = cmd_tickle(run)
            peaks = spec.peaks
        except TickleScanError:
            peaks = []
        crit.append(R.criterion_tickle(peaks, sa))
    cmd_heat(run)
    crit += [R.criterion_lamb_dicke(), R.criterion_heating(), R.criterion_estimator(run.seed),
             R.criterion_boiloff()]
    cmd_circuit(run)
    crit += [R.criterion_circuit(), R.criterion_resonator()]
    rows = cmd_scaling(run)
    crit.append(R.criterion_scaling([r[0] for r in rows], [r[2] for r in rows], [r[3] for r in rows]))
    if rc["shuttle"]:
        try:
            cmd_shuttle(run)
            sh = run.results["shuttle"]
            crit.append(R.criterion_shuttle(sh["max_voltage"], sh["bound"], sh["gains"], sh["filter"]))
        except InfeasibleWaveformError as exc:
            crit.append(R.Criterion(13, "shuttle", f"infeasible: {exc}", "feasible in +-10 V", False))
    crit.append(_solver_criterion(run, bases, rc["self_convergence"]))
    crit.append(R.criterion_thermal())
    crit.sort(key=lambda c: c.number)
    run.write_rows("acceptance.csv", ["criterion", "name", "value", "target", "pass"],
                   [(c.number, c.name, c.value, c.target, c.passed) for c in crit])
    for c in crit:
        print(c.line())
    failed = [c for c in crit if not c.passed]
    print(f"{len(crit) - len(failed)}/{len(crit)} criteria passed")
    if failed:
        print("failed: " + ", ".join(f"{c.number} ({c.name})" for c in failed))
    return crit


def _solver_criterion(run, bases, self_convergence):
    R = reproduce
    tol = run.cfg["grid"]["tol"]
    drive = run.drive(bases.labels)
    volts = drive.dc_vector(bases.mask.n_electrodes, bases.mask.dc_ids)
    volts[bases.mask.rf_ids] = 1.0
    sup = R.superposition_error(bases, list(volts), tol)
    coarse = fine = None
    if self_convergence:
        p = run.params
        centre = (p.segment_center(run.cfg["drive"]["zone_segment"]), 0.0, 0.0)
        coarse = R.center_values(bases, centre)
        spacing = run.cfg["grid"]["spacing_m"]
        other = spacing / 2 if spacing > 1.5e-6 else spacing * 2
        mask2 = voxelize(build_trap(p), GridSpec.for_params(p, other))
        fine = R.center_values(iter_bases(mask2, tol, run.cfg["grid"]["method"]), centre)
        if other > spacing:
            coarse, fine = fine, coarse
    return R.criterion_solver(R.maximum_principle_ok(bases), sup, tol, R.parallel_plate_error(tol), coarse, fine)


# --- entry point --------------------------------------------------------------

COMMANDS = {"solve": cmd_solve, "analyze": cmd_analyze, "tickle": cmd_tickle, "shuttle": cmd_shuttle,
            "heat": cmd_heat, "circuit": cmd_circuit, "scaling": cmd_scaling, "reproduce": cmd_reproduce}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microtrap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration (default: bundled paper config)")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--seed", type=int, help="RNG seed (overrides rng_seed)")
    p.add_argument("--grid", choices=sorted(GRID_PRESETS), help="grid preset: default 2 um, high 1 um")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.grid, args.seed)
    except (ConfigError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg, args.out, args.threads)
    try:
        result = COMMANDS[args.command](run)
    except (UntrappedError, SaddleError) as exc:
        print(f"untrapped: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        hist = ", ".join(f"{r:.3g}" for r in exc.residual_history[-10:])
        print(f"solver failed: {exc}\nresidual history (last 10): {hist}", file=sys.stderr)
        return 1
    except (InfeasibleWaveformError, TickleScanError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command == "reproduce" and not all(c.passed for c in result):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
