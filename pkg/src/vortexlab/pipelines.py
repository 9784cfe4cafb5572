"""Experiment pipelines behind the CLI: each kind consumes a normalized
config, runs the numerics, writes artifacts into the run directory, and
records declarative assertion outcomes for `report`.

Artifacts per run: config.json (normalized), metadata.json, results.json,
plus kind-specific CSV tables. Reruns with an identical config hash
refuse to overwrite unless forced.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import io as _io
from .config import (ValidationError, build_kernel, build_phis, build_rho0,
                     config_hash, derive_seed, phi_from_spec)
from .kernels import BiotSavartKernel, ZeroKernel, mollify
from .meanfield import (MFConfig, MeanFieldSolution, UniformSolution,
                        mf_solve, taylor_green_coeffs_at)
from .oulimit import duality_gap, ou_covariance, spde_ensemble
from .particles import run_ensemble, replica_stream, sample_iid
from .spectral import SpectralField, TestFunction
from .stats import (fluct_scalar_from_modes, normality_test,
                    sliced_marginal_w1, trend_significance, variance_ci,
                    CancellationPair, ConstantPair, exp_integral_jw,
                    exp_integral_us, hminus_exact_iid, hminus_mc,
                    cross_term_mc)


class RerunRefusedError(RuntimeError):
    pass


class ReplicaError(RuntimeError):
    pass


def _assertion(name, value, low=None, high=None, note=""):
    passed = True
    if low is not None and not (value >= low):
        passed = False
    if high is not None and not (value <= high):
        passed = False
    return {"name": name, "value": float(value), "low": low, "high": high,
            "passed": bool(passed), "note": note}


def _prepare_dir(cfg, out_dir, force):
    out = Path(out_dir)
    existing = out / "config.json"
    if existing.exists():
        try:
            old = json.loads(existing.read_text())
        except json.JSONDecodeError:
            old = None
        if old is not None and config_hash(old) == config_hash(cfg) \
                and not force:
            raise RerunRefusedError(
                f"{out}: completed run with identical config hash; "
                "use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _background(cfg, M=None, kernel=None):
    """Mean-field accessor consistent with the configured physics."""
    num = cfg["numerics"]
    M = M if M is not None else num["grid"]
    if cfg["physics"]["rho0"] == "uniform" \
            and cfg["physics"]["kernel"] in ("zero", "biot-savart"):
        # uniform density is stationary when the velocity of the uniform
        # state vanishes (hat K(0) = 0) and F = 0
        return UniformSolution(M=M)
    kernel = kernel if kernel is not None else build_kernel(cfg)
    mfc = MFConfig(sigma=cfg["physics"]["sigma"], kernel=kernel, M=M,
                   dt=num["dt_pde"])
    horizon = max(num["T"], max(cfg["statistics"]["observe_times"],
                                default=0.0))
    return mf_solve(build_rho0(cfg, M), horizon, mfc)


def _rho_modes_at(rho_sol, t, modes):
    coeffs = rho_sol.coeffs_at(t)
    M = coeffs.shape[0]
    return np.array([coeffs[k[0] % M, k[1] % M] for k in modes])


def _phi_label(spec):
    return f"{spec['type']}({spec['k'][0]},{spec['k'][1]})x{spec['amp']:g}"


# ---------------------------------------------------------------------------
# kind: simulate


def run_simulate(cfg, out):
    num, st = cfg["numerics"], cfg["statistics"]
    delta = num.get("delta", [None])[0]
    kernel = build_kernel(cfg, delta=delta)
    rho0 = build_rho0(cfg)
    ens = run_ensemble(
        n_replicas=st["replicas"], N=num["N"][0], dt=num["dt"], T=num["T"],
        sigma=cfg["physics"]["sigma"], kernel=kernel, rho0=rho0,
        observe_times=st["observe_times"], modes=st.get(
            "modes", [(1, 0), (0, 1), (1, 1)]),
        seed=derive_seed(cfg["seeds"]["master"], "simulate"),
        drift_method=num["drift_method"])
    _io.write_mode_series_csv(out / "modes.csv", ens)
    return {"recorded_times": [float(t) for t in ens.times],
            "replicas": int(ens.values.shape[0])}, []


# ---------------------------------------------------------------------------
# kind: meanfield


def run_meanfield(cfg, out):
    num = cfg["numerics"]
    kernel = build_kernel(cfg)
    mfc = MFConfig(sigma=cfg["physics"]["sigma"], kernel=kernel,
                   M=num["grid"], dt=num["dt_pde"])
    sol = mf_solve(build_rho0(cfg), num["T"], mfc)
    _io.write_csv(out / "diagnostics.csv",
                  ["t", "mass", "min_grid", "tail_fraction"],
                  [(d["t"], d["mass"], d["min_grid"], d["tail_fraction"])
                   for d in sol.diagnostics])
    _io.write_spectral_field(out / "rho_final.json", sol.field(num["T"]))
    results = {"mass_drift": max(abs(d["mass"] - 1.0)
                                 for d in sol.diagnostics),
               "min_grid": min(d["min_grid"] for d in sol.diagnostics),
               "max_tail_fraction": max(d["tail_fraction"]
                                        for d in sol.diagnostics)}
    assertions = []
    spec = cfg.get("assertions", {}).get("taylor_green_oracle")
    if spec:
        if cfg["physics"]["rho0"] != "taylor-green":
            raise ValidationError("assertions.taylor_green_oracle",
                                  "needs rho0 = taylor-green")
        worst = 0.0
        for t in spec["times"]:
            ana = taylor_green_coeffs_at(t, cfg["physics"]["sigma"],
                                         M=num["grid"],
                                         eps=cfg["physics"]["rho0_eps"])
            num_grid = sol.field(t).to_grid()
            ana_grid = SpectralField(ana, check=False).to_grid()
            worst = max(worst, float(np.max(np.abs(num_grid - ana_grid))))
        assertions.append(_assertion("taylor_green_max_error", worst,
                                     high=spec["tol"]))
        results["taylor_green_max_error"] = worst
    return results, assertions


# ---------------------------------------------------------------------------
# kind: backward (duality matrix lives here)


_DUALITY_CASES = [
    ("zero", 0.1), ("bounded-fourier", 0.0), ("bounded-fourier", 0.1),
    ("biot-savart", 0.0), ("biot-savart", 0.1),
]


def _duality_u0(M, master):
    rng = replica_stream(derive_seed(master, "duality-u0"), 0)
    c = np.zeros((M, M), dtype=complex)
    for a in range(-3, 4):
        for b in range(-3, 4):
            if (a, b) > (-a, -b):
                z = rng.standard_normal() + 1j * rng.standard_normal()
                c[a % M, b % M] = z
                c[-a % M, -b % M] = np.conj(z)
    return SpectralField(c)


def _kernel_by_name(name, cfg):
    if name == "zero":
        return ZeroKernel()
    if name == "biot-savart":
        return BiotSavartKernel()
    if cfg["physics"]["kernel"] == "bounded-fourier":
        return build_kernel(cfg)
    from .kernels import swap_sine_kernel
    return swap_sine_kernel()


def run_backward(cfg, out):
    num, st = cfg["numerics"], cfg["statistics"]
    phis = build_phis(cfg)
    results = {"covariances": []}
    assertions = []
    kernel = build_kernel(cfg)
    rho_sol = _background(cfg)
    for spec, phi in zip(st["phis"], phis):
        for t in st["observe_times"]:
            cov = ou_covariance(phi, t, rho_sol,
                                sigma=cfg["physics"]["sigma"], kernel=kernel,
                                dt=num["dt_backward"], M=num["grid"])
            rec = cov.to_dict()
            rec["phi"] = _phi_label(spec)
            results["covariances"].append(rec)
    spec = cfg.get("assertions", {}).get("duality_matrix")
    if spec:
        u0 = _duality_u0(num["grid"], cfg["seeds"]["master"])
        phi = phis[0]
        rows = []
        worst = 0.0
        for name, sigma in _DUALITY_CASES:
            kern = _kernel_by_name(name, cfg)
            mfc = MFConfig(sigma=sigma, kernel=kern, M=num["grid"],
                           dt=num["dt_pde"])
            sol = mf_solve(build_rho0(cfg), num["T"], mfc)
            gap, lhs, rhs = duality_gap(u0, phi, num["T"], sol, sigma=sigma,
                                        kernel=kern, dt=num["dt_pde"])
            rows.append((name, sigma, gap, lhs, rhs))
            worst = max(worst, gap)
        _io.write_csv(out / "duality.csv",
                      ["kernel", "sigma", "rel_gap", "forward", "backward"],
                      rows)
        assertions.append(_assertion("duality_max_rel_gap", worst,
                                     high=spec["rel_tol"]))
        results["duality_max_rel_gap"] = worst
    return results, assertions


# ---------------------------------------------------------------------------
# kind: clt


def _clt_cell_stats(cfg, ens, rho_sol, phis, phi_specs, N, delta, level):
    rows = []
    cells = {}
    for ip, (spec, phi) in enumerate(zip(phi_specs, phis)):
        for it, t in enumerate(ens.times):
            rho_modes = _rho_modes_at(rho_sol, t, ens.modes)
            y = fluct_scalar_from_modes(ens.values[:, it, :], ens.modes,
                                        rho_modes, phi, N)
            cells[(ip, it)] = y
            rows.append((N, delta if delta is not None else 0.0,
                         _phi_label(spec), float(t), y))
    return cells, rows


def run_clt(cfg, out):
    num, st, phys = cfg["numerics"], cfg["statistics"], cfg["physics"]
    level = st["level"]
    phis = build_phis(cfg)
    base_kernel = build_kernel(cfg)
    rho_sol = _background(cfg)
    # union of phi modes, one representative per conjugate pair
    mode_set = sorted({tuple(k) for phi in phis for k in phi.modes
                       if tuple(k) >= (-k[0], -k[1])})
    deltas = num.get("delta", [None]) if phys["kernel"] == "biot-savart" \
        else [None]
    predictions = {}
    for ip, phi in enumerate(phis):
        for t in st["observe_times"]:
            cov = ou_covariance(phi, t, rho_sol, sigma=phys["sigma"],
                                kernel=base_kernel, dt=num["dt_backward"],
                                M=num["grid"])
            predictions[(ip, round(t, 12))] = cov
    table = []
    samples_rows = []
    assertions = []
    acfg = cfg.get("assertions", {})
    ratio_range = acfg.get("variance_ratio_range")
    err_by_n = {}
    var_reports = {}
    for idelta, delta in enumerate(deltas):
        kernel = build_kernel(cfg, delta=delta) if delta is not None \
            else base_kernel
        method = num["drift_method"]
        if method == "auto" and phys["kernel"] == "biot-savart":
            method = "fast"
        for N in num["N"]:
            seed = derive_seed(cfg["seeds"]["master"], "ens", N, idelta)
            ens = run_ensemble(
                n_replicas=st["replicas"], N=N, dt=num["dt"], T=num["T"],
                sigma=phys["sigma"], kernel=kernel,
                rho0=build_rho0(cfg), observe_times=st["observe_times"],
                modes=mode_set, seed=seed, drift_method=method)
            cells, raw = _clt_cell_stats(cfg, ens, rho_sol, phis,
                                         st["phis"], N, delta, level)
            for (ip, it), y in cells.items():
                t = float(ens.times[it])
                pred = predictions[(ip, round(t, 12))]
                vr = variance_ci(y, level=level,
                                 seed=derive_seed(seed, "boot", ip, it))
                rep = (normality_test(y, level=1.0 - level)
                       if y.size >= 200 else None)
                ratio = vr.var / pred.var if pred.var > 0 else np.inf
                rel_err = abs(vr.var - pred.var) / pred.var \
                    if pred.var > 0 else np.inf
                table.append({
                    "N": N, "delta": delta if delta is not None else 0.0,
                    "phi": _phi_label(st["phis"][ip]), "t": t,
                    "emp_var": vr.var, "ci_low": vr.ci_low,
                    "ci_high": vr.ci_high, "pred_var": pred.var,
                    "ratio": ratio, "rel_err": rel_err,
                    "normal_pass": bool(rep.passed) if rep else None,
                    "normal_reason": rep.reason if rep else "",
                })
                var_reports[(idelta, N, ip, it)] = (vr, pred)
                err_by_n.setdefault((idelta, ip, it), []).append(
                    (N, rel_err, vr))
                if ratio_range:
                    check_n = acfg.get("ratio_at_N")
                    if check_n is None or N == check_n:
                        assertions.append(_assertion(
                            f"variance_ratio[N={N},delta={delta},phi={ip},"
                            f"t={t:g}]", ratio, low=ratio_range[0],
                            high=ratio_range[1]))
                min_n = acfg.get("normality_min_N")
                if min_n is not None and N >= min_n and rep is not None:
                    assertions.append(_assertion(
                        f"normality[N={N},delta={delta},phi={ip},t={t:g}]",
                        1.0 if rep.passed else 0.0, low=1.0,
                        note=rep.reason))
                for row_y in np.asarray(y):
                    samples_rows.append(
                        (N, delta if delta is not None else 0.0,
                         _phi_label(st["phis"][ip]), t, row_y))
    # A7-style: |emp - pred| non-increasing in N within CI slack
    slack = acfg.get("error_nonincreasing_slack_se")
    if slack is not None:
        worst = -np.inf
        for key, rows in err_by_n.items():
            rows = sorted(rows)
            for (n1, e1, v1), (n2, e2, v2) in zip(rows, rows[1:]):
                se1 = (v1.ci_high - v1.ci_low) / 2 / v1.var \
                    if v1.var > 0 else 0.0
                se2 = (v2.ci_high - v2.ci_low) / 2 / v2.var \
                    if v2.var > 0 else 0.0
                worst = max(worst, e2 - e1 - slack * 0.5 * (se1 + se2))
        assertions.append(_assertion("error_nonincreasing_defect", worst,
                                     high=0.0,
                                     note=f"slack {slack} half-widths"))
    tol = acfg.get("final_rel_err_max")
    if tol is not None:
        n_max = max(num["N"])
        worst = max(r["rel_err"] for r in table if r["N"] == n_max)
        assertions.append(_assertion("final_rel_err", worst, high=tol))
    if acfg.get("delta_agreement") and len(deltas) == 2:
        for (i0, N, ip, it), (v1, _) in list(var_reports.items()):
            if i0 != 0:
                continue
            v2, _ = var_reports[(1, N, ip, it)]
            overlap = min(v1.ci_high, v2.ci_high) \
                - max(v1.ci_low, v2.ci_low)
            assertions.append(_assertion(
                f"delta_ci_overlap[N={N},phi={ip},t={it}]", overlap,
                low=0.0, note="confidence intervals must intersect"))
    if "dt_half_check_N" in num:
        n_chk = num["dt_half_check_N"]
        idelta = 0
        delta = deltas[0]
        kernel = build_kernel(cfg, delta=delta) if delta is not None \
            else base_kernel
        method = num["drift_method"]
        if method == "auto" and phys["kernel"] == "biot-savart":
            method = "fast"
        seed = derive_seed(cfg["seeds"]["master"], "ens-half", n_chk)
        ens = run_ensemble(
            n_replicas=st["replicas"], N=n_chk, dt=num["dt"] / 2,
            T=num["T"], sigma=phys["sigma"], kernel=kernel,
            rho0=build_rho0(cfg), observe_times=st["observe_times"],
            modes=mode_set, seed=seed, drift_method=method)
        cells, _ = _clt_cell_stats(cfg, ens, rho_sol, phis, st["phis"],
                                   n_chk, delta, level)
        for (ip, it), y in cells.items():
            vr_half = variance_ci(y, level=level,
                                  seed=derive_seed(seed, "boot", ip, it))
            vr_full, _ = var_reports[(idelta, n_chk, ip, it)]
            overlap = min(vr_full.ci_high, vr_half.ci_high) \
                - max(vr_full.ci_low, vr_half.ci_low)
            assertions.append(_assertion(
                f"dt_half_ci_overlap[phi={ip},t={it}]", overlap, low=0.0,
                note=f"dt/2 rerun at N={n_chk}"))
    _io.write_csv(out / "comparison.csv",
                  ["N", "delta", "phi", "t", "emp_var", "ci_low", "ci_high",
                   "pred_var", "ratio", "rel_err", "normal_pass"],
                  [(r["N"], r["delta"], r["phi"], r["t"], r["emp_var"],
                    r["ci_low"], r["ci_high"], r["pred_var"], r["ratio"],
                    r["rel_err"], 1 if r["normal_pass"] else 0)
                   for r in table])
    _io.write_csv(out / "samples.csv", ["N", "delta", "phi", "t", "y"],
                  samples_rows)
    results = {"table": table,
               "predictions": [dict(v.to_dict(), phi=ip, t=float(t))
                               for (ip, t), v in predictions.items()]}
    return results, assertions


# ---------------------------------------------------------------------------
# kind: ldp-check


def run_ldp(cfg, out):
    st = cfg["statistics"]
    level = st["level"]
    rho = build_rho0(cfg)
    a = st["amplitude"]
    master = cfg["seeds"]["master"]
    pair = CancellationPair((1, 0), a)
    rows = []
    assertions = []
    results = {}

    def series(name, estimator, phi2, squared_label):
        ests, ses = [], []
        for N in st["N_list"]:
            r = estimator(phi2, rho, N, st["samples"],
                          seed=derive_seed(master, name, N), level=level)
            se = (r.ci_high - r.ci_low) / 2 / max(r.estimate, 1e-300)
            ests.append(r.estimate)
            ses.append(max(se * r.estimate, 1e-12))
            rows.append((name, N, r.estimate, r.ci_low, r.ci_high,
                         1 if r.heavy_tail else 0))
        slope, se_s, z = trend_significance(ests, ses, st["N_list"])
        results[name] = {"estimates": ests, "trend_z": z}
        return z

    from scipy import stats as sps
    zq = float(sps.norm.ppf(1 - (1 - level) / 2))
    z_jw = series("jw", exp_integral_jw, pair, False)
    assertions.append(_assertion("jw_flatness_z", abs(z_jw), high=zq))
    z_us = series("us", exp_integral_us, pair, True)
    assertions.append(_assertion("us_flatness_z", abs(z_us), high=zq))
    z_ctrl = series("us-control", exp_integral_us, ConstantPair(a), True)
    assertions.append(_assertion("control_growth_z", z_ctrl, low=zq,
                                 note="cancellation violated: must grow"))

    exact = hminus_exact_iid(rho, st["alpha"], st["truncation"])
    results["hminus_exact"] = exact
    for N in st["hminus_N"]:
        mc, se = hminus_mc(rho, st["alpha"], st["truncation"], N,
                           st["hminus_M"],
                           seed=derive_seed(master, "hminus", N))
        rows.append(("hminus", N, mc, mc - se, mc + se, 0))
        assertions.append(_assertion(f"hminus_z[N={N}]",
                                     abs(mc - exact) / se, high=3.0))
    if cfg["physics"]["kernel"] == "bounded-fourier":
        kern = build_kernel(cfg)
        phi = TestFunction.cosine((1, 0), np.sqrt(2.0))
        ests, ses = [], []
        for N in st["hminus_N"]:
            mc, se = cross_term_mc(kern, phi, rho, N, st["hminus_M"],
                                   seed=derive_seed(master, "cross", N))
            ests.append(mc)
            ses.append(se)
            rows.append(("cross", N, mc, mc - se, mc + se, 0))
        if len(ests) >= 2:
            _, _, z = trend_significance(ests, ses, st["hminus_N"])
            assertions.append(_assertion("cross_flatness_z", abs(z),
                                         high=zq))
    _io.write_csv(out / "ldp.csv",
                  ["series", "N", "estimate", "ci_low", "ci_high",
                   "heavy_tail"], rows)
    return results, assertions


# ---------------------------------------------------------------------------
# kind: spde-sim


def run_spde(cfg, out):
    num, st, phys = cfg["numerics"], cfg["statistics"], cfg["physics"]
    kernel = build_kernel(cfg)
    rho_big = _background(cfg)
    rho_small = _background(cfg, M=num["spde_grid"])
    phis = build_phis(cfg)
    mode_set = sorted({tuple(k) for phi in phis for k in phi.modes
                       if tuple(k) >= (-k[0], -k[1])})
    ens = spde_ensemble(
        n_paths=st["replicas"], T=num["T"], rho=rho_small,
        sigma=phys["sigma"], kernel=kernel,
        seed=derive_seed(cfg["seeds"]["master"], "spde"),
        mode_cutoff=num["mode_cutoff"], grid=num["spde_grid"],
        dt=num["dt_pde"], observe_times=st["observe_times"],
        modes=mode_set, rho_for_eta0=rho_big.field(0.0))
    _io.write_mode_series_csv(out / "paths.csv", ens)
    assertions = []
    rows = []
    mc_z = cfg.get("assertions", {}).get("mc_z", 3.0)
    for ip, (spec, phi) in enumerate(zip(st["phis"], phis)):
        for it, t in enumerate(ens.times):
            y = fluct_scalar_from_modes(ens.values[:, it, :], ens.modes,
                                        np.zeros(len(mode_set)), phi, 1.0)
            vr = variance_ci(y, level=st["level"])
            pred = ou_covariance(phi, float(t), rho_big,
                                 sigma=phys["sigma"], kernel=kernel,
                                 dt=num["dt_backward"], M=num["grid"])
            se_mc = vr.var * np.sqrt(2.0 / (y.size - 1))
            z = abs(vr.var - pred.var) / se_mc
            rows.append((_phi_label(spec), float(t), vr.var, pred.var, z))
            if it == len(ens.times) - 1:
                assertions.append(_assertion(
                    f"spde_vs_formula_z[phi={ip},t={float(t):g}]", z,
                    high=mc_z))
    _io.write_csv(out / "spde_comparison.csv",
                  ["phi", "t", "emp_var", "pred_var", "z"], rows)
    return {"rows": rows}, assertions


# ---------------------------------------------------------------------------
# kind: marginal-w1


def run_marginal_w1(cfg, out):
    num, st, phys = cfg["numerics"], cfg["statistics"], cfg["physics"]
    rho_sol = _background(cfg)
    rho_T = rho_sol.field(num["T"])
    master = cfg["seeds"]["master"]
    rows = []
    stat_list, se_list = [], []
    assertions = []
    n_boot = 200
    for N in num["N"]:
        delta = num.get("delta", [None])[0]
        kernel = build_kernel(cfg, delta=delta)
        seed = derive_seed(master, "w1", N)
        ens = run_ensemble(
            n_replicas=st["replicas"], N=N, dt=num["dt"], T=num["T"],
            sigma=phys["sigma"], kernel=kernel, rho0=build_rho0(cfg),
            observe_times=[num["T"]], modes=[(1, 0)], seed=seed,
            drift_method=num["drift_method"], track_first_particle=True)
        pts = ens.first_particle[:, -1, :]
        stat = sliced_marginal_w1(pts, rho_T, st["projections"],
                                  seed=derive_seed(master, "slice", N))
        null_rng = replica_stream(derive_seed(master, "null", N), 0)
        null_pts = sample_iid(rho_T, pts.shape[0], null_rng)
        floor = sliced_marginal_w1(null_pts, rho_T, st["projections"],
                                   seed=derive_seed(master, "slice", N))
        brng = replica_stream(derive_seed(master, "w1boot", N), 0)
        boots = np.empty(n_boot)
        for b in range(n_boot):
            idx = brng.integers(0, pts.shape[0], pts.shape[0])
            boots[b] = sliced_marginal_w1(pts[idx], rho_T,
                                          st["projections"],
                                          seed=derive_seed(master, "slice",
                                                           N))
        se = float(boots.std(ddof=1))
        excess = np.sqrt(N) * (stat - floor)
        rows.append((N, stat, floor, se, excess))
        stat_list.append(excess)
        se_list.append(np.sqrt(N) * se)
        assertions.append(_assertion(
            f"w1_vs_iid_floor_z[N={N}]", (stat - floor) / se, high=3.0,
            note="sliced W1 consistent with the i.i.d. sampling floor"))
    if len(stat_list) >= 2:
        _, _, z = trend_significance(stat_list, se_list, num["N"])
        assertions.append(_assertion("sqrtN_excess_growth_z", z,
                                     high=float(
                                         cfg.get("assertions", {})
                                         .get("growth_z", 2.576))))
    _io.write_csv(out / "marginal_w1.csv",
                  ["N", "sliced_w1", "iid_floor", "bootstrap_se",
                   "sqrtN_excess"], rows)
    return {"rows": rows}, assertions


# ---------------------------------------------------------------------------
# dispatch


_RUNNERS = {
    "simulate": run_simulate,
    "meanfield": run_meanfield,
    "backward": run_backward,
    "clt": run_clt,
    "ldp-check": run_ldp,
    "spde-sim": run_spde,
    "marginal-w1": run_marginal_w1,
}


def describe_plan(cfg):
    num = cfg.get("numerics", {})
    lines = [f"kind: {cfg['kind']}", f"name: {cfg['name']}",
             f"config hash: {config_hash(cfg)}"]
    if "N" in num:
        lines.append(f"N list: {num['N']}, dt={num.get('dt')}, "
                     f"T={num['T']}, steps per run="
                     f"{int(np.ceil(num['T'] / num['dt']))}")
    lines.append(f"replicas: {cfg['statistics'].get('replicas')}")
    lines.append(f"master seed: {cfg['seeds']['master']}")
    return "\n".join(lines)


def run_experiment(cfg, out_dir, *, force=False, workers=None,
                   deterministic=True):
    out = _prepare_dir(cfg, out_dir, force)
    if workers is not None:
        import numba
        numba.set_num_threads(max(1, int(workers)))
    _io.write_config(out, cfg)
    drift = cfg.get("numerics", {}).get("drift_method", "auto")
    _io.write_metadata(out, cfg, deterministic, drift, workers)
    results, assertions = _RUNNERS[cfg["kind"]](cfg, out)
    payload = {"kind": cfg["kind"], "name": cfg["name"],
               "config_hash": config_hash(cfg), "results": results,
               "assertions": assertions,
               "passed": all(a["passed"] for a in assertions)}
    _io.write_json(out / "results.json", payload)
    return payload


def load_report(run_dir):
    path = Path(run_dir) / "results.json"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: no results.json (incomplete "
                                "or missing run)")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupted results file ({e})")


def format_report(payload):
    lines = [f"run {payload['name']} ({payload['kind']}), "
             f"config {payload['config_hash'][:12]}"]
    for a in payload["assertions"]:
        bounds = ""
        if a["low"] is not None and a["high"] is not None:
            bounds = f" in [{a['low']:g}, {a['high']:g}]"
        elif a["high"] is not None:
            bounds = f" <= {a['high']:g}"
        elif a["low"] is not None:
            bounds = f" >= {a['low']:g}"
        status = "PASS" if a["passed"] else "FAIL"
        note = f"  ({a['note']})" if a.get("note") else ""
        lines.append(f"  {a['name']}: {a['value']:.6g}{bounds} "
                     f"{status}{note}")
    if not payload["assertions"]:
        lines.append("  (no declared assertions)")
    lines.append(f"overall: {'PASS' if payload['passed'] else 'FAIL'}")
    return "\n".join(lines)
