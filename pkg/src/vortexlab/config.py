"""Experiment configuration: parsing (TOML or JSON), validation with
field-path errors, canonical normalization, and content hashing.

The normalized form is a plain dict of JSON types; its canonical
serialization (sorted keys) is what gets hashed, so logically identical
configs hash identically regardless of key order or input format.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                       # python < 3.11
    import tomli as tomllib

from .kernels import (BiotSavartKernel, BoundedFourierKernel, ZeroKernel,
                      default_delta, mollify)
from .spectral import TestFunction

KINDS = ("simulate", "meanfield", "backward", "clt", "ldp-check",
         "spde-sim", "marginal-w1")


class ValidationError(ValueError):
    """Config error carrying the offending field path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def load_config(path) -> dict:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(str(path), f"invalid JSON: {e}")
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(str(path), f"invalid TOML: {e}")


def _req(table, path, key, types, what=""):
    if key not in table:
        raise ValidationError(f"{path}.{key}", f"missing required key {what}")
    val = table[key]
    if types is not None and not isinstance(val, types):
        raise ValidationError(f"{path}.{key}",
                              f"expected {types}, got {type(val).__name__}")
    return val


def _opt(table, path, key, types, default):
    if key not in table:
        return default
    return _req(table, path, key, types)


def _num_list(val, path):
    if not isinstance(val, list) or not val:
        raise ValidationError(path, "expected a nonempty list of numbers")
    out = []
    for i, x in enumerate(val):
        if not isinstance(x, (int, float)) or isinstance(x, bool):
            raise ValidationError(f"{path}[{i}]", "expected a number")
        out.append(float(x))
    return out


def _phi_entry(entry, path):
    if isinstance(entry, dict):
        typ = _req(entry, path, "type", str)
        if typ not in ("cos", "sin"):
            raise ValidationError(f"{path}.type", "expected 'cos' or 'sin'")
        k = _req(entry, path, "k", list)
        if len(k) != 2 or not all(isinstance(a, int) for a in k):
            raise ValidationError(f"{path}.k", "expected two integers")
        amp = float(_opt(entry, path, "amp", (int, float), 1.0))
        return {"type": typ, "k": [int(k[0]), int(k[1])], "amp": amp}
    raise ValidationError(path, "expected an inline table "
                          "{type=..., k=[a,b], amp=...}")


def phi_from_spec(spec) -> TestFunction:
    k = tuple(spec["k"])
    if spec["type"] == "cos":
        return TestFunction.cosine(k, spec["amp"])
    return TestFunction.sine(k, spec["amp"])


def _mode_rows(val, path):
    rows = []
    if not isinstance(val, list):
        raise ValidationError(path, "expected a list of [k1,k2,re,im] rows")
    for i, row in enumerate(val):
        if (not isinstance(row, list) or len(row) != 4
                or not all(isinstance(x, (int, float)) for x in row)):
            raise ValidationError(f"{path}[{i}]", "expected [k1,k2,re,im]")
        rows.append([int(row[0]), int(row[1]), float(row[2]), float(row[3])])
    return rows


DEFAULT_SWAP_KERNEL = {
    "modes1": [[0, 1, 0.0, -0.5], [0, -1, 0.0, 0.5]],
    "modes2": [[1, 0, 0.0, -0.5], [-1, 0, 0.0, 0.5]],
}


def normalize(raw: dict) -> dict:
    """Validate and normalize a parsed config into canonical JSON types."""
    if not isinstance(raw, dict):
        raise ValidationError("<root>", "config must be a table")
    kind = _req(raw, "<root>", "kind", str)
    if kind not in KINDS:
        raise ValidationError("kind", f"unknown kind {kind!r}; "
                              f"expected one of {', '.join(KINDS)}")
    cfg = {"kind": kind, "name": _opt(raw, "<root>", "name", str, kind)}

    phys = _req(raw, "<root>", "physics", dict)
    kernel = _opt(phys, "physics", "kernel", str, "zero")
    if kernel not in ("zero", "biot-savart", "bounded-fourier"):
        raise ValidationError("physics.kernel",
                              "expected zero | biot-savart | bounded-fourier")
    p = {
        "kernel": kernel,
        "sigma": float(_req(phys, "physics", "sigma", (int, float))),
        "rho0": _opt(phys, "physics", "rho0", str, "uniform"),
    }
    if p["sigma"] < 0:
        raise ValidationError("physics.sigma", "must be nonnegative")
    if p["rho0"] not in ("uniform", "taylor-green"):
        raise ValidationError("physics.rho0",
                              "expected uniform | taylor-green")
    if p["rho0"] == "taylor-green":
        p["rho0_eps"] = float(_opt(phys, "physics", "rho0_eps",
                                   (int, float), 0.5))
    if kernel == "bounded-fourier":
        if "kernel_modes1" in phys or "kernel_modes2" in phys:
            p["kernel_modes1"] = _mode_rows(
                _req(phys, "physics", "kernel_modes1", list),
                "physics.kernel_modes1")
            p["kernel_modes2"] = _mode_rows(
                _req(phys, "physics", "kernel_modes2", list),
                "physics.kernel_modes2")
        else:
            amp = float(_opt(phys, "physics", "kernel_amp", (int, float),
                             1.0))
            p["kernel_modes1"] = [[r[0], r[1], r[2] * amp, r[3] * amp]
                                  for r in DEFAULT_SWAP_KERNEL["modes1"]]
            p["kernel_modes2"] = [[r[0], r[1], r[2] * amp, r[3] * amp]
                                  for r in DEFAULT_SWAP_KERNEL["modes2"]]
    if kernel == "biot-savart":
        p["kmax"] = int(_opt(phys, "physics", "kmax", int, 512))
    cfg["physics"] = p

    num = _req(raw, "<root>", "numerics", dict)
    n = {}
    if kind in ("simulate", "clt", "marginal-w1"):
        nval = _req(num, "numerics", "N", (int, list))
        n["N"] = [int(x) for x in
                  (nval if isinstance(nval, list) else [nval])]
        for i, x in enumerate(n["N"]):
            if x < 2:
                raise ValidationError(f"numerics.N[{i}]", "need N >= 2")
        n["dt"] = float(_req(num, "numerics", "dt", (int, float)))
        if n["dt"] <= 0:
            raise ValidationError("numerics.dt", "must be positive")
    n["T"] = float(_req(num, "numerics", "T", (int, float)))
    if n["T"] < 0:
        raise ValidationError("numerics.T", "must be nonnegative")
    n["grid"] = int(_opt(num, "numerics", "grid", int, 64))
    if n["grid"] % 2:
        raise ValidationError("numerics.grid", "must be even")
    n["dt_pde"] = float(_opt(num, "numerics", "dt_pde", (int, float), 1e-3))
    n["dt_backward"] = float(_opt(num, "numerics", "dt_backward",
                                  (int, float), n["dt_pde"]))
    if kind == "spde-sim":
        n["spde_grid"] = int(_opt(num, "numerics", "spde_grid", int, 32))
        n["mode_cutoff"] = int(_opt(num, "numerics", "mode_cutoff", int,
                                    n["spde_grid"] // 3))
    if cfg["physics"]["kernel"] == "biot-savart" and kind in (
            "simulate", "clt", "marginal-w1"):
        dl = _opt(num, "numerics", "delta", (int, float, list), None)
        if dl is None:
            n["delta"] = [default_delta(max(n["N"]))]
        else:
            n["delta"] = _num_list(dl if isinstance(dl, list) else [dl],
                                   "numerics.delta")
        for i, d in enumerate(n["delta"]):
            if d <= 0:
                raise ValidationError(f"numerics.delta[{i}]",
                                      "must be positive")
    if "dt_half_check_N" in num:
        n["dt_half_check_N"] = int(num["dt_half_check_N"])
    n["drift_method"] = _opt(num, "numerics", "drift_method", str, "auto")
    if n["drift_method"] not in ("auto", "direct", "fast"):
        raise ValidationError("numerics.drift_method",
                              "expected auto | direct | fast")
    cfg["numerics"] = n

    st = _opt(raw, "<root>", "statistics", dict, {})
    s = {}
    if kind in ("clt", "spde-sim", "backward"):
        phis = _req(st, "statistics", "phis", list)
        s["phis"] = [_phi_entry(e, f"statistics.phis[{i}]")
                     for i, e in enumerate(phis)]
    s["observe_times"] = _num_list(
        _opt(st, "statistics", "observe_times", list, [n["T"]]),
        "statistics.observe_times")
    s["replicas"] = int(_opt(st, "statistics", "replicas", int, 100))
    s["level"] = float(_opt(st, "statistics", "level", (int, float), 0.99))
    if kind == "marginal-w1":
        s["projections"] = int(_opt(st, "statistics", "projections", int, 4))
    if kind == "ldp-check":
        s["amplitude"] = float(_opt(st, "statistics", "amplitude",
                                    (int, float), 0.2))
        s["N_list"] = [int(x) for x in _opt(st, "statistics", "N_list",
                                            list, [8, 16, 32, 64, 128, 256])]
        s["samples"] = int(_opt(st, "statistics", "samples", int, 100_000))
        s["alpha"] = float(_opt(st, "statistics", "alpha", (int, float),
                                2.0))
        s["truncation"] = int(_opt(st, "statistics", "truncation", int, 32))
        s["hminus_N"] = [int(x) for x in _opt(st, "statistics", "hminus_N",
                                              list, [100, 1000])]
        s["hminus_M"] = int(_opt(st, "statistics", "hminus_M", int, 2000))
    cfg["statistics"] = s

    seeds = _opt(raw, "<root>", "seeds", dict, {})
    cfg["seeds"] = {"master": int(_opt(seeds, "seeds", "master", int, 0))}

    if "assertions" in raw:
        a = raw["assertions"]
        if not isinstance(a, dict):
            raise ValidationError("assertions", "must be a table")
        cfg["assertions"] = _normalize_json(a, "assertions")
    return cfg


def _normalize_json(val, path):
    if isinstance(val, dict):
        return {str(k): _normalize_json(v, f"{path}.{k}")
                for k, v in val.items()}
    if isinstance(val, list):
        return [_normalize_json(v, f"{path}[{i}]")
                for i, v in enumerate(val)]
    if isinstance(val, bool) or isinstance(val, (int, str)):
        return val
    if isinstance(val, float):
        return val
    raise ValidationError(path, f"unsupported value type "
                          f"{type(val).__name__}")


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def derive_seed(master, *labels):
    """Stable sub-seed from the master seed and a context label chain."""
    text = ":".join([str(int(master))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8],
                          "little") >> 1


# ---------------------------------------------------------------------------
# materialization of physics objects


def build_kernel(cfg: dict, delta=None):
    p = cfg["physics"]
    if p["kernel"] == "zero":
        return ZeroKernel()
    if p["kernel"] == "bounded-fourier":
        comp1 = TestFunction.from_pairs(
            {(r[0], r[1]): complex(r[2], r[3]) for r in p["kernel_modes1"]})
        comp2 = TestFunction.from_pairs(
            {(r[0], r[1]): complex(r[2], r[3]) for r in p["kernel_modes2"]})
        return BoundedFourierKernel(comp1, comp2)
    base = BiotSavartKernel(table_size=p.get("kmax", 512))
    if delta is not None:
        return mollify(base, delta)
    return base


def build_rho0(cfg: dict, M=None):
    from .meanfield import taylor_green_density
    from .spectral import SpectralField
    M = M if M is not None else cfg["numerics"]["grid"]
    if cfg["physics"]["rho0"] == "uniform":
        return SpectralField.uniform_density(M)
    return taylor_green_density(M, cfg["physics"].get("rho0_eps", 0.5))


def build_phis(cfg: dict):
    return [phi_from_spec(s) for s in cfg["statistics"]["phis"]]
