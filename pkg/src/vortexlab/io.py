"""Run-directory artifacts: canonical JSON, CSV tables, metadata.

No timestamps anywhere: deterministic reruns must reproduce every result
file byte-for-byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .config import canonical_json, config_hash
from .particles import RNG_ALGORITHM


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_config(out_dir, cfg):
    write_json(Path(out_dir) / "config.json", cfg)


def write_metadata(out_dir, cfg, deterministic, drift_method, workers=None):
    meta = {
        "config_hash": config_hash(cfg),
        "rng_algorithm": RNG_ALGORITHM,
        "deterministic": bool(deterministic),
        "drift_method": drift_method,
        "workers": workers,
        "versions": {
            "vortexlab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }
    write_json(Path(out_dir) / "metadata.json", meta)
    return meta


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_mode_series_csv(path, ensemble):
    """`replica,t,k1,k2,re,im` rows from an EnsembleModes record."""
    rows = []
    for r in range(ensemble.values.shape[0]):
        for it, t in enumerate(ensemble.times):
            for im_, k in enumerate(ensemble.modes):
                v = ensemble.values[r, it, im_]
                rows.append((r, float(t), int(k[0]), int(k[1]),
                             float(v.real), float(v.imag)))
    write_csv(path, ["replica", "t", "k1", "k2", "re", "im"], rows)


def write_spectral_field(path, field, extra=None):
    rec = field.to_dict()
    if extra:
        rec.update(extra)
    write_json(path, rec)


PLOT_SCRIPT = """\
# gnuplot helper; adjust the CSV name and columns to taste
set datafile separator ","
set key autotitle columnhead
plot "comparison.csv" using 1:5 with linespoints
pause -1
"""


def emit_plot_script(out_dir):
    (Path(out_dir) / "plot.gp").write_text(PLOT_SCRIPT)
