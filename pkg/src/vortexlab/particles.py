"""Discrete-time simulation of the N-particle interacting SDE system.

Euler-Maruyama steps of

    dX_i = (1/N) sum_{j != i} K(X_i - X_j) dt + F(X_i) dt + sqrt(2 sigma) dB_i

on the 2-torus, with i.i.d. initial sampling, dedicated per-replica noise
streams, and replica ensembles evaluated in vectorized batches.

Reproducibility contract: all randomness flows through counter-based
Philox generators keyed by (seed, replica_id). A replica's stream is
consumed in a fixed order (initial positions first, then one (N, 2)
normal block per step), so results are independent of batch sizes,
chunking, and worker counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _pairsum
from .kernels import (BiotSavartKernel, BoundedFourierKernel, Kernel,
                      MollifiedKernel, SingularKernelError, ZeroKernel)
from .spectral import TAU, SpectralField, TestFunction, min_image, wrap

RNG_ALGORITHM = "Philox4x64 (numpy.random.Philox), key=(seed, replica_id)"


def replica_stream(seed, replica_id=0):
    """Independent counter-based stream for one replica."""
    key = np.array([np.uint64(seed), np.uint64(replica_id)])
    return np.random.Generator(np.random.Philox(key=key))


class SamplingError(ValueError):
    pass


def _sparse_density_modes(rho: SpectralField, rel_tol=1e-13, max_modes=512):
    """Nonzero modes of the density, for exact pointwise synthesis."""
    ks, cs = rho.pairings(rho.M // 2 - 1)
    keep = np.abs(cs) > rel_tol * max(np.max(np.abs(cs)), 1.0)
    if np.sum(keep) > max_modes:
        raise SamplingError(
            "density has too many active modes for exact rejection sampling")
    # pairings <rho, e_k> = hat(rho)(-k); synthesis needs hat at +k
    return -ks[keep], np.conj(cs[keep])


def density_values(rho: SpectralField, points):
    """rho(x) = (2pi)^-2 sum_k hat(rho)(k) exp(i k.x), sparse modes only."""
    ks, cs = _sparse_density_modes(rho)
    phase = np.asarray(points, dtype=float) @ ks.T.astype(float)
    return np.real(np.exp(1j * phase) @ cs) / TAU ** 2


def sample_iid(rho: SpectralField, N, rng, batch=8192):
    """N i.i.d. draws from the density by rejection from the uniform law.

    Envelope bound is max over the grid times (1 + 1e-3); exact for the
    trigonometric-polynomial densities in scope. Deterministic given the
    generator state.
    """
    grid = rho.to_grid()
    gmin = float(grid.min())
    if gmin < -1e-8:
        raise SamplingError(f"density has negative values (min {gmin:.3e})")
    if abs(rho.mass() - 1.0) > 1e-8:
        raise SamplingError("density does not integrate to 1")
    bound = float(grid.max()) * (1.0 + 1e-3)
    out = np.empty((N, 2))
    got = 0
    proposed = 0
    while got < N:
        pts = rng.uniform(0.0, TAU, size=(batch, 2))
        u = rng.uniform(0.0, bound, size=batch)
        vals = density_values(rho, pts)
        acc = pts[u < vals]
        proposed += batch
        take = min(N - got, acc.shape[0])
        out[got:got + take] = acc[:take]
        got += take
        if proposed >= batch and got / proposed < 1e-3:
            raise SamplingError("rejection acceptance rate below 1e-3")
    return out


@dataclass
class ParticleState:
    """Positions on the torus plus unwrapped lifts, at model time t."""

    positions: np.ndarray   # (N, 2) in [0, 2pi)
    lifts: np.ndarray       # (N, 2) in R^2, wrap(lifts) == positions
    t: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.lifts = np.asarray(self.lifts, dtype=float)
        if self.positions.shape != self.lifts.shape:
            raise ValueError("positions and lifts shapes differ")

    @property
    def N(self):
        return self.positions.shape[0]

    @classmethod
    def from_positions(cls, positions, t=0.0):
        positions = wrap(positions)
        return cls(positions, positions.copy(), t)


@dataclass
class SimConfig:
    """One replica's simulation parameters."""

    N: int
    dt: float
    T: float
    sigma: float
    kernel: Kernel = field(default_factory=ZeroKernel)
    force: tuple[TestFunction, TestFunction] | None = None
    seed: int = 0
    replica_id: int = 0
    drift_method: str = "auto"   # auto | direct | fast

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("horizon T must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kernel.singular:
            raise ValueError("singular kernel must be mollified for "
                             "discrete-time simulation")
        if not isinstance(self.kernel, ZeroKernel) and self.N < 2:
            raise ValueError("interacting run needs N >= 2")

    def n_steps(self):
        return int(np.ceil(self.T / self.dt - 1e-12)) if self.T > 0 else 0


# ---------------------------------------------------------------------------
# drift evaluation


def _unwrap_biot_savart(kernel):
    if isinstance(kernel, BiotSavartKernel):
        return kernel, 0.0
    if (isinstance(kernel, MollifiedKernel)
            and isinstance(kernel.base, BiotSavartKernel)):
        return kernel.base, kernel.delta
    return None, None


_FAST_TABLES = {}


def _fast_table(bs: BiotSavartKernel):
    """Bilinear float32 correction table folded onto x1 >= 0, one pad cell."""
    key = id(bs)
    if key not in _FAST_TABLES:
        from .kernels import _biot_savart_exact, _free_velocity
        T = bs.table_size
        h = TAU / T
        pad = 1
        c1 = (np.arange(T // 2 + 2 * pad) - pad + 0.5) * h
        c2 = -np.pi + (np.arange(T + 2 * pad) - pad + 0.5) * h
        X1, X2 = np.meshgrid(c1, c2, indexing="ij")
        k1, k2 = _biot_savart_exact(X1, X2)
        f1, f2 = _free_velocity(X1, X2)
        tab = np.stack([k1 - f1, k2 - f2], axis=-1).astype(np.float32)
        _FAST_TABLES[key] = (np.ascontiguousarray(tab), 1.0 / h, pad)
    return _FAST_TABLES[key]


def _direct_pair_drift(positions, kernel):
    """Dense displacement-matrix evaluation; reference for small N."""
    N = positions.shape[0]
    disp = min_image(positions[:, None, :] - positions[None, :, :])
    vals = np.zeros((N, N, 2))
    off = ~np.eye(N, dtype=bool)
    vals[off] = kernel(disp[off])
    return vals.sum(axis=1) / N


def _factored_pair_drift(pos, kernel: BoundedFourierKernel):
    """Exact mode-factorized pair sum for trig-polynomial kernels.

    sum_{j != i} K_c(X_i - X_j) = sum_q c_{c,q} e^{i q.X_i} conj(S_q) - K_c(0)
    with S_q = sum_j e^{i q.X_j}; O(N * modes) instead of O(N^2).
    """
    ks, cs = kernel.kernel_mode_arrays()
    N = pos.shape[-2]
    v = np.zeros(pos.shape)
    half = [row for row in range(len(ks))
            if (ks[row, 0], ks[row, 1]) > (-ks[row, 0], -ks[row, 1])]
    zero_rows = [row for row in range(len(ks))
                 if ks[row, 0] == 0 and ks[row, 1] == 0]
    for row in half:
        phase = pos @ ks[row].astype(float)
        e = np.exp(1j * phase)                      # (..., N)
        s = np.sum(e, axis=-1, keepdims=True)
        for c in range(2):
            if cs[c, row] != 0:
                v[..., c] += 2.0 * np.real(cs[c, row] * e * np.conj(s))
    for row in zero_rows:
        for c in range(2):
            v[..., c] += np.real(cs[c, row]) * N
    k0 = kernel.value_at_zero()
    v -= k0
    return v / N


def _drift_batch(pos, kernel: Kernel, method="auto"):
    """Interaction drift for stacked replicas, pos (..., N, 2)."""
    if isinstance(kernel, ZeroKernel):
        return np.zeros(pos.shape)
    if isinstance(kernel, BoundedFourierKernel):
        if method == "direct":
            flat = pos.reshape(-1, *pos.shape[-2:])
            out = np.stack([_direct_pair_drift(p, kernel) for p in flat])
            return out.reshape(pos.shape)
        return _factored_pair_drift(pos, kernel)
    bs, delta = _unwrap_biot_savart(kernel)
    if bs is None:
        flat = pos.reshape(-1, *pos.shape[-2:])
        out = np.stack([_direct_pair_drift(p, kernel) for p in flat])
        return out.reshape(pos.shape)
    if method == "fast":
        table, inv_h, pad = _fast_table(bs)
        flat = np.ascontiguousarray(pos.reshape(-1, *pos.shape[-2:]))
        out = np.empty_like(flat)
        bad = _pairsum.bs_pair_drift_fast(flat, table, inv_h, pad,
                                          float(delta), out)
        if bad >= 0:
            raise SingularKernelError(
                f"exact particle coincidence, flat pair index {bad}")
        return out.reshape(pos.shape)
    table = bs.correction_table()
    inv_h = bs.table_size / TAU
    flat = np.ascontiguousarray(pos.reshape(-1, *pos.shape[-2:]))
    out = np.empty_like(flat)
    for r in range(flat.shape[0]):
        bad = _pairsum.bs_pair_drift_reference(
            flat[r], table, inv_h, BiotSavartKernel._PAD, float(delta),
            out[r])
        if bad >= 0:
            i, j = divmod(bad, flat.shape[1])
            raise SingularKernelError(
                f"exact particle coincidence at pair ({i}, {j})")
    return out.reshape(pos.shape)


def pairwise_drift(state_or_positions, kernel: Kernel, method="auto"):
    """v_i = (1/N) sum_{j != i} K(X_i - X_j), minimal-image displacements."""
    pos = (state_or_positions.positions
           if isinstance(state_or_positions, ParticleState)
           else np.asarray(state_or_positions, dtype=float))
    return _drift_batch(pos, kernel, method=method)


def _force_values(force, pos):
    if force is None:
        return 0.0
    return np.stack([force[0](pos), force[1](pos)], axis=-1)


def em_step(state: ParticleState, config: SimConfig, rng) -> ParticleState:
    """One Euler-Maruyama step; lifts advance in R^2, positions re-wrap."""
    drift = pairwise_drift(state.positions, config.kernel,
                           config.drift_method)
    drift = drift + _force_values(config.force, state.positions)
    noise = rng.standard_normal((state.N, 2))
    lifts = (state.lifts + config.dt * drift
             + np.sqrt(2.0 * config.sigma * config.dt) * noise)
    return ParticleState(wrap(lifts), lifts, state.t + config.dt)


# ---------------------------------------------------------------------------
# trajectories and ensembles


def empirical_modes(positions, modes):
    """hat(mu_N)(k) = (1/N) sum_i exp(-i k.X_i) for each requested mode.

    positions (..., N, 2), modes (m, 2) -> (..., m) complex.
    """
    pos = np.asarray(positions, dtype=float)
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
    out = np.empty(pos.shape[:-2] + (modes.shape[0],), dtype=complex)
    for row, k in enumerate(modes):
        phase = pos @ k.astype(float)
        out[..., row] = np.mean(np.exp(-1j * phase), axis=-1)
    return out


@dataclass
class Trajectory:
    """Recorded observables of one replica at snapshot times."""

    times: np.ndarray                  # (nt,) recorded (nearest-step) times
    modes: np.ndarray                  # (m, 2)
    mode_values: np.ndarray            # (nt, m) complex hat(mu_N)(k)
    states: list = field(default_factory=list)  # ParticleState if kept


def _observation_steps(observe_times, dt, n_steps):
    idx = []
    for t in observe_times:
        i = int(round(t / dt))
        idx.append(min(max(i, 0), n_steps))
    return idx


def simulate(config: SimConfig, rho0: SpectralField, observe_times,
             modes=((0, 0),), keep_states=False) -> Trajectory:
    """Run one replica, recording mode observables at the requested times."""
    rng = replica_stream(config.seed, config.replica_id)
    state = ParticleState.from_positions(sample_iid(rho0, config.N, rng))
    n_steps = config.n_steps()
    obs_steps = _observation_steps(observe_times, config.dt, n_steps)
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
    times, values, states = [], [], []

    def record(step, st):
        times.append(step * config.dt)
        values.append(empirical_modes(st.positions, modes))
        if keep_states:
            states.append(ParticleState(st.positions.copy(),
                                        st.lifts.copy(), st.t))

    if 0 in obs_steps:
        record(0, state)
    for step in range(1, n_steps + 1):
        state = em_step(state, config, rng)
        for _ in range(obs_steps.count(step)):
            record(step, state)
    return Trajectory(np.array(times), modes,
                      np.array(values).reshape(len(times), -1), states)


@dataclass
class EnsembleModes:
    """Per-replica empirical mode coefficients at snapshot times."""

    times: np.ndarray          # (nt,)
    modes: np.ndarray          # (m, 2)
    values: np.ndarray         # (R, nt, m) complex hat(mu_N)(k)
    first_particle: np.ndarray | None = None   # (R, nt, 2) torus positions
    n_particles: int = 0
    seed: int = 0


def run_ensemble(*, n_replicas, N, dt, T, sigma, kernel=None, force=None,
                 rho0: SpectralField, observe_times, modes, seed,
                 drift_method="auto", track_first_particle=False,
                 replica_batch=None, noise_chunk=64,
                 progress=None) -> EnsembleModes:
    """Independent replicas with streams keyed by (seed, replica_id).

    Replicas are advanced in vectorized batches; each replica consumes
    its own stream in a fixed order so the output is identical for any
    batch or chunk size. Output rows are ordered by replica_id.
    """
    kernel = kernel if kernel is not None else ZeroKernel()
    cfg = SimConfig(N=N, dt=dt, T=T, sigma=sigma, kernel=kernel, force=force,
                    seed=seed, drift_method=drift_method)
    n_steps = cfg.n_steps()
    obs_steps = _observation_steps(observe_times, dt, n_steps)
    obs_set = sorted(set(obs_steps))
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
    if replica_batch is None:
        replica_batch = max(1, min(n_replicas,
                                   int(2.5e8 / (noise_chunk * N * 2 * 8))))
    values = np.empty((n_replicas, len(obs_steps), modes.shape[0]),
                      dtype=complex)
    first = (np.empty((n_replicas, len(obs_steps), 2))
             if track_first_particle else None)
    amp = np.sqrt(2.0 * sigma * dt)

    def record(pos, r0, r1, step):
        hits = [col for col, s in enumerate(obs_steps) if s == step]
        if not hits:
            return
        vals = empirical_modes(pos, modes)
        for col in hits:
            values[r0:r1, col, :] = vals
            if first is not None:
                first[r0:r1, col, :] = pos[:, 0, :]

    done = 0
    for r0 in range(0, n_replicas, replica_batch):
        r1 = min(r0 + replica_batch, n_replicas)
        streams = [replica_stream(seed, rid) for rid in range(r0, r1)]
        pos = np.stack([sample_iid(rho0, N, g) for g in streams])
        record(pos, r0, r1, 0)
        step = 0
        while step < n_steps:
            chunk = min(noise_chunk, n_steps - step)
            noise = np.stack([g.standard_normal((chunk, N, 2))
                              for g in streams])
            for c in range(chunk):
                step += 1
                drift = _drift_batch(pos, kernel, drift_method)
                if force is not None:
                    drift = drift + _force_values(force, pos)
                pos = wrap(pos + dt * drift + amp * noise[:, c])
                if step in obs_set:
                    record(pos, r0, r1, step)
        done += r1 - r0
        if progress is not None:
            progress(done, n_replicas)
    rec_times = np.array([s * dt for s in obs_steps])
    return EnsembleModes(rec_times, modes, values, first, N, seed)
