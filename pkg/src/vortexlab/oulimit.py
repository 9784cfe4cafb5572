"""Limit objects of the fluctuation theory.

  - backward_solve: the dual evolution f(s) = Q_{s,t} phi solving

      f_s = phi + sigma int_s^t Lap f_r dr
            + int_s^t [K*rho_r . grad f_r + K(-.)*(grad f_r rho_r)
                       + F . grad f_r] dr,

    marched in tau = t - s with the same exact-diffusion-factor / Heun
    scheme as the mean-field solver;
  - ou_covariance: Var<eta_t, phi> = <|Q_{0,t}phi|^2, rho_0>
        - <Q_{0,t}phi, rho_0>^2 + 2 sigma int_0^t <|grad Q_{s,t}phi|^2,
        rho_s> ds  (the integral term is dropped when sigma = 0);
  - forward_linearized: du = sigma Lap u - div(rho K*u) - div(u K*rho)
        - div(F u), the deterministic linearized equation;
  - sample_eta0: Gaussian initial data with
        Cov(<eta0, e_k>, <eta0, e_l>) = <e_{k+l}, rho0>
        - <e_k, rho0><e_l, rho0>;
  - spde_simulate / spde_ensemble: spectral Galerkin for the limit SPDE
        d eta = [drift] dt - sqrt(2 sigma) div(sqrt(rho) dW), with
        grid-nodal white noise of variance 1/(cell area) per node.

K(-.)*g is the convolution with the reflected kernel, implemented
spectrally as multiplication by hat(K)(-k) (= conj hat(K)(k) for real K).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import Kernel, MollifiedKernel, ZeroKernel
from .meanfield import BlowUpError, UniformSolution
from .particles import replica_stream
from .spectral import TAU, SpectralField, TestFunction, wave_grids


def _is_zero_kernel(kernel):
    return kernel is None or isinstance(kernel, ZeroKernel)


class _LinOp:
    """Spectral machinery shared by the backward, forward and SPDE steppers."""

    def __init__(self, M, kernel: Kernel, force, dealias=2.0 / 3.0,
                 mode_cutoff=None):
        if isinstance(kernel, MollifiedKernel):
            raise ValueError("spectral solvers need an unmollified kernel")
        self.M = M
        k1, k2 = wave_grids(M)
        self.k1 = k1
        self.k2 = k2
        self.lap = -(k1 ** 2 + k2 ** 2).astype(float)
        cut = dealias * (M // 2)
        mask = (np.abs(k1) <= cut) & (np.abs(k2) <= cut)
        if mode_cutoff is not None:
            if mode_cutoff > cut + 1e-9:
                raise ValueError("mode cutoff exceeds the dealias radius")
            mask &= ((np.abs(k1) <= mode_cutoff)
                     & (np.abs(k2) <= mode_cutoff))
        self.mask = mask.astype(float)
        self.kernel = kernel
        self.khat = (None if _is_zero_kernel(kernel)
                     else kernel.spectral_coeffs(M))
        if force is not None:
            self.f_grid = (force[0].to_field(M).to_grid(),
                           force[1].to_field(M).to_grid())
        else:
            self.f_grid = None
        self.scale = (M / TAU) ** 2
        self.pure_diffusion = self.khat is None and self.f_grid is None

    def grid(self, coeffs):
        return np.fft.ifft2(coeffs, axes=(-2, -1)).real * self.scale

    def to_coeffs(self, grid):
        return np.fft.fft2(grid, axes=(-2, -1)) / self.scale

    def base_velocity(self, rho_coeffs):
        """(K * rho + F) on the grid, given rho coefficients."""
        if self.khat is not None:
            u1 = self.grid(self.khat[0] * rho_coeffs)
            u2 = self.grid(self.khat[1] * rho_coeffs)
        else:
            u1 = np.zeros((self.M, self.M))
            u2 = np.zeros((self.M, self.M))
        if self.f_grid is not None:
            u1 = u1 + self.f_grid[0]
            u2 = u2 + self.f_grid[1]
        return u1, u2

    def backward_transport(self, fhat, rho_coeffs):
        """K*rho . grad f + K(-.)*(rho grad f) + F . grad f, dealiased."""
        if self.pure_diffusion:
            return np.zeros_like(fhat)
        g1 = self.grid(1j * self.k1 * fhat)
        g2 = self.grid(1j * self.k2 * fhat)
        u1, u2 = self.base_velocity(rho_coeffs)
        rho_g = self.grid(rho_coeffs)
        out = self.to_coeffs(u1 * g1 + u2 * g2)
        if self.khat is not None:
            w1 = self.to_coeffs(rho_g * g1)
            w2 = self.to_coeffs(rho_g * g2)
            out = out + np.conj(self.khat[0]) * w1 \
                + np.conj(self.khat[1]) * w2
        return out * self.mask

    def forward_transport(self, uhat, rho_coeffs):
        """-div(rho K*u) - div(u (K*rho + F)), dealiased."""
        if self.pure_diffusion:
            return np.zeros_like(uhat)
        rho_g = self.grid(rho_coeffs)
        u_g = self.grid(uhat)
        b1, b2 = self.base_velocity(rho_coeffs)
        flux1 = u_g * b1
        flux2 = u_g * b2
        if self.khat is not None:
            a1 = self.grid(self.khat[0] * uhat)
            a2 = self.grid(self.khat[1] * uhat)
            flux1 = flux1 + rho_g * a1
            flux2 = flux2 + rho_g * a2
        div = 1j * (self.k1 * self.to_coeffs(flux1)
                    + self.k2 * self.to_coeffs(flux2))
        return -div * self.mask


def _heun_step(coeffs, efac, dt, op_apply, rho_n, rho_np1):
    """Exact diffusion factor, Heun (RK2) on the non-diffusive part."""
    a = op_apply(coeffs, rho_n)
    pred = efac * (coeffs + dt * a)
    b = op_apply(pred, rho_np1)
    return efac * coeffs + 0.5 * dt * (efac * a + b)


@dataclass
class BackwardSolution:
    """f(s) = Q_{s,t} phi on an s-grid of [0, t], coefficient storage."""

    phi: TestFunction
    t: float
    times: np.ndarray          # ascending s nodes, times[-1] == t
    coeffs: np.ndarray         # (n+1, M, M), coeffs[j] = f(times[j])

    @property
    def M(self):
        return self.coeffs.shape[1]

    def coeffs_at(self, s):
        from .meanfield import MeanFieldSolution
        series = MeanFieldSolution(self.times, self.coeffs, [], None)
        return series.coeffs_at(s)

    def field(self, s) -> SpectralField:
        return SpectralField(self.coeffs_at(s), check=False)

    def terminal_error(self):
        term = self.phi.to_field(self.M).coeffs
        return float(np.max(np.abs(self.coeffs[-1] - term)))


def _resolve_rho(rho, M):
    """Accept a SpectralField, an accessor with coeffs_at, or None."""
    if rho is None:
        return UniformSolution(M=M)
    if isinstance(rho, SpectralField):
        frozen = rho

        class _Static:
            def coeffs_at(self, t):
                return frozen.coeffs

            def field(self, t):
                return frozen

        return _Static()
    return rho


def backward_solve(phi: TestFunction, t, rho=None, *, sigma, kernel=None,
                   force=None, dt=1e-3, M=64, dealias=2.0 / 3.0,
                   store=True) -> BackwardSolution:
    """Integrate the dual equation from terminal value phi at time t."""
    rho = _resolve_rho(rho, M)
    op = _LinOp(M, kernel if kernel is not None else ZeroKernel(),
                force, dealias)
    n = int(np.ceil(t / dt - 1e-12)) if t > 0 else 0
    step = t / n if n else 0.0
    efac = np.exp(sigma * op.lap * step) if n else None
    fhat = phi.to_field(M).coeffs.copy()
    out = np.empty((n + 1, M, M), dtype=complex) if store else None
    if store:
        out[n] = fhat
    for j in range(n):                       # tau = j*step -> (j+1)*step
        s_n = t - j * step
        s_np1 = t - (j + 1) * step
        fhat = _heun_step(fhat, efac, step, op.backward_transport,
                          rho.coeffs_at(s_n), rho.coeffs_at(s_np1))
        if not np.all(np.isfinite(fhat)):
            raise BlowUpError(s_np1)
        if store:
            out[n - 1 - j] = fhat
    times = (np.linspace(0.0, t, n + 1) if n else np.array([0.0]))
    if not store:
        out = fhat[None, :, :]
        times = np.array([0.0 if n else t])
    return BackwardSolution(phi, t, times, out)


# ---------------------------------------------------------------------------
# OU covariance


def _pair_quad(grid_a, grid_b):
    """integral of a*b over the torus by the (exact) trapezoid rule."""
    return float(np.mean(grid_a * grid_b)) * TAU ** 2


@dataclass
class OUCovariance:
    var: float
    initial_term: float
    noise_term: float
    t: float
    dt: float

    def __float__(self):
        return self.var

    def to_dict(self):
        return {"var": self.var,
                "terms": {"initial": self.initial_term,
                          "noise": self.noise_term},
                "t": self.t, "dt": self.dt}


def _sparse_heat_covariance(phi: TestFunction, t, rho0: SpectralField,
                            sigma, dt):
    """Pure-diffusion fast path: f(s) has phi's modes with exact factors.

    Keeps the trapezoid-in-time quadrature of the general path but skips
    the grid solver, so very fine backward grids are affordable.
    """
    ks = phi.modes.astype(float)
    cs = phi.coeffs
    k2 = np.sum(ks * ks, axis=1)
    n = max(int(np.ceil(t / dt - 1e-12)), 1) if t > 0 else 0

    def pair_sq(coef):
        # <f^2, rho0> with f = sum coef_k e_k: modes of f^2 are k_a + k_b
        total = 0.0
        for a in range(len(ks)):
            for b in range(len(ks)):
                m = phi.modes[a] + phi.modes[b]
                total += np.real(coef[a] * coef[b]
                                 * np.conj(rho0.mode(tuple(m))))
        return total

    def pair_lin(coef):
        # <f, rho0> = sum_k coef_k <e_k, rho0> = sum_k coef_k conj(hat rho(k))
        vals = np.array([rho0.mode(tuple(m)) for m in phi.modes])
        return float(np.real(np.sum(coef * np.conj(vals))))

    if t == 0 or n == 0:
        c0 = cs
        init = pair_sq(c0) - pair_lin(c0) ** 2
        return OUCovariance(init, init, 0.0, t, dt)
    step = t / n
    noise = 0.0
    for j in range(n + 1):
        s = j * step
        coef = cs * np.exp(-sigma * k2 * (t - s))
        gcoef1 = 1j * ks[:, 0] * coef
        gcoef2 = 1j * ks[:, 1] * coef
        val = pair_sq(gcoef1) + pair_sq(gcoef2)
        w = step if 0 < j < n else step / 2
        noise += w * val
    noise *= 2.0 * sigma
    c0 = cs * np.exp(-sigma * k2 * t)
    init = pair_sq(c0) - pair_lin(c0) ** 2
    if sigma == 0.0:
        noise = 0.0
    return OUCovariance(init + noise, init, noise, t, dt)


def ou_covariance(phi: TestFunction, t, rho=None, *, sigma, kernel=None,
                  force=None, dt=1e-3, M=64) -> OUCovariance:
    """Variance of <eta_t, phi> from the backward representation.

    Pairings by grid quadrature, time integral by the trapezoid rule on
    the backward grid; for sigma = 0 the noise integral is dropped.
    """
    rho = _resolve_rho(rho, M)
    if _is_zero_kernel(kernel) and force is None:
        rho0 = rho.field(0.0)
        # pairings with rho0 need modes k1+k2 of phi^2 inside the grid
        if 2 * phi.kmax() < rho0.M // 2:
            return _sparse_heat_covariance(phi, t, rho0, sigma, dt)
    op = _LinOp(M, kernel if kernel is not None else ZeroKernel(), force)
    n = max(int(np.ceil(t / dt - 1e-12)), 1) if t > 0 else 0
    rho0_grid = op.grid(rho.coeffs_at(0.0))
    if t == 0 or n == 0:
        f0 = phi.to_field(M).to_grid()
        init = _pair_quad(f0 * f0, rho0_grid) \
            - _pair_quad(f0, rho0_grid) ** 2
        return OUCovariance(init, init, 0.0, t, dt)
    step = t / n
    efac = np.exp(sigma * op.lap * step)
    fhat = phi.to_field(M).coeffs.copy()

    def grad_pairing(fh, s):
        g1 = op.grid(1j * op.k1 * fh)
        g2 = op.grid(1j * op.k2 * fh)
        return _pair_quad(g1 * g1 + g2 * g2, op.grid(rho.coeffs_at(s)))

    noise = (step / 2) * grad_pairing(fhat, t)
    for j in range(n):
        s_n = t - j * step
        s_np1 = t - (j + 1) * step
        fhat = _heun_step(fhat, efac, step, op.backward_transport,
                          rho.coeffs_at(s_n), rho.coeffs_at(s_np1))
        if not np.all(np.isfinite(fhat)):
            raise BlowUpError(s_np1)
        w = step if j < n - 1 else step / 2
        noise += w * grad_pairing(fhat, s_np1)
    noise *= 2.0 * sigma
    if sigma == 0.0:
        noise = 0.0
    f0 = op.grid(fhat)
    init = _pair_quad(f0 * f0, rho0_grid) - _pair_quad(f0, rho0_grid) ** 2
    return OUCovariance(init + noise, init, noise, t, dt)


# ---------------------------------------------------------------------------
# forward linearized equation


@dataclass
class LinearizedSolution:
    times: np.ndarray
    coeffs: np.ndarray

    def coeffs_at(self, t):
        from .meanfield import MeanFieldSolution
        return MeanFieldSolution(self.times, self.coeffs, [], None) \
            .coeffs_at(t)

    def field(self, t) -> SpectralField:
        return SpectralField(self.coeffs_at(t), check=False)


def forward_linearized(u0: SpectralField, T, rho=None, *, sigma, kernel=None,
                       force=None, dt=1e-3, dealias=2.0 / 3.0,
                       mode_cutoff=None) -> LinearizedSolution:
    """Evolve the deterministic linearized equation from u0 on [0, T]."""
    M = u0.M
    rho = _resolve_rho(rho, M)
    op = _LinOp(M, kernel if kernel is not None else ZeroKernel(), force,
                dealias, mode_cutoff)
    n = int(np.ceil(T / dt - 1e-12)) if T > 0 else 0
    step = T / n if n else 0.0
    efac = np.exp(sigma * op.lap * step) if n else None
    out = np.empty((n + 1, M, M), dtype=complex)
    out[0] = u0.coeffs * (op.mask if mode_cutoff is not None else 1.0)
    for j in range(n):
        out[j + 1] = _heun_step(out[j], efac, step, op.forward_transport,
                                rho.coeffs_at(j * step),
                                rho.coeffs_at((j + 1) * step))
        if not np.all(np.isfinite(out[j + 1])):
            raise BlowUpError((j + 1) * step)
    times = np.linspace(0.0, T, n + 1) if n else np.array([0.0])
    return LinearizedSolution(times, out)


def duality_gap(u0: SpectralField, phi: TestFunction, T, rho=None, *,
                sigma, kernel=None, force=None, dt=1e-3):
    """Relative defect of <u_T, phi> = <u_0, Q_{0,T} phi>.

    The two sides run through independent code paths (forward vs
    backward transport), so their agreement cross-validates both.
    """
    fwd = forward_linearized(u0, T, rho, sigma=sigma, kernel=kernel,
                             force=force, dt=dt)
    back = backward_solve(phi, T, rho, sigma=sigma, kernel=kernel,
                          force=force, dt=dt, M=u0.M, store=False)
    phihat = phi.to_field(u0.M).coeffs
    lhs = float(np.real(np.sum(fwd.coeffs[-1] * np.conj(phihat)))) / TAU ** 2
    f0 = back.coeffs[0]
    rhs = float(np.real(np.sum(u0.coeffs * np.conj(f0)))) / TAU ** 2
    return abs(lhs - rhs) / (abs(rhs) + 1e-12), lhs, rhs


# ---------------------------------------------------------------------------
# Gaussian initial data


def hermitian_mode_set(cutoff):
    """All modes |k|_inf <= cutoff, as representatives k > -k plus zero."""
    reps = []
    for a in range(-cutoff, cutoff + 1):
        for b in range(-cutoff, cutoff + 1):
            if (a, b) > (-a, -b):
                reps.append((a, b))
    return reps


class CovarianceError(ValueError):
    pass


def eta0_real_covariance(reps, rho0: SpectralField):
    """Covariance of (Re Z_k, Im Z_k) for Z_k = <eta0, e_k>, k in reps.

    E[Z_k Z_l] = <e_{k+l}, rho0> - <e_k, rho0><e_l, rho0> and
    E[Z_k conj(Z_l)] likewise with l -> -l; real/imaginary blocks follow
    by polarization.
    """
    m = len(reps)

    def pair(k):
        return np.conj(rho0.mode(k)) if max(abs(k[0]), abs(k[1])) \
            < rho0.M // 2 else 0.0

    mean = np.array([pair(k) for k in reps])
    cov = np.zeros((2 * m, 2 * m))
    for a, k in enumerate(reps):
        for b, l in enumerate(reps):
            zz = pair((k[0] + l[0], k[1] + l[1])) - mean[a] * mean[b]
            zzb = pair((k[0] - l[0], k[1] - l[1])) \
                - mean[a] * np.conj(mean[b])
            cov[a, b] = 0.5 * np.real(zz + zzb)                 # Re,Re
            cov[m + a, m + b] = 0.5 * np.real(zzb - zz)         # Im,Im
            cov[a, m + b] = 0.5 * np.imag(zz - zzb)             # Re,Im
            cov[m + a, b] = 0.5 * np.imag(zz + zzb)             # Im,Re
    return cov


_ETA0_CACHE = {}


def _eta0_factor(reps, rho0):
    key = (tuple(reps), id(rho0))
    if key not in _ETA0_CACHE:
        cov = eta0_real_covariance(reps, rho0)
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10 * max(vals.max(), 1.0):
            raise CovarianceError(
                f"initial covariance not PSD (min eigenvalue {vals.min():.3e})")
        _ETA0_CACHE[key] = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return _ETA0_CACHE[key]


def sample_eta0(rho0: SpectralField, reps, rng, M=None):
    """Draw hat(eta0)(k) on the grid M (Hermitian-symmetric, zero mean mode).

    reps are representative modes (k > -k); the conjugate modes are
    filled by symmetry and the k = 0 coefficient is exactly 0.
    """
    if len(reps) > 1000:
        raise ValueError("mode set too large for dense factorization")
    M = M if M is not None else rho0.M
    fac = _eta0_factor(tuple(map(tuple, reps)), rho0)
    m = len(reps)
    x = fac @ rng.standard_normal(2 * m)
    out = np.zeros((M, M), dtype=complex)
    for a, k in enumerate(reps):
        z = x[a] + 1j * x[m + a]
        # state stores hat(eta)(k) = <eta, e_{-k}> = conj(Z_k)
        out[k[0] % M, k[1] % M] = np.conj(z)
        out[-k[0] % M, -k[1] % M] = z
    return out


# ---------------------------------------------------------------------------
# SPDE simulation


@dataclass
class OUPathEnsemble:
    """Per-path hat(eta_t)(k) series from the Galerkin SPDE."""

    times: np.ndarray          # (nt,)
    modes: np.ndarray          # (m, 2)
    values: np.ndarray         # (R, nt, m) complex
    mode_cutoff: int
    grid: int
    seed: int


def _extract_modes(state, modes, M):
    cols = np.empty(state.shape[:-2] + (len(modes),), dtype=complex)
    for c, k in enumerate(modes):
        cols[..., c] = state[..., k[0] % M, k[1] % M]
    return cols


def spde_ensemble(*, n_paths, T, rho, sigma, kernel=None, force=None,
                  seed=0, mode_cutoff, grid=32, dt=1e-3, observe_times,
                  modes, rho_for_eta0=None, noise_chunk=64,
                  noise_off=False) -> OUPathEnsemble:
    """Spectral Galerkin paths of the limit SPDE, one stream per path.

    Per step: exact-diffusion-factor Heun on the drift, then the noise
    increment -sqrt(2 sigma) div(sqrt(rho) dW) from grid-nodal white
    noise (variance 1/(cell area) per node and component), spectrally
    truncated to |k|_inf <= mode_cutoff.
    """
    if sigma <= 0 and not noise_off:
        raise ValueError("spde simulation needs sigma > 0; the sigma = 0 "
                         "limit is deterministic (use forward_linearized)")
    M = grid
    rho = _resolve_rho(rho, M)
    op = _LinOp(M, kernel if kernel is not None else ZeroKernel(), force,
                mode_cutoff=mode_cutoff)
    reps = hermitian_mode_set(mode_cutoff)
    rho0_for_eta = rho_for_eta0 if rho_for_eta0 is not None \
        else rho.field(0.0)
    n = int(np.ceil(T / dt - 1e-12)) if T > 0 else 0
    step = T / n if n else 0.0
    efac = np.exp(sigma * op.lap * step) if n else None
    obs_steps = [min(max(int(round(t / step)) if step else 0, 0), n)
                 for t in observe_times]
    obs_set = sorted(set(obs_steps))
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
    amp = np.sqrt(2.0 * sigma) * np.sqrt(step) / (TAU / M) if n else 0.0
    sqrt_rho_cache = {}

    def sqrt_rho(s):
        key = round(s / step) if step else 0
        if key not in sqrt_rho_cache:
            g = op.grid(rho.coeffs_at(s))
            sqrt_rho_cache[key] = (np.sqrt(np.clip(g, 0.0, None)),
                                   int(np.sum(g < 0)))
            if len(sqrt_rho_cache) > 4:
                sqrt_rho_cache.pop(next(iter(sqrt_rho_cache)))
        return sqrt_rho_cache[key][0]

    values = np.empty((n_paths, len(obs_steps), modes.shape[0]),
                      dtype=complex)

    def record(state, step_no):
        for col, s in enumerate(obs_steps):
            if s == step_no:
                values[:, col, :] = _extract_modes(state, modes, M)

    streams = [replica_stream(seed, pid) for pid in range(n_paths)]
    state = np.stack([sample_eta0(rho0_for_eta, reps, g, M)
                      for g in streams])
    state *= op.mask
    record(state, 0)
    step_no = 0
    while step_no < n:
        chunk = min(noise_chunk, n - step_no)
        if not noise_off:
            noise = np.stack([g.standard_normal((chunk, M, M, 2))
                              for g in streams])
        for c in range(chunk):
            s_n = step_no * step
            step_no += 1
            s_np1 = step_no * step
            state = _heun_step(state, efac, step, op.forward_transport,
                               rho.coeffs_at(s_n), rho.coeffs_at(s_np1))
            if not noise_off:
                root = sqrt_rho(s_n)
                w1 = op.to_coeffs(root * noise[:, c, :, :, 0])
                w2 = op.to_coeffs(root * noise[:, c, :, :, 1])
                incr = -amp * 1j * (op.k1 * w1 + op.k2 * w2) * op.mask
                state = state + incr
            if not np.all(np.isfinite(state)):
                raise BlowUpError(step_no * step)
            if step_no in obs_set:
                record(state, step_no)
    times = np.array([s * step for s in obs_steps])
    return OUPathEnsemble(times, modes, values, mode_cutoff, M, seed)


def spde_simulate(eta0_hat, T, rho, *, sigma, kernel=None, force=None,
                  seed=0, mode_cutoff, dt=1e-3, observe_times, modes,
                  noise_off=False):
    """Single path from given initial coefficients (
    hat(eta0), full (M, M) array); convenience wrapper over the batched
    stepper with an injected initial state."""
    M = eta0_hat.shape[0]
    rho = _resolve_rho(rho, M)
    op = _LinOp(M, kernel if kernel is not None else ZeroKernel(), force,
                mode_cutoff=mode_cutoff)
    n = int(np.ceil(T / dt - 1e-12)) if T > 0 else 0
    step = T / n if n else 0.0
    efac = np.exp(sigma * op.lap * step) if n else None
    obs_steps = [min(max(int(round(t / step)) if step else 0, 0), n)
                 for t in observe_times]
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
    rng = replica_stream(seed, 0)
    state = eta0_hat[None, :, :] * op.mask
    out = np.empty((len(obs_steps), modes.shape[0]), dtype=complex)
    amp = np.sqrt(2.0 * sigma) * np.sqrt(step) / (TAU / M) if n else 0.0
    for col, s in enumerate(obs_steps):
        if s == 0:
            out[col] = _extract_modes(state, modes, M)[0]
    for j in range(n):
        s_n = j * step
        s_np1 = (j + 1) * step
        state = _heun_step(state, efac, step, op.forward_transport,
                           rho.coeffs_at(s_n), rho.coeffs_at(s_np1))
        if not noise_off:
            root = np.sqrt(np.clip(op.grid(rho.coeffs_at(s_n)), 0.0, None))
            g = rng.standard_normal((M, M, 2))
            w1 = op.to_coeffs(root * g[:, :, 0])
            w2 = op.to_coeffs(root * g[:, :, 1])
            state = state - amp * 1j * ((op.k1 * w1 + op.k2 * w2)
                                        * op.mask)[None]
        for col, s in enumerate(obs_steps):
            if s == j + 1:
                out[col] = _extract_modes(state, modes, M)[0]
    times = np.array([s * step for s in obs_steps])
    return times, modes, out
