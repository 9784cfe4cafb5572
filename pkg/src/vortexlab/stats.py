"""Everything measured: fluctuation extraction, Gaussianity and variance
tests, 1-D and sliced circular Wasserstein distances, exponential-moment
estimators with U-statistic cancellations, and the i.i.d. negative-Sobolev
scaling baselines.

All estimators are deterministic functions of (inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .kernels import BoundedFourierKernel, Kernel, ZeroKernel
from .particles import replica_stream, sample_iid
from .spectral import TAU, SpectralField, TestFunction, bracket_sq

Z_99 = float(sps.norm.ppf(0.995))   # two-sided 1% bands


# ---------------------------------------------------------------------------
# fluctuation extraction


def fluct_modes(positions, rho_t: SpectralField, modes):
    """hat(eta^N)(k) = sqrt(N) (hat(mu_N)(k) - hat(rho_t)(k)).

    positions (..., N, 2); the k = 0 entry vanishes identically because
    both measures have unit mass.
    """
    from .particles import empirical_modes
    pos = np.asarray(positions, dtype=float)
    N = pos.shape[-2]
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
    mu = empirical_modes(pos, modes)
    rho = np.array([rho_t.mode(k) for k in modes])
    return np.sqrt(N) * (mu - rho)


def fluct_scalar(positions, rho_t: SpectralField, phi: TestFunction):
    """Y_phi = sqrt(N) (<phi, mu_N> - <phi, rho_t>), a real scalar."""
    eta = fluct_modes(positions, rho_t, phi.modes)
    return np.real(np.conj(eta) @ phi.coeffs)


def fluct_scalar_from_modes(mode_values, modes, rho_modes, phi: TestFunction,
                            N):
    """Same as fluct_scalar but from recorded hat(mu_N)(k) ensembles.

    mode_values (..., m) complex over the mode list `modes`; rho_modes
    (m,) are hat(rho_t)(k) on the same list.
    """
    modes = np.asarray(modes).reshape(-1, 2)
    lookup = {tuple(k): i for i, k in enumerate(modes)}
    out = 0.0
    for k, c in zip(phi.modes, phi.coeffs):
        key = (int(k[0]), int(k[1]))
        if key in lookup:
            col = lookup[key]
            eta = np.sqrt(N) * (mode_values[..., col] - rho_modes[col])
        else:
            col = lookup[(-key[0], -key[1])]
            eta = np.conj(np.sqrt(N)
                          * (mode_values[..., col] - rho_modes[col]))
        out = out + c * np.conj(eta)
    return np.real(out)


# ---------------------------------------------------------------------------
# scalar-sample statistics


@dataclass
class VarianceReport:
    mean: float
    var: float
    ci_low: float
    ci_high: float
    half_width: float
    bootstrap_low: float
    bootstrap_high: float
    n: int
    level: float

    def to_dict(self):
        return dict(estimate=self.var, mean=self.mean, ci_low=self.ci_low,
                    ci_high=self.ci_high, half_width=self.half_width,
                    bootstrap_low=self.bootstrap_low,
                    bootstrap_high=self.bootstrap_high, M=self.n,
                    level=self.level)


def variance_ci(samples, level=0.99, n_boot=10_000, seed=0):
    """Unbiased variance with chi-square and bootstrap intervals."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite sample")
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    if var == 0.0:
        return VarianceReport(mean, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, n, level)
    a = (1.0 - level) / 2.0
    lo = (n - 1) * var / sps.chi2.ppf(1.0 - a, n - 1)
    hi = (n - 1) * var / sps.chi2.ppf(a, n - 1)
    rng = replica_stream(seed, 0)
    idx = rng.integers(0, n, size=(n_boot, n))
    bvar = np.var(x[idx], axis=1, ddof=1)
    blo, bhi = np.quantile(bvar, [a, 1.0 - a])
    return VarianceReport(mean, var, float(lo), float(hi),
                          float((hi - lo) / 2), float(blo), float(bhi),
                          n, level)


_KS_CAL_CACHE = {}


def _ks_stat_estimated(x):
    """KS distance to the normal with estimated mean and variance."""
    n = x.size
    z = np.sort((x - x.mean()) / x.std(ddof=1))
    cdf = sps.norm.cdf(z)
    up = np.max(np.arange(1, n + 1) / n - cdf)
    dn = np.max(cdf - np.arange(0, n) / n)
    return float(max(up, dn))


def ks_threshold(n, level=0.01, n_sim=10_000, seed=2024):
    """Monte Carlo null quantile of the estimated-parameter KS statistic.

    Estimating mean/variance shrinks the null distribution (Lilliefors
    effect), so the classical KS table would be far too lenient.
    """
    key = (n, level, n_sim)
    if key not in _KS_CAL_CACHE:
        rng = replica_stream(seed, n)
        draws = rng.standard_normal((n_sim, n))
        stats = np.empty(n_sim)
        for i in range(n_sim):
            stats[i] = _ks_stat_estimated(draws[i])
        _KS_CAL_CACHE[key] = float(np.quantile(stats, 1.0 - level))
    return _KS_CAL_CACHE[key]


@dataclass
class NormalityReport:
    n: int
    skewness: float
    skew_band: float
    excess_kurtosis: float
    kurt_band: float
    ks_stat: float
    ks_threshold: float
    passed: bool
    reason: str

    def to_dict(self):
        return dict(M=self.n, skewness=self.skewness,
                    skew_band=self.skew_band,
                    excess_kurtosis=self.excess_kurtosis,
                    kurt_band=self.kurt_band, ks_stat=self.ks_stat,
                    ks_threshold=self.ks_threshold, passed=self.passed,
                    reason=self.reason)


def normality_test(samples, level=0.01, n_sim=10_000) -> NormalityReport:
    """Skewness, excess kurtosis, and calibrated KS distance, each at the
    given two-sided level; pass requires all three inside their bands."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 200:
        raise ValueError("normality test needs at least 200 samples")
    sd = x.std(ddof=1)
    if sd == 0.0:
        return NormalityReport(n, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, False,
                               "degenerate (all samples equal)")
    z = (x - x.mean()) / sd
    skew = float(np.mean(z ** 3))
    kurt = float(np.mean(z ** 4) - 3.0)
    zq = float(sps.norm.ppf(1.0 - level / 2))
    skew_band = zq * np.sqrt(6.0 / n)
    kurt_band = zq * np.sqrt(24.0 / n)
    ks = _ks_stat_estimated(x)
    thr = ks_threshold(n, level, n_sim)
    checks = [abs(skew) <= skew_band, abs(kurt) <= kurt_band, ks <= thr]
    reasons = []
    if not checks[0]:
        reasons.append(f"skewness {skew:.3f} outside ±{skew_band:.3f}")
    if not checks[1]:
        reasons.append(f"excess kurtosis {kurt:.3f} outside ±{kurt_band:.3f}")
    if not checks[2]:
        reasons.append(f"KS {ks:.4f} above {thr:.4f}")
    return NormalityReport(n, skew, skew_band, kurt, kurt_band, ks, thr,
                           all(checks), "; ".join(reasons) or "ok")


# ---------------------------------------------------------------------------
# Wasserstein distances


def w1_two_sample(a, b, seed=0):
    """W1 between empirical measures; order-statistics formula.

    Unequal sizes are resampled (with replacement, seeded) to the smaller
    size, recorded via the seed argument.
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size != b.size:
        rng = replica_stream(seed, 0)
        m = min(a.size, b.size)
        if a.size > m:
            a = np.sort(rng.choice(a, size=m, replace=True))
        if b.size > m:
            b = np.sort(rng.choice(b, size=m, replace=True))
    return float(np.mean(np.abs(a - b)))


def w1_vs_quantile(samples, quantile_fn, n_grid=10_000):
    """W1 against an analytic law via its quantile function."""
    x = np.sort(np.asarray(samples, dtype=float))
    u = (np.arange(n_grid) + 0.5) / n_grid
    idx = np.minimum((u * x.size).astype(int), x.size - 1)
    return float(np.mean(np.abs(x[idx] - quantile_fn(u))))


def w1_vs_normal(samples, mean, var, n_grid=10_000):
    sd = np.sqrt(var)
    return w1_vs_quantile(samples, lambda u: mean + sd * sps.norm.ppf(u),
                          n_grid)


def dbl_gaussian(samples, mean, var):
    """Upper bound for d_BL against N(mean, var): the scalar W1 distance."""
    if var <= 0:
        raise ValueError("target variance must be positive")
    return w1_vs_normal(samples, mean, var)


def w1_circular(samples, cdf_grid, grid_edges):
    """W1 on the circle between an empirical sample and a reference law.

    cdf_grid are reference-CDF values at grid_edges (ascending, spanning
    [0, 2pi]). The circular distance is min over couplings of the origin:
    integral of |F_emp - F_ref - c| with c the weighted median level.
    """
    x = np.mod(np.asarray(samples, dtype=float), TAU)
    n = x.size
    femp = np.searchsorted(np.sort(x), grid_edges, side="right") / n
    d = femp - cdf_grid
    c = np.median(d)
    w = np.diff(grid_edges, append=grid_edges[0] + TAU)
    return float(np.sum(np.abs(d - c) * w))


def _direction_pushforward_cdf(rho_t: SpectralField, direction, n_bins=4096):
    """CDF of (u . x mod 2pi) under the density, by grid quadrature."""
    g = rho_t.to_grid()
    M = rho_t.M
    x = TAU * np.arange(M) / M
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    theta = np.mod(direction[0] * x1 + direction[1] * x2, TAU)
    w = g.ravel() * (TAU / M) ** 2
    edges = TAU * np.arange(n_bins + 1) / n_bins
    hist, _ = np.histogram(theta.ravel(), bins=edges, weights=w)
    cdf = np.cumsum(hist)
    cdf /= cdf[-1]
    return edges[1:], cdf


INTEGER_DIRECTIONS = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2)]


def sliced_marginal_w1(points, rho_t: SpectralField, n_projections=4,
                       seed=0):
    """Average circular W1 of integer-direction projections of the sample
    against the matching pushforward of the density.

    Directions are integer vectors (the only linear functionals that
    descend to the torus), drawn without replacement from a fixed list.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rng = replica_stream(seed, 1)
    count = min(n_projections, len(INTEGER_DIRECTIONS))
    rows = rng.permutation(len(INTEGER_DIRECTIONS))[:count]
    total = 0.0
    for row in rows:
        u = INTEGER_DIRECTIONS[row]
        theta = np.mod(u[0] * pts[:, 0] + u[1] * pts[:, 1], TAU)
        edges, cdf = _direction_pushforward_cdf(rho_t, u)
        total += w1_circular(theta, cdf, edges)
    return total / count


# ---------------------------------------------------------------------------
# exponential-moment estimators (U-statistic cancellations)


@dataclass(frozen=True)
class CancellationPair:
    """phi2(x, y) = a Re[(e_k(x) - <e_k, rho>)(e_-k(y) - <e_-k, rho>)].

    Both marginal cancellations hold by construction, and
    <phi2, mu x mu> = a |<e_k, mu> - <e_k, rho>|^2 including the diagonal.
    """

    k: tuple
    amplitude: float

    def pairing(self, positions, rho: SpectralField):
        pos = np.asarray(positions, dtype=float)
        k = np.asarray(self.k, dtype=float)
        mean = np.mean(np.exp(1j * (pos @ k)), axis=-1)
        target = np.conj(rho.mode(self.k))
        return self.amplitude * np.abs(mean - target) ** 2

    def sup_norm(self, rho):
        return abs(self.amplitude) * (1 + abs(rho.mode(self.k))) ** 2


@dataclass(frozen=True)
class ConstantPair:
    """phi2 = a, violating every cancellation: the negative control."""

    amplitude: float

    def pairing(self, positions, rho):
        pos = np.asarray(positions, dtype=float)
        return np.full(pos.shape[:-2], self.amplitude)

    def sup_norm(self, rho):
        return abs(self.amplitude)


@dataclass
class ExpIntegralResult:
    estimate: float
    ci_low: float
    ci_high: float
    M: int
    N: int
    heavy_tail: bool

    def to_dict(self):
        return dict(estimate=self.estimate, ci_low=self.ci_low,
                    ci_high=self.ci_high, M=self.M, N=self.N,
                    flags={"heavy_tail": self.heavy_tail})


def _exp_moment(phi2, rho, N, M, seed, squared, level=0.99):
    if N < 2:
        raise ValueError("the exponential-moment regime needs N >= 2")
    rng = replica_stream(seed, N)
    pts = sample_iid(rho, M * N, rng).reshape(M, N, 2)
    u = phi2.pairing(pts, rho)
    if squared:
        u = np.abs(u) ** 2
    z = np.exp(N * u)
    m = float(z.mean())
    se = float(z.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    zq = float(sps.norm.ppf(1 - (1 - level) / 2))
    if se == 0.0 or m == 0.0:
        lo = hi = m
    else:
        lo = m * np.exp(-zq * se / m)
        hi = m * np.exp(zq * se / m)
    top = np.sort(z)[-max(1, M // 100):]
    heavy = float(top.sum()) > 0.5 * float(z.sum())
    return ExpIntegralResult(m, lo, hi, M, N, heavy)


def exp_integral_jw(phi2, rho, N, M, seed=0, level=0.99):
    """Monte Carlo E exp(N <phi2, mu_N x mu_N>) under the tensorized law.

    Bounded uniformly in N when phi2 carries both marginal cancellations;
    the delta-method CI on the log guards the heavy-tailed integrand.
    """
    return _exp_moment(phi2, rho, N, M, seed, squared=False, level=level)


def exp_integral_us(phi2, rho, N, M, seed=0, level=0.99):
    """Monte Carlo E exp(N |<phi2, mu_N x mu_N>|^2); needs only the joint
    cancellation integral(rho x rho phi2) = 0."""
    return _exp_moment(phi2, rho, N, M, seed, squared=True, level=level)


def trend_significance(values, ses, xs=None):
    """Weighted least-squares slope against log N with its z-score.

    Returns (slope, slope_se, z); |z| below the normal quantile at the
    chosen level means no significant monotone trend.
    """
    y = np.asarray(values, dtype=float)
    s = np.maximum(np.asarray(ses, dtype=float), 1e-300)
    x = np.log(np.asarray(xs if xs is not None else
                          np.arange(1, y.size + 1), dtype=float))
    w = 1.0 / s ** 2
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    slope_se = np.sqrt(1.0 / sxx)
    return slope, slope_se, slope / slope_se if slope_se > 0 else np.inf


# ---------------------------------------------------------------------------
# i.i.d. scaling baselines


def _mode_or_zero(rho: SpectralField, k):
    """hat(rho)(k), zero-extended beyond the stored grid.

    Exact for the band-limited analytic densities these baselines use.
    """
    half = rho.M // 2
    if -half <= k[0] < half and -half <= k[1] < half:
        return rho.mode(k)
    return 0.0


def hminus_exact_iid(rho: SpectralField, alpha, kmax):
    """N E||mu_N - rho||^2_{H^-alpha} for i.i.d. samples, exact lattice sum:
    sum over |k|_inf <= kmax of <k>^(-2 alpha) (1 - |<e_k, rho>|^2)."""
    if alpha <= 1.0:
        raise ValueError("need alpha > d/2 = 1 for a finite weight sum")
    r = np.arange(-kmax, kmax + 1)
    k1, k2 = np.meshgrid(r, r, indexing="ij")
    ks = np.stack([k1.ravel(), k2.ravel()], axis=-1)
    w = bracket_sq(ks) ** (-float(alpha))
    p = np.array([abs(_mode_or_zero(rho, k)) ** 2 for k in ks])
    return float(np.sum(w * (1.0 - p)))


def hminus_mc(rho: SpectralField, alpha, kmax, N, M, seed=0):
    """Monte Carlo N E||mu_N - rho||^2_{H^-alpha} over M i.i.d. replicas."""
    if alpha <= 1.0:
        raise ValueError("need alpha > d/2 = 1 for a finite weight sum")
    rng = replica_stream(seed, N)
    r = np.arange(-kmax, kmax + 1)
    w = (1.0 + r[:, None] ** 2 + r[None, :] ** 2) ** (-float(alpha))
    rho_hat = np.array([[_mode_or_zero(rho, (a, b)) for b in r] for a in r])
    vals = np.empty(M)
    for rep in range(M):
        pts = sample_iid(rho, N, rng)
        p1 = np.exp(-1j * np.outer(pts[:, 0], r))
        p2 = np.exp(-1j * np.outer(pts[:, 1], r))
        mu = (p1.T @ p2) / N
        vals[rep] = np.sum(w * np.abs(mu - rho_hat) ** 2)
    vals *= N
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(M))


def cross_term_mc(kernel: Kernel, phi: TestFunction, rho: SpectralField,
                  N, M, seed=0):
    """Monte Carlo N E|<phi K*(mu_N - rho), mu_N - rho>| for i.i.d. data.

    The pairing is evaluated spectrally (exact for trigonometric
    kernels): V_c = (2pi)^-2 sum_q hat(K_c)(q) D(q) conj(D(q + p))-sums
    with D = hat(mu_N) - hat(rho), expanded over phi's modes p.
    """
    if isinstance(kernel, ZeroKernel):
        return 0.0, 0.0
    if not isinstance(kernel, BoundedFourierKernel):
        raise ValueError("cross-term estimator needs a bounded "
                         "trigonometric kernel")
    ks, cs = kernel.kernel_mode_arrays()
    rng = replica_stream(seed, N)
    need = {tuple(q) for q in ks}
    for q in ks:
        for p in phi.modes:
            need.add((int(q[0] + p[0]), int(q[1] + p[1])))
    need = sorted(need)
    col = {k: i for i, k in enumerate(need)}
    karr = np.array(need, dtype=float)
    rho_hat = np.array([rho.mode(k) for k in need])
    vals = np.empty(M)
    for rep in range(M):
        pts = sample_iid(rho, N, rng)
        ph = np.exp(-1j * (pts @ karr.T))
        d = ph.mean(axis=0) - rho_hat
        v = np.zeros(2, dtype=complex)
        for row, q in enumerate(map(tuple, ks)):
            # <phi e_q, mu - rho> = sum_p c_p conj(D(p + q));
            # the (2pi)^2 of hat(K) cancels the synthesis prefactor
            inner = 0.0
            for p, c in zip(phi.modes, phi.coeffs):
                inner = inner + c * np.conj(
                    d[col[(int(p[0] + q[0]), int(p[1] + q[1]))]])
            for ccomp in range(2):
                if cs[ccomp, row] != 0:
                    v[ccomp] += cs[ccomp, row] * d[col[q]] * inner
        vals[rep] = np.sqrt(np.real(v @ np.conj(v)))
    vals *= N
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(M))
