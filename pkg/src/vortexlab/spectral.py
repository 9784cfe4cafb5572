"""Fourier representation of scalar fields on the 2-torus [0, 2pi)^2.

Conventions, frozen for the whole package:
  - torus is [0, 2pi)^d with the (unnormalized) Lebesgue measure, so the
    uniform probability density is (2pi)^-d;
  - Fourier basis e_k(x) = exp(i k.x) with integer wave vectors k;
  - hat(f)(k) = integral of f(x) exp(-i k.x) dx, so that
    f(x) = (2pi)^-d sum_k hat(f)(k) e_k(x);
  - pairings <f, e_k> (integration of a distribution against e_k)
    therefore equal hat(f)(-k);
  - <k> = sqrt(1 + |k|^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TAU = 2.0 * np.pi

HERMITIAN_TOL = 1e-12


def wrap(points):
    """Reduce coordinates to [0, 2pi). Raises on non-finite input."""
    pts = np.asarray(points, dtype=float)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinate in torus point")
    return np.mod(pts, TAU)


def min_image(disp):
    """Reduce displacements to the fundamental cell (-pi, pi]^d."""
    d = np.asarray(disp, dtype=float)
    return d - TAU * np.floor(d / TAU + 0.5)


def bracket_sq(k):
    """<k>^2 = 1 + |k|^2 for integer wave vectors, elementwise over (..., d)."""
    k = np.asarray(k, dtype=float)
    return 1.0 + np.sum(k * k, axis=-1)


def wavenumbers(M):
    """Integer wavenumbers in FFT layout: 0, 1, ..., M/2-1, -M/2, ..., -1."""
    return (np.fft.fftfreq(M) * M).astype(np.int64)


def wave_grids(M):
    """k1, k2 integer grids (M, M) in FFT layout, indexing 'ij'."""
    k = wavenumbers(M)
    return np.meshgrid(k, k, indexing="ij")


def grid_points(M):
    """Grid nodes x_j = 2pi j / M as an (M, M, 2) array."""
    x = TAU * np.arange(M) / M
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    return np.stack([x1, x2], axis=-1)


def cell_volume(M, d=2):
    return (TAU / M) ** d


def _conjugate_reflection(coeffs):
    """Array C' with C'[k] = C[-k] in FFT index layout."""
    return np.roll(coeffs[::-1, ::-1], 1, axis=(0, 1))


def sobolev_norm_sq(ks, cs, alpha):
    """Sum over the supplied modes of <k>^(2 alpha) |c_k|^2.

    `cs` are pairings <f, e_k>; the caller owns the truncation radius of
    the mode set, the tail is never extrapolated.
    """
    ks = np.asarray(ks, dtype=float).reshape(-1, 2)
    cs = np.asarray(cs, dtype=complex).reshape(-1)
    if ks.shape[0] != cs.shape[0]:
        raise ValueError("mode and coefficient counts differ")
    w = bracket_sq(ks) ** float(alpha)
    return float(np.sum(w * np.abs(cs) ** 2))


class SpectralField:
    """Real scalar field on the torus stored as Fourier coefficients.

    coeffs[k] = hat(f)(k) in FFT index layout, shape (M, M), M even.
    """

    def __init__(self, coeffs, is_real=True, check=True):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.ndim != 2 or coeffs.shape[0] != coeffs.shape[1]:
            raise ValueError("coeffs must be a square (M, M) array")
        if coeffs.shape[0] % 2 != 0:
            raise ValueError("grid size M must be even")
        self.coeffs = coeffs
        self.M = coeffs.shape[0]
        self.d = 2
        self.is_real = bool(is_real)
        if check and self.is_real and not self.hermitian():
            raise ValueError("coefficients are not Hermitian-symmetric "
                             "but is_real is set")

    def hermitian(self, tol=HERMITIAN_TOL):
        ref = np.conj(_conjugate_reflection(self.coeffs))
        scale = max(float(np.max(np.abs(self.coeffs))), 1.0)
        return bool(np.max(np.abs(self.coeffs - ref)) <= tol * scale)

    @classmethod
    def zeros(cls, M):
        return cls(np.zeros((M, M), dtype=complex))

    @classmethod
    def uniform_density(cls, M):
        """The uniform probability density (2pi)^-2: hat(rho)(0) = 1."""
        c = np.zeros((M, M), dtype=complex)
        c[0, 0] = 1.0
        return cls(c)

    @classmethod
    def from_grid(cls, values, is_real=True):
        values = np.asarray(values)
        M = values.shape[0]
        coeffs = np.fft.fft2(values) * (TAU / M) ** 2
        return cls(coeffs, is_real=is_real, check=False)

    def to_grid(self):
        g = np.fft.ifft2(self.coeffs) * (self.M / TAU) ** 2
        return g.real if self.is_real else g

    def mode(self, k):
        """hat(f)(k) for a signed integer wave vector k."""
        k1, k2 = int(k[0]), int(k[1])
        half = self.M // 2
        if not (-half <= k1 < half and -half <= k2 < half):
            raise ValueError(f"wave vector {k} outside stored range")
        return complex(self.coeffs[k1 % self.M, k2 % self.M])

    def pairing(self, k):
        """<f, e_k> = hat(f)(-k)."""
        return self.mode((-int(k[0]), -int(k[1])))

    def pairings(self, kmax):
        """All pairings <f, e_k> with |k|_inf <= kmax, as (ks, cs)."""
        if kmax >= self.M // 2:
            raise ValueError("truncation radius exceeds stored modes")
        r = np.arange(-kmax, kmax + 1)
        k1, k2 = np.meshgrid(r, r, indexing="ij")
        ks = np.stack([k1.ravel(), k2.ravel()], axis=-1)
        cs = self.coeffs[(-ks[:, 0]) % self.M, (-ks[:, 1]) % self.M]
        return ks, cs

    def mass(self):
        """Integral of the field (the k = 0 coefficient)."""
        return float(self.coeffs[0, 0].real)

    def l2_norm_sq(self):
        """Integral of f^2 over the torus, by Parseval."""
        return float(np.sum(np.abs(self.coeffs) ** 2)) / TAU ** 2

    def sobolev_norm_sq(self, alpha, kmax=None):
        """Truncated H^alpha norm; default truncation |k|_inf <= M/3."""
        if kmax is None:
            kmax = self.M // 3
        ks, cs = self.pairings(kmax)
        return sobolev_norm_sq(ks, cs, alpha)

    def spectral_tail_fraction(self):
        """Fraction of l2 mass carried by modes with |k|_inf > M/3."""
        k1, k2 = wave_grids(self.M)
        outer = np.maximum(np.abs(k1), np.abs(k2)) > self.M // 3
        total = float(np.sum(np.abs(self.coeffs) ** 2))
        if total == 0.0:
            return 0.0
        return float(np.sum(np.abs(self.coeffs[outer]) ** 2)) / total

    def copy(self):
        return SpectralField(self.coeffs.copy(), is_real=self.is_real,
                             check=False)

    def to_dict(self):
        """spectral-v1 record; exact zero coefficients are omitted."""
        k1, k2 = wave_grids(self.M)
        nz = self.coeffs != 0
        order = np.lexsort((k2[nz], k1[nz]))
        rows = [
            [int(a), int(b), float(c.real), float(c.imag)]
            for a, b, c in zip(k1[nz][order], k2[nz][order],
                               self.coeffs[nz][order])
        ]
        return {"schema": "spectral-v1", "d": 2, "M": self.M,
                "is_real": self.is_real, "coeffs": rows}

    @classmethod
    def from_dict(cls, rec):
        if rec.get("schema") != "spectral-v1":
            raise ValueError("not a spectral-v1 record")
        M = int(rec["M"])
        c = np.zeros((M, M), dtype=complex)
        for k1, k2, re, im in rec["coeffs"]:
            c[int(k1) % M, int(k2) % M] = complex(re, im)
        return cls(c, is_real=bool(rec["is_real"]))


@dataclass(frozen=True)
class TestFunction:
    """Trigonometric polynomial sum_k c_k exp(i k.x) with Hermitian c.

    Finite mode support; evaluates to a real number at every torus point.
    """

    modes: np.ndarray    # (m, 2) signed integers
    coeffs: np.ndarray   # (m,) complex

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.int64).reshape(-1, 2)
        coeffs = np.asarray(self.coeffs, dtype=complex).reshape(-1)
        if modes.shape[0] != coeffs.shape[0]:
            raise ValueError("mode and coefficient counts differ")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("non-finite coefficient")
        lookup = {(int(a), int(b)): c for (a, b), c in zip(modes, coeffs)}
        if len(lookup) != len(coeffs):
            raise ValueError("duplicate modes")
        scale = max(float(np.max(np.abs(coeffs), initial=0.0)), 1.0)
        for (a, b), c in lookup.items():
            cc = lookup.get((-a, -b))
            if cc is None or abs(np.conj(cc) - c) > HERMITIAN_TOL * scale:
                raise ValueError("coefficients are not Hermitian-symmetric; "
                                 "function would not be real-valued")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def from_pairs(cls, pairs):
        """Build from {k: c_k}; missing conjugate partners are filled in."""
        full = {}
        for k, c in dict(pairs).items():
            k = (int(k[0]), int(k[1]))
            full[k] = complex(c)
            full.setdefault((-k[0], -k[1]), np.conj(complex(c)))
        modes = np.array(sorted(full), dtype=np.int64)
        coeffs = np.array([full[tuple(k)] for k in modes])
        return cls(modes, coeffs)

    @classmethod
    def constant(cls, value):
        return cls.from_pairs({(0, 0): float(value)})

    @classmethod
    def cosine(cls, k, amplitude=1.0):
        """amplitude * cos(k.x)."""
        a = float(amplitude) / 2.0
        return cls.from_pairs({tuple(k): a, (-k[0], -k[1]): a})

    @classmethod
    def sine(cls, k, amplitude=1.0):
        """amplitude * sin(k.x)."""
        a = float(amplitude) / 2.0
        return cls.from_pairs({tuple(k): -1j * a, (-k[0], -k[1]): 1j * a})

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        phase = x @ self.modes.T.astype(float)          # (..., m)
        return np.real(np.exp(1j * phase) @ self.coeffs)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        phase = x @ self.modes.T.astype(float)
        e = np.exp(1j * phase)
        gx = np.real(e @ (1j * self.modes[:, 0] * self.coeffs))
        gy = np.real(e @ (1j * self.modes[:, 1] * self.coeffs))
        return np.stack([gx, gy], axis=-1)

    def kmax(self):
        return int(np.max(np.abs(self.modes), initial=0))

    def to_field(self, M):
        """Embed as a SpectralField: hat(phi)(k) = (2pi)^2 c_k."""
        if self.kmax() >= M // 2:
            raise ValueError("grid too small for the mode support")
        c = np.zeros((M, M), dtype=complex)
        c[self.modes[:, 0] % M, self.modes[:, 1] % M] = TAU ** 2 * self.coeffs
        return SpectralField(c)

    def pair_density(self, rho: SpectralField):
        """<phi, rho> = sum_k c_k hat(rho)(-k), exact for stored modes."""
        vals = rho.coeffs[(-self.modes[:, 0]) % rho.M,
                          (-self.modes[:, 1]) % rho.M]
        return float(np.real(np.sum(self.coeffs * vals)))

    def label(self):
        parts = []
        for (a, b), c in zip(self.modes, self.coeffs):
            parts.append(f"({a},{b}):{c.real:+.6g}{c.imag:+.6g}j")
        return " ".join(parts)
