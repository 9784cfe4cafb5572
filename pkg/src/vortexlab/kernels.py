"""Interaction kernels on the 2-torus.

Variants: zero, bounded trigonometric-polynomial vector fields, the
periodic Biot-Savart kernel K = (-d2 G, d1 G) with G the mean-zero Green
function of the Laplacian, and a magnitude-capped mollification wrapper
for singular kernels.

The periodic Biot-Savart kernel is evaluated as the free-space term
(1/2pi) x_perp / |x|^2 plus a smooth periodization correction. The
correction comes from an exponentially convergent image sum: with

    G1(x, y) = (1/4pi) log(2 (cosh y - cos x)),

whose Laplacian is a row of Dirac masses along the x-axis lattice, the
gradient of the doubly periodic G is the sum of gradients of G1 over
image rows y - 2pi m, with affine counterterms fixed by periodicity.
Half-angle forms keep the evaluation stable near the singularity.
"""

from __future__ import annotations

import numpy as np

from .spectral import TAU, SpectralField, TestFunction, min_image, wave_grids


class SingularKernelError(ValueError):
    """Evaluation requested at the singular point of an unmollified kernel."""


class Kernel:
    """Base interaction kernel. Immutable after construction."""

    antisymmetric = False
    divergence_free = False
    bounded = True
    singular = False

    def __call__(self, x):
        """Velocity at displacements x, shape (..., 2) -> (..., 2)."""
        raise NotImplementedError

    def spectral_coeffs(self, M):
        """hat(K)(k) on the (M, M) FFT lattice, as a (2, M, M) array."""
        raise NotImplementedError

    def describe(self):
        raise NotImplementedError


class ZeroKernel(Kernel):
    antisymmetric = True
    divergence_free = True

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape)

    def spectral_coeffs(self, M):
        return np.zeros((2, M, M), dtype=complex)

    def describe(self):
        return {"kernel": "zero"}


class BoundedFourierKernel(Kernel):
    """K = (phi1, phi2) with trigonometric-polynomial components."""

    def __init__(self, comp1: TestFunction, comp2: TestFunction):
        self.components = (comp1, comp2)
        self.antisymmetric = self._check_antisymmetric()
        self.divergence_free = self._check_divergence_free()

    def _check_antisymmetric(self):
        for comp in self.components:
            lookup = {tuple(k): c for k, c in zip(comp.modes, comp.coeffs)}
            for k, c in lookup.items():
                if abs(lookup.get((-k[0], -k[1]), 0.0) + c) > 1e-12:
                    return False
        return True

    def _check_divergence_free(self):
        # div K has mode coefficients i (k1 c1_k + k2 c2_k)
        terms = {}
        for axis, comp in enumerate(self.components):
            for k, c in zip(comp.modes, comp.coeffs):
                key = (int(k[0]), int(k[1]))
                terms[key] = terms.get(key, 0.0) + k[axis] * c
        return all(abs(v) <= 1e-14 for v in terms.values())

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([self.components[0](x), self.components[1](x)],
                        axis=-1)

    def spectral_coeffs(self, M):
        return np.stack([c.to_field(M).coeffs for c in self.components])

    def kernel_mode_arrays(self):
        """Union mode set and per-component coefficients, for pair sums."""
        keys = sorted({tuple(k) for c in self.components for k in c.modes})
        ks = np.array(keys, dtype=np.int64)
        cs = np.zeros((2, len(keys)), dtype=complex)
        for axis, comp in enumerate(self.components):
            lookup = {tuple(k): c for k, c in zip(comp.modes, comp.coeffs)}
            for row, key in enumerate(keys):
                cs[axis, row] = lookup.get(key, 0.0)
        return ks, cs

    def value_at_zero(self):
        return self(np.zeros(2))

    def describe(self):
        return {"kernel": "bounded-fourier",
                "components": [c.label() for c in self.components]}


def swap_sine_kernel(amplitude=1.0):
    """K(x) = amplitude * (sin x2, sin x1): odd, divergence-free, bounded."""
    return BoundedFourierKernel(TestFunction.sine((0, 1), amplitude),
                                TestFunction.sine((1, 0), amplitude))


def biot_savart_coeff(k):
    """hat(K)(k) = -i k_perp / |k|^2 with k_perp = (-k2, k1); 0 at k = 0."""
    k = np.asarray(k)
    if k.shape[-1] != 2:
        raise ValueError("Biot-Savart kernel is defined for d = 2 only")
    k1 = int(k[0])
    k2 = int(k[1])
    n2 = k1 * k1 + k2 * k2
    if n2 == 0:
        return np.zeros(2, dtype=complex)
    return np.array([1j * k2 / n2, -1j * k1 / n2])


def _grad_g1(x, y):
    """Gradient of G1(x,y) = (1/4pi) log(2(cosh y - cos x)).

    Uses cosh y - cos x = 2 (sinh^2(y/2) + sin^2(x/2)) to stay accurate
    near the singularity.
    """
    sx = np.sin(0.5 * x)
    sy = np.sinh(0.5 * y)
    den = sx * sx + sy * sy
    d1 = sx * np.cos(0.5 * x) / den / (4.0 * np.pi)
    d2 = sy * np.cosh(0.5 * y) / den / (4.0 * np.pi)
    return d1, d2


_IMAGE_ROWS = 6  # tail of the image sum is below 1e-15 for |x2| <= pi


def _biot_savart_exact(x1, x2):
    """Periodic Biot-Savart velocity for displacements in (-pi, pi]^2.

    Image-row sum; each row m contributes grad G1(x1, x2 - 2pi m) with the
    asymptotic value of d2 G1 subtracted, and the linear term -x2/(4pi^2)
    restores periodicity of d2 G.
    """
    d1, d2 = _grad_g1(x1, x2)
    s1 = d1
    s2 = d2
    quarter = 1.0 / (4.0 * np.pi)
    for m in range(1, _IMAGE_ROWS + 1):
        a1, a2 = _grad_g1(x1, x2 - TAU * m)
        b1, b2 = _grad_g1(x1, x2 + TAU * m)
        s1 = s1 + a1 + b1
        s2 = s2 + (a2 + quarter) + (b2 - quarter)
    d2G = s2 - x2 / (4.0 * np.pi ** 2)
    return -d2G, s1


def _free_velocity(x1, x2):
    """Free-space leading term (1/2pi) x_perp / |x|^2."""
    r2 = x1 * x1 + x2 * x2
    c = 1.0 / (TAU * r2)
    return -c * x2, c * x1


class BiotSavartKernel(Kernel):
    """Periodic Biot-Savart law K = grad_perp G on the 2-torus.

    Real-space evaluation = exact free-space term + smooth correction,
    the correction tabulated once on a padded cell-centered grid and
    interpolated bicubically (tensor 4-point Lagrange).
    """

    antisymmetric = True
    divergence_free = True
    bounded = False
    singular = True

    _PAD = 2

    def __init__(self, table_size=512):
        self.table_size = int(table_size)
        self._table = None  # built lazily; immutable afterwards

    def correction_table(self):
        """(T+4, T+4, 2) samples of K0 = K - free on cell centers."""
        if self._table is None:
            T = self.table_size
            h = TAU / T
            idx = np.arange(T + 2 * self._PAD)
            c = -np.pi + (idx - self._PAD + 0.5) * h
            X1, X2 = np.meshgrid(c, c, indexing="ij")
            k1, k2 = _biot_savart_exact(X1, X2)
            f1, f2 = _free_velocity(X1, X2)
            self._table = np.stack([k1 - f1, k2 - f2], axis=-1)
            self._table.setflags(write=False)
        return self._table

    def exact(self, x):
        """Reference evaluation from the image sum (no interpolation)."""
        x = min_image(x)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        if np.any(r2 == 0.0):
            raise SingularKernelError("Biot-Savart kernel at x = 0")
        k1, k2 = _biot_savart_exact(x[..., 0], x[..., 1])
        return np.stack([k1, k2], axis=-1)

    def correction(self, x):
        """Smooth periodization correction K0 at displacements x."""
        x = min_image(np.asarray(x, dtype=float))
        flat = x.reshape(-1, 2)
        table = self.correction_table()
        h = TAU / self.table_size
        u = (flat + np.pi) / h - 0.5 + self._PAD
        i0 = np.floor(u).astype(np.int64)
        t = u - i0
        wx = _lagrange_weights(t[:, 0])
        wy = _lagrange_weights(t[:, 1])
        out = np.zeros((flat.shape[0], 2))
        for a in range(4):
            rows = i0[:, 0] + a - 1
            acc = np.zeros((flat.shape[0], 2))
            for b in range(4):
                acc += wy[b][:, None] * table[rows, i0[:, 1] + b - 1]
            out += wx[a][:, None] * acc
        return out.reshape(x.shape)

    def __call__(self, x):
        x = min_image(np.asarray(x, dtype=float))
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        if np.any(r2 == 0.0):
            raise SingularKernelError("Biot-Savart kernel at x = 0")
        f1, f2 = _free_velocity(x[..., 0], x[..., 1])
        return np.stack([f1, f2], axis=-1) + self.correction(x)

    def spectral_coeffs(self, M):
        k1, k2 = wave_grids(M)
        n2 = k1 ** 2 + k2 ** 2
        safe = np.where(n2 == 0, 1, n2)
        c1 = 1j * k2 / safe
        c2 = -1j * k1 / safe
        c1[0, 0] = 0.0
        c2[0, 0] = 0.0
        return np.stack([c1, c2])

    def describe(self):
        return {"kernel": "biot-savart", "table_size": self.table_size}


def _lagrange_weights(t):
    """4-point Lagrange weights on nodes -1, 0, 1, 2 at parameter t."""
    return (
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    )


class MollifiedKernel(Kernel):
    """Magnitude cap inside radius delta, preserving antisymmetry.

    K_delta(x) = (|x|/delta) K(delta x/|x|) for 0 < |x| < delta, the base
    kernel elsewhere, and 0 at x = 0. Thus |K_delta(x)| <= |K(delta x/|x|)|.
    """

    def __init__(self, base: Kernel, delta):
        if delta <= 0:
            raise ValueError("mollification radius must be positive")
        self.base = base
        self.delta = float(delta)
        self.antisymmetric = base.antisymmetric
        self.divergence_free = False
        self.bounded = True
        self.singular = False

    def __call__(self, x):
        x = min_image(np.asarray(x, dtype=float))
        r = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
        inside = r < self.delta
        if not np.any(inside):
            return self.base(x)
        zero = r == 0.0
        r_safe = np.where(zero, 1.0, r)
        scale = np.where(inside, self.delta / r_safe, 1.0)
        # zero displacements get a dummy query; their output is masked to 0
        query = np.where(zero[..., None], self.delta, x * scale[..., None])
        vals = self.base(query) / scale[..., None]
        return np.where(zero[..., None], 0.0, vals)

    def spectral_coeffs(self, M):
        raise NotImplementedError(
            "mollified kernels are real-space objects; spectral convolution "
            "is unsupported")

    def describe(self):
        d = dict(self.base.describe())
        d["delta"] = self.delta
        return d


def mollify(kernel: Kernel, delta) -> MollifiedKernel:
    return MollifiedKernel(kernel, delta)


def default_delta(N):
    """Mollification radius for an N-particle run: min(1e-3, 1/N)."""
    return min(1e-3, 1.0 / N)


def convolve_velocity(kernel: Kernel, rho: SpectralField):
    """K * rho as two SpectralFields, per-mode product hat(K) hat(rho)."""
    if isinstance(kernel, MollifiedKernel):
        raise NotImplementedError(
            "mollified kernels have no spectral form; convolve the base")
    kh = kernel.spectral_coeffs(rho.M)
    u1 = SpectralField(kh[0] * rho.coeffs, check=False)
    u2 = SpectralField(kh[1] * rho.coeffs, check=False)
    return u1, u2
