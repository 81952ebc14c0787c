"""Lognormal random fields with anisotropic Matérn covariance.

Samples of the Gaussian field are exact: the covariance is embedded on a
periodic grid a few times larger than the unit square, its eigenvalues are
obtained with one FFT, and a sample is one more FFT of scaled white noise.
The covariance hyperparameters (anisotropy ratio and rotation) may be drawn
afresh for every sample, in which case the eigenvalues are recomputed too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from .grid import GridFn, GridLevel

__all__ = [
    "CovarianceSpec",
    "HyperPrior",
    "FieldRealization",
    "EmbeddingError",
    "matern",
    "aniso_distance",
    "embedding_size",
    "generating_array",
    "embed_eigenvalues",
    "sample_field",
    "draw_hyper",
    "coarsen_realization",
    "realize",
    "stream",
    "write_realization",
    "read_realization",
]

TOL_EMBED = 1e-12
MAX_EMBED_FACTOR = 33


class EmbeddingError(RuntimeError):
    """The periodic embedding is not positive semidefinite; use a larger padding factor."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Matérn smoothness ``nu``, length scale ``lam``, anisotropy ratio ``eta``
    and rotation ``theta`` (radians)."""

    nu: float = 0.5
    lam: float = 0.25
    eta: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")

    @property
    def transform(self) -> np.ndarray:
        """The matrix ``sqrt(Lambda) R`` mapping offsets to scaled distances."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        scale = np.diag([1.0 / math.sqrt(self.eta * self.lam), 1.0 / math.sqrt(self.lam)])
        return scale @ rot


@dataclass(frozen=True)
class HyperPrior:
    """Uniform prior on ``eta`` and ``theta`` (radians) with fixed ``nu`` and ``lam``."""

    eta_range: tuple[float, float] = (1.0 / 16.0, 1.0 / 4.0)
    theta_range: tuple[float, float] = (-math.pi / 6.0, math.pi / 6.0)
    nu: float = 0.5
    lam: float = 0.25

    def __post_init__(self):
        for name, (lo, hi) in (("eta_range", self.eta_range), ("theta_range", self.theta_range)):
            if not lo <= hi:
                raise ValueError(f"{name} is empty: {(lo, hi)}")
        if not (0 < self.eta_range[0] and self.eta_range[1] <= 1):
            raise ValueError(f"eta_range must lie in (0, 1], got {self.eta_range}")

    @classmethod
    def from_degrees(cls, eta_range, theta_range_deg, nu=0.5, lam=0.25) -> HyperPrior:
        lo, hi = theta_range_deg
        return cls(tuple(eta_range), (math.radians(lo), math.radians(hi)), nu, lam)

    @classmethod
    def fixed(cls, spec: CovarianceSpec) -> HyperPrior:
        return cls((spec.eta, spec.eta), (spec.theta, spec.theta), spec.nu, spec.lam)


@dataclass
class FieldRealization:
    """Nodal values ``z`` of the Gaussian field on one grid; ``a = exp(z)``."""

    level: GridLevel
    z: GridFn
    hyper: CovarianceSpec
    seed: object = None

    def __post_init__(self):
        if self.z.level != self.level:
            raise ValueError("realization values do not match its grid")

    @classmethod
    def constant(cls, level: GridLevel, value: float = 0.0) -> FieldRealization:
        """Deterministic field ``z = value`` (``a = exp(value)``) for tests and baselines."""
        return cls(level, GridFn(level, np.full(level.shape, float(value))), CovarianceSpec())

    @property
    def a(self) -> np.ndarray:
        return np.exp(self.z.values)


def stream(seed: int, n: int) -> np.random.Generator:
    """Independent generator for sample ``n``; a pure function of ``(seed, n)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(n)]))


# --------------------------------------------------------------------------
# covariance
# --------------------------------------------------------------------------

_HALF_INTEGER = {
    0.5: lambda z: np.exp(-z),
    1.5: lambda z: (1.0 + z) * np.exp(-z),
    2.5: lambda z: (1.0 + z + z * z / 3.0) * np.exp(-z),
}


def matern(rho, nu: float, method: str = "auto"):
    """Matérn correlation ``2^(1-nu)/Gamma(nu) (2 sqrt(nu) rho)^nu K_nu(2 sqrt(nu) rho)``.

    Parameters
    ----------
    rho : float or ndarray
        Nonnegative (scaled) distances.
    nu : float
        Smoothness, ``nu > 0``.
    method : {"auto", "closed", "bessel"}
        ``"closed"`` uses the elementary forms available for ``nu`` in
        {1/2, 3/2, 5/2}; ``"bessel"`` always goes through ``K_nu``; ``"auto"``
        picks the closed form when there is one.

    Returns
    -------
    float or ndarray
        Correlation values, exactly 1 at ``rho = 0``.
    """
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    r = np.asarray(rho, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("distances must be nonnegative")
    z = 2.0 * math.sqrt(nu) * r
    closed = _HALF_INTEGER.get(float(nu))
    if method == "closed" and closed is None:
        raise ValueError(f"no closed form for nu = {nu}")
    if method != "bessel" and closed is not None:
        out = closed(z)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            # kve(nu, z) = K_nu(z) e^z keeps large arguments representable
            logpref = (1.0 - nu) * math.log(2.0) - special.gammaln(nu) + nu * np.log(z) - z
            out = np.exp(logpref) * special.kve(nu, z)
        out = np.where(z == 0.0, 1.0, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def aniso_distance(x1, x2, spec: CovarianceSpec):
    """``|| sqrt(Lambda) R (x1 - x2) ||_2``; the trailing axis holds the coordinates."""
    d = np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    t = d @ spec.transform.T
    out = np.sqrt(np.sum(t * t, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def _offset_distance(dx, dy, spec: CovarianceSpec):
    T = spec.transform
    u = T[0, 0] * dx + T[0, 1] * dy
    v = T[1, 0] * dx + T[1, 1] * dy
    return np.sqrt(u * u + v * v)


# --------------------------------------------------------------------------
# circulant embedding
# --------------------------------------------------------------------------


def embedding_size(p0: int, q0: int, nu: float) -> int:
    """Enlargement factor ``1 + 2 ceil(sqrt(nu) log2(max(2^p0, 2^q0)))`` of the sampling square."""
    if p0 < 1 or q0 < 1:
        raise ValueError("embedding exponents must be at least 1")
    x = math.sqrt(nu) * max(p0, q0)
    return 1 + 2 * math.ceil(x - 1e-12)


def generating_array(spec: CovarianceSpec, level: GridLevel, factor: int) -> np.ndarray:
    """First row of the nested block-circulant covariance on the extended torus.

    Offsets use the minimum-image convention.  The array is symmetrised under
    ``(k, l) -> (-k, -l)`` so the embedded matrix is symmetric also on the
    half-period lines, where the minimum image is ambiguous.
    """
    M, N = factor * 2**level.p, factor * 2**level.q
    k = np.arange(M)
    k = np.where(k <= M // 2, k, k - M) * level.dx
    l = np.arange(N)
    l = np.where(l <= N // 2, l, l - N) * level.dy
    c = matern(_offset_distance(k[:, None], l[None, :], spec), spec.nu)
    flipped = np.roll(c[::-1, ::-1], 1, axis=(0, 1))
    return 0.5 * (c + flipped)


def embed_eigenvalues(
    spec: CovarianceSpec, level: GridLevel, factor: int, tol: float = TOL_EMBED
) -> np.ndarray:
    """Eigenvalues of the embedded covariance (unnormalised 2-D DFT of the generating array).

    Negative eigenvalues no larger than ``tol * max`` in magnitude are clipped
    to zero; larger ones raise :class:`EmbeddingError`.
    """
    lam = np.fft.fft2(generating_array(spec, level, factor)).real
    lmax = lam.max()
    lmin = lam.min()
    if lmin < -tol * lmax:
        raise EmbeddingError(
            f"embedding with factor {factor} has eigenvalue {lmin:.3e} "
            f"(max {lmax:.3e}); increase the padding factor"
        )
    np.maximum(lam, 0.0, out=lam)
    return lam


def sample_field(
    eigs: np.ndarray,
    spec: CovarianceSpec,
    level: GridLevel,
    rng: np.random.Generator,
    seed=None,
    pair: bool = False,
):
    """Draw a field on ``level`` from the spectrum ``eigs``.

    The real and imaginary parts of one complex FFT are independent samples.
    By default only the real part is used; ``pair=True`` returns both.
    """
    M, N = eigs.shape
    if M < level.nx or N < level.ny or M % 2**level.p or N % 2**level.q:
        raise ValueError(f"spectrum of shape {eigs.shape} does not embed grid {level}")
    xi = rng.standard_normal((2, M, N))
    w = np.fft.fft2(np.sqrt(eigs / (M * N)) * (xi[0] + 1j * xi[1]))
    nx, ny = level.shape

    def wrap(part, tag):
        return FieldRealization(level, GridFn(level, part[:nx, :ny].copy()), spec, seed if tag is None else (seed, tag))

    if pair:
        return wrap(w.real, 0), wrap(w.imag, 1)
    return wrap(w.real, None)


def draw_hyper(prior: HyperPrior, rng: np.random.Generator) -> CovarianceSpec:
    eta = rng.uniform(*prior.eta_range) if prior.eta_range[0] < prior.eta_range[1] else prior.eta_range[0]
    theta = (
        rng.uniform(*prior.theta_range) if prior.theta_range[0] < prior.theta_range[1] else prior.theta_range[0]
    )
    return CovarianceSpec(nu=prior.nu, lam=prior.lam, eta=float(eta), theta=float(theta))


def realize(
    prior: HyperPrior,
    level: GridLevel,
    rng: np.random.Generator,
    base: tuple[int, int] | None = None,
    seed=None,
    max_factor: int = MAX_EMBED_FACTOR,
) -> FieldRealization:
    """Draw hyperparameters, then a field on ``level``.

    ``base`` gives the exponents that set the initial padding factor (defaults
    to the grid itself).  If that embedding is indefinite on ``level``, the
    factor grows by 2 until it is not, up to ``max_factor``.  A valid
    embedding reproduces the covariance exactly, so the padding used does not
    change the law of the field.
    """
    spec = draw_hyper(prior, rng)
    p0, q0 = base if base is not None else (level.p, level.q)
    factor = embedding_size(max(p0, 1), max(q0, 1), spec.nu)
    while True:
        try:
            eigs = embed_eigenvalues(spec, level, factor)
            break
        except EmbeddingError:
            if factor + 2 > max_factor:
                raise
            factor += 2
    return sample_field(eigs, spec, level, rng, seed=seed)


def coarsen_realization(f: FieldRealization, target: GridLevel) -> FieldRealization:
    """Restrict a realization to a nested coarser grid by injection."""
    dp = f.level.p - target.p
    dq = f.level.q - target.q
    if dp < 0 or dq < 0:
        raise ValueError(f"target {target} is finer than source {f.level}")
    if dp == dq == 0:
        return f
    z = f.z.values[:: 2**dp, :: 2**dq]
    return replace(f, level=target, z=GridFn(target, z.copy()))


# --------------------------------------------------------------------------
# text dump
# --------------------------------------------------------------------------


def write_realization(path, f: FieldRealization) -> None:
    """Write ``p q eta theta seed`` then the nodal values, one grid row (fixed i) per line."""
    with open(path, "w") as fh:
        fh.write(f"{f.level.p} {f.level.q} {f.hyper.eta!r} {f.hyper.theta!r} {f.seed}\n")
        np.savetxt(fh, f.z.values, fmt="%.17g")


def read_realization(path, nu: float = 0.5, lam: float = 0.25) -> FieldRealization:
    with open(path) as fh:
        head = fh.readline().split()
        values = np.loadtxt(fh, ndmin=2)
    level = GridLevel(int(head[0]), int(head[1]))
    spec = CovarianceSpec(nu=nu, lam=lam, eta=float(head[2]), theta=float(head[3]))
    seed = " ".join(head[4:]) or None
    return FieldRealization(level, GridFn(level, values), spec, seed)
