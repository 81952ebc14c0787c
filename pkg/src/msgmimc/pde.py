"""Finite-difference discretisation of ``-div(a grad u) = h`` with ``u = 0`` on the boundary.

Every grid of the hierarchy gets its own direct discretisation, assembled from
the same field realization injected to that grid.  Quantities of interest are
evaluated on the solution of each grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import FieldRealization
from .grid import GridFn, GridLevel

_jit = nb.njit(cache=True, nogil=True)

CENTER, WEST, EAST, SOUTH, NORTH = range(5)
EDGE_MEANS = ("geometric", "arithmetic", "harmonic")


@dataclass
class StencilOp:
    """Five-point operator: ``coef[k, i, j]`` for k in (center, west, east, south, north).

    Coefficients are zero at boundary nodes.  Entries pointing at boundary
    nodes are kept; they multiply the (zero) Dirichlet values.
    """

    level: GridLevel
    coef: np.ndarray

    def __post_init__(self):
        self.coef = np.ascontiguousarray(self.coef, dtype=np.float64)
        if self.coef.shape != (5, *self.level.shape):
            raise ValueError(f"coefficient array of shape {self.coef.shape} does not match {self.level}")

    center = property(lambda self: self.coef[CENTER])
    west = property(lambda self: self.coef[WEST])
    east = property(lambda self: self.coef[EAST])
    south = property(lambda self: self.coef[SOUTH])
    north = property(lambda self: self.coef[NORTH])

    @classmethod
    def constant(cls, level: GridLevel, ax: float = 1.0, ay: float = 1.0) -> StencilOp:
        """Operator of ``-ax u_xx - ay u_yy``."""
        c = np.zeros((5, *level.shape))
        sl = (slice(1, -1), slice(1, -1))
        c[(WEST, *sl)] = c[(EAST, *sl)] = -ax / level.dx**2
        c[(SOUTH, *sl)] = c[(NORTH, *sl)] = -ay / level.dy**2
        c[(CENTER, *sl)] = 2 * ax / level.dx**2 + 2 * ay / level.dy**2
        return cls(level, c)


@dataclass(frozen=True)
class QoISpec:
    """A quantity of interest: ``point``, ``average`` or ``flux``.

    ``point`` evaluates at ``location``; ``average`` integrates over the box
    ``subdomain = (x0, x1, y0, y1)``; ``flux`` integrates the outflow through
    the right edge ``x = 1``.
    """

    kind: str
    location: tuple[float, float] = (0.5, 0.5)
    subdomain: tuple[float, float, float, float] = (0.25, 0.5, 0.25, 0.5)

    def __post_init__(self):
        if self.kind not in ("point", "average", "flux"):
            raise ValueError(f"unknown quantity of interest {self.kind!r}")

    def __call__(self, u: GridFn, f: FieldRealization | None = None) -> float:
        if self.kind == "point":
            return qoi_point(u, self.location)
        if self.kind == "average":
            return qoi_average(u, self.subdomain)
        if f is None:
            raise ValueError("the flux needs the field realization")
        return qoi_flux(u, f)

    def min_exponent(self) -> int:
        """Smallest grid exponent on which the evaluation points are nodes."""
        coords = self.location if self.kind == "point" else self.subdomain if self.kind == "average" else (0.0,)
        k = 0
        while any(abs(c * 2**k - round(c * 2**k)) > 1e-12 for c in coords):
            k += 1
        return max(k, 1)


QOIS = {
    "Q1": QoISpec("point"),
    "Q2": QoISpec("average"),
    "Q3": QoISpec("flux"),
}


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------


def _edge_mean(z, axis, mean):
    lo = z[:-1] if axis == 0 else z[:, :-1]
    hi = z[1:] if axis == 0 else z[:, 1:]
    if mean == "geometric":
        return np.exp(0.5 * (lo + hi))
    if mean == "arithmetic":
        return 0.5 * (np.exp(lo) + np.exp(hi))
    if mean == "harmonic":
        return 2.0 / (np.exp(-lo) + np.exp(-hi))
    raise ValueError(f"unknown edge mean {mean!r}; choose from {EDGE_MEANS}")


def assemble(f: FieldRealization, mean: str = "geometric") -> StencilOp:
    """Direct five-point discretisation on the grid of ``f``.

    The coefficient on the edge between two nodes is the ``mean`` of
    ``exp(z)`` at those nodes (geometric by default).
    """
    lv = f.level
    z = f.z.values
    ax = _edge_mean(z, 0, mean)  # ax[i, j] lives between nodes (i, j) and (i+1, j)
    ay = _edge_mean(z, 1, mean)
    c = np.zeros((5, *lv.shape))
    I = slice(1, -1)
    aw = ax[:-1, I]
    ae = ax[1:, I]
    as_ = ay[I, :-1]
    an = ay[I, 1:]
    c[WEST, I, I] = -aw / lv.dx**2
    c[EAST, I, I] = -ae / lv.dx**2
    c[SOUTH, I, I] = -as_ / lv.dy**2
    c[NORTH, I, I] = -an / lv.dy**2
    c[CENTER, I, I] = (aw + ae) / lv.dx**2 + (as_ + an) / lv.dy**2
    return StencilOp(lv, c)


def rhs(level: GridLevel, h=1.0) -> GridFn:
    """Right-hand side ``h`` sampled at interior nodes; ``h`` is a constant or ``h(x, y)``."""
    if callable(h):
        return GridFn.from_function(level, h, dirichlet=True)
    return GridFn.full(level, h)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


@_jit
def _apply(C, u, out):
    nx, ny = u.shape
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            out[i, j] = (
                C[0, i, j] * u[i, j]
                + C[1, i, j] * u[i - 1, j]
                + C[2, i, j] * u[i + 1, j]
                + C[3, i, j] * u[i, j - 1]
                + C[4, i, j] * u[i, j + 1]
            )


@_jit
def _residual(C, u, b, r):
    """r = b - A u at interior nodes; returns the squared 2-norm of r."""
    nx, ny = u.shape
    s = 0.0
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            v = b[i, j] - (
                C[0, i, j] * u[i, j]
                + C[1, i, j] * u[i - 1, j]
                + C[2, i, j] * u[i + 1, j]
                + C[3, i, j] * u[i, j - 1]
                + C[4, i, j] * u[i, j + 1]
            )
            r[i, j] = v
            s += v * v
    return s


@_jit
def _residual_norm2(C, u, b):
    nx, ny = u.shape
    s = 0.0
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            v = b[i, j] - (
                C[0, i, j] * u[i, j]
                + C[1, i, j] * u[i - 1, j]
                + C[2, i, j] * u[i + 1, j]
                + C[3, i, j] * u[i, j - 1]
                + C[4, i, j] * u[i, j + 1]
            )
            s += v * v
    return s


def _check(A: StencilOp, u: GridFn):
    if A.level != u.level:
        raise ValueError(f"operator on {A.level} applied to function on {u.level}")


def apply(A: StencilOp, u: GridFn) -> GridFn:
    """``A u`` at interior nodes (zero on the boundary); boundary values of ``u`` enter the stencil."""
    _check(A, u)
    out = np.zeros(u.level.shape)
    _apply(A.coef, u.values, out)
    return GridFn(u.level, out)


def residual(A: StencilOp, u: GridFn, b: GridFn) -> GridFn:
    _check(A, u)
    _check(A, b)
    r = np.zeros(u.level.shape)
    _residual(A.coef, u.values, b.values, r)
    return GridFn(u.level, r)


def to_sparse(A: StencilOp) -> sp.csr_matrix:
    """Sparse matrix over interior unknowns, row-major in ``(i, j)``."""
    nx, ny = A.level.shape
    mx, my = nx - 2, ny - 2
    idx = np.arange(mx * my).reshape(mx, my)
    rows, cols, vals = [], [], []
    I = slice(1, -1)
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(A.center[I, I].ravel())
    for k, (di, dj) in ((WEST, (-1, 0)), (EAST, (1, 0)), (SOUTH, (0, -1)), (NORTH, (0, 1))):
        c = A.coef[k, I, I]
        ii, jj = np.meshgrid(np.arange(mx), np.arange(my), indexing="ij")
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < mx) & (nj >= 0) & (nj < my)
        rows.append(idx[ii[ok], jj[ok]])
        cols.append(idx[ni[ok], nj[ok]])
        vals.append(c[ok])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(mx * my, mx * my)
    )


def direct_solve(A: StencilOp, b: GridFn) -> GridFn:
    """Sparse direct solve; used as an independent reference for the iterative solvers."""
    _check(A, b)
    x = spla.spsolve(to_sparse(A).tocsc(), b.interior().ravel())
    u = np.zeros(A.level.shape)
    u[1:-1, 1:-1] = np.reshape(x, (A.level.nx - 2, A.level.ny - 2))
    return GridFn(A.level, u)


# --------------------------------------------------------------------------
# quantities of interest
# --------------------------------------------------------------------------


def _node_index(c: float, p: int, what: str) -> int:
    k = c * 2**p
    if abs(k - round(k)) > 1e-12:
        raise ValueError(f"{what} coordinate {c} is not a node of a grid with 2^{p} cells")
    return int(round(k))


def _trapezoid_weights(n_cells: int, h: float) -> np.ndarray:
    w = np.full(n_cells + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def qoi_point(u: GridFn, location=(0.5, 0.5)) -> float:
    """Value of ``u`` at a grid node."""
    i = _node_index(location[0], u.level.p, "point")
    j = _node_index(location[1], u.level.q, "point")
    return float(u.values[i, j])


def qoi_average(u: GridFn, subdomain=(0.25, 0.5, 0.25, 0.5)) -> float:
    """Trapezoidal average of ``u`` over the box ``(x0, x1, y0, y1)``."""
    x0, x1, y0, y1 = subdomain
    lv = u.level
    i0, i1 = _node_index(x0, lv.p, "subdomain"), _node_index(x1, lv.p, "subdomain")
    j0, j1 = _node_index(y0, lv.q, "subdomain"), _node_index(y1, lv.q, "subdomain")
    wx = _trapezoid_weights(i1 - i0, lv.dx)
    wy = _trapezoid_weights(j1 - j0, lv.dy)
    integral = wx @ u.values[i0 : i1 + 1, j0 : j1 + 1] @ wy
    return float(integral / ((x1 - x0) * (y1 - y0)))


def qoi_flux(u: GridFn, f: FieldRealization) -> float:
    """Outflow ``-int a(1, y) du/dx(1, y) dy`` with a one-sided difference and trapezoidal rule.

    The coefficient is taken at the boundary nodes.
    """
    if u.level != f.level:
        raise ValueError(f"solution on {u.level} but field on {f.level}")
    lv = u.level
    a = np.exp(f.z.values[-1, :])
    dudx = (u.values[-1, :] - u.values[-2, :]) / lv.dx
    return float(-(_trapezoid_weights(2**lv.q, lv.dy) @ (a * dudx)))
