"""Semi-coarsened grids, grid functions and one-dimensional transfer operators.

A grid ``G(p, q)`` on the unit square has ``2**p`` cells in x and ``2**q``
cells in y.  Grid functions store every node, boundary included, as a dense
array indexed ``[i, j]`` with ``i`` running along x.  Dirichlet functions keep
their boundary entries at zero and all stencil loops run over interior nodes.

The ``_``-prefixed kernels are numba-compiled and work on raw arrays; the
multigrid cycles in :mod:`msgmimc.msg` call them directly.  The public
functions wrap them for :class:`GridFn` values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

_jit = nb.njit(cache=True, nogil=True)

LINEAR = 1
CUBIC = 3


@dataclass(frozen=True, order=True)
class GridLevel:
    """Grid ``G(p, q)`` with ``2**p`` cells in x and ``2**q`` cells in y."""

    p: int
    q: int

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise ValueError(f"grid exponents must be nonnegative, got ({self.p}, {self.q})")

    @property
    def nx(self) -> int:
        return 2**self.p + 1

    @property
    def ny(self) -> int:
        return 2**self.q + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def dx(self) -> float:
        return 2.0**-self.p

    @property
    def dy(self) -> float:
        return 2.0**-self.q

    @property
    def n_interior(self) -> int:
        return (self.nx - 2) * (self.ny - 2)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two 1-D arrays ``(x, y)``."""
        return np.linspace(0.0, 1.0, self.nx), np.linspace(0.0, 1.0, self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.coords()
        return np.meshgrid(x, y, indexing="ij")


@dataclass
class GridFn:
    """Real values at every node of a grid."""

    level: GridLevel
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.level.shape:
            raise ValueError(
                f"values of shape {self.values.shape} do not match grid "
                f"({self.level.p}, {self.level.q}) with shape {self.level.shape}"
            )

    @classmethod
    def zeros(cls, level: GridLevel) -> GridFn:
        return cls(level, np.zeros(level.shape))

    @classmethod
    def full(cls, level: GridLevel, value: float, dirichlet: bool = True) -> GridFn:
        """Constant ``value`` at interior nodes (and boundary, unless ``dirichlet``)."""
        v = np.full(level.shape, float(value))
        if dirichlet:
            zero_boundary(v)
        return cls(level, v)

    @classmethod
    def from_function(cls, level: GridLevel, func, dirichlet: bool = False) -> GridFn:
        X, Y = level.mesh()
        v = np.array(np.broadcast_to(func(X, Y), level.shape), dtype=np.float64)
        if dirichlet:
            zero_boundary(v)
        return cls(level, v)

    def interior(self) -> np.ndarray:
        return self.values[1:-1, 1:-1]

    def copy(self) -> GridFn:
        return GridFn(self.level, self.values.copy())

    def norm(self) -> float:
        """Discrete 2-norm over interior nodes."""
        return float(np.linalg.norm(self.interior()))


@dataclass
class WeightFieldPair:
    """Pointwise prolongation weights for the x- and y-coarsened corrections."""

    kx: GridFn
    ky: GridFn

    def __post_init__(self):
        if self.kx.level != self.ky.level:
            raise ValueError("weight fields live on different grids")

    @classmethod
    def constant(cls, level: GridLevel, kx: float = 0.5) -> WeightFieldPair:
        return cls(GridFn(level, np.full(level.shape, kx)), GridFn(level, np.full(level.shape, 1.0 - kx)))


def zero_boundary(a: np.ndarray) -> np.ndarray:
    a[0, :] = 0.0
    a[-1, :] = 0.0
    a[:, 0] = 0.0
    a[:, -1] = 0.0
    return a


# --------------------------------------------------------------------------
# kernels on raw arrays
# --------------------------------------------------------------------------


@_jit
def _restrict_x_add(fine, coarse, w):
    """coarse[interior] += w * full weighting of ``fine`` in x."""
    nxc, ny = coarse.shape
    for i in range(1, nxc - 1):
        f = 2 * i
        for j in range(1, ny - 1):
            coarse[i, j] += w * (0.25 * fine[f - 1, j] + 0.5 * fine[f, j] + 0.25 * fine[f + 1, j])


@_jit
def _restrict_y_add(fine, coarse, w):
    nx, nyc = coarse.shape
    for i in range(1, nx - 1):
        for j in range(1, nyc - 1):
            f = 2 * j
            coarse[i, j] += w * (0.25 * fine[i, f - 1] + 0.5 * fine[i, f] + 0.25 * fine[i, f + 1])


@_jit
def _interp_x(coarse, fine, order):
    """Fill every node of ``fine`` by interpolating ``coarse`` along x."""
    nxc, ny = coarse.shape
    n = nxc - 1
    if order == CUBIC and n >= 4:
        for j in range(ny):
            for i in range(nxc):
                fine[2 * i, j] = coarse[i, j]
            fine[1, j] = (7.0 * coarse[0, j] + 10.0 * coarse[1, j] - coarse[2, j]) / 16.0
            for i in range(1, n - 1):
                fine[2 * i + 1, j] = (
                    -coarse[i - 1, j] + 9.0 * coarse[i, j] + 9.0 * coarse[i + 1, j] - coarse[i + 2, j]
                ) / 16.0
            fine[2 * n - 1, j] = (7.0 * coarse[n, j] + 10.0 * coarse[n - 1, j] - coarse[n - 2, j]) / 16.0
    else:
        for j in range(ny):
            for i in range(nxc):
                fine[2 * i, j] = coarse[i, j]
            for i in range(n):
                fine[2 * i + 1, j] = 0.5 * (coarse[i, j] + coarse[i + 1, j])


@_jit
def _interp_y(coarse, fine, order):
    nx, nyc = coarse.shape
    n = nyc - 1
    if order == CUBIC and n >= 4:
        for i in range(nx):
            for j in range(nyc):
                fine[i, 2 * j] = coarse[i, j]
            fine[i, 1] = (7.0 * coarse[i, 0] + 10.0 * coarse[i, 1] - coarse[i, 2]) / 16.0
            for j in range(1, n - 1):
                fine[i, 2 * j + 1] = (
                    -coarse[i, j - 1] + 9.0 * coarse[i, j] + 9.0 * coarse[i, j + 1] - coarse[i, j + 2]
                ) / 16.0
            fine[i, 2 * n - 1] = (7.0 * coarse[i, n] + 10.0 * coarse[i, n - 1] - coarse[i, n - 2]) / 16.0
    else:
        for i in range(nx):
            for j in range(nyc):
                fine[i, 2 * j] = coarse[i, j]
            for j in range(n):
                fine[i, 2 * j + 1] = 0.5 * (coarse[i, j] + coarse[i, j + 1])


@_jit
def _prolong_x_add(coarse, fine, weight, scale, order):
    """fine[interior] += scale * weight * P_x(coarse); linear stencil inlined."""
    nxf, ny = fine.shape
    nxc = coarse.shape[0]
    if order == CUBIC and nxc - 1 >= 4:
        tmp = np.empty_like(fine)
        _interp_x(coarse, tmp, order)
        for i in range(1, nxf - 1):
            for j in range(1, ny - 1):
                fine[i, j] += scale * weight[i, j] * tmp[i, j]
        return
    for i in range(1, nxf - 1):
        c = i // 2
        if i % 2 == 0:
            for j in range(1, ny - 1):
                fine[i, j] += scale * weight[i, j] * coarse[c, j]
        else:
            for j in range(1, ny - 1):
                fine[i, j] += scale * weight[i, j] * 0.5 * (coarse[c, j] + coarse[c + 1, j])


@_jit
def _prolong_y_add(coarse, fine, weight, scale, order):
    nx, nyf = fine.shape
    nyc = coarse.shape[1]
    if order == CUBIC and nyc - 1 >= 4:
        tmp = np.empty_like(fine)
        _interp_y(coarse, tmp, order)
        for i in range(1, nx - 1):
            for j in range(1, nyf - 1):
                fine[i, j] += scale * weight[i, j] * tmp[i, j]
        return
    for i in range(1, nx - 1):
        for j in range(1, nyf - 1):
            c = j // 2
            if j % 2 == 0:
                fine[i, j] += scale * weight[i, j] * coarse[i, c]
            else:
                fine[i, j] += scale * weight[i, j] * 0.5 * (coarse[i, c] + coarse[i, c + 1])


# --------------------------------------------------------------------------
# GridFn-level operators
# --------------------------------------------------------------------------


def _check_level(fn: GridFn, expected: GridLevel, what: str):
    if fn.level != expected:
        raise ValueError(f"{what}: expected grid {expected}, got {fn.level}")


def _boundary_mask(shape):
    m = np.zeros(shape, dtype=bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    return m


def restrict_x(fine: GridFn) -> GridFn:
    """Full weighting ``1/4 [1 2 1]`` along x, from ``(p+1, q)`` to ``(p, q)``.

    Boundary nodes are injected from the coinciding fine node.
    """
    if fine.level.p < 1:
        raise ValueError("cannot restrict in x below p = 0")
    level = GridLevel(fine.level.p - 1, fine.level.q)
    out = np.zeros(level.shape)
    mask = _boundary_mask(level.shape)
    out[mask] = fine.values[::2, :][mask]
    _restrict_x_add(fine.values, out, 1.0)
    return GridFn(level, out)


def restrict_y(fine: GridFn) -> GridFn:
    """Full weighting ``1/4 [1 2 1]^T`` along y, from ``(p, q+1)`` to ``(p, q)``."""
    if fine.level.q < 1:
        raise ValueError("cannot restrict in y below q = 0")
    level = GridLevel(fine.level.p, fine.level.q - 1)
    out = np.zeros(level.shape)
    mask = _boundary_mask(level.shape)
    out[mask] = fine.values[:, ::2][mask]
    _restrict_y_add(fine.values, out, 1.0)
    return GridFn(level, out)


def _prolong(coarse: GridFn, axis: int, order: int) -> GridFn:
    lv = coarse.level
    level = GridLevel(lv.p + 1, lv.q) if axis == 0 else GridLevel(lv.p, lv.q + 1)
    out = np.empty(level.shape)
    (_interp_x if axis == 0 else _interp_y)(coarse.values, out, order)
    return GridFn(level, out)


def prolong_linear_x(coarse: GridFn) -> GridFn:
    """Linear interpolation along x, from ``(p-1, q)`` to ``(p, q)``."""
    return _prolong(coarse, 0, LINEAR)


def prolong_linear_y(coarse: GridFn) -> GridFn:
    return _prolong(coarse, 1, LINEAR)


def prolong_cubic_x(coarse: GridFn) -> GridFn:
    """Cubic interpolation along x with stencil ``1/16 [-1 0 9 16 9 0 -1]``.

    Midpoints next to the boundary use ``1/16 [10 16 9 0 -1]``, i.e. the
    centred formula with the outside value reflected oddly about the boundary
    node.  Directions with fewer than 4 coarse intervals use linear
    interpolation.
    """
    return _prolong(coarse, 0, CUBIC)


def prolong_cubic_y(coarse: GridFn) -> GridFn:
    return _prolong(coarse, 1, CUBIC)


def combine_restrict(rx: GridFn | None, ry: GridFn | None) -> GridFn:
    """Restrict to ``(p, q)`` from the x-finer grid ``rx`` and/or y-finer grid ``ry``.

    With both present the result is the average of the two restrictions.
    """
    if rx is None and ry is None:
        raise ValueError("combine_restrict needs at least one fine grid function")
    if rx is None:
        return restrict_y(ry)
    if ry is None:
        return restrict_x(rx)
    target = GridLevel(rx.level.p - 1, rx.level.q)
    _check_level(ry, GridLevel(target.p, target.q + 1), "combine_restrict")
    out = restrict_x(rx)
    out.values[1:-1, 1:-1] = 0.0
    _restrict_x_add(rx.values, out.values, 0.5)
    _restrict_y_add(ry.values, out.values, 0.5)
    return out


def combine_prolong(
    vx: GridFn | None,
    vy: GridFn | None,
    weights: WeightFieldPair | None = None,
    order: int = LINEAR,
) -> GridFn:
    """Weighted average of the corrections interpolated from ``(p-1, q)`` and ``(p, q-1)``.

    ``kx`` multiplies the x-interpolated ``vx`` and ``ky`` the y-interpolated
    ``vy``.  A single input is interpolated without weighting.
    """
    if vx is None and vy is None:
        raise ValueError("combine_prolong needs at least one coarse grid function")
    interp_x = prolong_cubic_x if order == CUBIC else prolong_linear_x
    interp_y = prolong_cubic_y if order == CUBIC else prolong_linear_y
    if vy is None:
        return interp_x(vx)
    if vx is None:
        return interp_y(vy)
    px, py = interp_x(vx), interp_y(vy)
    _check_level(py, px.level, "combine_prolong")
    if weights is None:
        weights = WeightFieldPair.constant(px.level)
    _check_level(weights.kx, px.level, "combine_prolong weights")
    return GridFn(px.level, weights.kx.values * px.values + weights.ky.values * py.values)


def transfer_matrix_1d(n_coarse_cells: int, kind: str) -> np.ndarray:
    """Dense 1-D transfer matrix over all nodes (tests and small analyses only).

    ``kind`` is ``"restrict"`` (coarse x fine, boundary injected),
    ``"linear"`` or ``"cubic"`` (fine x coarse).
    """
    nc = n_coarse_cells + 1
    nf = 2 * n_coarse_cells + 1
    if kind == "restrict":
        R = np.zeros((nc, nf))
        R[0, 0] = R[-1, -1] = 1.0
        for i in range(1, nc - 1):
            R[i, 2 * i - 1 : 2 * i + 2] = (0.25, 0.5, 0.25)
        return R
    order = CUBIC if kind == "cubic" else LINEAR
    P = np.zeros((nf, nc))
    e = np.zeros((nc, 1))
    col = np.zeros((nf, 1))
    for k in range(nc):
        e[:] = 0.0
        e[k] = 1.0
        _interp_x(e, col, order)
        P[:, k] = col[:, 0]
    return P
