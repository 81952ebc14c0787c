"""Multiple semi-coarsened multigrid (MSG), its F-cycle, and a standard-coarsening baseline.

The MSG hierarchy holds every grid ``(p, q)`` with ``1 <= p <= pbar`` and
``1 <= q <= qbar``.  Grids are grouped in diagonals ``L = p + q - 2``; the
coarsest diagonal ``L = 0`` is the single grid ``(1, 1)`` with one interior
unknown.  A cycle on diagonal ``L`` smooths every grid on it, restricts the
averaged residuals to diagonal ``L - 1``, recurses ``mu`` times, and adds the
weighted combination of the two semi-coarsened corrections.

The cycles are run by numba kernels with an explicit visit counter instead
of recursion, so a whole W-cycle executes without returning to Python.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
from numba.typed import List

from . import grid as _grid
from .field import FieldRealization, coarsen_realization
from .grid import CUBIC, LINEAR, GridFn, GridLevel, WeightFieldPair
from .pde import StencilOp, _residual, _residual_norm2, assemble, rhs

_jit = nb.njit(cache=True, nogil=True)

# Calibrated on eta = 1/16, theta = 0 (see demos/calibrate_damping.py).
DEFAULT_DAMPING = 1.0


class SolverError(RuntimeError):
    """The F-cycle did not reach its tolerance within ``nu0_max`` cycles on some grid."""

    def __init__(self, message, grid=None, history=None):
        super().__init__(message)
        self.grid = grid
        self.history = history or []


@dataclass
class CycleConfig:
    """Cycle parameters: ``mu`` = 1 (V) or 2 (W); ``nu1``/``nu2`` pre/post smoothing
    sweeps; ``damping`` scales the coarse-grid correction; ``nu0_max`` caps the
    cycles per diagonal in the F-cycle; ``eps_solver`` is the relative residual
    tolerance."""

    mu: int = 2
    nu1: int = 2
    nu2: int = 2
    damping: float = DEFAULT_DAMPING
    nu0_max: int = 50
    eps_solver: float = 1e-8

    def __post_init__(self):
        if self.mu not in (1, 2):
            raise ValueError(f"mu must be 1 or 2, got {self.mu}")
        if self.nu1 < 0 or self.nu2 < 0:
            raise ValueError("smoothing counts must be nonnegative")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")


# --------------------------------------------------------------------------
# smoother and weight factors
# --------------------------------------------------------------------------


@_jit
def _rbgs(v, C, b, sweeps):
    nx, ny = v.shape
    for _ in range(sweeps):
        for color in range(2):
            for i in range(1, nx - 1):
                j0 = 1 + (i + 1 + color) % 2
                for j in range(j0, ny - 1, 2):
                    s = (
                        b[i, j]
                        - C[1, i, j] * v[i - 1, j]
                        - C[2, i, j] * v[i + 1, j]
                        - C[3, i, j] * v[i, j - 1]
                        - C[4, i, j] * v[i, j + 1]
                    )
                    v[i, j] = s / C[0, i, j]


@_jit
def _weights(C, kx):
    """kx = (A f)^2 / ((A f)^2 + (A g)^2) with f = (-1)^i, g = (-1)^j over all nodes."""
    nx, ny = kx.shape
    for i in range(nx):
        for j in range(ny):
            kx[i, j] = 0.5
    for i in range(1, nx - 1):
        si = 1.0 - 2.0 * (i % 2)
        for j in range(1, ny - 1):
            sj = 1.0 - 2.0 * (j % 2)
            lx = si * (C[0, i, j] - C[1, i, j] - C[2, i, j] + C[3, i, j] + C[4, i, j])
            ly = sj * (C[0, i, j] + C[1, i, j] + C[2, i, j] - C[3, i, j] - C[4, i, j])
            d = lx * lx + ly * ly
            if d > 0.0:
                kx[i, j] = lx * lx / d


def smooth_rbgs(v: GridFn, A: StencilOp, b: GridFn, sweeps: int = 1) -> GridFn:
    """Red-black Gauss-Seidel in place (red: ``i + j`` even); returns ``v``."""
    if not (v.level == A.level == b.level):
        raise ValueError("smoother arguments live on different grids")
    _rbgs(v.values, A.coef, b.values, sweeps)
    return v


def weight_factors(A: StencilOp) -> WeightFieldPair:
    """Matrix-dependent prolongation weights from the two checkerboard modes.

    Applying ``A`` to ``f = cos(i pi)`` and ``g = cos(j pi)`` measures the
    coupling in x and y; ``kx = (Af)^2 / ((Af)^2 + (Ag)^2)`` and
    ``ky = 1 - kx``.  Where both vanish the weights are 1/2.
    """
    kx = np.empty(A.level.shape)
    _weights(A.coef, kx)
    return WeightFieldPair(GridFn(A.level, kx), GridFn(A.level, 1.0 - kx))


# --------------------------------------------------------------------------
# MSG hierarchy and cycle kernels
# --------------------------------------------------------------------------


class MsgHierarchy:
    """Operators, weights and work arrays on every grid of the box ``[1, pbar] x [1, qbar]``.

    All operators come from the same realization injected to each grid (no
    Galerkin products).  ``wx``/``wy`` hold the effective prolongation weights:
    the matrix-dependent factors where both coarser grids exist, 1 where only
    one does.
    """

    def __init__(self, field: FieldRealization, mean: str = "geometric"):
        top = field.level
        if top.p < 1 or top.q < 1:
            raise ValueError("the MSG hierarchy needs p, q >= 1")
        self.top = top
        self.pbar, self.qbar = top.p, top.q
        self.field = field
        self.levels = [GridLevel(p, q) for p in range(1, self.pbar + 1) for q in range(1, self.qbar + 1)]
        ops, wx, wy = [], [], []
        for lv in self.levels:
            A = assemble(coarsen_realization(field, lv), mean)
            ops.append(A)
            if lv.p > 1 and lv.q > 1:
                w = weight_factors(A)
                wx.append(w.kx.values)
                wy.append(w.ky.values)
            else:
                wx.append(np.ones(lv.shape))
                wy.append(np.ones(lv.shape))
        self.ops = ops
        self.C = List([A.coef for A in ops])
        self.WX = List(wx)
        self.WY = List(wy)
        self.V = List([np.zeros(lv.shape) for lv in self.levels])
        self.B = List([np.zeros(lv.shape) for lv in self.levels])
        self.R = List([np.zeros(lv.shape) for lv in self.levels])

    @property
    def n_diagonals(self) -> int:
        return self.pbar + self.qbar - 1

    def index(self, p: int, q: int) -> int:
        if not (1 <= p <= self.pbar and 1 <= q <= self.qbar):
            raise KeyError(f"grid ({p}, {q}) is outside the hierarchy")
        return (p - 1) * self.qbar + (q - 1)

    def diagonal(self, L: int) -> list[GridLevel]:
        """Grids with ``p + q - 2 == L`` in increasing ``p``."""
        lo, hi = max(1, L + 2 - self.qbar), min(self.pbar, L + 1)
        return [GridLevel(p, L + 2 - p) for p in range(lo, hi + 1)]

    def op(self, p: int, q: int) -> StencilOp:
        return self.ops[self.index(p, q)]

    def weights(self, p: int, q: int) -> WeightFieldPair:
        g = self.index(p, q)
        lv = self.levels[g]
        return WeightFieldPair(GridFn(lv, self.WX[g]), GridFn(lv, self.WY[g]))

    def v(self, p: int, q: int) -> GridFn:
        return GridFn(GridLevel(p, q), self.V[self.index(p, q)])

    def b(self, p: int, q: int) -> GridFn:
        return GridFn(GridLevel(p, q), self.B[self.index(p, q)])

    def set_b(self, p: int, q: int, b: GridFn):
        self.B[self.index(p, q)][...] = b.values

    def set_v(self, p: int, q: int, v: GridFn):
        self.V[self.index(p, q)][...] = v.values

    def relres(self, L: int) -> list[float]:
        """``||b - A v|| / ||b||`` for every grid on diagonal ``L`` (``||b|| = 0`` gives ``||r||``)."""
        out = []
        for lv in self.diagonal(L):
            g = self.index(lv.p, lv.q)
            rn = np.sqrt(_residual_norm2(self.C[g], self.V[g], self.B[g]))
            bn = np.linalg.norm(self.B[g][1:-1, 1:-1])
            out.append(rn / bn if bn > 0 else rn)
        return out

    def cycle(self, L: int, cfg: CycleConfig, top: tuple[int, int] | None = None):
        """mu-cycle on diagonal ``L``, or on the sub-box below grid ``top`` when given."""
        pb, qb = (self.pbar, self.qbar) if top is None else top
        if top is not None:
            L = pb + qb - 2
        _msg_cycle(L, pb, qb, self.qbar, self.V, self.B, self.R, self.C, self.WX, self.WY,
                   cfg.mu, cfg.nu1, cfg.nu2, cfg.damping)

    def grid_relres(self, p: int, q: int) -> float:
        g = self.index(p, q)
        rn = np.sqrt(_residual_norm2(self.C[g], self.V[g], self.B[g]))
        bn = np.linalg.norm(self.B[g][1:-1, 1:-1])
        return rn / bn if bn > 0 else rn


@_jit
def _diag_bounds(L, pbar, qbar):
    return max(1, L + 2 - qbar), min(pbar, L + 1)


@_jit
def _restrict_down(L, pbar, qbar, qs, src, dst, V, zero_v):
    """dst on diagonal L-1 <- averaged restriction of src from diagonal L.

    The box is ``[1, pbar] x [1, qbar]``; ``qs`` is the storage stride.
    """
    lo, hi = _diag_bounds(L - 1, pbar, qbar)
    for p in range(lo, hi + 1):
        q = L + 1 - p
        g = (p - 1) * qs + (q - 1)
        has_x = p + 1 <= pbar
        has_y = q + 1 <= qbar
        w = 0.5 if (has_x and has_y) else 1.0
        dst[g][:, :] = 0.0
        if has_x:
            _grid._restrict_x_add(src[g + qs], dst[g], w)
        if has_y:
            _grid._restrict_y_add(src[g + 1], dst[g], w)
        if zero_v:
            V[g][:, :] = 0.0


@_jit
def _prolong_up(L, pbar, qbar, qs, V, target, WX, WY, scale, order):
    """target on diagonal L += scale * combined interpolation of V from diagonal L-1."""
    lo, hi = _diag_bounds(L, pbar, qbar)
    for p in range(lo, hi + 1):
        q = L + 2 - p
        g = (p - 1) * qs + (q - 1)
        if p > 1:
            _grid._prolong_x_add(V[g - qs], target[g], WX[g], scale, order)
        if q > 1:
            _grid._prolong_y_add(V[g - 1], target[g], WY[g], scale, order)


@_jit
def _smooth_diag(L, pbar, qbar, qs, V, C, B, sweeps):
    if sweeps == 0:
        return
    lo, hi = _diag_bounds(L, pbar, qbar)
    for p in range(lo, hi + 1):
        g = (p - 1) * qs + (L + 2 - p - 1)
        _rbgs(V[g], C[g], B[g], sweeps)


@_jit
def _residual_diag(L, pbar, qbar, qs, V, C, B, R):
    lo, hi = _diag_bounds(L, pbar, qbar)
    for p in range(lo, hi + 1):
        g = (p - 1) * qs + (L + 2 - p - 1)
        _residual(C[g], V[g], B[g], R[g])


@_jit
def _msg_cycle(Ltop, pbar, qbar, qs, V, B, R, C, WX, WY, mu, nu1, nu2, damping):
    """One mu-cycle on diagonal ``Ltop`` of the box ``[1, pbar] x [1, qbar]``."""
    count = np.zeros(Ltop + 2, np.int64)
    L = Ltop
    while True:
        # enter a cycle at L and descend to the coarsest diagonal
        while L > 0:
            _smooth_diag(L, pbar, qbar, qs, V, C, B, nu1)
            _residual_diag(L, pbar, qbar, qs, V, C, B, R)
            _restrict_down(L, pbar, qbar, qs, R, B, V, True)
            count[L] = 0
            L -= 1
        V[0][1, 1] = B[0][1, 1] / C[0][0, 1, 1]
        # return upwards until some level still owes a coarse-grid visit
        while True:
            L += 1
            if L > Ltop:
                return
            count[L] += 1
            if count[L] < mu:
                L -= 1
                break
            _prolong_up(L, pbar, qbar, qs, V, V, WX, WY, damping, 1)
            _smooth_diag(L, pbar, qbar, qs, V, C, B, nu2)


def msg_mu_cycle(h: MsgHierarchy, L: int, cfg: CycleConfig) -> None:
    """One MSG mu-cycle on diagonal ``L`` of ``h`` (in place on ``h.V``).

    ``h.B`` and ``h.V`` on diagonal ``L`` must hold the right-hand sides and
    current iterates; lower diagonals are overwritten as scratch.
    """
    if not 0 <= L < h.n_diagonals:
        raise ValueError(f"diagonal {L} outside 0..{h.n_diagonals - 1}")
    h.cycle(L, cfg)


# --------------------------------------------------------------------------
# F-cycle
# --------------------------------------------------------------------------


@dataclass
class FMSGResult:
    """Converged solutions on every grid with the cycles and residual history spent on each."""

    solutions: dict[tuple[int, int], GridFn]
    cycles: dict[tuple[int, int], int]
    history: dict[tuple[int, int], list[float]] = field(default_factory=dict)

    def __getitem__(self, pq) -> GridFn:
        return self.solutions[tuple(pq)]

    @property
    def total_cycles(self) -> int:
        return sum(self.cycles.values())


def _stalled(lv: GridLevel, L: int, hist: list[float], n: int) -> SolverError:
    return SolverError(
        f"F-cycle stalled on diagonal {L} (grid {lv.p},{lv.q}) at "
        f"relative residual {hist[-1]:.3e} after {n} cycles",
        grid=lv,
        history=hist,
    )


def msg_f_cycle(
    h: MsgHierarchy, b: GridFn, cfg: CycleConfig, order: int = CUBIC, joint: bool = False
) -> FMSGResult:
    """Full MSG: nested iteration from the coarsest grid up to ``h.top``.

    The right-hand side is restricted down the hierarchy with the residual
    rule.  Each diagonal is initialised by interpolating the converged
    solutions of the one below (cubic by default), then mu-cycles run until
    every grid on it satisfies ``||r|| / ||b|| <= eps_solver``.

    By default each grid ``(p, q)`` is iterated with cycles on its own
    sub-box ``[1, p] x [1, q]``.  With ``joint=True`` one cycle serves the
    whole diagonal at once.  Interior grids of a diagonal share their coarse
    grids with neighbours whose smooth errors may cancel in the averaged
    restriction, so the joint iteration can stall far above ``eps_solver``
    on long diagonals.  The two variants coincide on the top diagonal.

    Raises
    ------
    SolverError
        When ``nu0_max`` cycles do not suffice on some grid.
    """
    if b.level != h.top:
        raise ValueError(f"right-hand side on {b.level}, hierarchy top is {h.top}")
    top = h.n_diagonals - 1
    qs = h.qbar
    rhs = List([np.zeros(lv.shape) for lv in h.levels])
    rhs[h.index(h.pbar, h.qbar)][...] = b.values
    for L in range(top, 0, -1):
        _restrict_down(L, h.pbar, h.qbar, qs, rhs, rhs, h.V, False)
    sol = List([np.zeros(lv.shape) for lv in h.levels])
    cycles, history = {}, {}
    for L in range(top + 1):
        diag = h.diagonal(L)
        for lv in diag:
            g = h.index(lv.p, lv.q)
            h.B[g][...] = rhs[g]
            h.V[g][...] = 0.0
        if L > 0:
            _prolong_up(L, h.pbar, h.qbar, qs, sol, h.V, h.WX, h.WY, 1.0, order)
        if joint:
            hist = [max(h.relres(L))]
            n = 0
            while hist[-1] > cfg.eps_solver:
                if n >= cfg.nu0_max:
                    raise _stalled(diag[int(np.argmax(h.relres(L)))], L, hist, n)
                h.cycle(L, cfg)
                n += 1
                hist.append(max(h.relres(L)))
            for lv in diag:
                cycles[lv.p, lv.q] = n
                history[lv.p, lv.q] = hist
        else:
            for lv in diag:
                g = h.index(lv.p, lv.q)
                # the sub-box cycles overwrite the lower diagonals, which only
                # hold scratch by now; the other grids of this diagonal are untouched
                h.B[g][...] = rhs[g]
                hist = [h.grid_relres(lv.p, lv.q)]
                n = 0
                while hist[-1] > cfg.eps_solver:
                    if n >= cfg.nu0_max:
                        raise _stalled(lv, L, hist, n)
                    h.cycle(L, cfg, top=(lv.p, lv.q))
                    n += 1
                    hist.append(h.grid_relres(lv.p, lv.q))
                cycles[lv.p, lv.q] = n
                history[lv.p, lv.q] = hist
        for lv in diag:
            g = h.index(lv.p, lv.q)
            sol[g][...] = h.V[g]
    solutions = {(lv.p, lv.q): GridFn(lv, sol[i].copy()) for i, lv in enumerate(h.levels)}
    return FMSGResult(solutions, cycles, history)


def fmsg_solve(
    field: FieldRealization, h_source=1.0, cfg: CycleConfig | None = None, mean: str = "geometric"
) -> FMSGResult:
    """Build the hierarchy for ``field`` and run the F-cycle with right-hand side ``h_source``."""
    cfg = cfg or CycleConfig()
    hier = MsgHierarchy(field, mean)
    return msg_f_cycle(hier, rhs(field.level, h_source), cfg)


def msg_solve(
    h: MsgHierarchy, b: GridFn, cfg: CycleConfig, max_cycles: int = 50, rtol: float = 1e-8, v0: GridFn | None = None
) -> tuple[GridFn, list[float]]:
    """Plain mu-cycles on the top grid from ``v0`` (zero by default).

    Returns the iterate and the relative residual history, starting with the
    initial residual and stopping at ``rtol`` or ``max_cycles``.
    """
    L = h.n_diagonals - 1
    h.set_b(h.pbar, h.qbar, b)
    h.V[h.index(h.pbar, h.qbar)][...] = 0.0 if v0 is None else v0.values
    hist = [h.relres(L)[0]]
    while hist[-1] > rtol and len(hist) <= max_cycles:
        h.cycle(L, cfg)
        hist.append(h.relres(L)[0])
    return h.v(h.pbar, h.qbar).copy(), hist


# --------------------------------------------------------------------------
# standard-coarsening baseline
# --------------------------------------------------------------------------


@_jit
def _restrict_fw2d(fine, coarse):
    nx, ny = coarse.shape
    for i in range(nx):
        for j in range(ny):
            coarse[i, j] = 0.0
    for i in range(1, nx - 1):
        fi = 2 * i
        for j in range(1, ny - 1):
            fj = 2 * j
            coarse[i, j] = (
                4.0 * fine[fi, fj]
                + 2.0 * (fine[fi - 1, fj] + fine[fi + 1, fj] + fine[fi, fj - 1] + fine[fi, fj + 1])
                + fine[fi - 1, fj - 1] + fine[fi + 1, fj - 1] + fine[fi - 1, fj + 1] + fine[fi + 1, fj + 1]
            ) / 16.0


@_jit
def _prolong_bilinear_add(coarse, fine, scale):
    nx, ny = fine.shape
    for i in range(1, nx - 1):
        ci = i // 2
        oi = i % 2
        for j in range(1, ny - 1):
            cj = j // 2
            oj = j % 2
            if oi == 0 and oj == 0:
                val = coarse[ci, cj]
            elif oi == 1 and oj == 0:
                val = 0.5 * (coarse[ci, cj] + coarse[ci + 1, cj])
            elif oi == 0:
                val = 0.5 * (coarse[ci, cj] + coarse[ci, cj + 1])
            else:
                val = 0.25 * (coarse[ci, cj] + coarse[ci + 1, cj] + coarse[ci, cj + 1] + coarse[ci + 1, cj + 1])
            fine[i, j] += scale * val


@_jit
def _mg_cycle(Ltop, V, B, R, C, mu, nu1, nu2, damping):
    count = np.zeros(Ltop + 2, np.int64)
    L = Ltop
    while True:
        while L > 0:
            _rbgs(V[L], C[L], B[L], nu1)
            _residual(C[L], V[L], B[L], R[L])
            _restrict_fw2d(R[L], B[L - 1])
            V[L - 1][:, :] = 0.0
            count[L] = 0
            L -= 1
        V[0][1, 1] = B[0][1, 1] / C[0][0, 1, 1]
        while True:
            L += 1
            if L > Ltop:
                return
            count[L] += 1
            if count[L] < mu:
                L -= 1
                break
            _prolong_bilinear_add(V[L - 1], V[L], damping)
            _rbgs(V[L], C[L], B[L], nu2)


class MgHierarchy:
    """Standard full coarsening on the square grids ``(k, k)``, ``k = 1..p``."""

    def __init__(self, field: FieldRealization, mean: str = "geometric"):
        top = field.level
        if top.p != top.q or top.p < 1:
            raise ValueError("standard coarsening needs a square grid with p = q >= 1")
        self.top = top
        self.levels = [GridLevel(k, k) for k in range(1, top.p + 1)]
        self.ops = [assemble(coarsen_realization(field, lv), mean) for lv in self.levels]
        self.C = List([A.coef for A in self.ops])
        self.V = List([np.zeros(lv.shape) for lv in self.levels])
        self.B = List([np.zeros(lv.shape) for lv in self.levels])
        self.R = List([np.zeros(lv.shape) for lv in self.levels])

    def relres(self) -> float:
        k = len(self.levels) - 1
        rn = np.sqrt(_residual_norm2(self.C[k], self.V[k], self.B[k]))
        bn = np.linalg.norm(self.B[k][1:-1, 1:-1])
        return rn / bn if bn > 0 else rn

    def cycle(self, cfg: CycleConfig):
        _mg_cycle(len(self.levels) - 1, self.V, self.B, self.R, self.C, cfg.mu, cfg.nu1, cfg.nu2, cfg.damping)


def mg_v_cycle_standard(h: MgHierarchy, cfg: CycleConfig) -> None:
    """One standard-coarsening mu-cycle on the top grid (full weighting, bilinear interpolation)."""
    h.cycle(cfg)


def mg_solve(
    h: MgHierarchy, b: GridFn, cfg: CycleConfig, max_cycles: int = 50, rtol: float = 1e-8
) -> tuple[GridFn, list[float]]:
    """Standard multigrid cycles from a zero guess; same contract as :func:`msg_solve`."""
    k = len(h.levels) - 1
    h.B[k][...] = b.values
    h.V[k][...] = 0.0
    hist = [h.relres()]
    while hist[-1] > rtol and len(hist) <= max_cycles:
        h.cycle(cfg)
        hist.append(h.relres())
    return GridFn(h.top, h.V[k].copy()), hist


# --------------------------------------------------------------------------
# convergence measurement
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceFactor:
    factor: float
    diverged: bool


def convergence_factor(history, skip: int = 5, k: int = 10, floor: float = 0.0) -> ConvergenceFactor:
    """Geometric mean of successive residual ratios.

    The history is cut after the first entry at or below ``floor``, so that
    cycles spent at round-off level do not count.  The first ``skip`` ratios
    are dropped when enough remain, then the last ``k`` are averaged.
    ``diverged`` is set when the mean ratio is at least 1.
    """
    h = np.asarray(history, dtype=np.float64)
    if h.size < 2:
        raise ValueError("need at least two residual norms")
    nz = np.flatnonzero(h <= floor)
    if nz.size:
        h = h[: nz[0] + 1]
    if h.size < 2:
        return ConvergenceFactor(0.0, False)
    ratios = h[1:] / h[:-1]
    if ratios.size > skip:
        ratios = ratios[skip:]
    ratios = ratios[-k:]
    if np.any(ratios == 0.0):
        return ConvergenceFactor(0.0, False)
    f = float(np.exp(np.mean(np.log(ratios))))
    return ConvergenceFactor(f, f >= 1.0)
