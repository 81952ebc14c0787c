"""Compare semi-coarsened and standard multigrid on anisotropic coefficients.

For a few anisotropy ratios ``eta`` and rotations ``theta`` this solves the
63 x 63 problem with W(2,2)-cycles of both solvers and prints the median
number of cycles needed to reduce the residual by 1e-8, and the median
asymptotic convergence factor.

    python3 demos/solver_robustness.py [n_samples]
"""

import math
import sys

import numpy as np

from msgmimc.field import CovarianceSpec, HyperPrior, realize, stream
from msgmimc.grid import GridLevel
from msgmimc.msg import CycleConfig, MgHierarchy, MsgHierarchy, convergence_factor, mg_solve, msg_solve
from msgmimc.pde import rhs


def main(n_samples: int = 10, seed: int = 0):
    top = GridLevel(6, 6)
    cfg = CycleConfig(2, 2, 2)
    b = rhs(top)
    print("eta     theta  solver  cycles  factor")
    for eta in (1 / 4, 1 / 16):
        for theta in (0, 30):
            prior = HyperPrior.fixed(CovarianceSpec(eta=eta, theta=math.radians(theta)))
            fields = [realize(prior, top, stream(seed, n)) for n in range(n_samples)]
            for name, build, solve in (("MSG", MsgHierarchy, msg_solve), ("MG", MgHierarchy, mg_solve)):
                cycles, factors = [], []
                for f in fields:
                    _, hist = solve(build(f), b, cfg, 50, 1e-11)
                    cycles.append(next(k for k, r in enumerate(hist + [0.0]) if r <= 1e-8))
                    factors.append(convergence_factor(hist, floor=1e-11).factor)
                print(f"{eta:<7.4g} {theta:<6d} {name:<7} {np.median(cycles):<7.0f} {np.median(factors):.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
