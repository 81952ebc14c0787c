"""Pick the default coarse-grid damping for the MSG cycle.

Runs W(2,2)-cycles on 63 x 63 grids for strongly anisotropic, grid-aligned
fields (eta = 1/16, theta = 0) and reports the median convergence factor for
each candidate damping.  The winner is the value stored in
``msgmimc.msg.DEFAULT_DAMPING``.

    python3 demos/calibrate_damping.py [n_samples]
"""

import sys

import numpy as np

from msgmimc.field import CovarianceSpec, HyperPrior, realize, stream
from msgmimc.grid import GridLevel
from msgmimc.msg import CycleConfig, MsgHierarchy, convergence_factor, msg_solve
from msgmimc.pde import rhs

CANDIDATES = (0.6, 0.7, 0.8, 0.9, 1.0)


def main(n_samples: int = 20, seed: int = 2024):
    top = GridLevel(6, 6)
    prior = HyperPrior.fixed(CovarianceSpec(eta=1 / 16, theta=0.0))
    fields = [realize(prior, top, stream(seed, n)) for n in range(n_samples)]
    hiers = [MsgHierarchy(f) for f in fields]
    b = rhs(top)
    medians = {}
    for damping in CANDIDATES:
        cfg = CycleConfig(damping=damping)
        factors = []
        for h in hiers:
            _, hist = msg_solve(h, b, cfg, max_cycles=50, rtol=1e-11)
            factors.append(convergence_factor(hist).factor)
        medians[damping] = float(np.median(factors))
        print(f"damping {damping:.1f}: median factor {medians[damping]:.4f}")
    best = min(medians, key=medians.get)
    print(f"best damping: {best}")
    return best


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
