"""Run the unbiased multi-index estimator and compare both cost accountings.

Estimates the expected point value at the centre to a target standard error,
then prints the fitted rates, the measured cost with and without recycling
and the cost ratio predicted from the fitted rates.

    python3 demos/unbiased_estimate.py [eps]
"""

import sys

from msgmimc import mimc
from msgmimc.field import HyperPrior
from msgmimc.pde import QOIS


def main(eps: float = 2e-3, seed: int = 0):
    prob = mimc.PDEProblem(HyperPrior(), QOIS["Q1"], base=(2, 2))
    res = mimc.run_estimator(prob, eps, mimc.EstimatorConfig(seed=seed))
    st = res.state
    print(f"E[Q] ~ {res.E:.5f} +/- {res.sqrtV:.1e} from {res.N} samples ({res.status})")
    fit = st.fit
    if fit is not None and fit.available:
        print(f"beta = ({fit.beta[0]:.2f}, {fit.beta[1]:.2f}), gamma = ({fit.gamma[0]:.2f}, {fit.gamma[1]:.2f})")
    rec = mimc.cost_accounting(st, "recycled")
    non = mimc.cost_accounting(st, "non_recycled")
    print(f"cost with recycling {rec:.3g}, without {non:.3g}, ratio {non / rec:.2f}")
    if fit is not None and fit.beta and min(fit.beta) > 0:
        print(f"ratio predicted from the fitted rates: {1 / mimc.cost_reduction_factor(fit.beta, fit.gamma):.2f}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 2e-3)
