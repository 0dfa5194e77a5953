"""Smoke test for the vcmm Python extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run from the repository root:
    python python/smoke_test.py
"""

import math
import sys
from pathlib import Path

import numpy as np

import vcmm

ROOT = Path(__file__).resolve().parent.parent


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok: {msg}")


def main():
    ex = ROOT / "data" / "example"
    data = vcmm.ProblemData.load(ex / "y.csv", ex / "X.csv", ex / "Z.csv", ex / "blocks.json")
    check((data.n, data.p, data.m) == (200, 3, 3), f"loaded {data!r}")

    f1 = vcmm.fit(data, "mmla1", max_outer_iters=5000)
    f2 = vcmm.fit(data, "mmla2", max_outer_iters=5000)
    check(f1.converged and f2.converged, "both formulations converge on the example")
    gap = max(abs(a - b) for a, b in zip(f1.sigma2, f2.sigma2))
    check(gap <= 0.05, f"MMLA1 and MMLA2 variance components agree (max gap {gap:.2e})")
    trace = f1.objective_trace
    check(all(math.isfinite(v) for v in trace), "objective trace is finite")
    ll = vcmm.laplace_loglik(data, f1.beta, f1.sigma2, "mmla1")
    check(abs(ll - f1.loglik_la) <= 1e-6 * (1 + abs(ll)), "laplace_loglik reproduces the fitted value")

    sim, truth = vcmm.simulate_genetic(1, 5, seed=3)
    check(truth["sigma2"] == [5.0, 7.5, 10.0, 0.0, 0.0], "genetic setting 1 truth")
    lmax = vcmm.lambda_max(sim)
    pen = vcmm.fit_penalized(sim, lmax * 1.01)
    check(all(s == 0.0 for s in pen.sigma2), "every component is zero above lambda_max")

    path = vcmm.compute_path(sim, points=12)
    check(len(path) == 12 and path.df[0] == 0, "path starts from the empty model")
    bic = path.selected_support("bic")
    aic = path.selected_support("aic")
    check(len(aic) >= len(bic), f"AIC support {aic} contains at least as many blocks as BIC {bic}")
    metrics = vcmm.selection_metrics([0, 1, 2], [bic])
    check(0.0 <= metrics["true_positive"] <= 3.0, f"selection metrics {metrics}")

    # numpy arrays convert through the sequence protocol.
    rng = np.random.default_rng(0)
    n = 80
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    z = [rng.normal(size=(n, 4)), rng.normal(size=(n, 3))]
    y = (rng.random(n) < 0.5).astype(float)
    small = vcmm.ProblemData(y, x, z)
    check(small.block_sizes == [4, 3], "ProblemData from numpy arrays")
    check(vcmm.soft_threshold(-3.0, 1.0) == -2.0, "soft threshold")

    try:
        vcmm.ProblemData([0.0, 1.0, 2.0], [[1.0], [1.0], [1.0]], [[[1.0], [0.0], [1.0]]])
    except ValueError as e:
        check(True, f"invalid response rejected ({e})")
    else:
        check(False, "invalid response rejected")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
