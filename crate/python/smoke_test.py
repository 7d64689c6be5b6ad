"""Smoke test for the `stablab` extension module.

Build and run:
    cargo build --release -p stablab-py --features extension-module
    cp target/release/libstablab.so python/stablab.so
    python3 python/smoke_test.py
"""

import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import stablab  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    lb = stablab.PolyLoss.l_beta(0.5)
    assert lb.dim == 2 and lb.degree == 4
    assert close(lb.value([1.0, 2.0]), 0.5 + 0.4 + 1.0 + 0.1)
    assert stablab.analyze_minimum(lb)["verdict"] == "StableCycle"
    assert stablab.analyze_minimum(stablab.PolyLoss.f_plus())["verdict"] == "UnstableCycle"
    assert stablab.analyze_minimum(stablab.PolyLoss.l_beta(0.2))["verdict"] == "Degenerate"

    custom = stablab.PolyLoss(1, [([2], 0.5), ([4], -0.25)])
    assert custom.gradient([0.5]) == stablab.PolyLoss.f_minus().gradient([0.5])

    traj = stablab.run_gd(stablab.PolyLoss.f_minus(), [0.3], 2.5, max_iters=20000)
    assert traj["terminated"] == "Cycle2"
    amp = abs(traj["cycle"][0][0])
    assert close(amp, math.sqrt(0.5 / 2.5), 1e-6), amp

    scan = stablab.bifurcation(stablab.PolyLoss.f_minus(), [1.5, 2.5, 4.2], seed=1)
    assert scan["outcome"] == ["FixedPoint", "Cycle2", "Diverged"]

    ens = stablab.LossEnsemble.prop1(0.5)
    th = stablab.sgd_thresholds(ens)
    assert th["eta_sufficient"] == 2.0 and th["eta_meansquare"] == 2.4

    down = stablab.expected_distance(ens, [0.2], 1.9, 12)
    assert all(b < a for a, b in zip(down, down[1:]))

    mo = stablab.moment_operator(ens, 1.0)
    assert close(mo["truncation"]["spectral_radius"], 0.25)
    assert mo["certificate"]["certified"]
    assert stablab.moment_operator(ens, 2.1)["certificate"] is None

    try:
        lb.value([1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("dimension mismatch not rejected")

    print("stablab smoke test passed")


if __name__ == "__main__":
    main()
