"""Smoke test for the wicksell_py extension.

Builds the extension with cargo (unless WICKSELL_PY_LIB points at a built
library), imports it from a temporary directory and exercises each binding.
"""

import importlib.util
import math
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    lib = os.environ.get("WICKSELL_PY_LIB")
    if lib is None:
        subprocess.run(["cargo", "build", "--release", "-p", "wicksell-py"], cwd=ROOT, check=True)
        lib = ROOT / "target" / "release" / "libwicksell_py.so"
    tmp = tempfile.mkdtemp()
    dst = pathlib.Path(tmp) / "wicksell_py.so"
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("wicksell_py", dst)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b}"


def main():
    w = load()

    m = w.Model("uniform01")
    close(m.g(0.36), 1.5 * math.sqrt(0.64), 1e-12)
    close(m.v(0.5), 3 * math.pi / 8, 1e-12)
    close(m.cdf(0.25), 0.25, 0)

    z = m.simulate(20000, seed=1)
    assert len(z) == 20000 and all(0 <= v <= 1 for v in z)
    assert z == m.simulate(20000, seed=1)

    est = w.IsotonicEstimate(z)
    close(est.f_hat(0.5), 0.5, 0.05)
    assert est.f_hat(0.0) == 0.0
    assert all(a >= b for a, b in zip(est.slopes, est.slopes[1:]))
    close(w.IsotonicEstimate([1.0, 4.0]).f_hat(2.0), 0.5446581987385205, 1e-12)
    assert w.IsotonicEstimate([1.0, 4.0]).f_naive(4.0) is None

    gp = w.GpLimit("flat:default", 2.5)
    lo, hi = gp.flat_interval
    assert lo < 2.5 < hi
    draws = gp.l_x(300, 5)
    mean, sd, ks, p = w.ks_fit_normal(draws)
    assert abs(mean) < 0.2 and p > 0.001, (mean, sd, ks, p)

    close(w.efficient_variance("uniform01", 0.5, 1.0, 1.0), 0.12930, 5e-5)
    pert = w.Perturbation("uniform01", 0.5, (1.0, 1.0), 1e5)
    assert pert.loglik(z[:1000]) == pert.loglik(z[:1000])
    d1, d2 = pert.delta(z[:1000])
    assert math.isfinite(d1) and math.isfinite(d2)
    close(pert.hadamard_value(), -0.25, 0.2)
    assert w.zeta_n(2.0, 0.01, 1.0) == 0.0

    try:
        w.Model("nonsense")
    except ValueError:
        pass
    else:
        raise AssertionError("bad spec accepted")

    print("python smoke test OK")


if __name__ == "__main__":
    sys.exit(main())
