"""Smoke test for the endiv Python extension.

Build first:  cargo build -p endiv-py --features extension-module
then run:     python3 python/smoke_test.py
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_extension():
    try:
        return importlib.import_module("endiv")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libendiv_py.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "endiv.so"))
            sys.path.insert(0, tmp)
            return importlib.import_module("endiv")
    sys.exit("endiv extension not found; run `cargo build -p endiv-py --features extension-module`")


def main():
    endiv = load_extension()

    k, cert = endiv.kappa_exact([[1.0, 0.0], [0.0, 1.0]], 1)
    assert abs(k - 0.5) < 1e-9 and cert == "lp_certified", (k, cert)
    lb = endiv.kappa_lower_bound([[1.0, 0.0], [0.0, 1.0]], 1, [1, 2])
    assert 0.0 <= lb <= k + 1e-9

    y, x, z = endiv.generate(200, 12, 1, 7)
    assert len(y) == 200 and len(x[0]) == 12 and len(z[0]) == 12

    fit = endiv.fit_beta(y, x, z, kappa=1 / 20)
    assert len(fit["beta_hat"]) == 12
    assert fit["diagnostics"]["status"] == "converged"

    res = endiv.bands(y, x, z, [1, 2], draws=500, seed=3, kappa=1 / 20)
    assert res["S"] == [1, 2] and res["critical_value"] > 0
    for iv in res["intervals"]:
        assert iv["lo"] <= iv["beta_check"] <= iv["hi"]
        assert math.isfinite(iv["sigma_hat"])

    try:
        endiv.bands(y, x, z, [0])
    except ValueError:
        pass
    else:
        raise AssertionError("index 0 accepted")

    print("endiv smoke test passed:", [round(iv["beta_check"], 3) for iv in res["intervals"]])


if __name__ == "__main__":
    main()
