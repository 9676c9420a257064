"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python python/smoke_test.py
"""

import math
import pathlib
import sys

import xva_py

ROOT = pathlib.Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "crates" / "core" / "fixtures"


def metric(report, name):
    for m in report["metrics"]:
        if m["metric"] == name:
            return m["estimate"], m["std_error"]
    raise KeyError(name)


def black_scholes_call(s, k, r, sigma, t):
    n = lambda x: 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
    d1 = (math.log(s / k) + (r + 0.5 * sigma * sigma) * t) / (sigma * math.sqrt(t))
    d2 = d1 - sigma * math.sqrt(t)
    return s * n(d1) - k * math.exp(-r * t) * n(d2)


def main():
    assert xva_py.collateral(-5.0, 1.0, 2.0) == -3.0
    assert xva_py.recovery(10.0, "counterparty", 0.4, 0.4) == 4.0
    assert xva_py.recovery(-10.0, "bank", 0.3, 0.4) == -3.0
    es, _ = xva_py.expected_shortfall([10.0] * 100 + [2.0] * 400 + [0.0] * 9500, 0.975)
    assert abs(es - 5.2) < 1e-12
    assert xva_py.expected_shortfall([1.0, 2.0], 0.975) is None

    config = (FIXTURES / "complete_market.toml").read_text()
    try:
        xva_py.validate_config(config.replace("sigma = 0.2", "sigma = -0.2"))
    except ValueError as e:
        assert "sigma" in str(e), e
    else:
        raise AssertionError("negative volatility accepted")

    report = xva_py.run(config, paths=20000, steps=20)
    y0, se = metric(report, "y0")
    bs = black_scholes_call(100.0, 100.0, 0.02, 0.2, 1.0)
    assert abs(y0 - bs) <= max(3 * se, 0.005 * bs), (y0, se, bs)
    again = xva_py.run(config, paths=20000, steps=20)
    assert again == report

    full = xva_py.run((FIXTURES / "full_xva.toml").read_text(), paths=5000, steps=10)
    cva, _ = metric(full, "cva")
    assert cva > 0.0
    print(f"xva_py {xva_py.__version__}: Y0 {y0:.4f} (Black-Scholes {bs:.4f}), full-fixture CVA {cva:.4f}")
    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
