#!/usr/bin/env python3
"""Write the high-precision reference grid used by crates/core/tests/oracle_grid.rs.

Every value is computed with mpmath at 40 digits, independently of the Rust
code, and printed with 17 significant digits.

    python3 scripts/oracle_grid.py
"""
from pathlib import Path

from mpmath import mp, mpf, log, nstr

mp.dps = 40

OUT = Path(__file__).resolve().parent.parent / "crates/core/tests/data"
QBERS = [mpf(i) / 200 for i in range(1, 21)]  # 0.005 .. 0.1
MUS = [mpf(m) for m in ("0.05", "0.1", "0.2", "0.3", "0.4")]
F_EC = mpf("1.16")


def pc0(e):
    return min(mpf(1), max(mpf(0), 1 - e**2 - (1 - 6 * e) ** 2 / 2))


def tau(e, mu):
    return min(mpf(1), max(mpf(0), -(1 - 2 * mu) * log(pc0(e), 2)))


def h2(e):
    return -e * log(e, 2) - (1 - e) * log(1 - e, 2)


def threshold(mu, f):
    lo, hi = mpf(0), mpf(3) / 19
    for _ in range(200):
        mid = (lo + hi) / 2
        if tau(mid, mu) - f * h2(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def fmt(x):
    return nstr(x, 17, strip_zeros=False, min_fixed=-30, max_fixed=30)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rows = ["qber,mu,p_c0,tau,h2,secure_fraction"]
    for mu in MUS:
        for e in QBERS:
            t = tau(e, mu)
            rows.append(",".join(fmt(v) for v in (e, mu, pc0(e), t, h2(e), t - F_EC * h2(e))))
    (OUT / "oracle_grid.csv").write_text("\n".join(rows) + "\n")

    rows = ["mu,ec_inefficiency,threshold"]
    for mu in MUS:
        for f in (mpf(1), mpf("1.16"), mpf("1.3")):
            rows.append(",".join(fmt(v) for v in (mu, f, threshold(mu, f))))
    (OUT / "threshold_grid.csv").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
