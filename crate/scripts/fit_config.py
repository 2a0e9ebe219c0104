#!/usr/bin/env python3
"""Recompute the loss / dead-time fit behind configs/paper-10km.cfg.

Uses mpmath at 30 digits so the numbers quoted in configs/FIT.md can be
checked independently of the Rust implementation.
"""
from mpmath import mp, mpf, log, exp, findroot

mp.dps = 30

NU = mpf("2e9")
MU = mpf("0.2")
ETA_EFF = mpf("0.04") * mpf("0.75")
P_DARK = 2 * mpf(30000) * mpf("280e-12")
E_BASE = mpf("0.01")
F_EC = mpf("1.16")


def pc0(e):
    return max(mpf(0), 1 - e**2 - (1 - 6 * e) ** 2 / 2)


def tau(e, mu):
    return -(1 - 2 * mu) * log(pc0(e), 2)


def h2(e):
    if e in (0, 1):
        return mpf(0)
    return -e * log(e, 2) - (1 - e) * log(1 - e, 2)


def threshold(mu, f):
    lo, hi = mpf("1e-12"), mpf(3) / 19
    for _ in range(200):
        mid = (lo + hi) / 2
        if tau(mid, mu) - f * h2(mid) > 0:
            lo = mid
        else:
            hi = mid
    return lo


def qber(p_sig):
    return (E_BASE * p_sig + P_DARK / 2) / (p_sig + P_DARK)


def point(t, dead_time):
    p_sig = MU * t * ETA_EFF
    x = NU * p_sig
    r_sift = x * exp(-x * dead_time / 2)
    e = qber(p_sig)
    bracket = tau(e, MU) - F_EC * h2(e)
    return r_sift, e, r_sift * max(bracket, 0)


def main():
    best = None
    for i in range(1, 4000):
        t = mpf(i) / 10000
        r_sift, e, r_sec = point(t, 0)
        j = ((r_sec - mpf("1.34e6")) / mpf("0.134e6")) ** 2 + ((e - mpf("0.015")) / mpf("0.003")) ** 2
        if best is None or j < best[0]:
            best = (j, t, r_sift, e, r_sec)
    j, t, r_sift, e, r_sec = best
    print(f"grid optimum (t_d = 0): T={float(t):.4f} loss={float(-10 * log(t, 10)):.3f} dB "
          f"R_sift={float(r_sift):.4g} qber={float(e):.5f} R_secure={float(r_sec):.4g} J={float(j):.4f}")

    t_exact = findroot(lambda t: point(t, 0)[2] - mpf("1.34e6"), mpf("0.3"))
    print(f"R_secure = 1.34e6 exactly at T={float(t_exact):.5f} "
          f"({float(-10 * log(t_exact, 10)):.3f} dB), qber={float(point(t_exact, 0)[1]):.5f}")

    e_star = threshold(MU, F_EC)
    p_cut = (P_DARK / 2 - e_star * P_DARK) / (e_star - E_BASE)
    t_cut = p_cut / (MU * ETA_EFF)
    print(f"threshold e*={float(e_star):.6f}; cutoff p_sig={float(p_cut):.4e} "
          f"T={float(t_cut):.5f} ({float(-10 * log(t_cut, 10)):.3f} dB)")

    attenuation, excess = mpf("0.35"), mpf("1.4")
    t10 = mpf(10) ** (-(10 * attenuation + excess) / 10)
    r_sift, e, r_sec = point(t10, 0)
    cutoff_km = (-10 * log(t_cut, 10) - excess) / attenuation
    print(f"shipped config: R_sift={float(r_sift):.5g} qber={float(e):.5f} "
          f"R_secure={float(r_sec):.5g} cutoff={float(cutoff_km):.2f} km")


if __name__ == "__main__":
    main()
