"""Recompute the frozen PCE reference values in tests/oracles.py at 40 digits.

Needs mpmath (not a package dependency): pip install mpmath
"""

from mpmath import exp, log, mp, mpf

mp.dps = 40

# same transcription as tests/oracles.py, in the same term order
TABLE = {
    ("female", "white"): ((-29.799, 4.884, 13.540, -3.114, -13.578, 3.149, 2.019, 0, 1.957, 0, 7.574, -1.665, 0.661), -29.18, 0.9665),
    ("female", "black"): ((17.114, 0, 0.940, 0, -18.920, 4.475, 29.291, -6.432, 27.820, -6.087, 0.691, 0, 0.874), 86.61, 0.9533),
    ("male", "white"): ((12.344, 0, 11.853, -2.664, -7.990, 1.769, 1.797, 0, 1.764, 0, 7.837, -1.795, 0.658), 61.18, 0.9144),
    ("male", "black"): ((2.469, 0, 0.302, 0, -0.307, 0, 1.916, 0, 1.809, 0, 0.549, 0, 0.645), 19.54, 0.8954),
}

PROFILES = [
    ("male", "white", 55, 213, 50, 120, False, False, True),
    ("female", "white", 55, 213, 50, 120, False, False, True),
    ("male", "white", 62.5, 180, 38, 148, True, True, True),
    ("female", "white", 47, 240, 62, 132, True, False, True),
    ("male", "white", 55, 213, 50, 120, False, False, False),
    ("female", "white", 55, 213, 50, 120, False, False, False),
    ("male", "black", 55, 213, 50, 120, False, False, False),
    ("female", "black", 55, 213, 50, 120, False, False, False),
]


def risk(sex, race, age, tc, hdl, sbp, treated, smoker, diabetes):
    coef, mean, s0 = TABLE[(sex, race)]
    b = [mpf(str(c)) for c in coef]
    a, t, h, s = (log(mpf(str(v))) for v in (age, tc, hdl, sbp))
    trt, smk, dm = (mpf(int(v)) for v in (treated, smoker, diabetes))
    x = [a, a * a, t, a * t, h, a * h, s * trt, a * s * trt, s * (1 - trt), a * s * (1 - trt), smk, a * smk, dm]
    lp = sum(bi * xi for bi, xi in zip(b, x))
    return 1 - mpf(str(s0)) ** exp(lp - mpf(str(mean)))


if __name__ == "__main__":
    for p in PROFILES:
        print(p, mp.nstr(risk(*p), 20))
