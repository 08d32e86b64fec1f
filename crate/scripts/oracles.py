#!/usr/bin/env python3
"""Regenerate the frozen reference values under crates/core/tests/data/.

Bounds and entropies are evaluated with mpmath at 50 significant digits;
the SVD fixture comes from numpy. Outputs are committed, so this only
needs rerunning when a fixture changes.

    python3 scripts/oracles.py
"""

import json
import pathlib

import mpmath as mp
import numpy as np

mp.mp.dps = 50
OUT = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "data"
MASK = (1 << 64) - 1


def f(x):
    return float(x)


def log2(x):
    return mp.log(x) / mp.log(2)


def delta(alpha, vocab):
    a = mp.mpf(alpha)
    return log2(1 + (1 - a) * vocab / a)


def prior(c_h):
    c = mp.mpf(c_h)
    return c * mp.log(2) + 2 * mp.log(c)


def subsampled(risk, width, prior_nats, m, n, conf):
    risk, width, prior_nats, conf = map(mp.mpf, (risk, width, prior_nats, conf))
    m, n = mp.mpf(m), mp.mpf(n)
    s = n / (n + m)
    complexity = width * mp.sqrt((prior_nats + mp.log(1 / (s * conf))) / (2 * m))
    subsampling = width * mp.sqrt(mp.log(1 / ((1 - s) * conf)) / (2 * n))
    return complexity, subsampling, risk + complexity + subsampling


def finite(risk, width, prior_nats, m, conf):
    risk, width, prior_nats, conf = map(mp.mpf, (risk, width, prior_nats, conf))
    return risk + width * mp.sqrt((prior_nats + mp.log(1 / conf)) / (2 * mp.mpf(m)))


def bound_row(risk, width, prior_nats, m, n, conf):
    c, s, t = subsampled(risk, width, prior_nats, m, n, conf)
    return {
        "risk": risk,
        "delta": width,
        "prior_nats": prior_nats,
        "m": m,
        "n": n,
        "confidence": conf,
        "complexity": f(c),
        "subsampling": f(s),
        "total": f(t),
    }


def bounds():
    rng = np.random.default_rng(20240611)
    rows = []
    for _ in range(100):
        rows.append(
            bound_row(
                float(rng.uniform(0, 8)),
                float(rng.uniform(0.01, 15)),
                float(rng.uniform(0, 1e5)),
                int(rng.integers(1, 1_000_000)),
                int(rng.integers(1, 100_000)),
                float(rng.uniform(1e-6, 0.5)),
            )
        )
    rows.append(bound_row(1.0, 3.0, 10.0, 1000, 10**12, 0.05))
    rows.append(bound_row(4.5, f(delta(0.1, 256)), 7000.0, 300_000, 10_000, 0.05))
    deltas = [
        {"alpha": a, "vocab": v, "delta": f(delta(a, v)), "upper": f(log2(mp.mpf(v) / mp.mpf(a)))}
        for a in [0.001, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 0.999, 1.0]
        for v in [2, 256, 50257]
    ]
    priors = [{"c_h": c, "prior_nats": f(prior(c))} for c in [2, 10, 1000, 8000, 123_456, 10**9]]
    finite_rows = [
        {"risk": 0.0, "delta": 1.0, "prior_nats": f(100 * mp.log(2)), "m": 200, "confidence": 0.05,
         "bound": f(finite(0, 1, 100 * mp.log(2), 200, 0.05))}
    ]
    return {"subsampled": rows, "delta": deltas, "prior": priors, "finite": finite_rows}


def splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def trailing_zeros(x):
    return (x & -x).bit_length() - 1 if x else 64


def entropy():
    """Symbol i is min(tz(splitmix64_i), 11): a truncated geometric source."""
    n, alphabet = 100_000, 12
    state, counts = 0, [0] * alphabet
    for _ in range(n):
        state, z = splitmix64(state)
        counts[min(trailing_zeros(z), alphabet - 1)] += 1
    h = -sum(mp.mpf(c) / n * log2(mp.mpf(c) / n) for c in counts if c)
    return {"n": n, "alphabet": alphabet, "counts": counts, "entropy_bits": f(h), "total_bits": f(n * h)}


def svd8():
    rng = np.random.default_rng(8)
    dw = rng.normal(size=(8, 8))
    u, s, vt = np.linalg.svd(dw)
    return {"delta_w": dw.ravel().tolist(), "u_s": (u * s).ravel().tolist(), "vt": vt.ravel().tolist()}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, make in [("bounds", bounds), ("entropy", entropy), ("svd8", svd8)]:
        (OUT / f"{name}.json").write_text(json.dumps(make(), indent=1) + "\n")
        print("wrote", OUT / f"{name}.json")


if __name__ == "__main__":
    main()
