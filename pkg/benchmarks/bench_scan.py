"""Compare the compiled and numpy filter-scan kernels.

Times forward and forward+backward of the LKF and EKF scans for a few batch
shapes, checks that both backends agree, and prints one table row per case.

Usage::

    python benchmarks/bench_scan.py [--repeats 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from dssmcast._core import compiled_available, load_backend
from dssmcast.ssm import VAR_FLOOR

SHAPES = [(1, 48, 8), (16, 48, 8), (64, 48, 16), (256, 24, 8)]


def _inputs(B, T, K, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(B, T, K))
    l = rng.uniform(0.1, 2.0, (B, T, K))
    gamma = rng.uniform(0.5, 1.2, K)
    lam = rng.uniform(0.01, 0.5, K)
    m0, v0 = np.zeros((B, K)), np.ones((B, K))
    wf, wh = rng.normal(size=(2, K, 3 * K)) * 0.01
    lin = np.concatenate([np.zeros(K), np.ones(K), np.zeros(K)])
    g = rng.normal(size=(3, B, T, K))
    return dict(z=z, l=l, gamma=gamma, lam=lam, m0=m0, v0=v0, wf=wf, bf=lin.copy(), wh=wh, bh=lin.copy(), g=g)


def _calls(kern, a):
    def lkf_f():
        return kern.lkf_forward(a["z"], a["l"], a["gamma"], a["lam"], a["m0"], a["v0"])

    def lkf_fb():
        saved = lkf_f()
        return kern.lkf_backward(a["z"], a["l"], a["gamma"], a["lam"], a["m0"], a["v0"], saved, *a["g"])

    ekf_args = (a["z"], a["l"], a["lam"], a["wf"], a["bf"], a["wh"], a["bh"], a["m0"], a["v0"])

    def ekf_f():
        return kern.ekf_forward(*ekf_args, VAR_FLOOR)

    def ekf_fb():
        saved = ekf_f()
        return kern.ekf_backward(*ekf_args, saved, *a["g"])

    return {"lkf fwd": lkf_f, "lkf fwd+bwd": lkf_fb, "ekf fwd": ekf_f, "ekf fwd+bwd": ekf_fb}


def _max_diff(x, y) -> float:
    if isinstance(x, (tuple, list)):
        return max(_max_diff(a, b) for a, b in zip(x, y))
    x, y = np.asarray(x), np.asarray(y)
    if x.dtype == bool:
        return float(np.any(x != y))
    return float(np.max(np.abs(x - y))) if x.size else 0.0


def run(repeats: int = 5) -> list[dict]:
    py = load_backend("python")
    cy = load_backend("cython") if compiled_available() else None
    rows = []
    for B, T, K in SHAPES:
        a = _inputs(B, T, K)
        py_calls = _calls(py, a)
        cy_calls = _calls(cy, a) if cy else {}
        for name, fn in py_calls.items():
            t_py = min(timeit.repeat(fn, number=1, repeat=repeats))
            row = {"case": name, "B": B, "T": T, "K": K, "python_ms": 1e3 * t_py}
            if cy:
                t_cy = min(timeit.repeat(cy_calls[name], number=1, repeat=repeats))
                row.update(cython_ms=1e3 * t_cy, speedup=t_py / t_cy, max_abs_diff=_max_diff(fn(), cy_calls[name]()))
            rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write the rows as JSON")
    args = ap.parse_args(argv)
    rows = run(args.repeats)
    if not compiled_available():
        print("compiled extension not built; timing the numpy kernels only", file=sys.stderr)
    print(f"{'case':<13}{'B':>5}{'T':>5}{'K':>5}{'python ms':>12}{'cython ms':>12}{'speedup':>9}{'max|diff|':>11}")
    for r in rows:
        tail = (f"{r['cython_ms']:>12.3f}{r['speedup']:>8.1f}x{r['max_abs_diff']:>11.1e}" if "cython_ms" in r else "")
        print(f"{r['case']:<13}{r['B']:>5}{r['T']:>5}{r['K']:>5}{r['python_ms']:>12.3f}{tail}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
