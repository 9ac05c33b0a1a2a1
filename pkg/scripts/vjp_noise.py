"""Relative error of the Monte-Carlo Top-K gradient against a finite difference, as the sample count grows.

Both estimators are noisy; the printed median and worst errors show how
slowly the per-coordinate error shrinks with n.
"""
import argparse

import numpy as np

from stts_lab.topk import PerturbConfig, soft_topk_forward, soft_topk_vjp


def coordinate_errors(n, cases, rng):
    errs = []
    for case in range(cases):
        L = int(rng.integers(2, 9))
        K = int(rng.integers(1, min(4, L - 1) + 1))
        s = rng.uniform(-1, 1, L)
        up = rng.uniform(-1, 1, (L, K))
        cfg = PerturbConfig(0.5, n, 1000 + case)
        g = soft_topk_vjp(s, K, cfg, up)
        for j in range(L):
            e = np.zeros(L)
            e[j] = 1e-2
            fd = ((soft_topk_forward(s + e, K, cfg).matrix * up).sum()
                  - (soft_topk_forward(s - e, K, cfg).matrix * up).sum()) / 2e-2
            if abs(fd) > 1e-3:
                errs.append(abs(g[j] - fd) / abs(fd))
    return np.array(errs)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cases", type=int, default=20)
    ap.add_argument("--samples", default="10000,100000,1000000")
    args = ap.parse_args()
    for n in (int(v) for v in args.samples.split(",")):
        errs = coordinate_errors(n, args.cases, np.random.default_rng(2))
        print(f"n={n:>8}  coords={errs.size}  median={np.median(errs):.3f}  "
              f"worst={errs.max():.3f}  within5%={np.mean(errs < 0.05):.2f}")


if __name__ == "__main__":
    main()
