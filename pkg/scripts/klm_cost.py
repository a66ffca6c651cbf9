"""KL-matching cost versus class count: comparisons and wall time for a
dataset with one example per class (quadratic in C)."""

import time

import numpy as np

from pepr import nn
from pepr.scoring import KlmCounter, fit_klm_templates, score_klm


def main():
    rng = np.random.default_rng(0)
    print(f"{'C':>6} {'comparisons':>12} {'seconds':>9}")
    for c in (50, 100, 200, 400, 800):
        probs = nn.softmax(rng.standard_normal((c, c)) * 3)
        t = fit_klm_templates(probs, np.arange(c))
        counter = KlmCounter()
        t0 = time.perf_counter()
        score_klm(probs, t, counter)
        print(f"{c:6d} {counter.comparisons:12d} {time.perf_counter() - t0:9.3f}")


if __name__ == "__main__":
    main()
