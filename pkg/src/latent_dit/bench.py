"""Timing harness for exact vs low-rank attention and the rank phase sweep."""

import csv
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from ._validation import DomainError
from .fast_attention import (
    InfeasibilityWarning,
    attention_exact,
    inference_fast,
    random_instance,
    rank_for_accuracy,
)

__all__ = ["BenchResult", "bench_scaling", "phase_sweep", "loglog_slope", "write_csv", "time_call"]

BENCH_HEADER = ("L", "d", "exact_ns_median", "fast_ns_median", "max_err")
PHASE_HEADER = ("c", "gamma", "degree_g", "rank_k1", "feasible")


def d_rule(L):
    return int(math.ceil(math.log2(L)))


def gamma_rule(c, L):
    return c * math.sqrt(math.log(L))


def time_call(fn, min_total=0.05, min_trials=3, warmup=1):
    """Median wall time in ns of ``fn()``.

    Warm-up calls are discarded, then calls repeat until at least
    ``min_trials`` were timed and their total reaches ``min_total`` seconds.
    """
    for _ in range(warmup):
        fn()
    times = []
    while len(times) < min_trials or sum(times) < min_total * 1e9:
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times)), len(times)


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass
class BenchResult:
    rows: list  # dicts keyed by BENCH_HEADER
    slope_exact: float
    slope_fast: float
    params: dict

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_HEADER)
            for r in self.rows:
                w.writerow([r[k] for k in BENCH_HEADER])
            fh.write(f"# slope_exact={self.slope_exact:.6f}\n")
            fh.write(f"# slope_fast={self.slope_fast:.6f}\n")


def bench_scaling(L_list, c=0.01, eps_target=1e-3, seed=0, min_total=0.05, min_trials=3):
    """Median timings of exact and low-rank attention over sequence lengths.

    Uses ``d = ceil(log2 L)`` and entry bound ``Gamma = c sqrt(ln L)``. Accuracy
    is measured once per row outside the timed region. Slopes are log-log
    least-squares fits over the top half ``L_list[len // 2:]``.
    """
    L_list = [int(L) for L in L_list]
    if len(L_list) < 2 or L_list != sorted(L_list):
        raise DomainError("L_list must be ascending with at least two entries")
    if any(L < 2 or L & (L - 1) for L in L_list):
        raise DomainError("every L must be a power of two")
    rows = []
    for L in L_list:
        d = d_rule(L)
        gamma = gamma_rule(c, L)
        inst = random_instance(L, d, gamma, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", InfeasibilityWarning)
            ref = attention_exact(inst)
            approx = inference_fast(inst, eps_target, gamma_bound=gamma)
            err = float(np.max(np.abs(ref - approx)))
            g, k1 = rank_for_accuracy(gamma, d, eps_target)
            t_exact, n_exact = time_call(lambda: attention_exact(inst), min_total, min_trials)
            t_fast, n_fast = time_call(lambda: inference_fast(inst, eps_target, gamma_bound=gamma),
                                       min_total, min_trials)
        rows.append({"L": L, "d": d, "exact_ns_median": t_exact, "fast_ns_median": t_fast, "max_err": err,
                     "degree_g": g, "rank_k1": k1, "trials_exact": n_exact, "trials_fast": n_fast})
    top = rows[len(rows) // 2:]
    Ls = [r["L"] for r in top]
    se = loglog_slope(Ls, [r["exact_ns_median"] for r in top])
    sf = loglog_slope(Ls, [r["fast_ns_median"] for r in top])
    params = {"L_list": L_list, "c": c, "eps_target": eps_target, "seed": seed}
    return BenchResult(rows, se, sf, params)


def phase_sweep(L, c_list, eps_target=1e-3, d=None):
    """Required Taylor degree and rank for ``Gamma = c sqrt(ln L)``.

    ``feasible`` is ``k1 <= L``. ``d`` defaults to ``ceil(log2 L)``.
    """
    d = d_rule(L) if d is None else int(d)
    rows = []
    for c in c_list:
        if c < 0:
            raise DomainError("c must be non-negative")
        gamma = gamma_rule(c, L)
        g, k1 = rank_for_accuracy(gamma, d, eps_target)
        rows.append({"c": float(c), "gamma": gamma, "degree_g": g, "rank_k1": k1, "feasible": k1 <= L})
    return rows


def write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[k] for k in header])
