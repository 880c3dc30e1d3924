#!/usr/bin/env python3
"""Writes the Shapiro-Wilk reference table used by the stats tests.

Samples are drawn with a fixed numpy seed; W and p come from scipy.stats.shapiro.
"""
import json
import sys

import numpy as np
import scipy
from scipy import stats

rng = np.random.default_rng(20240611)
cases = []


def add(kind, values):
    values = [float(v) for v in values]
    res = stats.shapiro(values)
    cases.append({"kind": kind, "values": values, "w": float(res.statistic), "p": float(res.pvalue)})


for i in range(150):
    n = int(rng.integers(10, 51))
    kind = ("normal", "uniform", "binomial")[i % 3]
    if kind == "normal":
        v = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.5, 3), size=n)
    elif kind == "uniform":
        v = rng.uniform(0, 1, size=n)
    else:
        v = rng.binomial(int(rng.integers(16, 129)), 0.5, size=n)
    add(kind, v)

add("normal_quantiles", stats.norm.ppf((np.arange(1, 31) - 0.5) / 30))
add("two_point", rng.integers(0, 2, size=30))

json.dump({"generator": f"scipy {scipy.__version__}", "cases": cases}, sys.stdout, indent=1)
sys.stdout.write("\n")
