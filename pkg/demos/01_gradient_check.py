"""Finite-difference check of every differentiable op in the autodiff engine.

Runs the full suite in float64 and prints one row per op with the worst
relative error across its random cases.

    python3 demos/01_gradient_check.py
"""
from rfbnet import gradcheck

results, elapsed = gradcheck.timed_run("all", seed=0)
print(gradcheck.format_table(results, elapsed))

# a single case, shown in the open: dilated conv against its numerical gradient
import numpy as np
from rfbnet import tensor as T

rng = np.random.default_rng(0)
x, w = rng.standard_normal((1, 2, 9, 9)), rng.standard_normal((3, 2, 3, 3))
err = gradcheck.check(lambda t: T.conv2d(t[0], t[1], padding=3, dilation=3), [x, w], rng)
print(f"\nconv2d d=3 on 9x9 input: max relative error {err:.2e}")
