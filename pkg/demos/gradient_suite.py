"""
Checking every gradient against finite differences
==================================================

The autodiff engine ships a table of checks covering elementwise ops,
reductions, convolution, the three normalisation layers (balancing weight
included), every loss, and the balancing-weight gradient through a whole
network. Each check draws random well-conditioned inputs and compares the
analytic gradient with a central difference.
"""

import numpy as np

from metabin import Tensor, finite_diff_check
from metabin.autograd.functional import softplus
from metabin.gradsuite import format_table, run_suite

###############################################################################
# One check by hand: softplus of a weighted sum.

w = Tensor(np.random.default_rng(0).normal(size=(4,)), requires_grad=True)
x = np.array([0.5, -1.0, 2.0, 0.25])
report = finite_diff_check(lambda w: softplus((w * x).sum()), w)
print(f"softplus(w.x): max relative error {report.max_error:.2e}")

###############################################################################
# The full table. Five instances keeps this quick; the acceptance suite uses 20.

rows = run_suite(instances=5)
print(format_table(rows))
print("all passed" if all(r.passed for r in rows) else "FAILURES")
