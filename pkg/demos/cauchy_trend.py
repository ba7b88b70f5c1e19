"""Flows of successive mollifications of a Holder drift, coupled on common noise.

A reduced version of the full diagnostic (which uses 1000 x 1000 samples at
h = 1e-3); expect the sup-distance moment to fall by about an order of
magnitude per factor of 16 in n while I_nk stays of order one.
"""

from gaussflow import fields as F
from gaussflow import stability as T
from gaussflow.sde import TimeGrid

base = F.FieldEnsemble(F.power_alpha(0.5, [1.0]), (F.constant([1.0]),))
grid = TimeGrid(1.0, 250)
print(f"{'n':>4} {'k':>4} {'sigma_nk':>10} {'I_nk':>8} {'E sup^2':>10}")
for n, k in ((4, 8), (16, 32), (64, 128)):
    c = T.cauchy_diagnostic(base, n, k, 2.0, grid, R=10.0, n_paths=200, n_initials=200, seed=0, q=1.5)
    print(f"{n:4d} {k:4d} {c.sigma_nk:10.5f} {c.I_nk:8.4f} {c.sup_moment:10.3e}")
