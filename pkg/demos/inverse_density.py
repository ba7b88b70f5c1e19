"""Push-forward density of an OU flow along one noise path: inverse flow, KDE and the exact Euler map."""

import numpy as np
from scipy import stats

from gaussflow import density as D
from gaussflow import fields as F
from gaussflow.sde import TimeGrid, sample_brownian

ens = F.FieldEnsemble(F.linear([[-1.0]]), (F.constant([1.0]),))
grid = TimeGrid(0.5, 500)
path = sample_brownian(grid, 1, seed=3, index=0)
y = np.linspace(-2, 2, 9)

inv = D.density_via_inverse(ens, grid, grid.T, y[:, None], path)
kde = D.pushforward_kde(D.pushforward_sample(ens, grid, 100_000, seed=3), y)

# the Euler map is affine: x -> a x + shift
a = (1 - grid.h) ** grid.N
shift = 0.0
for dw in path.increments[:, 0]:
    shift = (1 - grid.h) * shift + dw
exact = stats.norm.pdf(y, loc=shift, scale=a) / stats.norm.pdf(y)

print(f"{'y':>6} {'inverse':>10} {'kde':>10} {'exact':>10}")
for row in zip(y, inv.K, kde.K, exact):
    print("{:6.2f} {:10.5f} {:10.5f} {:10.5f}".format(*row))
