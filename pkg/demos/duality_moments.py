"""L^p norms and entropy of the shift flow X_t = x + c w_t, by duality and in closed form."""

import math

from gaussflow import density as D
from gaussflow import fields as F
from gaussflow.sde import TimeGrid


def closed_form(p, c, t):
    return (1.0 - p * (p - 1.0) * c * c * t) ** (-1.0 / (2.0 * p))


def main():
    print(f"{'c':>5} {'t':>5} {'p':>4} {'estimate':>10} {'se':>8} {'exact':>9} {'bound':>9}")
    for c, t in ((1.0, 0.1), (0.5, 0.2), (0.2, 0.5)):
        ens = F.FieldEnsemble(F.zero(1), (F.constant([c]),))
        for p in (1.5, 2.0, 3.0):
            r = D.lp_norm_via_duality(ens, TimeGrid(t, 100), p, 4000, 16, seed=1)
            b = D.theorem22_bound(ens, p, t)
            print(f"{c:5.2f} {t:5.2f} {p:4.1f} {r.lp_estimate:10.5f} {r.lp_se:8.5f} "
                  f"{closed_form(p, c, t):9.5f} {b:9.5f}")
    ent = D.entropy_via_duality(F.FieldEnsemble(F.zero(1), (F.constant([1.0]),)), TimeGrid(0.1, 100), 4000, 16)
    print(f"entropy at c=1, t=0.1: {ent.entropy_estimate:.5f} +- {ent.entropy_se:.5f}")


if __name__ == "__main__":
    main()
