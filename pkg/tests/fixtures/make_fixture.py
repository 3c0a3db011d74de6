"""Regenerate the CLI fixture grid (``grid.csv``) deterministically.

A 1-degree grid over 20N-30N, 120E-135E (six 5-degree boxes), 20 years of
monthly values: two common smooth trends and one common stochastic cycle
with box-specific loadings, plus cell-level noise. A few cells are missing.
"""

from pathlib import Path

import numpy as np

from ssdecomp.ingest import GriddedField, write_grid_csv

T = 240
LAT = np.arange(20, 31.0)
LON = np.arange(120, 136.0)


def make(seed: int = 2024) -> GriddedField:
    rng = np.random.default_rng(seed)
    trends = np.vstack([np.cumsum(np.cumsum(rng.standard_normal(T))) / 60.0,
                        np.cumsum(rng.standard_normal(T)) / 4.0])
    rho, lam = 0.98, 2 * np.pi / 48
    c, cs = 0.0, 0.0
    cycle = np.empty(T)
    for k in range(T):
        c, cs = (rho * (np.cos(lam) * c + np.sin(lam) * cs) + 0.3 * rng.standard_normal(),
                 rho * (-np.sin(lam) * c + np.cos(lam) * cs) + 0.3 * rng.standard_normal())
        cycle[k] = c
    nlat, nlon = LAT.size - 1, LON.size - 1
    box_lat, box_lon = np.arange(nlat) // 5, np.arange(nlon) // 5
    n_boxes = 2 * 3
    load = np.column_stack([1 + 0.5 * rng.random(n_boxes), rng.standard_normal(n_boxes),
                            0.5 + rng.random(n_boxes)])
    values = np.empty((T, nlat, nlon))
    for i in range(nlat):
        for j in range(nlon):
            b = box_lat[i] * 3 + box_lon[j]
            values[:, i, j] = (15 + 0.2 * i + load[b, 0] * trends[0] + load[b, 1] * trends[1]
                               + load[b, 2] * cycle + 0.5 * rng.standard_normal(T))
    values[rng.random(values.shape) < 0.01] = np.nan
    values[:, 3, 7] = np.nan
    return GriddedField(np.round(values, 4), LAT, LON, "1980-01")


if __name__ == "__main__":
    write_grid_csv(Path(__file__).with_name("grid.csv"), make())
