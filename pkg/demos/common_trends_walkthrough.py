"""Common trends and cycles of a gridded sea-surface temperature field you supply.

    python demos/common_trends_walkthrough.py GRID.csv [--boundary YYYY-MM LATE.csv]
        [--index INDEX_FILE] [--out results]

Steps, all through the library API so each intermediate can be inspected:

1. box-average a 1-degree ``time,lat,lon,value`` grid into 5-degree boxes over
   20N-65N, 110E-100W by default (optionally stitching a second dataset at a boundary
   month and reporting the overlap offsets);
2. decompose every box series into an integrated-random-walk trend, a
   stochastic cycle and noise;
3. identify common trends from the smoothed trends and common cycles from the
   smoothed cycles, printing singular values and cycle periods;
4. map the correlation of each box with common trend 1, and, when an index
   series is given, correlate it with common trend 1 (the correlation anchors);
5. rebuild the trend of the first box from the first k common trends.
"""

import argparse
import warnings
from pathlib import Path

import numpy as np

from ssdecomp import ingest
from ssdecomp.factors import (correlation_map, identify_common_factors, prepare_cycle_panel,
                              prepare_trend_panel, reconstruct, write_table_csv)
from ssdecomp.spectral import find_peaks, periodogram
from ssdecomp.structural import ComponentSpec, CycleSpec, FitError, TrendSpec, fit_mle
from ssdecomp.timeseries import TimeSeries, month_index

STUDY_REGION = (20.0, 65.0, 110.0, 260.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("grid")
    ap.add_argument("--boundary", nargs=2, metavar=("YYYY-MM", "LATE_GRID"))
    ap.add_argument("--index", help="index file (YYYY MM value) to correlate with trend 1")
    ap.add_argument("--region", nargs=4, type=float, default=STUDY_REGION,
                    metavar=("SOUTH", "NORTH", "WEST", "EAST"))
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    field = ingest.read_grid_csv(args.grid)
    if args.boundary:
        late = ingest.read_grid_csv(args.boundary[1])
        res = ingest.stitch_datasets(field, late, args.boundary[0])
        field = res.field
        if res.overlap_offsets is not None:
            print(f"overlap {res.overlap_months} months, mean offset "
                  f"{np.nanmean(res.overlap_offsets):+.3f} (not applied)")
    region = ingest.BoxRegion(*args.region, 5.0)
    boxes = ingest.to_panel(ingest.box_average(field, region), region)
    print(f"{len(boxes)} boxes, {field.start} .. {field.end}")

    spec = ComponentSpec(trend=TrendSpec(2), cycle=CycleSpec())
    decomps, kept = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for b in boxes:
            try:
                decomps.append(fit_mle(spec, b.series))
                kept.append(b)
            except FitError as exc:
                print(f"  {b.label}: skipped ({exc})")
    locations = [b.location for b in kept]
    trends = prepare_trend_panel(decomps, locations=locations)
    cycles = prepare_cycle_panel(decomps, locations=locations)

    ct = identify_common_factors(trends)
    cc = identify_common_factors(cycles)
    print(f"common trends: order {ct.order}, singular values {np.round(ct.singular_values[:6], 3)}")
    print(f"common cycles: order {cc.order}, singular values {np.round(cc.singular_values[:6], 3)}")
    sup = cc.support
    for k in range(cc.order):
        x = TimeSeries(cc.factor_paths[k, sup], cycles.start, cycles.step)
        peaks = ", ".join(f"{p.period / 12:.2f}" for p in find_peaks(periodogram(x), 2))
        print(f"  common cycle {k + 1}: spectral peaks at {peaks} years")

    corr = correlation_map(trends, ct.factor_paths[0])
    write_table_csv(out / "correlation_trend1.csv", corr)
    print(f"correlation with common trend 1 written to {out / 'correlation_trend1.csv'}")

    if args.index:
        url = Path(args.index).resolve().as_uri() if Path(args.index).exists() else args.index
        idx = ingest.fetch_index(url, name="index")
        offset = (month_index(trends.start) - month_index(idx.start)) // idx.step
        a = ct.factor_paths[0]
        b = np.full(a.size, np.nan)
        lo, hi = max(0, -offset), min(a.size, idx.values.size - offset)
        if hi > lo:
            b[lo:hi] = idx.values[lo + offset: hi + offset]
        ok = np.isfinite(a) & np.isfinite(b)
        if ok.sum() < 3:
            print("the index does not overlap the field's common-trend support")
        else:
            r = np.corrcoef(a[ok], b[ok])[0, 1]
            print(f"correlation of the index with common trend 1: {r:+.3f} ({ok.sum()} steps)")

    rep = reconstruct(ct, trends, 0)
    for row in rep.to_rows():
        print(f"  {rep.name} trend from {row['k']} common trend(s): R2 {row['r2']:.3f}")


if __name__ == "__main__":
    main()
