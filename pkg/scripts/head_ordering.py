"""Train several heads on one synthetic dataset and print a score table.

Example:
    python3 scripts/head_ordering.py --law bimodal --heads normal flow --epochs 100
    python3 scripts/head_ordering.py --heads flow flow_free   # derivative comparison
"""

import argparse
import time

import numpy as np

from ensflow import data as dt
from ensflow import flow as fl
from ensflow import heads as hd
from ensflow import metrics as mt
from ensflow import train as tr


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--law", default="bimodal", choices=["gaussian", "skewed", "bimodal"])
    p.add_argument("--heads", nargs="+", default=["normal", "flow", "bernstein"])
    p.add_argument("--stations", type=int, default=20)
    p.add_argument("--train-per-year", type=int, default=365)
    p.add_argument("--test-per-year", type=int, default=100)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cfg = dt.GeneratorConfig(n_stations=args.stations, n_per_year=args.train_per_year,
                             test_n_per_year=args.test_per_year, years=(2014, 2015, 2016),
                             test_years=(2017,), law=args.law)
    train_ds, test_ds = dt.generate_synthetic(cfg, args.data_seed)
    test = dt.build_samples(test_ds)
    valid = np.isfinite(test.y)
    y = np.where(valid, test.y, 0.0)

    truth = test_ds.truth
    flat = lambda a: a.reshape(len(test), -1)
    truth = dt.TruthLaw(truth.kind, flat(truth.center), flat(truth.scale), flat(truth.aux), truth.separation)
    rows = [("truth", -np.log(truth.pdf(y))[valid].mean(), truth, 0.0, None)]
    for name in args.heads:
        t0 = time.perf_counter()
        run = tr.RunConfig(head="flow" if name == "flow_free" else name, epochs=args.epochs, seed=args.seed)
        res = tr.train(train_ds, run, head=hd.get_head(name))
        law = res.model.law(test)
        nll = -law.logpdf(y)[valid].mean() if hasattr(law, "logpdf") else np.nan
        flags = None
        if isinstance(law, hd.FlowLaw):
            p_ = law.params_
            flags = int(fl.slope_jump_flags(p_.knots, p_.values, p_.derivatives).sum())
        rows.append((name, nll, law, time.perf_counter() - t0, flags))

    print(f"{'model':<10} {'NLL':>8} {'CRPS':>8} {'QL':>8} {'PIT p':>9} {'flags':>6} {'time':>7}")
    for name, nll, law, secs, flags in rows:
        q = law.quantiles(hd.QUANTILE_LEVELS)
        crps = mt.crps_quantile_approx(q, y)[valid].mean()
        ql = hd.pinball_loss(q, y[..., None], hd.QUANTILE_LEVELS).mean(-1)[valid].mean()
        pit_p = mt.uniformity_pvalue(mt.pit_histogram(law.cdf(y)[valid], 20))
        print(f"{name:<10} {nll:8.4f} {crps:8.4f} {ql:8.4f} {pit_p:9.2e} {'' if flags is None else flags:>6} "
              f"{secs:6.0f}s")


if __name__ == "__main__":
    main()
