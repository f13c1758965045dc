"""Permutation importance on the per-lead synthetic, printed as a 21 x 22 grid.

Each output lead depends only on its own input lead in this dataset, so the
matrix should be diagonal-dominant.

Example:
    python3 scripts/importance.py --head normal --epochs 30
"""

import argparse

import numpy as np

from ensflow import data as dt
from ensflow import metrics as mt
from ensflow import train as tr


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--head", default="normal", choices=["normal", "flow", "bernstein"])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cfg = dt.GeneratorConfig(n_stations=20, n_per_year=100, years=(2014, 2015, 2016), test_years=(2017,),
                             independent_leads=True)
    train_ds, test_ds = dt.generate_synthetic(cfg, 9)
    res = tr.train(train_ds, tr.RunConfig(head=args.head, epochs=args.epochs, seed=args.seed))
    m = mt.permutation_importance(res.model, dt.build_samples(test_ds), tr.rng_streams(args.seed)["permutation"],
                                  repetitions=args.repetitions)
    np.set_printoptions(linewidth=220, precision=2, suppress=True)
    print("rows: output lead, columns: input lead 0..20 then static predictors")
    print(m)
    hits = int((np.argmax(m, axis=1) == np.arange(21)).sum())
    print(f"rows whose maximum is on the diagonal: {hits}/21")


if __name__ == "__main__":
    main()
