"""Command-line entry point: generate, train, predict, evaluate, importance.

Exit codes: 0 success, 2 usage/configuration error, 3 data-format error,
4 numeric failure. Every command writes ``run_manifest.json`` next to its
output with the arguments, seed and SHA-256 digests of its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from ensflow import __version__
from ensflow import data as dt
from ensflow import metrics as mt
from ensflow import train as tr
from ensflow.errors import ConfigError, ContractViolation, FormatError, NumericError
from ensflow.heads import HEADS, LAWS, QUANTILE_LEVELS

log = logging.getLogger("ensflow")

PREDICTION_VERSION = 1
FLOAT_FORMAT = "%.10g"


def _digest(path: Path) -> dict:
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    out = {}
    for f in files:
        if f.name == "run_manifest.json":
            continue
        out[str(f)] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs=(), extra=None):
    args_d = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "version": __version__,
        "numpy_version": np.__version__,
        "arguments": args_d,
        "inputs": {str(p): _digest(p) for p in inputs},
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _ensure_writable(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"cannot write to {path}: {exc}") from None


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> None:
    cfg = dt.load_generator_config(args.spec) if args.spec else dt.GeneratorConfig()
    cfg.validate()
    out = Path(args.out)
    _ensure_writable(out)
    train_ds, test_ds = dt.generate_synthetic(cfg, args.seed)
    gen = {"config": cfg.to_dict(), "seed": args.seed}
    dt.save_dataset(train_ds, out / "train", generator=gen)
    dt.save_dataset(test_ds, out / "test", generator=gen)
    (out / "truth_law.json").write_text(json.dumps(
        {"kind": cfg.law, "separation": cfg.separation, "skew": cfg.skew,
         "parameters": "per-triple (center, scale, aux) in <dataset>/truth.bin"}, indent=2))
    _write_manifest(out, "generate", args, [Path(args.spec)] if args.spec else [])
    print(f"wrote {out / 'train'} {train_ds.dims} and {out / 'test'} {test_ds.dims}")


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> None:
    cfg = tr.RunConfig(
        head=args.head, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, weight_decay=args.weight_decay, validation_year=args.validation_year,
        hidden_dim=args.hidden_dim, train_path=str(args.train), out=str(args.out),
    )
    if cfg.epochs < 1 or cfg.batch_size < 1 or cfg.lr <= 0 or cfg.weight_decay < 0:
        raise ConfigError("epochs and batch size must be positive, lr > 0, weight decay >= 0")
    out = Path(args.out)
    _ensure_writable(out)
    ds = dt.load_dataset(args.train)
    result = tr.train(ds, cfg, log_path=out / "loss_curve.csv")
    tr.save_checkpoint(result.model, out)
    _write_manifest(out, "train", args, [Path(args.train)],
                    {"run_config": asdict(cfg), "best_epoch": result.best_epoch,
                     "best_validation_loss": result.best_val,
                     "initial_validation_loss": result.initial_val})
    print(f"best epoch {result.best_epoch}: validation loss {result.best_val:.4f} "
          f"(initial {result.initial_val:.4f})")


# ---------------------------------------------------------------------------
# predict


def _prediction_frame(ds: dt.ForecastDataset, params: np.ndarray, quantiles: np.ndarray) -> pd.DataFrame:
    S, N, _, T = ds.dims
    station, time, lead = np.meshgrid(np.arange(S), np.arange(N), np.arange(T), indexing="ij")
    cols = {
        "station": station.ravel(),
        "issue_index": time.ravel(),
        "year": np.broadcast_to(ds.years[None, :, None], (S, N, T)).ravel(),
        "day_of_year": np.broadcast_to(ds.day_of_year[None, :, None], (S, N, T)).ravel(),
        "lead": lead.ravel(),
    }
    P = params.shape[-1]
    p = params.reshape(-1, P)
    for i in range(P):
        cols[f"p{i}"] = p[:, i]
    q = quantiles.reshape(-1, quantiles.shape[-1])
    for i in range(q.shape[1]):
        cols[f"q{i + 1:03d}"] = q[:, i]
    return pd.DataFrame(cols)


def _check_compatible(model: tr.Model, ds: dt.ForecastDataset, ckpt_path: Path) -> None:
    meta = json.loads((ckpt_path / "checkpoint.json").read_text())
    if model.stats.mean.size != dt.N_FEATURES:
        raise FormatError(
            f"checkpoint feature statistics cover {model.stats.mean.size} features, dataset yields {dt.N_FEATURES}")
    if meta.get("feature_stats_sha256") != tr.stats_digest(model.stats):
        raise FormatError("checkpoint feature statistics do not match their recorded digest")
    if model.stats.provenance != "train":
        raise FormatError(f"feature statistics provenance is {model.stats.provenance!r}, expected 'train'")
    codes = set(meta.get("land_usage_codes", dt.LAND_USAGE_CODES))
    bad = [s.land_usage for s in ds.stations if s.land_usage not in codes]
    if bad:
        raise FormatError(f"dataset land-usage codes {sorted(set(bad))} unknown to the checkpoint")


def cmd_predict(args) -> None:
    ds = dt.load_dataset(args.dataset)
    out = Path(args.out)
    _ensure_writable(out.parent)
    if args.truth_law:
        if ds.truth is None:
            raise FormatError(f"{args.dataset} carries no truth law")
        law = ds.truth
        head, extra = "truth", {"kind": law.kind, "separation": law.separation}
        inputs = [Path(args.dataset)]
        params = law.params()
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --truth-law is given")
        model = tr.load_checkpoint(args.checkpoint)
        _check_compatible(model, ds, Path(args.checkpoint))
        samples = dt.build_samples(ds)
        law = model.law(samples)
        head, extra = model.head.name, {}
        inputs = [Path(args.checkpoint), Path(args.dataset)]
        params = law.params()
    q = law.quantiles(QUANTILE_LEVELS)
    frame = _prediction_frame(ds, params, q)
    frame.to_csv(out, index=False, float_format=FLOAT_FORMAT)
    sidecar = {"prediction_version": PREDICTION_VERSION, "head": head, "n_params": int(params.shape[-1]),
               "levels": "(i-0.5)/100, i=1..100", "dims": list(ds.dims), "dataset": str(args.dataset),
               "crossings": int(np.sum(np.diff(q, axis=-1) < 0)), **extra}
    Path(str(out) + ".json").write_text(json.dumps(sidecar, indent=2))
    _write_manifest(out.parent, "predict", args, inputs)
    print(f"wrote {len(frame)} prediction rows to {out}")


def read_predictions(path, ds: dt.ForecastDataset):
    """Rebuild ``(law, quantiles)`` from a prediction file aligned to ``ds``."""
    path = Path(path)
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
        frame = pd.read_csv(path)
    except FileNotFoundError as exc:
        raise FormatError(f"missing prediction file: {exc.filename}") from None
    S, N, _, T = ds.dims
    if len(frame) != S * N * T or list(meta.get("dims", []))[:2] != [S, N]:
        raise ContractViolation(
            f"{path.name}: {len(frame)} rows for dims {meta.get('dims')}, dataset needs {S}x{N}x{T}")
    expect = np.stack(np.meshgrid(np.arange(S), np.arange(N), np.arange(T), indexing="ij"), -1).reshape(-1, 3)
    if not np.array_equal(frame[["station", "issue_index", "lead"]].to_numpy(), expect):
        raise ContractViolation(f"{path.name}: rows are not aligned with the dataset")
    P = int(meta["n_params"])
    params = frame[[f"p{i}" for i in range(P)]].to_numpy().reshape(S * N, T, P)
    qcols = [c for c in frame.columns if c.startswith("q")]
    quant = frame[qcols].to_numpy().reshape(S * N, T, len(qcols))
    head = meta["head"]
    if head == "truth":
        law = dt.TruthLaw(meta["kind"], params[..., 0], params[..., 1], params[..., 2], meta["separation"])
    elif head in LAWS:
        law = LAWS[head].from_params(params)
    else:
        raise FormatError(f"unknown head {head!r} in {path.name}")
    return law, quant, head


class _FixedQuantiles:
    """Law wrapper serving the published quantile columns verbatim."""

    def __init__(self, law, quantiles):
        self.law, self.q = law, quantiles

    def quantiles(self, levels):
        return self.q

    def cdf(self, y):
        return self.law.cdf(y)

    def median(self):
        return self.law.median()


def cmd_evaluate(args) -> None:
    ds = dt.load_dataset(args.dataset)
    samples = dt.build_samples(ds)
    out = Path(args.out)
    _ensure_writable(out)

    def load(path, name):
        law, q, head = read_predictions(path, ds)
        # normal predictions keep the closed-form CRPS
        target = law if head == "normal" else _FixedQuantiles(law, q)
        return mt.score(target, samples.y, samples.station, name)

    names = args.names or [Path(p).stem for p in args.predictions]
    if len(names) != len(args.predictions) or len(set(names)) != len(names):
        raise ConfigError("--names must give one unique name per prediction file")
    scores = [load(p, n) for p, n in zip(args.predictions, names)]
    reference = load(args.reference, "reference") if args.reference else None
    meta = ds.meta_array
    report = mt.build_report(scores, meta[:, 0], meta[:, 1], reference=reference,
                             bins=args.bins, median_kernel=args.median_filter)
    report.write(out)
    inputs = [Path(p) for p in args.predictions] + [Path(args.dataset)]
    if args.reference:
        inputs.append(Path(args.reference))
    _write_manifest(out, "evaluate", args, inputs)
    for name, s in report.summary["per_model"].items():
        print(f"{name}: CRPS {s['crps']:.4f} bias {s['bias']:+.4f} QL {s['ql']:.4f} "
              f"PIT p={s['pit_chi2_pvalue']:.3g}" + (f" QSS {s['qss']:+.4f}" if s["qss"] is not None else ""))


def cmd_importance(args) -> None:
    model = tr.load_checkpoint(args.checkpoint)
    ds = dt.load_dataset(args.dataset)
    _check_compatible(model, ds, Path(args.checkpoint))
    out = Path(args.out)
    _ensure_writable(out)
    rng = tr.rng_streams(args.seed)["permutation"]
    matrix = mt.permutation_importance(model, dt.build_samples(ds), rng,
                                       repetitions=args.repetitions, identity=args.identity)
    mt.importance_frame(matrix).to_csv(out / "importance.csv", index=False, float_format=FLOAT_FORMAT)
    _write_manifest(out, "importance", args, [Path(args.checkpoint), Path(args.dataset)],
                    {"baseline": "per-output-lead mean loss of the unpermuted dataset",
                     "columns": "input lead 0..20 (mean+std jointly), static predictors"})
    print(f"wrote {out / 'importance.csv'}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ensflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic train/test dataset pair")
    g.add_argument("--spec", type=Path, help="generator config JSON (fields of GeneratorConfig)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one distribution head")
    t.add_argument("--train", type=Path, required=True, help="train-like dataset directory")
    t.add_argument("--head", choices=sorted(HEADS), default="flow")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=1e-6)
    t.add_argument("--validation-year", type=int, default=2016)
    t.add_argument("--hidden-dim", type=int, default=256)
    t.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write per-triple distribution parameters and quantiles")
    pr.add_argument("--checkpoint", type=Path)
    pr.add_argument("--dataset", type=Path, required=True)
    pr.add_argument("--truth-law", action="store_true", help="emit the generator's truth law instead")
    pr.add_argument("--out", type=Path, required=True, help="prediction CSV path")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score prediction files against observations")
    e.add_argument("--predictions", nargs="+", required=True)
    e.add_argument("--names", nargs="+")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--reference", help="prediction file used as QSS reference")
    e.add_argument("--bins", type=int, default=20)
    e.add_argument("--median-filter", type=int, default=None, metavar="KERNEL")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_evaluate)

    im = sub.add_parser("importance", help="permutation importance of input lead times")
    im.add_argument("--checkpoint", type=Path, required=True)
    im.add_argument("--dataset", type=Path, required=True)
    im.add_argument("--repetitions", type=int, default=5)
    im.add_argument("--seed", type=int, default=0)
    im.add_argument("--identity", action="store_true", help="debug: identity permutation")
    im.add_argument("--out", type=Path, required=True)
    im.set_defaults(func=cmd_importance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ContractViolation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
