"""Model container, checkpoints and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ensflow import data as dt
from ensflow.errors import FormatError, NumericError
from ensflow.heads import Head, get_head
from ensflow.net import (
    NetworkConfig,
    NetworkParams,
    OptimizerState,
    PlateauScheduler,
    adam_step,
    backward,
    forward,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STREAMS = ("init", "dropout", "batching", "permutation")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one run seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


@dataclass
class RunConfig:
    head: str = "flow"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-6
    validation_year: int = 2016
    hidden_dim: int = 256
    num_layers: int = 6
    dropout_prob: float = 0.2
    lr_factor: float = 0.9
    lr_patience: int = 10
    train_path: str | None = None
    test_path: str | None = None
    out: str | None = None


@dataclass
class Model:
    head: Head
    params: NetworkParams
    stats: dt.FeatureStats
    manifest: dict = field(default_factory=dict)

    @property
    def config(self) -> NetworkConfig:
        return self.params.config

    def raw(self, samples: dt.Samples, batch: int = 4096) -> np.ndarray:
        x = dt.standardize(samples.features, self.stats)
        outs = [forward(self.params, x[i : i + batch])[0] for i in range(0, len(x), batch)]
        return np.concatenate(outs) if outs else np.zeros((0, self.config.output_dim))

    def law(self, samples: dt.Samples):
        return self.head.law(self.raw(samples), samples.ens_mean, samples.ens_std)

    def lead_loss(self, samples: dt.Samples) -> np.ndarray:
        return self.head.lead_loss(self.raw(samples), samples.ens_mean, samples.ens_std, samples.y)


def evaluate_loss(model: Model, samples: dt.Samples) -> float:
    """Mean per-lead loss over finite observations (full NLL or pinball)."""
    per = model.lead_loss(samples)
    return float(np.nanmean(per))


@dataclass
class TrainResult:
    model: Model
    history: pd.DataFrame
    best_epoch: int
    best_val: float
    initial_val: float


def train(
    train_ds: dt.ForecastDataset,
    cfg: RunConfig,
    head: Head | None = None,
    log_path=None,
) -> TrainResult:
    """Fit one head; keeps the parameters from the epoch with the lowest validation loss."""
    head = head or get_head(cfg.head)
    fit_ds, val_ds = dt.split_by_year(train_ds, cfg.validation_year)
    fit, val = dt.build_samples(fit_ds), dt.build_samples(val_ds)
    stats = dt.FeatureStats.fit(fit.features, provenance="train")
    x_fit = dt.standardize(fit.features, stats)

    streams = rng_streams(cfg.seed)
    net_cfg = NetworkConfig(
        input_dim=dt.N_FEATURES,
        hidden_dim=cfg.hidden_dim,
        num_layers=cfg.num_layers,
        dropout_prob=cfg.dropout_prob,
        output_dim=head.n_params,
    )
    params = NetworkParams.initialize(net_cfg, streams["init"])
    opt = OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, factor=cfg.lr_factor, patience=cfg.lr_patience)
    model = Model(head, params, stats)

    initial_val = evaluate_loss(model, val)
    best_val, best_epoch, best_flat = np.inf, -1, params.flatten()
    rows = []
    for epoch in range(cfg.epochs):
        batch_losses = []
        for b, idx in enumerate(dt.make_batches(len(fit), cfg.batch_size, streams["batching"])):
            out, tape = forward(params, x_fit[idx], mode="train", rng=streams["dropout"])
            loss, g = head.loss_and_grad(out, fit.ens_mean[idx], fit.ens_std[idx], fit.y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
            adam_step(opt, params, backward(tape, g))
            batch_losses.append(loss)
        val_loss = evaluate_loss(model, val)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        improved = val_loss < best_val
        if improved:
            best_val, best_epoch, best_flat = val_loss, epoch, params.flatten()
        rows.append({"epoch": epoch, "train_loss": float(np.mean(batch_losses)),
                     "val_loss": val_loss, "lr": opt.lr, "best": False})
        opt.lr = sched.step(val_loss)
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, rows[-1]["train_loss"], val_loss, rows[-1]["lr"])

    history = pd.DataFrame(rows, columns=["epoch", "train_loss", "val_loss", "lr", "best"])
    if best_epoch >= 0:
        history.loc[history.epoch == best_epoch, "best"] = True
    params.assign(best_flat)
    model.manifest = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "best_epoch": best_epoch,
        "best_validation_loss": best_val,
        "initial_validation_loss": initial_val,
        "run_config": asdict(cfg),
        "streams": list(STREAMS),
    }
    if log_path is not None:
        history.to_csv(log_path, index=False)
    return TrainResult(model, history, best_epoch, best_val, initial_val)


# ---------------------------------------------------------------------------
# checkpoints


def stats_digest(stats: dt.FeatureStats) -> str:
    h = hashlib.sha256(stats.mean.astype("<f8").tobytes() + stats.scale.astype("<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(model: Model, path) -> None:
    """Directory with ``checkpoint.json`` and ``params.bin`` (little-endian float64)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model.params.flat.astype("<f8").tofile(path / "params.bin")
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "head": model.head.name,
        "network": model.config.to_dict(),
        "n_params": int(model.params.flat.size),
        "feature_stats": model.stats.to_dict(),
        "feature_stats_sha256": stats_digest(model.stats),
        "land_usage_codes": list(dt.LAND_USAGE_CODES),
        "flow_composition": "data-side first",
        "manifest": model.manifest,
    }
    (path / "checkpoint.json").write_text(json.dumps(meta, indent=2, default=_json_default))


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        meta = json.loads((path / "checkpoint.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{path} has no checkpoint.json") from None
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
    net_cfg = NetworkConfig(**meta["network"])
    flat = np.fromfile(path / "params.bin", dtype="<f8")
    if flat.size != net_cfg.n_params:
        raise FormatError(f"params.bin holds {flat.size} values, network needs {net_cfg.n_params}")
    stats = dt.FeatureStats.from_dict(meta["feature_stats"])
    head = get_head(meta["head"])
    if head.n_params != net_cfg.output_dim:
        raise FormatError(f"head {head.name} needs {head.n_params} outputs, network has {net_cfg.output_dim}")
    return Model(head, NetworkParams(net_cfg, flat), stats, meta.get("manifest", {}))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
