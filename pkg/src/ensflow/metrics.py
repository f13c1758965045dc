"""Forecast verification: CRPS, bias, quantile loss/skill, PIT, rankings, importance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from scipy.ndimage import median_filter
from scipy.special import ndtr

from ensflow.errors import ContractViolation
from ensflow.heads import QUANTILE_LEVELS, NormalLaw, count_crossings, pinball_loss

LEAD_TIMES = 21
ALTITUDE_BANDS = (("(-5, 800]", -5.0, 800.0, True), ("(800, 2000]", 800.0, 2000.0, True),
                  ("(2000, 3600)", 2000.0, 3600.0, False))
INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


def crps_normal(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma) at y."""
    sigma = np.asarray(sigma, float)
    if np.any(sigma <= 0):
        raise ContractViolation("sigma must be positive")
    z = (np.asarray(y, float) - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - INV_SQRT_PI)


def crps_quantile_approx(quantiles, y, levels=QUANTILE_LEVELS):
    """Twice the level-averaged pinball loss; ``quantiles`` has a trailing level axis."""
    q = np.asarray(quantiles, float)
    return 2.0 * pinball_loss(q, np.asarray(y, float)[..., None], np.asarray(levels)).mean(axis=-1)


def bias(median, y):
    """Mean of (predictive median - observation) over finite observations."""
    diff = np.asarray(median, float) - np.asarray(y, float)
    return float(np.nanmean(diff))


def qss(ql_model, ql_reference):
    ql_reference = np.asarray(ql_reference, float)
    if np.any(ql_reference <= 0):
        raise ContractViolation("reference quantile loss must be positive")
    return 1.0 - np.asarray(ql_model, float) / ql_reference


def pit_histogram(u, bins: int = 20) -> np.ndarray:
    """Counts of PIT values per equal-width bin; u == 1 goes to the last bin."""
    if bins < 2:
        raise ContractViolation("need at least two bins")
    u = np.asarray(u, float).ravel()
    u = u[np.isfinite(u)]
    idx = np.minimum((u * bins).astype(int), bins - 1)
    return np.bincount(idx, minlength=bins)


def uniformity_pvalue(counts) -> float:
    """Chi-square goodness-of-fit p-value against a flat histogram."""
    return float(stats.chisquare(np.asarray(counts, float)).pvalue)


# ---------------------------------------------------------------------------
# per-triple scores


@dataclass
class Scores:
    """Per (sample, lead) verification quantities for one model."""

    name: str
    crps: np.ndarray  # (n, 21)
    median: np.ndarray  # (n, 21)
    ql: np.ndarray  # (n, 21, L)
    pit: np.ndarray  # (n, 21)
    y: np.ndarray  # (n, 21)
    station: np.ndarray  # (n,)
    crossings: int = 0
    levels: np.ndarray = field(default_factory=lambda: QUANTILE_LEVELS)


def score(law, y, station, name: str, levels=QUANTILE_LEVELS, closed_form_normal: bool = True) -> Scores:
    """Score a predictive law against observations ``y`` (NaN = missing)."""
    y = np.asarray(y, float)
    valid = np.isfinite(y)
    yy = np.where(valid, y, 0.0)
    q = law.quantiles(levels)
    crossings = count_crossings(q)
    if closed_form_normal and isinstance(law, NormalLaw):
        crps = crps_normal(law.mu, law.sigma, yy)
    else:
        crps = crps_quantile_approx(q, yy, levels)
    ql = pinball_loss(q, yy[..., None], np.asarray(levels))
    pit = law.cdf(yy)
    nan = np.where(valid, 0.0, np.nan)
    return Scores(
        name=name,
        crps=crps + nan,
        median=law.median() + nan,
        ql=ql + nan[..., None],
        pit=pit + nan,
        y=y,
        station=np.asarray(station),
        crossings=crossings,
        levels=np.asarray(levels, float),
    )


@dataclass
class VerificationReport:
    models: list[str]
    crps_by_lead: pd.DataFrame
    bias_by_lead: pd.DataFrame
    ql_by_quantile: pd.DataFrame
    pit_hist: pd.DataFrame
    station_crps: pd.DataFrame
    qss_by_band: pd.DataFrame
    summary: dict

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.crps_by_lead.to_csv(out / "crps_by_lead.csv", index=False)
        self.bias_by_lead.to_csv(out / "bias_by_lead.csv", index=False)
        self.ql_by_quantile.to_csv(out / "qss_by_quantile.csv", index=False)
        self.pit_hist.to_csv(out / "pit_hist.csv", index=False)
        self.qss_by_band.to_csv(out / "qss_by_band.csv", index=False)
        self.station_crps.to_csv(out / "station_ranking.csv", index=False)
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2))


def _station_mean(values, station, n_stations):
    v = values.reshape(len(station), -1)
    sums = np.zeros(n_stations)
    counts = np.zeros(n_stations)
    ok = np.isfinite(v)
    np.add.at(sums, station, np.where(ok, v, 0.0).sum(axis=1))
    np.add.at(counts, station, ok.sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts, counts


def station_band(altitude: float) -> str | None:
    for label, lo, hi, closed in ALTITUDE_BANDS:
        if lo < altitude and (altitude <= hi if closed else altitude < hi):
            return label
    return None


def altitude_band_report(ql_model, ql_reference, station, altitudes, levels=QUANTILE_LEVELS) -> pd.DataFrame:
    """Per-band, per-level QSS.

    ``ql_*`` are per-triple quantile losses ``(n, 21, L)``; they are pooled over
    lead times, time samples and the band's stations before the skill score.
    Empty bands are left out.
    """
    altitudes = np.asarray(altitudes, float)
    bands = np.array([station_band(a) for a in altitudes], dtype=object)
    rows = []
    for label, *_ in ALTITUDE_BANDS:
        members = np.flatnonzero(bands == label)
        if members.size == 0:
            continue
        sel = np.isin(station, members)
        m = np.nanmean(ql_model[sel], axis=(0, 1))
        r = np.nanmean(ql_reference[sel], axis=(0, 1))
        for lev, a, b in zip(levels, m, r):
            rows.append({"band": label, "level": lev, "n_stations": members.size,
                         "ql": a, "ql_reference": b, "qss": float(qss(a, b))})
    return pd.DataFrame(rows, columns=["band", "level", "n_stations", "ql", "ql_reference", "qss"])


def per_station_ranking(station_crps: dict[str, np.ndarray]) -> tuple[dict[str, int], int, np.ndarray]:
    """Wins per model by per-station mean CRPS.

    Ties go to the model listed first; returns (wins, tie count, winner index per station).
    """
    names = list(station_crps)
    arrays = [np.asarray(station_crps[n], float) for n in names]
    if len({a.shape for a in arrays}) != 1:
        raise ContractViolation("all models must cover the same stations")
    table = np.stack(arrays)  # (models, stations)
    best = np.min(table, axis=0)
    winner = np.argmax(table == best, axis=0)  # first model achieving the minimum
    ties = int(np.sum(np.sum(table == best, axis=0) > 1))
    wins = {n: int(np.sum(winner == i)) for i, n in enumerate(names)}
    return wins, ties, winner


def smooth_station_crps(crps, altitude_difference, kernel: int = 15) -> tuple[np.ndarray, np.ndarray]:
    """Median-filtered per-station CRPS ordered by |station - model altitude| (presentation only)."""
    order = np.argsort(np.abs(altitude_difference), kind="stable")
    return np.abs(altitude_difference)[order], median_filter(np.asarray(crps)[order], size=kernel, mode="nearest")


def build_report(
    scores: list[Scores],
    altitudes,
    model_altitudes=None,
    reference: Scores | None = None,
    bins: int = 20,
    median_kernel: int | None = None,
) -> VerificationReport:
    if not scores:
        raise ContractViolation("nothing to report")
    first = scores[0]
    for s in scores[1:] + ([reference] if reference is not None else []):
        if s.y.shape != first.y.shape or not np.array_equal(s.station, first.station):
            raise ContractViolation(f"scores for {s.name!r} are not aligned with {first.name!r}")
        if not np.array_equal(np.isnan(s.y), np.isnan(first.y)) or not np.allclose(
            s.y, first.y, equal_nan=True
        ):
            raise ContractViolation(f"observations for {s.name!r} differ from {first.name!r}")
    names = [s.name for s in scores]
    n_st = len(altitudes)
    leads = np.arange(LEAD_TIMES)

    crps_df = pd.DataFrame({"lead": leads, **{s.name: np.nanmean(s.crps, axis=0) for s in scores}})
    bias_df = pd.DataFrame({"lead": leads,
                            **{s.name: np.nanmean(s.median - s.y, axis=0) for s in scores}})
    qdf = {"level": first.levels}
    for s in scores:
        qdf[f"ql_{s.name}"] = np.nanmean(s.ql, axis=(0, 1))
    if reference is not None:
        ref_ql = np.nanmean(reference.ql, axis=(0, 1))
        qdf[f"ql_{reference.name}"] = ref_ql
        for s in scores:
            qdf[f"qss_{s.name}"] = qss(qdf[f"ql_{s.name}"], ref_ql)
    ql_df = pd.DataFrame(qdf)

    edges = np.linspace(0.0, 1.0, bins + 1)
    pit_df = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:],
                           **{s.name: pit_histogram(s.pit, bins) for s in scores}})

    st = {"station": np.arange(n_st), "altitude": np.asarray(altitudes, float)}
    if model_altitudes is not None:
        st["altitude_difference"] = np.asarray(altitudes, float) - np.asarray(model_altitudes, float)
    station_crps = {}
    for s in scores:
        station_crps[s.name], counts = _station_mean(s.crps, s.station, n_st)
        st[f"crps_{s.name}"] = station_crps[s.name]
    st["n_scored"] = counts.astype(int)
    st["n_missing"] = (np.bincount(first.station, minlength=n_st) * LEAD_TIMES - counts).astype(int)
    wins, ties, winner = per_station_ranking(station_crps)
    st["winner"] = [names[i] for i in winner]
    if median_kernel and "altitude_difference" in st:
        for s in scores:
            _, sm = smooth_station_crps(station_crps[s.name], st["altitude_difference"], median_kernel)
            order = np.argsort(np.abs(st["altitude_difference"]), kind="stable")
            smoothed = np.empty(n_st)
            smoothed[order] = sm
            st[f"crps_{s.name}_median{median_kernel}"] = smoothed
    st_df = pd.DataFrame(st)

    band_frames = []
    if reference is not None:
        for s in scores:
            bdf = altitude_band_report(s.ql, reference.ql, s.station, altitudes, s.levels)
            bdf.insert(0, "model", s.name)
            band_frames.append(bdf)
    band_df = (pd.concat(band_frames, ignore_index=True) if band_frames else
               pd.DataFrame(columns=["model", "band", "level", "n_stations", "ql", "ql_reference", "qss"]))
    populated = {station_band(a) for a in np.asarray(altitudes, float)}
    empty = [b[0] for b in ALTITUDE_BANDS if b[0] not in populated]

    summary = {"models": names, "reference": reference.name if reference is not None else None,
               "wins": wins, "ties": ties, "empty_bands": empty, "pit_bins": bins, "per_model": {}}
    for s in scores:
        n_scored = int(np.isfinite(s.pit).sum())
        summary["per_model"][s.name] = {
            "crps": float(np.nanmean(s.crps)),
            "bias": float(np.nanmean(s.median - s.y)),
            "ql": float(np.nanmean(s.ql)),
            "qss": float(qss(np.nanmean(s.ql), np.nanmean(reference.ql))) if reference is not None else None,
            "pit_chi2_pvalue": uniformity_pvalue(pit_histogram(s.pit, bins)),
            "n_scored": n_scored,
            "quantile_crossings": s.crossings,
        }
    return VerificationReport(names, crps_df, bias_df, ql_df, pit_df, st_df, band_df, summary)


# ---------------------------------------------------------------------------
# permutation importance


def permutation_importance(model, samples, rng: np.random.Generator, repetitions: int = 5,
                           identity: bool = False) -> np.ndarray:
    """Loss increase per output lead (rows) when one input group is shuffled (columns).

    Columns 0..20 shuffle the ensemble mean and spread of one input lead time
    (network features and the statistics handed to the head move together);
    column 21 shuffles all static predictors jointly. ``identity=True`` uses
    the identity permutation, which must give exactly zero.
    """
    from ensflow.data import LEAD_TIMES as T, Samples

    base = np.nanmean(model.lead_loss(samples), axis=0)
    n = len(samples)
    out = np.zeros((T, T + 1))
    for g in range(T + 1):
        if g < T:
            cols = [g, T + g]
        else:
            cols = list(range(2 * T, samples.features.shape[1]))
        acc = np.zeros(T)
        for _ in range(repetitions):
            perm = np.arange(n) if identity else rng.permutation(n)
            feats = samples.features.copy()
            feats[:, cols] = samples.features[perm][:, cols]
            mean, std = samples.ens_mean.copy(), samples.ens_std.copy()
            if g < T:
                mean[:, g] = samples.ens_mean[perm, g]
                std[:, g] = samples.ens_std[perm, g]
            shuffled = Samples(feats, mean, std, samples.y, samples.station, samples.time)
            acc += np.nanmean(model.lead_loss(shuffled), axis=0) - base
        out[:, g] = acc / repetitions
    return out


def importance_frame(matrix: np.ndarray) -> pd.DataFrame:
    cols = [f"input_lead_{j}" for j in range(matrix.shape[1] - 1)] + ["static_predictors"]
    df = pd.DataFrame(matrix, columns=cols)
    df.insert(0, "output_lead", np.arange(matrix.shape[0]))
    return df
