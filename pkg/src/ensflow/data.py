"""Station ensemble datasets, feature construction and a synthetic generator.

On-disk layout of a dataset directory::

    manifest.json      dims, year labels, issue days, station table, truth-law descriptor
    forecasts.bin      float32 little-endian, row-major (S, N, m, 21)
    observations.bin   float32 little-endian, row-major (S, N, 21); NaN = missing
    truth.bin          float64 little-endian, row-major (S, N, 21, 3)   [synthetic only]

``truth.bin`` holds the per-triple parameters ``(center, scale, aux)`` of the
law the observations were drawn from; see :class:`TruthLaw`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import ndtr

from ensflow.errors import ConfigError, ContractViolation, FormatError

LEAD_TIMES = 21
FORMAT_VERSION = 1
META_FIELDS = ("station_altitude", "model_altitude", "longitude", "latitude", "land_usage")
LAND_USAGE_CODES = (0, 1, 2, 3, 4)
N_FEATURES = 2 * LEAD_TIMES + len(META_FIELDS) + 1
LAWS = ("gaussian", "skewed", "bimodal")


@dataclass(frozen=True)
class StationMeta:
    station_altitude: float
    model_altitude: float
    longitude: float
    latitude: float
    land_usage: int

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in META_FIELDS], dtype=np.float64)


# ---------------------------------------------------------------------------
# truth law of the synthetic generator


@dataclass
class TruthLaw:
    """Conditional law of an observation given the synthetic truth signal.

    ``center``/``scale``/``aux`` broadcast together. Per kind:

    * gaussian: N(center, scale)
    * skewed:   skew-normal with location ``center``, scale ``scale``, shape ``aux``
    * bimodal:  ``aux * N(center - sep*scale/2, scale) + (1-aux) * N(center + sep*scale/2, scale)``
    """

    kind: str
    center: np.ndarray
    scale: np.ndarray
    aux: np.ndarray
    separation: float = 4.0
    name = "truth"

    def _modes(self):
        half = 0.5 * self.separation * self.scale
        return self.center - half, self.center + half

    def pdf(self, y):
        if self.kind == "gaussian":
            return stats.norm.pdf(y, self.center, self.scale)
        if self.kind == "skewed":
            return stats.skewnorm.pdf(y, self.aux, self.center, self.scale)
        m1, m2 = self._modes()
        return self.aux * stats.norm.pdf(y, m1, self.scale) + (1 - self.aux) * stats.norm.pdf(y, m2, self.scale)

    def cdf(self, y):
        if self.kind == "gaussian":
            return ndtr((y - self.center) / self.scale)
        if self.kind == "skewed":
            return stats.skewnorm.cdf(y, self.aux, self.center, self.scale)
        m1, m2 = self._modes()
        return self.aux * ndtr((y - m1) / self.scale) + (1 - self.aux) * ndtr((y - m2) / self.scale)

    def quantiles(self, levels):
        levels = np.asarray(levels, float)
        c = self.center[..., None]
        s = self.scale[..., None]
        if self.kind == "gaussian":
            return stats.norm.ppf(levels, c, s)
        if self.kind == "skewed":
            return stats.skewnorm.ppf(levels, self.aux[..., None], c, s)
        half = 0.5 * self.separation * s
        lo = np.broadcast_to(c - half - 10 * s, c.shape[:-1] + levels.shape).copy()
        hi = np.broadcast_to(c + half + 10 * s, lo.shape).copy()
        sub = TruthLaw(self.kind, c, s, self.aux[..., None], self.separation)
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            below = sub.cdf(mid) < levels
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def median(self):
        return self.quantiles(np.array([0.5]))[..., 0]

    def sample(self, rng: np.random.Generator):
        shape = np.broadcast_shapes(self.center.shape, self.scale.shape, self.aux.shape)
        if self.kind == "gaussian":
            return self.center + self.scale * rng.standard_normal(shape)
        if self.kind == "skewed":
            return stats.skewnorm.rvs(self.aux, self.center, self.scale, size=shape, random_state=rng)
        m1, m2 = self._modes()
        first = rng.random(shape) < self.aux
        return np.where(first, m1, m2) + self.scale * rng.standard_normal(shape)

    def params(self):
        return np.stack(np.broadcast_arrays(self.center, self.scale, self.aux), axis=-1)

    def subset(self, index) -> "TruthLaw":
        return TruthLaw(self.kind, self.center[index], self.scale[index], self.aux[index], self.separation)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class ForecastDataset:
    forecasts: np.ndarray  # (S, N, m, 21) float32
    observations: np.ndarray  # (S, N, 21) float32
    years: np.ndarray  # (N,) int
    day_of_year: np.ndarray  # (N,) int
    stations: list[StationMeta]
    truth: TruthLaw | None = None
    name: str = "dataset"

    def __post_init__(self):
        S, N, m, t = self.forecasts.shape
        if t != LEAD_TIMES:
            raise ContractViolation(f"lead-time axis must be {LEAD_TIMES}, got {t}")
        if self.observations.shape != (S, N, t):
            raise ContractViolation(
                f"observations {self.observations.shape} do not align with forecasts {(S, N, t)}"
            )
        if len(self.years) != N or len(self.day_of_year) != N:
            raise ContractViolation("year and day-of-year labels must have one entry per issue time")
        if len(self.stations) != S:
            raise ContractViolation(f"{len(self.stations)} station records for {S} stations")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.forecasts.shape

    @property
    def n_samples(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def meta_array(self) -> np.ndarray:
        return np.stack([s.as_array() for s in self.stations])

    def select_times(self, index) -> "ForecastDataset":
        index = np.asarray(index)
        truth = self.truth.subset((slice(None), index)) if self.truth is not None else None
        return replace(
            self,
            forecasts=self.forecasts[:, index],
            observations=self.observations[:, index],
            years=self.years[index],
            day_of_year=self.day_of_year[index],
            truth=truth,
        )


def ensemble_stats(members) -> tuple[np.ndarray, np.ndarray]:
    """Per-lead mean and population standard deviation over the member axis (-2)."""
    members = np.asarray(members, dtype=np.float64)
    if members.shape[-2] < 2:
        raise ContractViolation("need at least two ensemble members")
    return members.mean(axis=-2), members.std(axis=-2)


def seasonal_encoding(day_of_year):
    d = np.asarray(day_of_year)
    if np.any((d < 1) | (d > 366)):
        raise ContractViolation("day of year must be in 1..366")
    return np.cos(2.0 * np.pi * d / 365.0)


@dataclass
class Samples:
    """Flattened (station, issue time) samples."""

    features: np.ndarray  # (n, 48), raw (unstandardized)
    ens_mean: np.ndarray  # (n, 21)
    ens_std: np.ndarray  # (n, 21)
    y: np.ndarray  # (n, 21), NaN = missing
    station: np.ndarray  # (n,)
    time: np.ndarray  # (n,)

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "Samples":
        return Samples(*(a[idx] for a in (self.features, self.ens_mean, self.ens_std,
                                           self.y, self.station, self.time)))


def build_samples(ds: ForecastDataset) -> Samples:
    """48 features per sample: ens mean (21), ens std (21), station metadata (5), season (1)."""
    S, N, m, t = ds.dims
    mean, std = ensemble_stats(ds.forecasts)
    meta = np.broadcast_to(ds.meta_array[:, None, :], (S, N, len(META_FIELDS)))
    season = np.broadcast_to(seasonal_encoding(ds.day_of_year)[None, :, None], (S, N, 1))
    feats = np.concatenate([mean, std, meta, season], axis=-1).reshape(S * N, N_FEATURES)
    station, time = np.meshgrid(np.arange(S), np.arange(N), indexing="ij")
    return Samples(
        features=feats,
        ens_mean=mean.reshape(S * N, t),
        ens_std=std.reshape(S * N, t),
        y=ds.observations.astype(np.float64).reshape(S * N, t),
        station=station.ravel(),
        time=time.ravel(),
    )


@dataclass
class FeatureStats:
    mean: np.ndarray
    scale: np.ndarray
    provenance: str = "train"

    @classmethod
    def fit(cls, features: np.ndarray, provenance: str = "train") -> "FeatureStats":
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        # constant columns standardize to zero
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean, scale, provenance)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.array(d["mean"], float), np.array(d["scale"], float), d.get("provenance", "train"))


def standardize(features: np.ndarray, stats_: FeatureStats) -> np.ndarray:
    if features.shape[-1] != stats_.mean.size:
        raise ContractViolation(
            f"feature width {features.shape[-1]} does not match statistics width {stats_.mean.size}"
        )
    return (features - stats_.mean) / stats_.scale


def split_by_year(ds: ForecastDataset, validation_year: int) -> tuple[ForecastDataset, ForecastDataset]:
    """Hold out every issue time labelled ``validation_year``; the rest trains."""
    is_val = ds.years == validation_year
    if not is_val.any():
        raise ConfigError(
            f"validation year {validation_year} not present; dataset years are {sorted(set(ds.years.tolist()))}"
        )
    return ds.select_times(np.flatnonzero(~is_val)), ds.select_times(np.flatnonzero(is_val))


def make_batches(n_samples: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n_samples < 1:
        raise ContractViolation("cannot batch an empty split")
    order = rng.permutation(n_samples)
    return [order[i : i + batch_size] for i in range(0, n_samples, batch_size)]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class GeneratorConfig:
    n_stations: int = 20
    n_per_year: int = 100
    years: tuple[int, ...] = (2014, 2015, 2016, 2017)
    test_years: tuple[int, ...] | None = None
    test_n_per_year: int | None = None
    members_train: int = 11
    members_test: int = 51
    law: str = "gaussian"
    noise_sigma: float = 1.0
    separation: float = 4.0
    skew: float = 4.0
    member_spread: float = 0.6
    independent_leads: bool = False
    missing_fraction: float = 0.0

    def __post_init__(self):
        self.years = tuple(int(y) for y in self.years)
        if self.test_years is not None:
            self.test_years = tuple(int(y) for y in self.test_years)

    def validate(self) -> None:
        if self.law not in LAWS:
            raise ConfigError(f"law must be one of {LAWS}, got {self.law!r}")
        if self.n_stations < 1 or self.n_per_year < 1 or not self.years:
            raise ConfigError("need at least one station, one issue time and one year")
        if self.test_n_per_year is not None and self.test_n_per_year < 1:
            raise ConfigError("test_n_per_year must be positive when given")
        if self.members_train < 2 or self.members_test < 2:
            raise ConfigError("ensembles need at least two members")
        if self.noise_sigma <= 0 or self.separation < 0 or self.member_spread <= 0:
            raise ConfigError("noise_sigma and member_spread must be positive, separation non-negative")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ConfigError("missing_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["years"] = list(self.years)
        d["test_years"] = list(self.test_years) if self.test_years is not None else None
        return d


def _stations(cfg: GeneratorConfig, rng: np.random.Generator) -> list[StationMeta]:
    out = []
    for _ in range(cfg.n_stations):
        alt = rng.uniform(-4.0, 3599.0)
        model_alt = float(np.clip(alt + rng.normal(0.0, 250.0), -5.0, 3600.0))
        out.append(StationMeta(
            station_altitude=float(alt),
            model_altitude=model_alt,
            longitude=float(rng.uniform(2.0, 10.0)),
            latitude=float(rng.uniform(45.0, 52.0)),
            land_usage=int(rng.choice(LAND_USAGE_CODES)),
        ))
    return out


def _issue_days(n: int, years) -> tuple[np.ndarray, np.ndarray]:
    days = 1 + (np.arange(n) * 365) // n
    return np.repeat(np.asarray(years, int), n), np.tile(days, len(years))


def _simulate(cfg, stations, years, doy, members, rng, name) -> ForecastDataset:
    S, N, T = len(stations), len(years), LEAD_TIMES
    meta = np.stack([s.as_array() for s in stations])
    alt, model_alt, lon, lat, land = (meta[:, i][:, None, None] for i in range(5))
    lead = np.arange(T)[None, None, :]
    hours = 6.0 * lead
    season = np.cos(2.0 * np.pi * doy / 365.0)[None, :, None]

    # truth: climatology + seasonal cycle + diurnal cycle + synoptic anomaly
    clim = 12.0 - 0.0065 * alt - 0.3 * (lat - 48.0)
    seasonal = -8.0 * np.cos(2.0 * np.pi * (doy[None, :, None] + hours / 24.0 - 15.0) / 365.0)
    diurnal = -(3.0 + 0.001 * alt) * np.cos(2.0 * np.pi * (hours - 3.0) / 24.0)
    eps = rng.standard_normal((S, N, T))
    if cfg.independent_leads:
        anomaly = 4.0 * eps
    else:
        anomaly = np.empty_like(eps)
        anomaly[..., 0] = 3.0 * eps[..., 0]
        rho = 0.9
        for l in range(1, T):
            anomaly[..., l] = rho * anomaly[..., l - 1] + 3.0 * np.sqrt(1 - rho**2) * eps[..., l]
    truth = clim + seasonal + diurnal + anomaly

    # ensemble: truth + systematic bias + shared error + member spread
    bias = (
        -0.0065 * (model_alt - alt)
        + 0.4 * np.cos(2.0 * np.pi * hours / 24.0)
        + 0.3
        + 0.15 * (land - 2.0)
    )
    sigma = (
        cfg.noise_sigma
        * (1.0 + 0.25 * alt / 3600.0)
        * (1.0 + 0.15 * season)
        * (1.0 + 0.5 * lead / (T - 1))
    )
    sigma = np.broadcast_to(sigma, (S, N, T))
    common = (0.05 + 0.01 * lead) * rng.standard_normal((S, N, T))
    spread = cfg.member_spread * sigma * (1.0 + lead / 40.0)
    fc = truth + bias + common
    fc = fc[:, :, None, :] + spread[:, :, None, :] * rng.standard_normal((S, N, members, T))

    if cfg.law == "gaussian":
        aux = np.zeros((S, N, T))
        center = truth
    elif cfg.law == "skewed":
        aux = np.full((S, N, T), cfg.skew)
        delta = cfg.skew / np.sqrt(1.0 + cfg.skew**2)
        center = truth - sigma * delta * np.sqrt(2.0 / np.pi)  # zero-mean noise
    else:
        aux = np.broadcast_to(0.5 + 0.15 * season, (S, N, T)).copy()
        center = truth
    law = TruthLaw(cfg.law, np.asarray(center, float), np.asarray(sigma, float), aux, cfg.separation)
    obs = law.sample(rng)
    if cfg.missing_fraction > 0:
        obs = np.where(rng.random(obs.shape) < cfg.missing_fraction, np.nan, obs)
    return ForecastDataset(
        forecasts=fc.astype(np.float32),
        observations=obs.astype(np.float32),
        years=np.asarray(years, int),
        day_of_year=np.asarray(doy, int),
        stations=stations,
        truth=law,
        name=name,
    )


def generate_synthetic(cfg: GeneratorConfig, seed: int) -> tuple[ForecastDataset, ForecastDataset]:
    """Train-like (``members_train``) and test-like (``members_test``) datasets on shared stations."""
    cfg.validate()
    root = np.random.SeedSequence(seed)
    s_st, s_train, s_test = (np.random.default_rng(s) for s in root.spawn(3))
    stations = _stations(cfg, s_st)
    years, doy = _issue_days(cfg.n_per_year, cfg.years)
    train = _simulate(cfg, stations, years, doy, cfg.members_train, s_train, "train")
    n_test = cfg.test_n_per_year if cfg.test_n_per_year is not None else cfg.n_per_year
    tyears, tdoy = _issue_days(n_test, cfg.test_years if cfg.test_years is not None else cfg.years)
    test = _simulate(cfg, stations, tyears, tdoy, cfg.members_test, s_test, "test")
    return train, test


# ---------------------------------------------------------------------------
# persistence


def save_dataset(ds: ForecastDataset, path, generator: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    S, N, m, t = ds.dims
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "dims": {"stations": S, "issue_times": N, "members": m, "lead_times": t},
        "years": ds.years.tolist(),
        "day_of_year": ds.day_of_year.tolist(),
        "stations": [asdict(s) for s in ds.stations],
        "land_usage_codes": list(LAND_USAGE_CODES),
        "tensors": {
            "forecasts.bin": {"dtype": "<f4", "shape": [S, N, m, t]},
            "observations.bin": {"dtype": "<f4", "shape": [S, N, t]},
        },
    }
    ds.forecasts.astype("<f4").tofile(path / "forecasts.bin")
    ds.observations.astype("<f4").tofile(path / "observations.bin")
    if ds.truth is not None:
        manifest["truth_law"] = {"kind": ds.truth.kind, "separation": ds.truth.separation,
                                 "file": "truth.bin", "dtype": "<f8", "shape": [S, N, t, 3],
                                 "columns": ["center", "scale", "aux"]}
        ds.truth.params().astype("<f8").tofile(path / "truth.bin")
    if generator is not None:
        manifest["generator"] = generator
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _read_tensor(path: Path, dtype: str, shape) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing tensor file {path.name}")
    raw = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise FormatError(f"{path.name}: {raw.size} values on disk, manifest shape {list(shape)} needs {expected}")
    return raw.reshape(shape)


def load_dataset(path) -> ForecastDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{path} has no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from None
    try:
        dims = manifest["dims"]
        S, N, m, t = (int(dims[k]) for k in ("stations", "issue_times", "members", "lead_times"))
        stations = [StationMeta(**s) for s in manifest["stations"]]
        years = np.array(manifest["years"], int)
        doy = np.array(manifest["day_of_year"], int)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest missing field {exc}") from None
    if t != LEAD_TIMES:
        raise FormatError(f"dimension lead_times={t}, expected {LEAD_TIMES}")
    if len(stations) != S:
        raise FormatError(f"dimension stations={S} but {len(stations)} station records")
    if len(years) != N or len(doy) != N:
        raise FormatError(f"dimension issue_times={N} but {len(years)} year labels")
    codes = set(manifest.get("land_usage_codes", LAND_USAGE_CODES))
    for s in stations:
        if s.land_usage not in codes:
            raise FormatError(f"land_usage {s.land_usage} outside declared codes {sorted(codes)}")
    fc = _read_tensor(path / "forecasts.bin", "<f4", (S, N, m, t))
    obs = _read_tensor(path / "observations.bin", "<f4", (S, N, t))
    truth = None
    if "truth_law" in manifest:
        tl = manifest["truth_law"]
        p = _read_tensor(path / tl.get("file", "truth.bin"), "<f8", (S, N, t, 3))
        truth = TruthLaw(tl["kind"], p[..., 0], p[..., 1], p[..., 2], float(tl["separation"]))
    return ForecastDataset(fc, obs, years, doy, stations, truth, manifest.get("name", path.name))


def load_generator_config(path) -> GeneratorConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read generator spec {path}: {exc}") from None
    return GeneratorConfig.from_dict(d)
