"""Distribution heads: network output vector -> per-lead predictive laws + losses.

Each head owns three things:

* ``law(raw, ens_mean, ens_std)`` builds a predictive law object for a batch,
* ``loss_and_grad(...)`` returns the masked mean training loss and its
  gradient with respect to the raw network output,
* ``lead_loss(...)`` returns the per-sample per-lead loss (NaN where the
  observation is missing), used by validation and permutation importance.

Laws expose ``cdf``, ``quantiles``, ``median`` and ``params`` (the columns
written to prediction files); heads are looked up by their identifier string.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import comb, expit, ndtr, ndtri

from ensflow import flow as fl
from ensflow.errors import ContractViolation

LEAD_TIMES = 21
BERNSTEIN_DEGREE = 12
LOG_SQRT_2PI = fl.LOG_SQRT_2PI


def quantile_levels(n: int = 100) -> np.ndarray:
    """Equidistant bin midpoints ``(i - 1/2) / n``, i = 1..n.

    Midpoints make twice the mean pinball loss a midpoint rule for the CRPS
    integral over levels; ``i / (n + 1)`` overshoots it by about 1%.
    """
    return (np.arange(1, n + 1) - 0.5) / n


QUANTILE_LEVELS = quantile_levels()


def softplus(x):
    return np.logaddexp(0.0, x)


def _masked_mean(per_elem, grad_elem, y):
    """Mean over finite observations; missing ones get zero loss and gradient."""
    valid = np.isfinite(y)
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(grad_elem)
    loss = float(np.where(valid, per_elem, 0.0).sum() / n)
    mask = valid.reshape(valid.shape + (1,) * (grad_elem.ndim - valid.ndim))
    return loss, np.where(mask, grad_elem, 0.0) / n


# ---------------------------------------------------------------------------
# normal


@dataclass
class NormalLaw:
    mu: np.ndarray
    sigma: np.ndarray
    name = "normal"

    def cdf(self, y):
        return ndtr((y - self.mu) / self.sigma)

    def logpdf(self, y):
        z = (y - self.mu) / self.sigma
        return -0.5 * z * z - np.log(self.sigma) - LOG_SQRT_2PI

    def quantiles(self, levels=QUANTILE_LEVELS):
        return self.mu[..., None] + self.sigma[..., None] * ndtri(np.asarray(levels))

    def median(self):
        return self.mu

    def params(self):
        return np.stack([self.mu, self.sigma], axis=-1)

    @classmethod
    def from_params(cls, p):
        return cls(p[..., 0], p[..., 1])


def normal_head(raw, ens_mean, ens_std) -> NormalLaw:
    """Residual correction of the ensemble statistics.

    ``raw`` has trailing shape ``(21, 2)`` or ``(42,)`` with ``(mu', sigma')``
    interleaved per lead time.
    """
    raw = np.asarray(raw, float)
    r = raw.reshape(raw.shape[:-1] + (-1, 2)) if raw.shape[-1] != 2 else raw
    ens_std = np.asarray(ens_std, float)
    if np.any(ens_std < 0):
        raise ContractViolation("ensemble standard deviation must be non-negative")
    return NormalLaw(ens_mean + r[..., 0], ens_std + softplus(r[..., 1]))


def normal_nll(law: NormalLaw, y) -> float:
    """Mean negative log-likelihood over finite observations (constant included)."""
    y = np.asarray(y, float)
    per = -law.logpdf(np.where(np.isfinite(y), y, law.mu))
    valid = np.isfinite(y)
    return float(per[valid].mean()) if valid.any() else 0.0


# ---------------------------------------------------------------------------
# flow


@dataclass
class FlowLaw:
    params_: fl.FlowParams
    name = "flow"

    def cdf(self, y):
        z, _ = fl.flow_forward(y, self.params_.knots, self.params_.values, self.params_.derivatives)
        return ndtr(z)

    def logpdf(self, y):
        z, ld = fl.flow_forward(y, self.params_.knots, self.params_.values, self.params_.derivatives)
        return -0.5 * z * z - LOG_SQRT_2PI + ld

    def quantiles(self, levels=QUANTILE_LEVELS):
        p = self.params_
        z = ndtri(np.asarray(levels, float))
        z = np.broadcast_to(z, p.knots.shape[:-2] + z.shape)
        e = (slice(None),) * (p.knots.ndim - 2) + (None,)
        return fl.flow_inverse(z, p.knots[e], p.values[e], p.derivatives[e])

    def median(self):
        p = self.params_
        return fl.flow_inverse(np.zeros(p.knots.shape[:-2]), p.knots, p.values, p.derivatives)

    def params(self):
        p = self.params_
        stacked = np.stack([p.knots, p.values], axis=-2)  # (..., 4, 2, 5)
        return stacked.reshape(stacked.shape[:-3] + (-1,))

    @classmethod
    def from_params(cls, p):
        r = np.asarray(p, float).reshape(p.shape[:-1] + (fl.N_SPLINES, 2, fl.N_KNOTS))
        return cls(fl.FlowParams.from_knots(r[..., 0, :], r[..., 1, :]))


def flow_nll(raw, y) -> float:
    """Mean over leads of ``z**2/2 - log T'(y)`` (normalising constant dropped)."""
    raw = np.asarray(raw, float)
    r = raw.reshape(raw.shape[:-1] + (-1, 40)) if raw.shape[-1] != 40 else raw
    loss, _ = _flow_batch_loss(r, np.asarray(y, float))
    return loss


def _flow_batch_loss(r, y):
    yy = np.where(np.isfinite(y), y, 0.0)
    per, g = fl.flow_loss_and_grad(r, yy)
    return _masked_mean(per, g, y)


# ---------------------------------------------------------------------------
# Bernstein quantile regression


def bernstein_basis(tau, degree: int = BERNSTEIN_DEGREE) -> np.ndarray:
    """Basis matrix of shape ``tau.shape + (degree + 1,)``."""
    tau = np.asarray(tau, float)
    i = np.arange(degree + 1)
    t = tau[..., None]
    return comb(degree, i) * t**i * (1.0 - t) ** (degree - i)


def bernstein_quantile(coeffs, tau):
    coeffs = np.asarray(coeffs, float)
    tau = np.asarray(tau, float)
    if np.any((tau < 0) | (tau > 1)):
        raise ContractViolation("Bernstein quantile levels must lie in [0, 1]")
    return np.sum(coeffs * bernstein_basis(tau, coeffs.shape[-1] - 1), axis=-1)


def pinball_loss(q, y, tau):
    """Quantile (pinball) loss ``tau*(y-q)`` above, ``(1-tau)*(q-y)`` below."""
    diff = np.asarray(y, float) - np.asarray(q, float)
    return np.where(diff >= 0, tau * diff, (tau - 1.0) * diff)


@dataclass
class BernsteinLaw:
    coeffs: np.ndarray
    name = "bernstein"

    def quantiles(self, levels=QUANTILE_LEVELS):
        return self.coeffs @ bernstein_basis(np.asarray(levels, float)).T

    def median(self):
        return self.quantiles(np.array([0.5]))[..., 0]

    def cdf(self, y, iterations: int = 60):
        """Numeric inversion of the quantile function by bisection over [0, 1]."""
        y = np.asarray(y, float)
        lo = np.zeros(np.broadcast_shapes(y.shape, self.coeffs.shape[:-1]))
        hi = np.ones_like(lo)
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            q = np.sum(self.coeffs * bernstein_basis(mid), axis=-1)
            below = q < y
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        u = 0.5 * (lo + hi)
        u = np.where(y <= self.coeffs[..., 0], 0.0, u)
        return np.where(y >= self.coeffs[..., -1], 1.0, u)

    def params(self):
        return self.coeffs

    @classmethod
    def from_params(cls, p):
        return cls(np.asarray(p, float))


def count_crossings(quantiles) -> int:
    """Number of adjacent level pairs whose quantiles decrease."""
    return int(np.sum(np.diff(quantiles, axis=-1) < 0))


def head_quantiles(law, levels=QUANTILE_LEVELS) -> tuple[np.ndarray, int]:
    """Quantile matrix ``(..., 21, L)`` plus the number of detected crossings."""
    q = law.quantiles(levels)
    return q, count_crossings(q)


# ---------------------------------------------------------------------------
# head objects


class Head:
    name: str
    params_per_lead: int

    @property
    def n_params(self) -> int:
        return LEAD_TIMES * self.params_per_lead

    def _split(self, raw):
        raw = np.asarray(raw, float)
        if raw.shape[-1] != self.n_params:
            raise ContractViolation(
                f"{self.name} head expects {self.n_params} raw outputs, got {raw.shape[-1]}"
            )
        return raw.reshape(raw.shape[:-1] + (LEAD_TIMES, self.params_per_lead))


class NormalHead(Head):
    name = "normal"
    params_per_lead = 2

    def law(self, raw, ens_mean, ens_std):
        return normal_head(self._split(raw), ens_mean, ens_std)

    def lead_loss(self, raw, ens_mean, ens_std, y):
        law = self.law(raw, ens_mean, ens_std)
        return np.where(np.isfinite(y), -law.logpdf(y), np.nan)

    def loss_and_grad(self, raw, ens_mean, ens_std, y):
        r = self._split(raw)
        law = normal_head(r, ens_mean, ens_std)
        yy = np.where(np.isfinite(y), y, law.mu)
        z = (yy - law.mu) / law.sigma
        per = 0.5 * z * z + np.log(law.sigma) + LOG_SQRT_2PI
        g_mu = -z / law.sigma
        g_sigma = (1.0 - z * z) / law.sigma
        g = np.stack([g_mu, g_sigma * expit(r[..., 1])], axis=-1)
        loss, g = _masked_mean(per, g, y)
        return loss, g.reshape(np.shape(raw))


class FlowHead(Head):
    """Four-spline flow per lead time.

    With ``anchor`` the data-side spline's knots are placed relative to the
    ensemble mean of that lead; a location shift leaves values and knot
    derivatives unchanged, so the exported law in degrees is exact.
    """

    name = "flow"
    params_per_lead = 40

    def __init__(self, anchor: bool = True):
        self.anchor = anchor

    def _offset(self, ens_mean, shape):
        if not self.anchor or ens_mean is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(ens_mean, float), shape)

    def _params(self, r):
        return fl.FlowParams.from_raw(r)

    def law(self, raw, ens_mean=None, ens_std=None):
        r = self._split(raw)
        p = self._params(r)
        off = self._offset(ens_mean, r.shape[:-1])
        if np.any(off):
            knots = p.knots.copy()
            knots[..., 0, :] += off[..., None]
            p = fl.FlowParams(knots, p.values, p.derivatives)
        return self.law_type(p)

    law_type = FlowLaw

    def lead_loss(self, raw, ens_mean, ens_std, y):
        law = self.law(raw, ens_mean)
        yy = np.where(np.isfinite(y), y, law.median())
        return np.where(np.isfinite(y), -law.logpdf(yy), np.nan)

    def train_loss(self, raw, y):
        # training objective drops the normalising constant
        yy = np.where(np.isfinite(y), y, 0.0)
        return fl.flow_loss_and_grad(self._split(raw), yy)

    def loss_and_grad(self, raw, ens_mean, ens_std, y):
        y = np.asarray(y, float)
        per, g = self.train_loss(raw, y - self._offset(ens_mean, y.shape))
        loss, g = _masked_mean(per, g, y)
        return loss, g.reshape(np.shape(raw))


@dataclass
class FreeFlowLaw(FlowLaw):
    """Flow whose knot derivatives were predicted directly; comparison only."""

    name = "flow_free"

    def params(self):
        p = self.params_
        stacked = np.stack([p.knots, p.values, p.derivatives], axis=-2)
        return stacked.reshape(stacked.shape[:-3] + (-1,))

    @classmethod
    def from_params(cls, p):
        r = np.asarray(p, float).reshape(p.shape[:-1] + (fl.N_SPLINES, 3, fl.N_KNOTS))
        return cls(fl.FlowParams(r[..., 0, :], r[..., 1, :], r[..., 2, :]))


class FreeDerivativeFlowHead(FlowHead):
    """Flow head with network-predicted derivatives (60 reals per lead).

    Used only to compare against the knot-derived derivative estimator; it is
    not offered by the command-line tools.
    """

    name = "flow_free"
    params_per_lead = 60
    law_type = FreeFlowLaw

    def _params(self, r):
        return fl.free_flow_params(r)

    def train_loss(self, raw, y):
        yy = np.where(np.isfinite(y), y, 0.0)
        return fl.free_flow_loss_and_grad(self._split(raw), yy)


class BernsteinHead(Head):
    name = "bernstein"
    params_per_lead = BERNSTEIN_DEGREE + 1

    def __init__(self, levels=QUANTILE_LEVELS, anchor: bool = True):
        self.anchor = anchor
        self.levels = np.asarray(levels, float)
        self.basis = bernstein_basis(self.levels)  # (L, 13)

    def _coeffs(self, raw, ens_mean):
        c = self._split(raw)
        if self.anchor and ens_mean is not None:
            # constants are reproduced exactly, so this shifts every quantile
            c = c + np.asarray(ens_mean, float)[..., None]
        return c

    def law(self, raw, ens_mean=None, ens_std=None):
        return BernsteinLaw(self._coeffs(raw, ens_mean))

    def lead_loss(self, raw, ens_mean, ens_std, y):
        q = self._coeffs(raw, ens_mean) @ self.basis.T
        yy = np.where(np.isfinite(y), y, 0.0)
        per = pinball_loss(q, yy[..., None], self.levels).mean(axis=-1)
        return np.where(np.isfinite(y), per, np.nan)

    def loss_and_grad(self, raw, ens_mean, ens_std, y):
        q = self._coeffs(raw, ens_mean) @ self.basis.T
        yy = np.where(np.isfinite(y), y, 0.0)[..., None]
        per = pinball_loss(q, yy, self.levels).mean(axis=-1)
        gq = np.where(yy >= q, -self.levels, 1.0 - self.levels) / self.levels.size
        g = gq @ self.basis
        loss, g = _masked_mean(per, g, y)
        return loss, g.reshape(np.shape(raw))


HEADS = {"normal": NormalHead, "flow": FlowHead, "bernstein": BernsteinHead}
LAWS = {"normal": NormalLaw, "flow": FlowLaw, "bernstein": BernsteinLaw, "flow_free": FreeFlowLaw}


def get_head(name: str) -> Head:
    if name == FreeDerivativeFlowHead.name:
        return FreeDerivativeFlowHead()
    try:
        return HEADS[name]()
    except KeyError:
        raise ContractViolation(f"unknown head {name!r}; choose from {sorted(HEADS)}") from None
