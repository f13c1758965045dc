"""Monotone rational-quadratic spline flow with knot-derived derivatives.

A spline is described by 5 knots ``k`` and 5 values ``v`` (both strictly
increasing); the 5 knot derivatives are not free but computed from ``k`` and
``v``. Inside ``[k[0], k[4]]`` the map is the usual rational-quadratic bin
interpolant; outside it continues linearly with the edge derivative as slope,
so every spline is a C1 bijection of the real line.

A flow is a composition of 4 splines per lead time, applied data-side first:
``z = T4(T3(T2(T1(x))))`` with ``z`` standard normal.

All functions broadcast over leading axes. Spline parameter arrays have a
trailing axis of length 5; flow parameter arrays have trailing axes ``(4, 5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr, ndtri

from ensflow.errors import ContractViolation

N_KNOTS = 5
N_SPLINES = 4
MIN_GAP = 1e-3
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# parameter construction


def make_monotone_params(raw_knots, raw_values) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative-sum construction: first entry kept, later gaps ``1e-3 + softplus``."""
    return _monotone(np.asarray(raw_knots, float)), _monotone(np.asarray(raw_values, float))


def _monotone(raw: np.ndarray) -> np.ndarray:
    steps = np.concatenate([raw[..., :1], MIN_GAP + softplus(raw[..., 1:])], axis=-1)
    return np.cumsum(steps, axis=-1)


def _monotone_backward(raw: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # reverse cumulative sum, then through the softplus gaps
    g_steps = np.flip(np.cumsum(np.flip(grad_out, -1), axis=-1), -1)
    g_steps[..., 1:] *= expit(raw[..., 1:])
    return g_steps


def gregory_derivatives(knots, values) -> np.ndarray:
    """Knot derivatives computed from knot/value differences.

    With secant slopes ``S[j]`` over ``[k[j], k[j+1]]`` and wide secants ``W[i]``
    over ``[k[i-1], k[i+1]]``::

        d[0]   = S[0]**2 / W[1]
        d[i]   = S[i] * S[i-1] / W[i]      for i = 1, 2, 3
        d[4]   = S[3]**2 / W[3]

    Every ``W[i]`` is a weighted mean of its two neighbouring secants, so the
    interior derivatives stay between those secants.
    """
    k = np.asarray(knots, float)
    v = np.asarray(values, float)
    S = np.diff(v, axis=-1) / np.diff(k, axis=-1)
    W = (v[..., 2:] - v[..., :-2]) / (k[..., 2:] - k[..., :-2])
    d = np.empty_like(k)
    d[..., 0] = S[..., 0] ** 2 / W[..., 0]
    d[..., 1:4] = S[..., 1:] * S[..., :-1] / W
    d[..., 4] = S[..., 3] ** 2 / W[..., 2]
    return d


def _gregory_backward(k, v, d, grad_d):
    """Push gradients on the derivatives back onto knots and values."""
    a = grad_d * d  # gradient with respect to log d
    gS = np.stack(
        [
            2 * a[..., 0] + a[..., 1],
            a[..., 1] + a[..., 2],
            a[..., 2] + a[..., 3],
            a[..., 3] + 2 * a[..., 4],
        ],
        axis=-1,
    )
    gW = -np.stack([a[..., 0] + a[..., 1], a[..., 2], a[..., 3] + a[..., 4]], axis=-1)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    # log S[j] = log(v[j+1] - v[j]) - log(k[j+1] - k[j])
    tv = gS / np.diff(v, axis=-1)
    tk = gS / np.diff(k, axis=-1)
    gv[..., 1:] += tv
    gv[..., :-1] -= tv
    gk[..., 1:] -= tk
    gk[..., :-1] += tk
    # log W[i] = log(v[i+1] - v[i-1]) - log(k[i+1] - k[i-1])
    tv = gW / (v[..., 2:] - v[..., :-2])
    tk = gW / (k[..., 2:] - k[..., :-2])
    gv[..., 2:] += tv
    gv[..., :-2] -= tv
    gk[..., 2:] -= tk
    gk[..., :-2] += tk
    return gk, gv


@dataclass
class SplineParams:
    """Knots, values and their derived derivatives (arrays with trailing axis 5)."""

    knots: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray

    @classmethod
    def from_knots(cls, knots, values) -> "SplineParams":
        k = np.asarray(knots, float)
        v = np.asarray(values, float)
        if k.shape[-1] != N_KNOTS or v.shape != k.shape:
            raise ContractViolation(f"need matching (..., {N_KNOTS}) knots/values, got {k.shape}, {v.shape}")
        if np.any(np.diff(k, axis=-1) <= 0) or np.any(np.diff(v, axis=-1) <= 0):
            raise ContractViolation("knots and values must be strictly increasing")
        return cls(k, v, gregory_derivatives(k, v))

    @classmethod
    def from_raw(cls, raw) -> "SplineParams":
        raw = np.asarray(raw, float)
        k, v = make_monotone_params(raw[..., :N_KNOTS], raw[..., N_KNOTS:])
        return cls(k, v, gregory_derivatives(k, v))


@dataclass
class FlowParams:
    """Per-lead stack of 4 splines; arrays have trailing axes ``(4, 5)``."""

    knots: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray

    @classmethod
    def from_knots(cls, knots, values) -> "FlowParams":
        k = np.asarray(knots, float)
        v = np.asarray(values, float)
        return cls(k, v, gregory_derivatives(k, v))

    @classmethod
    def from_raw(cls, raw) -> "FlowParams":
        """``raw`` has trailing shape ``(40,)``: per spline 5 raw knots then 5 raw values."""
        raw = np.asarray(raw, float)
        r = raw.reshape(raw.shape[:-1] + (N_SPLINES, 2, N_KNOTS))
        k, v = make_monotone_params(r[..., 0, :], r[..., 1, :])
        return cls(k, v, gregory_derivatives(k, v))

    def lead(self, index: int) -> "FlowParams":
        return FlowParams(self.knots[..., index, :, :], self.values[..., index, :, :],
                          self.derivatives[..., index, :, :])

    def spline(self, l: int) -> SplineParams:
        return SplineParams(self.knots[..., l, :], self.values[..., l, :], self.derivatives[..., l, :])

    @property
    def n_free(self) -> int:
        """Free reals: knots and values only, derivatives add nothing."""
        return self.knots.size + self.values.size


# ---------------------------------------------------------------------------
# single spline


def _take(a, idx):
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def _bin_index(x, k):
    """Bin 0..3 for each x, clipped at the ends (tails handled separately)."""
    return np.sum(x[..., None] > k[..., 1:4], axis=-1)


def rq_bin(x, k, v, d, j, grad: bool = False):
    """Evaluate bin ``j`` of the spline at ``x`` without any tail handling.

    Returns ``(y, log_dydx)`` and, with ``grad=True``, a dict of partials of both
    outputs with respect to ``x`` and the bin's end points ``k0, k1, v0, v1,
    d0, d1``.
    """
    k0, k1 = _take(k, j), _take(k, j + 1)
    v0, v1 = _take(v, j), _take(v, j + 1)
    d0, d1 = _take(d, j), _take(d, j + 1)
    w = k1 - k0
    h = v1 - v0
    s = h / w
    xi = (x - k0) / w
    t = xi * (1.0 - xi)
    c = d0 + d1 - 2.0 * s
    D = s + c * t
    N = h * (s * xi * xi + d0 * t)
    y = v0 + N / D
    M = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) ** 2
    logg = 2.0 * np.log(s) + np.log(M) - 2.0 * np.log(D)
    if not grad:
        return y, logg

    tp = 1.0 - 2.0 * xi
    D2 = D * D
    # partials at fixed (xi, s, h, d0, d1)
    y_xi = (h * (2.0 * s * xi + d0 * tp) * D - N * c * tp) / D2
    y_s = h * xi * xi / D - N * (1.0 - 2.0 * t) / D2
    y_h = (s * xi * xi + d0 * t) / D
    y_d0 = h * t / D - N * t / D2
    y_d1 = -N * t / D2
    Mp = 2.0 * d1 * xi + 2.0 * s * tp - 2.0 * d0 * (1.0 - xi)
    l_xi = Mp / M - 2.0 * c * tp / D
    l_s = 2.0 / s + 2.0 * t / M - 2.0 * (1.0 - 2.0 * t) / D
    l_d0 = (1.0 - xi) ** 2 / M - 2.0 * t / D
    l_d1 = xi * xi / M - 2.0 * t / D

    def chain(f_xi, f_s, f_h):
        f_x = f_xi / w
        f_w = -(f_xi * xi + f_s * s) / w
        f_htot = f_h + f_s / w
        return f_x, -f_x - f_w, f_w, -f_htot, f_htot

    yx, yk0, yk1, yv0, yv1 = chain(y_xi, y_s, y_h)
    lx, lk0, lk1, lv0, lv1 = chain(l_xi, l_s, 0.0)
    parts = {
        "y": (yx, yk0, yk1, yv0 + 1.0, yv1, y_d0, y_d1),
        "l": (lx, lk0, lk1, lv0, lv1, l_d0, l_d1),
    }
    return y, logg, parts


def _spline_eval(x, k, v, d, grad=False):
    x = np.asarray(x, float)
    x, k, v, d = np.broadcast_arrays(x[..., None], k, v, d)
    x = x[..., 0]
    j = _bin_index(x, k)
    left = x < k[..., 0]
    right = x > k[..., 4]
    xin = np.clip(x, k[..., 0], k[..., 4])
    out = rq_bin(xin, k, v, d, j, grad=grad)
    y, logg = out[0], out[1]
    kl, vl, dl = k[..., 0], v[..., 0], d[..., 0]
    kr, vr, dr = k[..., 4], v[..., 4], d[..., 4]
    y = np.where(left, vl + dl * (x - kl), np.where(right, vr + dr * (x - kr), y))
    logg = np.where(left, np.log(dl), np.where(right, np.log(dr), logg))
    if not grad:
        return y, logg

    # every point touches exactly the two knots of its bin (j, j+1); tails
    # touch knot 0 (left, j == 0) or knot 4 (right, j == 3)
    fy, fl_ = out[2]["y"], out[2]["l"]
    zero = np.zeros_like(x)
    one = np.ones_like(x)

    def pick(interior, left_val, right_val):
        return np.where(left, left_val, np.where(right, right_val, interior))

    def scatter(a, b):
        g = np.zeros(k.shape)
        np.put_along_axis(g, j[..., None], a[..., None], axis=-1)
        np.put_along_axis(g, j[..., None] + 1, b[..., None], axis=-1)
        return g

    gy = (
        pick(fy[0], dl, dr),
        scatter(pick(fy[1], -dl, zero), pick(fy[2], zero, -dr)),
        scatter(pick(fy[3], one, zero), pick(fy[4], zero, one)),
        scatter(pick(fy[5], x - kl, zero), pick(fy[6], zero, x - kr)),
    )
    gl = (
        pick(fl_[0], zero, zero),
        scatter(pick(fl_[1], zero, zero), pick(fl_[2], zero, zero)),
        scatter(pick(fl_[3], zero, zero), pick(fl_[4], zero, zero)),
        scatter(pick(fl_[5], 1.0 / dl, zero), pick(fl_[6], zero, 1.0 / dr)),
    )
    return y, logg, gy, gl


def spline_forward(x, s: SplineParams) -> tuple[np.ndarray, np.ndarray]:
    """Spline value and (strictly positive) slope at ``x``."""
    y, logg = _spline_eval(x, s.knots, s.values, s.derivatives)
    return y, np.exp(logg)


def spline_inverse(y, s: SplineParams) -> np.ndarray:
    """Analytic inverse: locate the bin on the value axis, solve its quadratic."""
    k, v, d = s.knots, s.values, s.derivatives
    y = np.asarray(y, float)
    y, k, v, d = np.broadcast_arrays(y[..., None], k, v, d)
    y = y[..., 0]
    j = np.sum(y[..., None] > v[..., 1:4], axis=-1)
    k0, k1 = _take(k, j), _take(k, j + 1)
    v0, v1 = _take(v, j), _take(v, j + 1)
    d0, d1 = _take(d, j), _take(d, j + 1)
    w = k1 - k0
    h = v1 - v0
    sl = h / w
    yin = np.clip(y, v[..., 0], v[..., 4])
    dy = yin - v0
    c = d0 + d1 - 2.0 * sl
    a = h * (sl - d0) + dy * c
    b = h * d0 - dy * c
    cc = -sl * dy
    disc = np.maximum(b * b - 4.0 * a * cc, 0.0)
    xi = 2.0 * cc / (-b - np.sqrt(disc))
    x = k0 + xi * w
    x = np.where(y < v[..., 0], k[..., 0] + (y - v[..., 0]) / d[..., 0], x)
    x = np.where(y > v[..., 4], k[..., 4] + (y - v[..., 4]) / d[..., 4], x)
    return x


# ---------------------------------------------------------------------------
# flows


def flow_forward(x, knots, values, derivatives, grad=False):
    """Push ``x`` through the 4 splines.

    Returns ``(z, log_deriv)``; with ``grad=True`` also the per-spline partial
    records consumed by :func:`flow_nll_backward`.
    """
    z = np.asarray(x, float)
    log_deriv = 0.0
    records = []
    for l in range(knots.shape[-2]):
        out = _spline_eval(z, knots[..., l, :], values[..., l, :], derivatives[..., l, :], grad=grad)
        z, logg = out[0], out[1]
        log_deriv = log_deriv + logg
        if grad:
            records.append(out[2:])
    if grad:
        return z, log_deriv, records
    return z, log_deriv


def flow_inverse(z, knots, values, derivatives):
    x = np.asarray(z, float)
    for l in range(knots.shape[-2] - 1, -1, -1):
        x = spline_inverse(x, SplineParams(knots[..., l, :], values[..., l, :], derivatives[..., l, :]))
    return x


def flow_transform(x, f: FlowParams, lead: int | None = None):
    """``(z, log_deriv)`` at ``x``; ``lead`` selects one lead time when ``f`` carries all 21."""
    if lead is not None:
        if not 0 <= lead < f.knots.shape[-3]:
            raise ContractViolation(f"lead {lead} out of range")
        f = f.lead(lead)
    return flow_forward(x, f.knots, f.values, f.derivatives)


def flow_logpdf(x, f: FlowParams, lead: int | None = None):
    z, ld = flow_transform(x, f, lead)
    return -0.5 * z * z - LOG_SQRT_2PI + ld


def flow_cdf(x, f: FlowParams, lead: int | None = None):
    z, _ = flow_transform(x, f, lead)
    return ndtr(z)


def flow_quantile(tau, f: FlowParams, lead: int | None = None):
    tau = np.asarray(tau, float)
    if np.any((tau <= 0.0) | (tau >= 1.0)):
        raise ContractViolation("quantile levels must lie strictly inside (0, 1)")
    if lead is not None:
        f = f.lead(lead)
    return flow_inverse(ndtri(tau), f.knots, f.values, f.derivatives)


def flow_sample(f: FlowParams, rng: np.random.Generator, size=None):
    shape = f.knots.shape[:-2] if size is None else size
    return flow_inverse(rng.standard_normal(shape), f.knots, f.values, f.derivatives)


# ---------------------------------------------------------------------------
# loss


def flow_nll_backward(z, records, knots, values, derivatives):
    """Gradients of ``z**2 / 2 - log_deriv`` w.r.t. knots, values and derivatives."""
    gz = z
    gk = np.zeros_like(knots)
    gv = np.zeros_like(values)
    gd = np.zeros_like(derivatives)
    for l in range(len(records) - 1, -1, -1):
        (yx, yk, yv, yd), (lx, lk, lv, ld) = records[l]
        g = gz[..., None]
        gk[..., l, :] = g * yk - lk
        gv[..., l, :] = g * yv - lv
        gd[..., l, :] = g * yd - ld
        gz = gz * yx - lx
    return gk, gv, gd


def flow_loss_and_grad(raw, y):
    """Per-element ``z**2/2 - log T'(y)`` and its gradient w.r.t. raw parameters.

    ``raw`` has trailing shape ``(40,)`` and broadcasts against ``y``.
    """
    raw = np.asarray(raw, float)
    r = raw.reshape(raw.shape[:-1] + (N_SPLINES, 2, N_KNOTS))
    rk, rv = r[..., 0, :], r[..., 1, :]
    k, v = _monotone(rk), _monotone(rv)
    d = gregory_derivatives(k, v)
    z, ld, rec = flow_forward(y, k, v, d, grad=True)
    loss = 0.5 * z * z - ld
    gk, gv, gd = flow_nll_backward(z, rec, k, v, d)
    ek, ev = _gregory_backward(k, v, d, gd)
    graw = np.stack([_monotone_backward(rk, gk + ek), _monotone_backward(rv, gv + ev)], axis=-2)
    return loss, graw.reshape(raw.shape)


def free_flow_loss_and_grad(raw, y):
    """Same loss for the variant whose derivatives are predicted directly.

    ``raw`` has trailing shape ``(60,)``: per spline 5 knots, 5 values and 5
    derivatives, the latter mapped through ``1e-3 + softplus``.
    """
    raw = np.asarray(raw, float)
    r = raw.reshape(raw.shape[:-1] + (N_SPLINES, 3, N_KNOTS))
    rk, rv, rd = r[..., 0, :], r[..., 1, :], r[..., 2, :]
    k, v = _monotone(rk), _monotone(rv)
    d = MIN_GAP + softplus(rd)
    z, ld, rec = flow_forward(y, k, v, d, grad=True)
    loss = 0.5 * z * z - ld
    gk, gv, gd = flow_nll_backward(z, rec, k, v, d)
    graw = np.stack(
        [_monotone_backward(rk, gk), _monotone_backward(rv, gv), gd * expit(rd)], axis=-2
    )
    return loss, graw.reshape(raw.shape)


def free_flow_params(raw) -> FlowParams:
    raw = np.asarray(raw, float)
    r = raw.reshape(raw.shape[:-1] + (N_SPLINES, 3, N_KNOTS))
    k, v = make_monotone_params(r[..., 0, :], r[..., 1, :])
    return FlowParams(k, v, MIN_GAP + softplus(r[..., 2, :]))


# ---------------------------------------------------------------------------
# diagnostics


def knot_slope_limits(knots, values, derivatives):
    """Left and right limits of the spline slope at each interior knot."""
    k, v, d = (np.asarray(a, float) for a in (knots, values, derivatives))
    limits = []
    for i in range(1, N_KNOTS - 1):
        ki = k[..., i]
        jl = np.full(ki.shape, i - 1)
        jr = np.full(ki.shape, i)
        _, gl = rq_bin(ki, k, v, d, jl)
        _, gr = rq_bin(ki, k, v, d, jr)
        limits.append((np.exp(gl), np.exp(gr)))
    left = np.stack([a for a, _ in limits], axis=-1)
    right = np.stack([b for _, b in limits], axis=-1)
    return left, right


def slope_jump_flags(knots, values, derivatives, rtol: float = 1e-9) -> np.ndarray:
    """Flag interior knots whose derivative leaves the bracket of adjacent secant slopes.

    A knot derivative outside ``[min(S[i-1], S[i]), max(S[i-1], S[i])]`` forces
    the density to spike or collapse right at the knot, which shows up as an
    abrupt jump in the plotted pdf. Knot-derived derivatives never trip this
    (they sit between the two secants); freely predicted ones can.
    """
    k, v, d = (np.asarray(a, float) for a in (knots, values, derivatives))
    S = np.diff(v, axis=-1) / np.diff(k, axis=-1)
    lo = np.minimum(S[..., :-1], S[..., 1:])
    hi = np.maximum(S[..., :-1], S[..., 1:])
    di = d[..., 1:-1]
    return (di < lo * (1 - rtol)) | (di > hi * (1 + rtol))
