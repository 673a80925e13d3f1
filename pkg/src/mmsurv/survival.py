"""Discrete-time survival objective, risk scores and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_CLAMP = 1e-12


class FitError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: int

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise ValueError(f"{self.patient_id}: survival time must be finite and positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"{self.patient_id}: event must be 0 or 1, got {self.event}")


def fit_bins(times, events, n_bins=4):
    """Cut points at the 1/B .. (B-1)/B quantiles of uncensored times.

    Quantiles use linear interpolation between order statistics.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    observed = times[events == 1]
    if observed.size < n_bins or np.unique(observed).size < n_bins:
        raise FitError(
            f"need at least {n_bins} distinct uncensored times to fit {n_bins} bins, "
            f"got {np.unique(observed).size}"
        )
    qs = np.arange(1, n_bins) / n_bins
    edges = np.quantile(observed, qs, method="linear")
    if np.any(np.diff(edges) <= 0):
        raise FitError(f"quantile edges are not strictly increasing: {edges.tolist()}")
    return edges


def bin_index(times, edges):
    """Number of edges strictly below each time (right-closed bins)."""
    return np.searchsorted(np.asarray(edges), np.asarray(times, dtype=np.float64), side="left")


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def survival_curve(logits):
    """S(b) = prod_{j<=b} (1 - sigmoid(h_j)); works on (..., B) arrays."""
    hazards = _sigmoid(logits)
    return np.cumprod(1.0 - hazards, axis=-1)


def risk_score(surv):
    return -np.sum(np.asarray(surv, dtype=np.float64), axis=-1)


def nll_loss(logits: ad.Tensor, bin_idx: int, event: int, censored_weight=1.0) -> ad.Tensor:
    """Negative log-likelihood of one patient under the discrete hazard model.

    Uncensored in bin b: -log S(b-1) - log h_b.  Censored in bin b: -log S(b).
    """
    logits = ad.as_tensor(logits)
    n_bins = logits.shape[-1]
    if not 0 <= bin_idx < n_bins:
        raise IndexError(f"bin index {bin_idx} outside [0, {n_bins})")
    hazards = ad.sigmoid(logits.reshape(n_bins))
    keep = 1.0 - hazards
    surv = None
    for j in range(bin_idx + (0 if event else 1)):
        surv = keep[j] if surv is None else surv * keep[j]
    if event:
        loss = -ad.log(hazards[bin_idx], clamp=LOG_CLAMP)
        if surv is not None:
            loss = loss - ad.log(surv, clamp=LOG_CLAMP)
        return loss
    return -ad.log(surv, clamp=LOG_CLAMP) * censored_weight


def c_index(risks, times, events):
    """Harrell's concordance: pairs with t_i < t_j and event_i = 1; risk ties count 1/2."""
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    comparable = (t[:, None] < t[None, :]) & (e[:, None] == 1)
    n_pairs = comparable.sum()
    if n_pairs == 0:
        raise MetricError("no comparable pairs: C-index undefined")
    diff = r[:, None] - r[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float((score * comparable).sum() / n_pairs)


def km_curve(times, events):
    """Product-limit estimate at each distinct event time.

    Returns (event_times, survival) where survival[i] is the estimate just
    after event_times[i].
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if t.size == 0:
        raise ValueError("empty group")
    event_times = np.unique(t[e == 1])
    surv = np.empty(event_times.size)
    s = 1.0
    for i, u in enumerate(event_times):
        at_risk = np.sum(t >= u)
        deaths = np.sum((t == u) & (e == 1))
        s *= 1.0 - deaths / at_risk
        surv[i] = s
    return event_times, surv


def km_at(event_times, surv, query):
    """Evaluate a step function from :func:`km_curve` at arbitrary times."""
    query = np.asarray(query, dtype=np.float64)
    if len(event_times) == 0:
        return np.ones_like(query)
    idx = np.searchsorted(event_times, query, side="right") - 1
    return np.where(idx < 0, 1.0, surv[np.maximum(idx, 0)])


def logrank_test(times, events, groups):
    """Two-group log-rank test; returns (chi-square statistic, p-value, 1 df)."""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    g = np.asarray(groups)
    labels = np.unique(g)
    if labels.size != 2:
        raise ValueError(f"log-rank test needs exactly two groups, got {labels.size}")
    in_a = g == labels[0]
    for lab in labels:
        if not np.any(e[g == lab] == 1):
            raise ValueError(f"group {lab!r} has no events")
    obs_minus_exp = 0.0
    var = 0.0
    for u in np.unique(t[e == 1]):
        at_risk = t >= u
        n = at_risk.sum()
        n_a = (at_risk & in_a).sum()
        d = ((t == u) & (e == 1)).sum()
        d_a = ((t == u) & (e == 1) & in_a).sum()
        obs_minus_exp += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        if obs_minus_exp == 0:
            return 0.0, 1.0
        raise ValueError("log-rank variance is zero: groups never jointly at risk")
    stat = obs_minus_exp**2 / var
    return float(stat), float(math.erfc(math.sqrt(stat / 2.0)))


def median_risk_split(risks):
    """True for high-risk (risk strictly above the median); median ties go low."""
    r = np.asarray(risks, dtype=np.float64)
    return r > np.median(r)
