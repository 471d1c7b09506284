"""Survival evaluation: concordance index, Kaplan-Meier curves, log-rank test,
median risk stratification.

All functions take parallel arrays (times, events, risks). Times must be
positive and finite; events are 0/1 indicators (1 = event observed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class SurvivalOutcome(NamedTuple):
    """One subject's evaluation record."""

    time: float
    event: int
    risk: float


def _validate_outcomes(times, events, risks=None):
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if times.ndim != 1 or events.shape != times.shape:
        raise ValueError("times and events must be 1-d arrays of equal length")
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise ValueError("times must be finite and > 0")
    if not np.all((events == 0) | (events == 1)):
        raise ValueError("events must be 0 or 1")
    if risks is None:
        return times, events
    risks = np.asarray(risks, dtype=float)
    if risks.shape != times.shape or not np.all(np.isfinite(risks)):
        raise ValueError("risks must be finite and match times in length")
    return times, events, risks


def c_index(times, events, risks) -> float:
    """Harrell concordance index.

    Ordered pairs (i, j) with t_i < t_j and delta_i = 1 are comparable;
    the pair counts 1 if r_i > r_j, and 0.5 if r_i = r_j. Pairs tied on
    time are not comparable.
    """
    times, events, risks = _validate_outcomes(times, events, risks)
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1)
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise ValueError("no comparable pairs (need t_i < t_j with event at i)")
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    correct = int((comparable & higher).sum())
    half = int((comparable & tied).sum())
    return (correct + 0.5 * half) / n_comparable


@dataclass(frozen=True)
class KMCurve:
    """Product-limit survival estimate as a right-continuous step function.

    ``event_times`` holds the distinct times with at least one event, in
    ascending order; ``survival[k]`` is S(t) for t in
    [event_times[k], event_times[k+1]).  S(t) = 1 before the first event.
    """

    event_times: np.ndarray
    survival: np.ndarray
    n_subjects: int

    def at(self, t) -> np.ndarray:
        """Evaluate S(t) (vectorized)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.event_times, t, side="right")
        vals = np.concatenate([[1.0], self.survival])
        return vals[idx]

    def step_points(self):
        """(time, survival) pairs suitable for step plotting, starting at t=0."""
        ts = np.concatenate([[0.0], self.event_times])
        ss = np.concatenate([[1.0], self.survival])
        return ts, ss


def km_curve(times, events) -> KMCurve:
    """Kaplan-Meier estimator.

    At each distinct event time t with d events and n subjects still at
    risk, S is multiplied by (1 - d/n). Censored subjects leave the risk
    set after their censoring time. No events gives S = 1 everywhere.
    """
    times, events = _validate_outcomes(times, events)
    if times.size == 0:
        raise ValueError("need at least one subject")
    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]
    n = times.size

    event_times = []
    survival = []
    s = 1.0
    i = 0
    while i < n:
        t = times[i]
        j = i
        d = 0
        while j < n and times[j] == t:
            d += int(events[j])
            j += 1
        if d > 0:
            at_risk = n - i
            s *= 1.0 - d / at_risk
            event_times.append(t)
            survival.append(s)
        i = j
    return KMCurve(
        event_times=np.asarray(event_times, dtype=float),
        survival=np.asarray(survival, dtype=float),
        n_subjects=n,
    )


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x).

    Series expansion for x < a+1, Lentz continued fraction otherwise;
    absolute error below 1e-10 over the chi-square range used here.
    """
    if a <= 0:
        raise ValueError("a must be > 0")
    if x < 0:
        raise ValueError("x must be >= 0")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        # lower series for P(a, x); Q = 1 - P
        ap = a
        total = 1.0 / a
        delta = total
        for _ in range(1000):
            ap += 1.0
            delta *= x / ap
            total += delta
            if abs(delta) < abs(total) * 1e-16:
                break
        p = total * math.exp(-x + a * math.log(x) - math.lgamma(a))
        return 1.0 - p
    # modified Lentz continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi2_sf(x: float, df: int = 1) -> float:
    """Survival function of the chi-square distribution."""
    if df <= 0:
        raise ValueError("df must be >= 1")
    return regularized_gamma_q(df / 2.0, x / 2.0)


def log_rank(times_a, events_a, times_b, events_b):
    """Two-group log-rank test.

    Returns (chi2, p). At each distinct event time the observed events in
    group A are compared against the hypergeometric expectation given the
    pooled risk set; the statistic is (sum O-E)^2 / (sum V) with p from
    chi-square with one degree of freedom.
    """
    times_a, events_a = _validate_outcomes(times_a, events_a)
    times_b, events_b = _validate_outcomes(times_b, events_b)
    if times_a.size == 0 or times_b.size == 0:
        raise ValueError("both groups must be non-empty")
    if events_a.sum() + events_b.sum() == 0:
        raise ValueError("need at least one event overall")

    all_event_times = np.unique(
        np.concatenate([times_a[events_a == 1], times_b[events_b == 1]])
    )
    o_minus_e = 0.0
    variance = 0.0
    for t in all_event_times:
        n1 = int((times_a >= t).sum())
        n2 = int((times_b >= t).sum())
        n = n1 + n2
        d1 = int(((times_a == t) & (events_a == 1)).sum())
        d2 = int(((times_b == t) & (events_b == 1)).sum())
        d = d1 + d2
        if n < 2 or n1 == 0 or n2 == 0:
            continue
        expected = d * n1 / n
        o_minus_e += d1 - expected
        variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if variance <= 0.0:
        raise ValueError("log-rank variance is zero (degenerate risk sets)")
    chi2 = o_minus_e * o_minus_e / variance
    return chi2, chi2_sf(chi2, df=1)


def stratify_median(risks):
    """Split subject indices into (high, low) risk groups at the median.

    The median is the lower of the two central order statistics for even n,
    so exactly floor(n/2) subjects can sit above it when risks are distinct.
    Subjects with risk equal to the median go to the low group; all-equal
    risks therefore give an empty high group.
    """
    risks = np.asarray(risks, dtype=float)
    if risks.ndim != 1 or risks.size < 2:
        raise ValueError("need at least two risk scores")
    if not np.all(np.isfinite(risks)):
        raise ValueError("risks must be finite")
    median = np.sort(risks)[(risks.size - 1) // 2]
    high = np.flatnonzero(risks > median)
    low = np.flatnonzero(risks <= median)
    return high, low
