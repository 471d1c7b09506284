"""Penalized Cox proportional hazards on fused feature vectors.

The model is fit by Newton iterations with step-halving on the penalized
negative log partial likelihood (Breslow handling of tied event times).
Features are standardized internally; coefficients are reported on both
scales. Attribution is exact for a linear risk score: each feature's
contribution is its coefficient times its centered value, and the
contributions sum to the risk relative to the cohort mean.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FusedSample:
    """One subject: fused feature vector plus survival outcome."""

    study_id: str
    features: np.ndarray
    time: float
    event: int


def samples_from_arrays(X, times, events, study_ids=None) -> list[FusedSample]:
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if study_ids is None:
        study_ids = [f"s{i:05d}" for i in range(X.shape[0])]
    return [
        FusedSample(study_id=sid, features=X[i], time=float(times[i]), event=int(events[i]))
        for i, sid in enumerate(study_ids)
    ]


def correlation_filter(X, threshold: float) -> np.ndarray:
    """Greedy feature selection by pairwise Pearson correlation.

    Scans columns left to right; a column is kept only if its absolute
    correlation with every already-kept column is <= threshold. Constant
    columns are dropped first (correlation undefined).

    Returns the kept column indices, in ascending order.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-d (subjects x features)")
    n, p = X.shape
    if n < 3:
        raise ValueError("need at least 3 subjects to estimate correlations")
    if p == 0:
        raise ValueError("X has no features")
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")
    if not (0.0 < threshold <= 1.0):
        raise ValueError("threshold must be in (0, 1]")

    std = X.std(axis=0)
    kept: list[int] = []
    kept_z: list[np.ndarray] = []
    for j in range(p):
        if std[j] == 0.0:
            continue
        zj = (X[:, j] - X[:, j].mean()) / std[j]
        redundant = False
        for zk in kept_z:
            r = float(np.clip(zj @ zk / n, -1.0, 1.0))
            if abs(r) > threshold:
                redundant = True
                break
        if not redundant:
            kept.append(j)
            kept_z.append(zj)
    return np.asarray(kept, dtype=int)


def cox_neg_log_likelihood(theta, X, times, events, penalizer: float = 0.0):
    """Penalized negative log partial likelihood with gradient and Hessian.

    Breslow convention for tied event times: all events at a time share the
    risk-set sums of that time. The ridge penalty lam * ||theta||^2 is added
    to the summed (not averaged) likelihood. Returns (value, grad, hess).
    """
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    n, p = X.shape
    if theta.shape != (p,):
        raise ValueError("theta shape mismatch")

    order = np.argsort(-times, kind="stable")
    eta = X @ theta

    f = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    # risk-set sums are kept relative to exp(shift) and rescaled whenever a
    # larger eta joins the set, so a diverging Newton step cannot overflow
    shift = -np.inf
    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p))
    i = 0
    while i < n:
        t = times[order[i]]
        j = i
        while j < n and times[order[j]] == t:
            k = order[j]
            if eta[k] > shift:
                rescale = np.exp(shift - eta[k]) if np.isfinite(shift) else 0.0
                s0 *= rescale
                s1 *= rescale
                s2 *= rescale
                shift = eta[k]
            w = np.exp(eta[k] - shift)
            s0 += w
            s1 += w * X[k]
            s2 += w * np.outer(X[k], X[k])
            j += 1
        for m in range(i, j):
            k = order[m]
            if events[k] == 1:
                f += np.log(s0) + shift - eta[k]
                mu = s1 / s0
                grad += mu - X[k]
                hess += s2 / s0 - np.outer(mu, mu)
        i = j

    f += penalizer * float(theta @ theta)
    grad += 2.0 * penalizer * theta
    hess += 2.0 * penalizer * np.eye(p)
    return f, grad, hess


@dataclass
class CoxModel:
    """Fitted proportional hazards model.

    ``theta`` lives on the standardized feature scale; ``coefficients``
    maps back to the original scale, with zeros for dropped columns.
    """

    theta: np.ndarray
    kept_idx: np.ndarray
    feature_means: np.ndarray
    feature_scales: np.ndarray
    n_features: int
    baseline_times: np.ndarray
    baseline_cumhaz: np.ndarray
    penalizer: float
    feature_names: list[str] | None = None
    n_iter: int = 0
    converged: bool = False
    final_loss: float = float("nan")
    grad_norm: float = float("nan")

    @property
    def coefficients(self) -> np.ndarray:
        coef = np.zeros(self.n_features)
        coef[self.kept_idx] = self.theta / self.feature_scales
        return coef

    def standardize(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got {X.shape[1]}"
            )
        return (X[:, self.kept_idx] - self.feature_means) / self.feature_scales


def _stack_samples(samples: Sequence[FusedSample]):
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    X = np.stack([np.asarray(s.features, dtype=float).ravel() for s in samples])
    times = np.asarray([s.time for s in samples], dtype=float)
    events = np.asarray([s.event for s in samples], dtype=int)
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if np.any(times <= 0) or not np.all(np.isfinite(times)):
        raise ValueError("times must be finite and > 0")
    if not np.all((events == 0) | (events == 1)):
        raise ValueError("events must be 0 or 1")
    if events.sum() == 0:
        raise ValueError("need at least one observed event")
    return X, times, events


def fit_cox(
    samples: Sequence[FusedSample],
    penalizer: float,
    correlation_threshold: float | None = None,
    feature_names: Sequence[str] | None = None,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> CoxModel:
    """Fit the penalized Cox model by Newton iterations with step-halving.

    Stops when the gradient infinity-norm drops below ``tol`` or after
    ``max_iter`` iterations. A singular Hessian is retried with an escalating
    ridge bump before giving up.
    """
    if penalizer < 0:
        raise ValueError("penalizer must be >= 0")
    X, times, events = _stack_samples(samples)
    n, p = X.shape
    if feature_names is not None and len(feature_names) != p:
        raise ValueError("feature_names length mismatch")

    if correlation_threshold is not None:
        kept = correlation_filter(X, correlation_threshold)
        if kept.size == 0:
            raise ValueError("correlation filter removed every feature")
    else:
        kept = np.arange(p)

    Xk = X[:, kept]
    means = Xk.mean(axis=0)
    stds = Xk.std(axis=0)
    scales = np.where(stds > 0, stds, 1.0)
    Xs = (Xk - means) / scales

    theta = np.zeros(kept.size)
    f, grad, hess = cox_neg_log_likelihood(theta, Xs, times, events, penalizer)
    n_iter = 0
    converged = bool(np.max(np.abs(grad)) < tol)
    while not converged and n_iter < max_iter:
        step = _solve_newton_step(hess, grad)
        # step-halving line search: insist on strict descent
        alpha = 1.0
        for _ in range(40):
            cand = theta - alpha * step
            f_new, g_new, h_new = cox_neg_log_likelihood(
                cand, Xs, times, events, penalizer
            )
            if np.isfinite(f_new) and f_new < f:
                theta, f, grad, hess = cand, f_new, g_new, h_new
                break
            alpha *= 0.5
        else:
            # no descent direction left; accept current point
            break
        n_iter += 1
        converged = bool(np.max(np.abs(grad)) < tol)

    if not converged:
        warnings.warn(
            f"Cox fit stopped after {n_iter} iterations with "
            f"grad inf-norm {np.max(np.abs(grad)):.3e}",
            RuntimeWarning,
            stacklevel=2,
        )

    risks = Xs @ theta
    base_t, base_h = _breslow_baseline(risks, times, events)
    return CoxModel(
        theta=theta,
        kept_idx=kept,
        feature_means=means,
        feature_scales=scales,
        n_features=p,
        baseline_times=base_t,
        baseline_cumhaz=base_h,
        penalizer=penalizer,
        feature_names=list(feature_names) if feature_names is not None else None,
        n_iter=n_iter,
        converged=converged,
        final_loss=float(f),
        grad_norm=float(np.max(np.abs(grad))),
    )


def _solve_newton_step(hess, grad):
    ridge = 0.0
    scale = max(float(np.trace(hess)) / max(hess.shape[0], 1), 1.0)
    for _ in range(8):
        try:
            h = hess if ridge == 0.0 else hess + ridge * np.eye(hess.shape[0])
            step = np.linalg.solve(h, grad)
            if np.all(np.isfinite(step)):
                return step
        except np.linalg.LinAlgError:
            pass
        ridge = scale * 1e-10 if ridge == 0.0 else ridge * 100.0
    raise np.linalg.LinAlgError("Hessian singular even after ridge retries")


def _breslow_baseline(risks, times, events):
    """Breslow cumulative baseline hazard at distinct event times."""
    order = np.argsort(times, kind="stable")
    times_s = times[order]
    events_s = events[order]
    w = np.exp(risks[order])
    # running sum over the risk set {j: t_j >= t}, built from the right
    suffix = np.cumsum(w[::-1])[::-1]
    base_times = []
    increments = []
    i = 0
    n = len(times_s)
    while i < n:
        t = times_s[i]
        j = i
        d = 0
        while j < n and times_s[j] == t:
            d += int(events_s[j])
            j += 1
        if d > 0:
            base_times.append(t)
            increments.append(d / suffix[i])
        i = j
    return np.asarray(base_times), np.cumsum(np.asarray(increments))


def predict_risk(model: CoxModel, X) -> np.ndarray:
    """Linear risk score theta . x on the standardized scale.

    Accepts one vector or a (n, p) matrix; returns a 1-d array.
    """
    return model.standardize(X) @ model.theta


def cumulative_hazard(model: CoxModel, X, t) -> np.ndarray:
    """H(t | x) = H0(t) exp(risk), with H0 a right-continuous step function."""
    risks = predict_risk(model, X)
    t = float(t)
    idx = int(np.searchsorted(model.baseline_times, t, side="right"))
    h0 = 0.0 if idx == 0 else float(model.baseline_cumhaz[idx - 1])
    return h0 * np.exp(risks)


@dataclass
class AttributionReport:
    """Exact linear attribution of risk scores.

    ``phi[i, k]`` is feature k's contribution to subject i's risk relative
    to the cohort mean; rows sum to risk_i - mean(risk) by construction.
    Image-derived features are folded into two per-subject aggregates: the
    sum of the five largest positive and five largest negative contributions.
    """

    feature_names: list[str]
    phi: np.ndarray
    risks: np.ndarray
    image_top_pos: np.ndarray
    image_top_neg: np.ndarray
    ranking: list[tuple[str, float]] = field(default_factory=list)


IMAGE_FEATURE_PREFIX = "img"
IMAGE_POS_AGGREGATE = "img_top5_pos"
IMAGE_NEG_AGGREGATE = "img_top5_neg"


def linear_attribution(
    model: CoxModel,
    X,
    feature_names: Sequence[str] | None = None,
    top_k: int = 5,
) -> AttributionReport:
    """Per-subject, per-feature risk contributions for the linear Cox score.

    phi[i, k] = theta_k * (z_ik - mean_i z_ik) over the standardized kept
    features of this cohort, so completeness holds exactly: the row sum
    equals subject i's risk minus the cohort mean risk.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = feature_names if feature_names is not None else model.feature_names
    if names is None:
        names = [f"x{j}" for j in range(model.n_features)]
    if len(names) != model.n_features:
        raise ValueError("feature_names length mismatch")

    Xs = model.standardize(X)
    phi = model.theta * (Xs - Xs.mean(axis=0))
    risks = Xs @ model.theta
    kept_names = [names[j] for j in model.kept_idx]

    img_cols = [k for k, nm in enumerate(kept_names) if nm.startswith(IMAGE_FEATURE_PREFIX)]
    n = phi.shape[0]
    top_pos = np.zeros(n)
    top_neg = np.zeros(n)
    if img_cols:
        img_phi = phi[:, img_cols]
        for i in range(n):
            row = img_phi[i]
            pos = np.sort(row[row > 0])[::-1]
            neg = np.sort(row[row < 0])
            top_pos[i] = pos[:top_k].sum()
            top_neg[i] = neg[:top_k].sum()

    ranking: list[tuple[str, float]] = []
    for k, nm in enumerate(kept_names):
        if k in img_cols:
            continue
        ranking.append((nm, float(np.abs(phi[:, k]).mean())))
    if img_cols:
        ranking.append((IMAGE_POS_AGGREGATE, float(np.abs(top_pos).mean())))
        ranking.append((IMAGE_NEG_AGGREGATE, float(np.abs(top_neg).mean())))
    ranking.sort(key=lambda item: (-item[1], item[0]))

    return AttributionReport(
        feature_names=kept_names,
        phi=phi,
        risks=risks,
        image_top_pos=top_pos,
        image_top_neg=top_neg,
        ranking=ranking,
    )
