"""Post-experiment inference: sandwich variances and confidence intervals.

The asymptotic variance of the per-arm weighted Z-estimator has the sandwich
form Gdot^-1 I Gdot^-T, estimated by plugging the fitted theta into

    Gdot = (1/T) sum_t w_t  grad_g(X_t, Y_t; theta_hat)
    I    = (1/T) sum_t w_t^2 g g' (X_t, Y_t; theta_hat)

with w_t = 1{A_t = a} / pi_t. The gradient is constant in theta for all
three families (x x', x x' - Sigma_e, and -1 respectively), so it is coded
directly rather than differentiated numerically; a finite-difference guard
lives in the test suite. ``simplified`` mode swaps Gdot for its unweighted
plug-in (the context second moment, or the constant 1 for the value target),
which estimates the same limit.

Confidence intervals use a self-contained normal quantile (rational
approximation plus one Halley refinement), deterministic and accurate to
better than 1e-9.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .estimator import (
    AuxiliaryData,
    BanditLog,
    NoDataForArm,
    ScoreTarget,
    SingularDesign,
    MAX_CONDITION,
    ipwz_solve,
)

# Incremented whenever a negative variance diagonal (floating error) is floored.
counters = {"negative_variance_floored": 0}

_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)


def norm_ppf(p):
    """Standard normal quantile, accurate to well below 1e-9.

    Acklam's rational approximation (|error| < 1.15e-9) refined with one
    Halley step on Phi(x) - p, evaluated through erfc for tail stability.
    """
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("quantile argument must lie strictly in (0, 1)")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    x = np.empty_like(p)
    lo, hi = 0.02425, 1 - 0.02425

    region = p < lo
    if region.any():
        q = np.sqrt(-2.0 * np.log(p[region]))
        x[region] = ((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
                     / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0))
    region = p > hi
    if region.any():
        q = np.sqrt(-2.0 * np.log(1.0 - p[region]))
        x[region] = -((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
                      / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0))
    region = (p >= lo) & (p <= hi)
    if region.any():
        q = p[region] - 0.5
        r = q * q
        x[region] = ((((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
                     / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0))

    # One Halley refinement step, run on the smaller tail so that erfc keeps
    # full relative precision (1 - p is exact for p >= 1/2 by Sterbenz).
    upper = p > 0.5
    q = np.where(upper, 1.0 - p, p)
    y = np.where(upper, -x, x)
    err = 0.5 * erfc(-y / math.sqrt(2.0)) - q
    u = err * math.sqrt(2.0 * math.pi) * np.exp(y * y / 2.0)
    y = y - u / (1.0 + y * u / 2.0)
    x = np.where(upper, -y, y)
    return float(x) if x.ndim == 0 else x


def _weighted_pieces(log: BanditLog, target: ScoreTarget, arm: int, theta: np.ndarray):
    mask = log.arms == arm
    if not mask.any():
        raise NoDataForArm(arm)
    X = log.contexts[mask]
    Y = log.outcomes[mask]
    w = 1.0 / log.propensities[mask]
    return X, Y, w


def sandwich_variance(
    log: BanditLog,
    target: ScoreTarget,
    arm: int,
    theta_hat: np.ndarray,
    mode: str = "full",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plug-in sandwich estimate; returns (Sigma_hat, Gdot_hat, I_hat)."""
    if mode not in ("full", "simplified"):
        raise ValueError(f"unknown variance mode {mode!r}")
    theta = np.asarray(theta_hat, dtype=float).ravel()
    X, Y, w = _weighted_pieces(log, target, arm, theta)
    T = log.horizon

    if target.family == "ope":
        pe = target.target_policy.vector(log.num_arms)[arm]
        gdot = np.array([[w.sum() / T]])
        resid = pe * Y - theta[0]
        imat = np.array([[np.sum((w * resid) ** 2) / T]])
        if mode == "simplified":
            gdot = np.array([[1.0]])
    elif target.family == "misspec_linear":
        gdot = (X * w[:, None]).T @ X / T
        resid = Y - X @ theta
        Xr = X * (w * resid)[:, None]
        imat = Xr.T @ Xr / T
        if mode == "simplified":
            gdot = log.contexts.T @ log.contexts / T
    else:
        sigma_e = np.asarray(target.sigma_e, dtype=float)
        gdot = (X * w[:, None]).T @ X / T - (w.sum() / T) * sigma_e
        gvec = (X @ theta)[:, None] * X - (sigma_e @ theta) - X * Y[:, None]
        gw = gvec * w[:, None]
        imat = gw.T @ gw / T
        if mode == "simplified":
            gdot = log.contexts.T @ log.contexts / T - sigma_e

    cond = np.linalg.cond(gdot)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularDesign(arm, cond)
    ginv = np.linalg.inv(gdot)
    sigma = ginv @ imat @ ginv.T
    sigma = (sigma + sigma.T) / 2.0
    neg = np.diag(sigma) < 0
    if neg.any():
        counters["negative_variance_floored"] += int(neg.sum())
        sigma[np.diag_indices_from(sigma)] = np.maximum(np.diag(sigma), 0.0)
    return sigma, gdot, imat


def confidence_intervals(
    theta_hat: np.ndarray,
    sigma_hat: np.ndarray,
    horizon: int,
    levels,
) -> dict[float, np.ndarray]:
    """Per-coordinate normal intervals theta_i +/- z * sqrt(sigma_ii / T)."""
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma_hat, dtype=float))
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    half_widths = np.sqrt(np.maximum(np.diag(sigma), 0.0) / horizon)
    out = {}
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValueError(f"confidence level {level} outside (0, 1)")
        z = norm_ppf((1.0 + level) / 2.0)
        out[float(level)] = np.column_stack([theta - z * half_widths,
                                             theta + z * half_widths])
    return out


@dataclass
class EstimateReport:
    """Per-arm estimate with its sandwich variance and intervals."""

    arm: int
    theta: np.ndarray
    sigma: np.ndarray
    gdot: np.ndarray
    imat: np.ndarray
    cis: dict[float, np.ndarray]
    horizon: int

    def to_json_dict(self) -> dict:
        return {
            "arm": self.arm,
            "theta": self.theta.tolist(),
            "sigma": self.sigma.tolist(),
            "ci": {f"{lvl:g}": ci.tolist() for lvl, ci in self.cis.items()},
            "T": self.horizon,
        }


@dataclass
class OPEReport:
    """Aggregated target-policy value with per-arm breakdown."""

    value: float
    variance: float
    cis: dict[float, tuple[float, float]]
    per_arm: np.ndarray
    horizon: int

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "variance": self.variance,
            "ci": {f"{lvl:g}": list(ci) for lvl, ci in self.cis.items()},
            "per_arm": self.per_arm.tolist(),
            "T": self.horizon,
        }


def estimate_report(
    log: BanditLog,
    target: ScoreTarget,
    arm: int,
    levels=(0.95,),
    mode: str = "full",
) -> EstimateReport:
    """Solve, estimate variance and build intervals for one arm."""
    theta = ipwz_solve(log, target, arm)
    sigma, gdot, imat = sandwich_variance(log, target, arm, theta, mode=mode)
    cis = confidence_intervals(theta, sigma, log.horizon, levels)
    return EstimateReport(arm=arm, theta=theta, sigma=sigma, gdot=gdot,
                          imat=imat, cis=cis, horizon=log.horizon)


def ope_value(
    log: BanditLog,
    target: ScoreTarget,
    mode: str = "full",
    levels=(0.95,),
) -> OPEReport:
    """Target-policy value V_hat = sum_a theta_hat_a with its scalar variance."""
    if target.family != "ope":
        raise ValueError("ope_value requires an ope-family target")
    per_arm = np.zeros(log.num_arms)
    variance = 0.0
    for arm in range(log.num_arms):
        theta = ipwz_solve(log, target, arm)
        _, gdot, imat = sandwich_variance(log, target, arm, theta, mode=mode)
        per_arm[arm] = theta[0]
        variance += float(imat[0, 0]) / float(gdot[0, 0]) ** 2
    value = float(per_arm.sum())
    half = math.sqrt(variance / log.horizon)
    cis = {}
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValueError(f"confidence level {level} outside (0, 1)")
        z = norm_ppf((1.0 + level) / 2.0)
        cis[float(level)] = (value - z * half, value + z * half)
    return OPEReport(value=value, variance=variance, cis=cis,
                     per_arm=per_arm, horizon=log.horizon)


def variance_estimated_sigma(
    log: BanditLog,
    aux: AuxiliaryData,
    arm: int,
    theta_tilde: np.ndarray,
    sigma_e_hat: np.ndarray,
    regime: str = "auto",
) -> tuple[np.ndarray, str]:
    """Asymptotic variance when Sigma_e itself is estimated from auxiliary data.

    Regimes follow the relative sizes of the auxiliary sample n and the
    horizon T: with much more auxiliary data the known-Sigma_e sandwich
    applies (sqrt(T) scaling); with comparable sizes an extra term H/kappa
    from the Sigma_e estimate enters; with much less auxiliary data that term
    dominates and the rate drops to sqrt(n).
    """
    valid = ("auto", "n_dominant", "proportional", "t_dominant")
    if regime not in valid:
        raise ValueError(f"regime must be one of {valid}")
    n, T = aux.size, log.horizon
    if regime == "auto":
        ratio = n / T
        regime = "n_dominant" if ratio > 10 else ("t_dominant" if ratio < 0.1 else "proportional")

    theta = np.asarray(theta_tilde, dtype=float).ravel()
    target = ScoreTarget(family="noisy_context", sigma_e=np.asarray(sigma_e_hat, dtype=float))
    _, gdot, imat = sandwich_variance(log, target, arm, theta, mode="full")

    # H = mean over aux rows of (V_i - Sigma_e) theta theta' (V_i - Sigma_e),
    # with V_i the outer product of the i-th measurement error.
    err = aux.observed - aux.latent
    vt = err * (err @ theta)[:, None] - np.asarray(sigma_e_hat) @ theta
    h_bar = vt.T @ vt / n

    cond = np.linalg.cond(gdot)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularDesign(arm, cond)
    ginv = np.linalg.inv(gdot)
    if regime == "n_dominant":
        middle, scaling = imat, "sqrt_T"
    elif regime == "proportional":
        middle, scaling = imat + h_bar / (n / T), "sqrt_T"
    else:
        middle, scaling = h_bar, "sqrt_n"
    sigma = ginv @ middle @ ginv.T
    return (sigma + sigma.T) / 2.0, scaling


def write_reports_json(reports: list[EstimateReport], path,
                       ope_report: OPEReport | None = None) -> None:
    doc = {"arms": [r.to_json_dict() for r in reports]}
    if ope_report is not None:
        doc["ope"] = ope_report.to_json_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
