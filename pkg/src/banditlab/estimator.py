"""Score functions and inverse-probability-weighted Z-estimation.

Three estimand families are supported, each defined by a moment condition
``E[g(X, Y(a); theta)] = 0`` on a generic draw of context and potential
outcome:

* ``misspec_linear``: g = x (y - x'theta), the best linear approximation
  of the outcome by the observed context.
* ``noisy_context``: g = x y - (x x' - Sigma_e) theta, the measurement-error
  corrected score identifying the coefficient on the latent context.
* ``ope``: g = pi_e(a|x) y - theta, whose per-arm solutions sum to the value
  of a fixed target policy pi_e.

Given an adaptively collected log, the estimator for arm ``a`` is the exact
root of the empirical weighted estimating equation

    (1/T) sum_t (1{A_t = a} / pi_t) g(X_t, Y_t; theta) = 0,

where ``pi_t`` is the realized propensity recorded at collection time. All
three families are linear in theta, so the root is a single linear solve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

FAMILIES = ("misspec_linear", "noisy_context", "ope")

# Marker for ScoreTarget.sigma_e when the contextual error variance is to be
# estimated from auxiliary data rather than supplied.
ESTIMATE_FROM_AUX = "estimate-from-aux"

MAX_CONDITION = 1e12


class NoDataForArm(ValueError):
    """The requested arm was never pulled in the log."""

    def __init__(self, arm: int):
        self.arm = arm
        super().__init__(f"arm {arm} has no observations in the log")


class SingularDesign(np.linalg.LinAlgError):
    """The weighted design matrix is numerically singular."""

    def __init__(self, arm: int, cond: float):
        self.arm = arm
        self.cond = cond
        super().__init__(
            f"weighted design for arm {arm} is singular "
            f"(condition estimate {cond:.3e} exceeds {MAX_CONDITION:.0e})"
        )


@dataclass(frozen=True)
class TargetPolicy:
    """A fixed evaluation policy pi_e mapping contexts to action probabilities.

    Supported kinds are context-free: ``uniform`` (1/K each), ``constant``
    (an explicit probability vector) and ``point_mass`` (all mass on one arm).
    """

    kind: str = "uniform"
    probs: np.ndarray | None = None
    arm: int | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "constant", "point_mass"):
            raise ValueError(f"unknown target policy kind {self.kind!r}")
        if self.kind == "constant":
            if self.probs is None:
                raise ValueError("constant target policy requires probs")
            p = np.asarray(self.probs, dtype=float)
            if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("target policy probs must lie on the simplex")
            object.__setattr__(self, "probs", p)
        if self.kind == "point_mass" and self.arm is None:
            raise ValueError("point_mass target policy requires arm")

    def vector(self, num_arms: int) -> np.ndarray:
        """Probability over arms (identical at every context)."""
        if self.kind == "uniform":
            return np.full(num_arms, 1.0 / num_arms)
        if self.kind == "constant":
            if len(self.probs) != num_arms:
                raise ValueError("target policy probs length != num_arms")
            return np.asarray(self.probs, dtype=float)
        out = np.zeros(num_arms)
        out[self.arm] = 1.0
        return out

    def prob(self, arm: int, x: np.ndarray, num_arms: int) -> float:
        return float(self.vector(num_arms)[arm])


@dataclass(frozen=True)
class ScoreTarget:
    """Which estimand family is in play plus its fixed inputs."""

    family: str
    sigma_e: np.ndarray | str | None = None
    target_policy: TargetPolicy | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown score family {self.family!r}")
        if self.family == "noisy_context":
            if self.sigma_e is None:
                raise ValueError("noisy_context target requires sigma_e")
            if not isinstance(self.sigma_e, str):
                se = np.atleast_2d(np.asarray(self.sigma_e, dtype=float))
                if se.shape[0] != se.shape[1]:
                    raise ValueError("sigma_e must be square")
                if not np.allclose(se, se.T, atol=1e-10):
                    raise ValueError("sigma_e must be symmetric")
                if np.min(np.linalg.eigvalsh((se + se.T) / 2)) < -1e-10:
                    raise ValueError("sigma_e must be positive semi-definite")
                object.__setattr__(self, "sigma_e", se)
            elif self.sigma_e != ESTIMATE_FROM_AUX:
                raise ValueError(f"unknown sigma_e marker {self.sigma_e!r}")
        if self.family == "ope" and self.target_policy is None:
            raise ValueError("ope target requires a target_policy")

    @property
    def sigma_e_known(self) -> bool:
        return self.family == "noisy_context" and not isinstance(self.sigma_e, str)

    def theta_dim(self, context_dim: int) -> int:
        return 1 if self.family == "ope" else context_dim


@dataclass
class BanditLog:
    """The adaptively collected dataset: one row per round.

    Arrays are aligned over rounds t = 1..T. ``latents`` is present only for
    environments with a latent state, ``distributions`` (the full action
    distribution at each round) only when the collector recorded it. Arms are
    0-based in memory and 1-based in the CSV serialization.
    """

    contexts: np.ndarray          # (T, d)
    arms: np.ndarray              # (T,) int
    propensities: np.ndarray      # (T,) realized selection probabilities
    outcomes: np.ndarray          # (T,)
    num_arms: int
    latents: np.ndarray | None = None        # (T, d) or None
    distributions: np.ndarray | None = None  # (T, K) or None

    def __post_init__(self):
        contexts = np.asarray(self.contexts, dtype=float)
        if contexts.ndim == 1:  # a single-feature log: one column, T rows
            contexts = contexts[:, None]
        self.contexts = contexts
        self.arms = np.asarray(self.arms, dtype=np.int64)
        self.propensities = np.asarray(self.propensities, dtype=float)
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        T = self.contexts.shape[0]
        if not (self.arms.shape[0] == self.propensities.shape[0] == self.outcomes.shape[0] == T):
            raise ValueError("log columns have mismatched lengths")
        if T and (self.arms.min() < 0 or self.arms.max() >= self.num_arms):
            raise ValueError("arm indices out of range")
        if T and (self.propensities.min() <= 0.0 or self.propensities.max() > 1.0 + 1e-12):
            raise ValueError("propensities must lie in (0, 1]")

    @property
    def horizon(self) -> int:
        return self.contexts.shape[0]

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]


@dataclass(frozen=True)
class AuxiliaryData:
    """Offline paired observations of (observed context, true latent state)."""

    observed: np.ndarray  # (n, d)
    latent: np.ndarray    # (n, d)

    def __post_init__(self):
        obs = np.atleast_2d(np.asarray(self.observed, dtype=float))
        lat = np.atleast_2d(np.asarray(self.latent, dtype=float))
        if obs.shape != lat.shape or obs.shape[0] < 1:
            raise ValueError("auxiliary data must pair observed/latent rows of equal shape")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "latent", lat)

    @property
    def size(self) -> int:
        return self.observed.shape[0]

    def sigma_e_hat(self) -> np.ndarray:
        """Mean outer product of the paired measurement errors."""
        err = self.observed - self.latent
        return err.T @ err / self.size


def score_g(
    target: ScoreTarget,
    arm: int,
    x: np.ndarray,
    y: float,
    theta: np.ndarray,
    num_arms: int | None = None,
) -> np.ndarray:
    """Evaluate the family score g(x, y; theta) for one observation."""
    x = np.asarray(x, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    if target.family == "misspec_linear":
        if theta.shape[0] != x.shape[0]:
            raise ValueError("theta dimension must match context dimension")
        return x * (y - x @ theta)
    if target.family == "noisy_context":
        if theta.shape[0] != x.shape[0]:
            raise ValueError("theta dimension must match context dimension")
        sigma_e = np.asarray(target.sigma_e, dtype=float)
        return x * y - (np.outer(x, x) - sigma_e) @ theta
    if theta.shape[0] != 1:
        raise ValueError("ope theta is scalar")
    if num_arms is None:
        raise ValueError("num_arms required for the ope score")
    pe = target.target_policy.prob(arm, x, num_arms)
    return np.array([pe * y - theta[0]])


def _arm_rows(log: BanditLog, arm: int):
    mask = log.arms == arm
    if not mask.any():
        raise NoDataForArm(arm)
    return log.contexts[mask], log.outcomes[mask], 1.0 / log.propensities[mask]


def _solve_checked(design: np.ndarray, moment: np.ndarray, arm: int) -> np.ndarray:
    cond = np.linalg.cond(design)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularDesign(arm, cond)
    return np.linalg.solve(design, moment)


def _require_known_sigma(target: ScoreTarget) -> None:
    if target.family == "noisy_context" and isinstance(target.sigma_e, str):
        raise ValueError(
            "sigma_e is marked estimate-from-aux; use ipwz_solve_estimated_sigma "
            "with an AuxiliaryData sample")


def ipwz_solve(log: BanditLog, target: ScoreTarget, arm: int) -> np.ndarray:
    """Exact root of the weighted estimating equation for one arm."""
    _require_known_sigma(target)
    X, Y, w = _arm_rows(log, arm)
    T = log.horizon
    if target.family == "ope":
        pe = target.target_policy.vector(log.num_arms)[arm]
        return np.array([float(w @ (pe * Y)) / float(w.sum())])
    design = (X * w[:, None]).T @ X / T
    if target.family == "noisy_context":
        design = design - (w.sum() / T) * np.asarray(target.sigma_e, dtype=float)
    moment = X.T @ (w * Y) / T
    return _solve_checked(design, moment, arm)


def ipwz_residual(log: BanditLog, target: ScoreTarget, arm: int, theta: np.ndarray) -> np.ndarray:
    """Value of the empirical weighted estimating equation at ``theta``."""
    X, Y, w = _arm_rows(log, arm)
    T = log.horizon
    theta = np.asarray(theta, dtype=float).ravel()
    if target.family == "misspec_linear":
        g = X * (w * (Y - X @ theta))[:, None]
    elif target.family == "noisy_context":
        sigma_e = np.asarray(target.sigma_e, dtype=float)
        g = (X * (w * Y)[:, None]
             - (X * w[:, None]) * (X @ theta)[:, None]
             + w[:, None] * (sigma_e @ theta))
    else:
        pe = target.target_policy.vector(log.num_arms)[arm]
        g = (w * (pe * Y - theta[0]))[:, None]
    return g.sum(axis=0) / T


def ipwz_solve_estimated_sigma(
    log: BanditLog, aux: AuxiliaryData, arm: int
) -> tuple[np.ndarray, np.ndarray]:
    """Noisy-context estimator with Sigma_e replaced by its auxiliary-data estimate."""
    sigma_e_hat = aux.sigma_e_hat()
    target = ScoreTarget(family="noisy_context", sigma_e=sigma_e_hat)
    return ipwz_solve(log, target, arm), sigma_e_hat


# --- CSV serialization -------------------------------------------------------
#
# Schema: t, x_1..x_d, s_1..s_d, a, pi, y. Latent cells are blank when the
# environment has no latent state; arms are written 1-based; propensities are
# written with 17 significant digits since inverse weights are sensitive.


def write_log_csv(log: BanditLog, path) -> None:
    d = log.context_dim
    header = (["t"] + [f"x_{j}" for j in range(1, d + 1)]
              + [f"s_{j}" for j in range(1, d + 1)] + ["a", "pi", "y"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(log.horizon):
            row = [str(i + 1)]
            row += [f"{v:.17g}" for v in log.contexts[i]]
            if log.latents is not None:
                row += [f"{v:.17g}" for v in log.latents[i]]
            else:
                row += [""] * d
            row += [str(int(log.arms[i]) + 1),
                    f"{log.propensities[i]:.17g}",
                    f"{log.outcomes[i]:.17g}"]
            writer.writerow(row)


def read_log_csv(path) -> BanditLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for name in header if name.startswith("x_"))
        rows = list(reader)
    T = len(rows)
    contexts = np.zeros((T, d))
    latents = np.zeros((T, d))
    arms = np.zeros(T, dtype=np.int64)
    pis = np.zeros(T)
    ys = np.zeros(T)
    have_latent = T > 0 and rows[0][1 + d] != ""
    for i, row in enumerate(rows):
        contexts[i] = [float(v) for v in row[1:1 + d]]
        if have_latent:
            latents[i] = [float(v) for v in row[1 + d:1 + 2 * d]]
        arms[i] = int(row[1 + 2 * d]) - 1
        pis[i] = float(row[2 + 2 * d])
        ys[i] = float(row[3 + 2 * d])
    num_arms = int(arms.max()) + 1 if T else 1
    return BanditLog(
        contexts=contexts, arms=arms, propensities=pis, outcomes=ys,
        num_arms=num_arms, latents=latents if have_latent else None,
    )
