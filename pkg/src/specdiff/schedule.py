"""Forward-noising constants and the two reverse-kernel discretisations.

A NoiseSchedule fixes the per-step noise rates β_t and everything derived
from them: α_t = 1 − β_t, the cumulative products ᾱ_t, the posterior
variances β̃_t = (1 − ᾱ_{t−1})/(1 − ᾱ_t)·β_t, and the sampling variances
σ_t² actually used (posterior mode, or ε-scaled Euler–Maruyama mode).  It is
the single source of truth for σ_t² across drafting, verification and
sampling; every table is immutable after construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .coupling import GaussianKernel

# Relative floor applied to sigma2[1] in posterior mode: the exact posterior
# variance at t=1 is 0, which would make verification ratios degenerate.
SIGMA2_FLOOR_SCALE = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable β/α/ᾱ/variance tables; index t runs 1..T (arrays t−1)."""

    T: int
    beta: np.ndarray           # β_t, shape [T]
    alpha: np.ndarray          # α_t = 1 − β_t
    alpha_bar: np.ndarray      # ᾱ_t, shape [T+1], ᾱ_0 = 1
    posterior_var: np.ndarray  # β̃_t, pre-floor, shape [T]
    sigma2: np.ndarray         # sampling variance per step, floored, shape [T]
    variance_mode: str         # "posterior" or "em"
    floor: float               # relative floor scale applied to sigma2[1]
    epsilon: float | None = None  # stochasticity scalar, em mode only


@dataclass(frozen=True)
class SdeCoefficients:
    """Variance-preserving SDE discretisation: drift f, diffusion g², step γ.

    The reverse-time family is parameterised by the stochasticity scalar
    ε ≥ 0; ε = 1 matches the posterior-mode DDPM update to first order in β.
    """

    f: np.ndarray       # drift coefficient per unit time, shape [T]
    g2: np.ndarray      # squared diffusion coefficient, shape [T]
    gamma: float        # step size (time units)
    epsilon: float

    @classmethod
    def from_schedule(cls, sched: NoiseSchedule, epsilon: float) -> "SdeCoefficients":
        if not (epsilon >= 0.0 and math.isfinite(epsilon)):
            raise ValueError("epsilon must be finite and non-negative")
        gamma = 1.0 / sched.T
        f = -0.5 * sched.beta / gamma
        g2 = sched.beta / gamma
        f.setflags(write=False)
        g2.setflags(write=False)
        return cls(f=f, g2=g2, gamma=gamma, epsilon=float(epsilon))


def _derived_tables(beta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    posterior_var = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta
    return alpha, alpha_bar, posterior_var


def _freeze(*arrays: np.ndarray) -> None:
    for arr in arrays:
        arr.setflags(write=False)


def _validate_bounds(T: int, beta_min: float, beta_max: float) -> None:
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError("T must be an integer >= 2")
    for b in (beta_min, beta_max):
        if not (isinstance(b, (int, float, np.floating)) and math.isfinite(b)):
            raise ValueError("beta bounds must be finite numbers")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")


def build_linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear β schedule with posterior-mode sampling variances.

    Defaults are the standard convention (T=1000, 1e-4 → 0.02); desk-scale
    experiments pass T=100.  sigma2[1] is floored at
    SIGMA2_FLOOR_SCALE·β_1 because β̃_1 = 0 exactly.
    """
    _validate_bounds(T, beta_min, beta_max)
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha, alpha_bar, posterior_var = _derived_tables(beta)
    sigma2 = posterior_var.copy()
    sigma2[0] = max(posterior_var[0], SIGMA2_FLOOR_SCALE * beta[0])
    _freeze(beta, alpha, alpha_bar, posterior_var, sigma2)
    return NoiseSchedule(
        T=int(T),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        sigma2=sigma2,
        variance_mode="posterior",
        floor=SIGMA2_FLOOR_SCALE,
    )


def em_schedule(
    T: int = 100,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    epsilon: float = 1.0,
) -> tuple[NoiseSchedule, SdeCoefficients]:
    """Schedule whose sampling variances are the ε-family's ε²·γ·g² = ε²·β_t.

    Returns the schedule together with the matching SdeCoefficients; the pair
    keeps the serialized schedule authoritative for σ² while the engine uses
    the coefficients for the drift.
    """
    _validate_bounds(T, beta_min, beta_max)
    if not (epsilon > 0.0 and math.isfinite(epsilon)):
        raise ValueError("epsilon must be positive for a sampling schedule")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha, alpha_bar, posterior_var = _derived_tables(beta)
    sigma2 = (epsilon**2) * beta
    _freeze(beta, alpha, alpha_bar, posterior_var, sigma2)
    sched = NoiseSchedule(
        T=int(T),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        sigma2=sigma2,
        variance_mode="em",
        floor=0.0,
        epsilon=float(epsilon),
    )
    return sched, SdeCoefficients.from_schedule(sched, epsilon)


def _check_step(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside 1..{sched.T}")


def reverse_mean(x: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Posterior-mode reverse-kernel mean.

    (1/√α_t)·(x − ((1−α_t)/√(1−ᾱ_t))·eps); affine in both x and eps.
    """
    _check_step(t, sched)
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError("state and noise prediction differ in shape")
    coef = (1.0 - sched.alpha[t - 1]) / math.sqrt(1.0 - sched.alpha_bar[t])
    return (x - coef * eps) / math.sqrt(sched.alpha[t - 1])


def reverse_mean_batch(x: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """reverse_mean over rows; t is a scalar or per-row integer vector."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    tv = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    if np.any(tv < 1) or np.any(tv > sched.T):
        raise ValueError("step outside 1..T")
    coef = (1.0 - sched.alpha[tv - 1]) / np.sqrt(1.0 - sched.alpha_bar[tv])
    return (x - coef[:, None] * eps) / np.sqrt(sched.alpha[tv - 1])[:, None]


def em_kernel(x: np.ndarray, score: np.ndarray, t: int, sde: SdeCoefficients) -> GaussianKernel:
    """One ε-family reverse step as a Gaussian kernel.

    mean = x + γ·(−f_t·x + ((1+ε²)/2)·g²_t·score), var = ε²·γ·g²_t.  The
    score coefficient grows as (1+ε²)/2, trading drift for injected noise
    while preserving the reverse-time marginals.  ε = 0 collapses the kernel
    to a point mass and is rejected (no density ratio to verify against).
    """
    if sde.epsilon == 0.0:
        raise ValueError("epsilon = 0 yields a degenerate kernel")
    x = np.asarray(x, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    if x.shape != score.shape:
        raise ValueError("state and score differ in shape")
    if not 1 <= t <= sde.f.shape[0]:
        raise ValueError(f"step {t} outside 1..{sde.f.shape[0]}")
    eps2 = sde.epsilon**2
    drift = -sde.f[t - 1] * x + 0.5 * (1.0 + eps2) * sde.g2[t - 1] * score
    mean = x + sde.gamma * drift
    var = eps2 * sde.gamma * sde.g2[t - 1]
    return GaussianKernel(mean=mean, var=float(var))


def schedule_to_json(sched: NoiseSchedule) -> str:
    """Serialize the schedule so a run is reproducible byte-for-byte."""
    doc = {
        "T": sched.T,
        "beta": sched.beta.tolist(),
        "variance_mode": sched.variance_mode,
        "floor": sched.floor,
    }
    if sched.variance_mode == "em":
        doc["epsilon"] = sched.epsilon
    return json.dumps(doc)


def schedule_from_json(text: str) -> NoiseSchedule:
    doc = json.loads(text)
    beta = np.asarray(doc["beta"], dtype=np.float64)
    if beta.shape[0] != doc["T"]:
        raise ValueError("beta length disagrees with T")
    alpha, alpha_bar, posterior_var = _derived_tables(beta)
    mode = doc["variance_mode"]
    if mode == "posterior":
        sigma2 = posterior_var.copy()
        sigma2[0] = max(posterior_var[0], doc["floor"] * beta[0])
        epsilon = None
    elif mode == "em":
        epsilon = float(doc["epsilon"])
        sigma2 = (epsilon**2) * beta
    else:
        raise ValueError(f"unknown variance mode {mode!r}")
    _freeze(beta, alpha, alpha_bar, posterior_var, sigma2)
    return NoiseSchedule(
        T=int(doc["T"]),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        sigma2=sigma2,
        variance_mode=mode,
        floor=float(doc["floor"]),
        epsilon=epsilon,
    )
