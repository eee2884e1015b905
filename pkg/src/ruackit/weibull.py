"""Weibull posterior mathematics: reparameterized sampling, moments, KL to a Gamma prior.

Every function accepts scalars or arrays (broadcast element-wise).  The
``*_var`` variants build the same expressions on a :class:`~ruackit.autodiff.Tape`
so the posterior parameters receive gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import lgamma

KAPPA_MIN = 0.5
KAPPA_MAX = 10.0
EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class WeibullParams:
    lam: float | np.ndarray
    kappa: float | np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lam) <= 0):
            raise ValueError("Weibull scale must be positive")
        if np.any(np.asarray(self.kappa) <= 0):
            raise ValueError("Weibull shape must be positive")

    def clamped(self) -> "WeibullParams":
        return WeibullParams(self.lam, np.clip(self.kappa, KAPPA_MIN, KAPPA_MAX))


@dataclass(frozen=True)
class GammaPrior:
    alpha: float = 1.0
    beta: float = 3.0  # rate

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Gamma prior needs alpha > 0 and beta > 0")


def weibull_sample(p: WeibullParams, u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("u must lie in the open interval (0, 1)")
    return p.lam * np.power(-np.log1p(-u), 1.0 / np.asarray(p.kappa, dtype=np.float64))


def weibull_mean(p: WeibullParams):
    return p.lam * np.exp(lgamma(1.0 + 1.0 / np.asarray(p.kappa, dtype=np.float64)))


def weibull_variance(p: WeibullParams):
    k = np.asarray(p.kappa, dtype=np.float64)
    g1 = np.exp(lgamma(1.0 + 1.0 / k))
    g2 = np.exp(lgamma(1.0 + 2.0 / k))
    return np.square(p.lam) * (g2 - g1 * g1)


def kl_weibull_gamma(p: WeibullParams, prior: GammaPrior = GammaPrior()):
    """Closed-form KL(Weibull(λ, κ) ‖ Gamma(α, β)), β a rate."""
    lam = np.asarray(p.lam, dtype=np.float64)
    k = np.asarray(p.kappa, dtype=np.float64)
    a, b = prior.alpha, prior.beta
    return (EULER_GAMMA * a / k - a * np.log(lam) + np.log(k)
            + b * lam * np.exp(lgamma(1.0 + 1.0 / k))
            - a * np.log(b) + float(lgamma(a)) - EULER_GAMMA - 1.0)


def kl_monte_carlo(p: WeibullParams, prior: GammaPrior = GammaPrior(),
                   n: int = 1_000_000, seed: int = 0) -> float:
    """Sample estimate of E_q[ln q(w) − ln p(w)] using scipy's densities."""
    from scipy import stats

    rng = np.random.default_rng(seed)
    w = weibull_sample(p, rng.uniform(np.finfo(float).tiny, 1.0, size=n))
    log_q = stats.weibull_min.logpdf(w, c=p.kappa, scale=p.lam)
    log_p = stats.gamma.logpdf(w, a=prior.alpha, scale=1.0 / prior.beta)
    return float(np.mean(log_q - log_p))


# --------------------------------------------------------------------------
# tape variants


def moments_var(tape, lam, kap):
    """(E[w], Var[w]) for tape variables ``lam`` and ``kap``."""
    lg1 = tape.lgamma(1.0 + 1.0 / kap)
    lg2 = tape.lgamma(1.0 + 2.0 / kap)
    g1 = tape.exp(lg1)
    mean = lam * g1
    var = (lam * lam) * (tape.exp(lg2) - tape.exp(lg1 * 2.0))
    return mean, var


def kl_var(tape, lam, kap, prior: GammaPrior = GammaPrior()):
    """Element-wise KL(Weibull ‖ Gamma) on the tape."""
    a, b = prior.alpha, prior.beta
    const = -a * np.log(b) + float(lgamma(a)) - EULER_GAMMA - 1.0
    g1 = tape.exp(tape.lgamma(1.0 + 1.0 / kap))
    return ((EULER_GAMMA * a) / kap - a * tape.log(lam) + tape.log(kap)
            + b * lam * g1 + const)
