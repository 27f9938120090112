"""Inter-trip time distributions: asymmetric log-Laplace mixture and log-normal mixture.

Densities are evaluated in ``y = log(tau)`` space.  With ``beta_hat = log beta``,
``lambda_hat = sqrt(lambda * gamma)`` and ``gamma_hat = sqrt(lambda / gamma)``
each component is an asymmetric Laplace density

    f(y) = C exp( lambda_hat * gamma_hat * (y - beta_hat))   for y <  beta_hat
    f(y) = C exp(-lambda_hat / gamma_hat * (y - beta_hat))   for y >= beta_hat

with ``C = lambda_hat / (gamma_hat + 1 / gamma_hat)``, and the density of tau
is ``f(log tau) / tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from . import autodiff as ad
from .autodiff import DomainError, Tensor

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# differentiable pieces
# ---------------------------------------------------------------------------

def al_log_density(y, beta_hat, lambda_hat, gamma_hat) -> Tensor:
    """Log density of one asymmetric Laplace component at ``y`` (broadcasting)."""
    y, beta_hat = ad.as_tensor(y), ad.as_tensor(beta_hat)
    lambda_hat, gamma_hat = ad.as_tensor(lambda_hat), ad.as_tensor(gamma_hat)
    if np.any(~(lambda_hat.data > 0)) or np.any(~(gamma_hat.data > 0)):
        raise DomainError("al_log_density: lambda_hat and gamma_hat must be positive")
    log_c = ad.log(lambda_hat) - ad.log(gamma_hat + 1.0 / gamma_hat)
    diff = y - beta_hat
    left = lambda_hat * gamma_hat * diff
    right = -(lambda_hat / gamma_hat) * diff
    return log_c + ad.where(y.data < beta_hat.data, left, right)


def al_mixture_log_density(y, log_w, beta_hat, lambda_hat, gamma_hat) -> Tensor:
    """Log density in y-space of the mixture; component axis is the last axis of the params."""
    y = ad.as_tensor(y)
    comp = al_log_density(ad.reshape(y, y.shape + (1,)), beta_hat, lambda_hat, gamma_hat)
    return ad.logsumexp(ad.as_tensor(log_w) + comp, axis=-1)


def tau_log_likelihood(tau, log_w, beta_hat, lambda_hat, gamma_hat) -> Tensor:
    """``log p(tau) = log p_Y(log tau) - log tau`` for the ALL mixture."""
    tau = ad.as_tensor(tau)
    if np.any(~(tau.data > 0)):
        raise DomainError("tau_log_likelihood: tau must be positive")
    y = ad.log(tau)
    return al_mixture_log_density(y, log_w, beta_hat, lambda_hat, gamma_hat) - y


def normal_mixture_log_density(y, log_w, mu, sigma) -> Tensor:
    """Log density in y-space of a Gaussian mixture (component axis last)."""
    y = ad.as_tensor(y)
    sigma = ad.as_tensor(sigma)
    if np.any(~(sigma.data > 0)):
        raise DomainError("normal_mixture_log_density: sigma must be positive")
    z = (ad.reshape(y, y.shape + (1,)) - mu) / sigma
    comp = -0.5 * z * z - ad.log(sigma) - LOG_SQRT_2PI
    return ad.logsumexp(ad.as_tensor(log_w) + comp, axis=-1)


def lognormal_mixture_log_likelihood(tau, log_w, mu, sigma) -> Tensor:
    """``log p(tau)`` of a log-normal mixture (component axis last)."""
    tau = ad.as_tensor(tau)
    if np.any(~(tau.data > 0)):
        raise DomainError("lognormal_mixture_log_likelihood: tau must be positive")
    y = ad.log(tau)
    return normal_mixture_log_density(y, log_w, mu, sigma) - y


# ---------------------------------------------------------------------------
# MDN heads
# ---------------------------------------------------------------------------

@dataclass
class MixtureOutputs:
    """Differentiable per-step mixture parameters (component axis last).

    For the ALL head the three shape parameters are ``beta_hat``,
    ``lambda_hat`` and ``gamma_hat``.  For the log-normal head they are
    ``mu`` and ``sigma`` and ``third`` is None.
    """

    kind: str
    log_w: Tensor
    w: Tensor
    first: Tensor
    second: Tensor
    third: Tensor | None

    def context_parts(self) -> list[Tensor]:
        parts = [self.w, self.first, self.second]
        if self.third is not None:
            parts.append(self.third)
        return parts

    def log_likelihood(self, tau) -> Tensor:
        if self.kind == "all":
            return tau_log_likelihood(tau, self.log_w, self.first, self.second, self.third)
        return lognormal_mixture_log_likelihood(tau, self.log_w, self.first, self.second)

    def scaled_peak(self, factor: float) -> MixtureOutputs:
        """Copy with the location parameter (beta_hat or mu) multiplied by ``factor``."""
        return MixtureOutputs(self.kind, self.log_w, self.w, self.first * factor,
                              self.second, self.third)

    def at(self, *index):
        """Numpy mixture for one step, e.g. ``out.at(b, t)``."""
        w = self.w.data[index]
        if self.kind == "all":
            return ALLMixtureParams(w, self.first.data[index], self.second.data[index],
                                    self.third.data[index])
        return LogNormalMixtureParams(w, self.first.data[index], self.second.data[index])


def _affine(h: Tensor, params: dict, name: str) -> Tensor:
    return h @ params[f"phi_{name}"] + params[f"b_{name}"]


def mdn_params(h: Tensor, params: dict, beta_unconstrained: bool = False) -> MixtureOutputs:
    """ALL mixture parameters from hidden states ``h`` (..., c_model).

    Weights use a softmax; ``beta_hat``, ``lambda_hat`` and ``gamma_hat`` use
    an exponential (``beta_hat`` stays affine when ``beta_unconstrained``).
    """
    logits = _affine(h, params, "w")
    log_w = ad.log_softmax(logits)
    w = ad.softmax(logits)
    beta_pre = _affine(h, params, "beta")
    beta = beta_pre if beta_unconstrained else ad.exp(beta_pre)
    lam = ad.exp(_affine(h, params, "lambda"))
    gam = ad.exp(_affine(h, params, "gamma"))
    return MixtureOutputs("all", log_w, w, beta, lam, gam)


def lognormal_mdn_params(h: Tensor, params: dict) -> MixtureOutputs:
    logits = _affine(h, params, "w")
    return MixtureOutputs("lognormal", ad.log_softmax(logits), ad.softmax(logits),
                          _affine(h, params, "mu"), ad.exp(_affine(h, params, "sigma")), None)


# ---------------------------------------------------------------------------
# numpy mixtures for evaluation, quantiles and sampling
# ---------------------------------------------------------------------------

class _Mixture:
    w: np.ndarray

    def log_prob(self, tau) -> np.ndarray:
        raise NotImplementedError

    def component_cdf_y(self, y) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(~(tau > 0)):
            raise DomainError("cdf: tau must be positive")
        y = np.log(tau)[..., None]
        return (self.w * self.component_cdf_y(y)).sum(axis=-1)

    def pdf(self, tau) -> np.ndarray:
        return np.exp(self.log_prob(tau))

    def quantile(self, q: float) -> float:
        """Inverse CDF by root finding in y space."""
        if not 0.0 < q < 1.0:
            raise ValueError("quantile level must lie in (0, 1)")
        lo, hi = -1.0, 1.0
        while self.cdf(np.exp(lo)) > q:
            lo *= 2.0
        while self.cdf(np.exp(hi)) < q:
            hi *= 2.0
        y = optimize.brentq(lambda v: float(self.cdf(np.exp(v))) - q, lo, hi, xtol=1e-12)
        return float(np.exp(y))


@dataclass
class ALLMixtureParams(_Mixture):
    w: np.ndarray
    beta_hat: np.ndarray
    lambda_hat: np.ndarray
    gamma_hat: np.ndarray

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=np.float64))
        self.beta_hat = np.atleast_1d(np.asarray(self.beta_hat, dtype=np.float64))
        self.lambda_hat = np.atleast_1d(np.asarray(self.lambda_hat, dtype=np.float64))
        self.gamma_hat = np.atleast_1d(np.asarray(self.gamma_hat, dtype=np.float64))
        if abs(self.w.sum() - 1.0) > 1e-9 or np.any(self.w < 0):
            raise ValueError("mixture weights must be a probability vector")
        if np.any(self.lambda_hat <= 0) or np.any(self.gamma_hat <= 0):
            raise DomainError("lambda_hat and gamma_hat must be positive")

    @classmethod
    def from_natural(cls, w, beta, lam, gam) -> ALLMixtureParams:
        """Build from the (beta, lambda, gamma) of the ALL distribution over tau."""
        lam, gam = np.asarray(lam, float), np.asarray(gam, float)
        return cls(w, np.log(beta), np.sqrt(lam * gam), np.sqrt(lam / gam))

    @property
    def K(self) -> int:
        return self.w.size

    @property
    def left_mass(self) -> np.ndarray:
        return 1.0 / (1.0 + self.gamma_hat ** 2)

    def log_density_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return al_mixture_log_density(y, np.log(self.w), self.beta_hat, self.lambda_hat,
                                      self.gamma_hat).data

    def log_prob(self, tau) -> np.ndarray:
        return tau_log_likelihood(np.asarray(tau, dtype=np.float64), np.log(self.w), self.beta_hat,
                                  self.lambda_hat, self.gamma_hat).data

    def component_cdf_y(self, y) -> np.ndarray:
        p = self.left_mass
        d = y - self.beta_hat
        left = p * np.exp(np.minimum(self.lambda_hat * self.gamma_hat * d, 0.0))
        right = 1.0 - (1.0 - p) * np.exp(-np.maximum(self.lambda_hat / self.gamma_hat * d, 0.0))
        return np.where(d < 0, left, right)

    def component_inverse(self, k, u) -> np.ndarray:
        """y-space inverse CDF of component(s) ``k`` at uniform draws ``u``."""
        b, lam, gam = self.beta_hat[k], self.lambda_hat[k], self.gamma_hat[k]
        p = 1.0 / (1.0 + gam ** 2)
        with np.errstate(divide="ignore"):
            left = b + np.log(u / p) / (lam * gam)
            right = b - (gam / lam) * np.log((1.0 - u) / (1.0 - p))
        return np.where(u < p, left, right)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        k = rng.choice(self.K, size=size, p=self.w)
        u = rng.uniform(size=size)
        return np.exp(self.component_inverse(k, u))

    def as_dict(self) -> dict:
        return {"w": self.w.tolist(), "beta_hat": self.beta_hat.tolist(),
                "lambda_hat": self.lambda_hat.tolist(), "gamma_hat": self.gamma_hat.tolist()}


@dataclass
class LogNormalMixtureParams(_Mixture):
    w: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=np.float64))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if abs(self.w.sum() - 1.0) > 1e-9 or np.any(self.w < 0):
            raise ValueError("mixture weights must be a probability vector")
        if np.any(self.sigma <= 0):
            raise DomainError("sigma must be positive")

    @property
    def K(self) -> int:
        return self.w.size

    def log_density_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return normal_mixture_log_density(y, np.log(self.w), self.mu, self.sigma).data

    def log_prob(self, tau) -> np.ndarray:
        return lognormal_mixture_log_likelihood(np.asarray(tau, dtype=np.float64), np.log(self.w),
                                                self.mu, self.sigma).data

    def component_cdf_y(self, y) -> np.ndarray:
        return special.ndtr((y - self.mu) / self.sigma)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        k = rng.choice(self.K, size=size, p=self.w)
        return np.exp(self.mu[k] + self.sigma[k] * rng.standard_normal(size))

    def as_dict(self) -> dict:
        return {"w": self.w.tolist(), "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


def tau_cdf(tau, params: _Mixture) -> np.ndarray:
    """Mixture CDF of the gap ``tau`` (hours)."""
    return params.cdf(tau)


def sample_tau(params: _Mixture, rng: np.random.Generator, size=None) -> np.ndarray:
    """Inverse-CDF draws of the gap ``tau``."""
    return params.sample(rng, size)
