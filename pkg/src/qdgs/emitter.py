"""Gradient-arborescence emitter.

Branches candidate solutions from the current search point using a random
non-negative multiple of the objective gradient plus signed multiples of the
measure gradients, with the coefficient vector drawn from an adaptive
Gaussian. Ranked improvement values drive both the gradient-ascent step on
the search point and the covariance-matrix adaptation of the coefficient
distribution; stagnation triggers a restart from a random archive elite.

The adaptation step follows canonical covariance matrix adaptation
(rank-mu update plus cumulative step-size adaptation) on the coefficient
space, with non-negative log-rank weights truncated to the better half.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .archive import Archive
from .errors import ConfigurationError, CovarianceError
from .validation import as_float_vector


def truncation_weights(lam: int) -> np.ndarray:
    """Normalized log-rank weights w_i ~ ln(lam/2 + 1/2) - ln(i), zero past the better half."""
    if lam < 2:
        raise ConfigurationError("branch population must be >= 2")
    raw = np.log(lam / 2.0 + 0.5) - np.log(np.arange(1, lam + 1))
    raw = np.maximum(raw, 0.0)
    return raw / raw.sum()


def rank_by_delta(deltas: np.ndarray) -> np.ndarray:
    """Indices ordered by improvement descending; ties keep lower index first."""
    deltas = np.asarray(deltas, dtype=float)
    return np.argsort(-deltas, kind="stable")


def branch(theta, grad_f, grad_m, coeff) -> np.ndarray:
    """One branched solution: theta + |c0| grad_f + sum_j c_j grad_m[j-1]."""
    theta = as_float_vector(theta, "theta")
    grad_f = as_float_vector(grad_f, "grad_f")
    coeff = as_float_vector(coeff, "coeff")
    if len(coeff) != len(grad_m) + 1:
        raise ConfigurationError(
            f"coefficient length {len(coeff)} != 1 + {len(grad_m)} measure gradients")
    if grad_f.shape != theta.shape:
        raise ConfigurationError("grad_f dimension does not match theta")
    out = theta + abs(coeff[0]) * grad_f
    for c_j, g_j in zip(coeff[1:], grad_m):
        g_j = as_float_vector(g_j, "grad_m")
        if g_j.shape != theta.shape:
            raise ConfigurationError("measure gradient dimension does not match theta")
        out = out + c_j * g_j
    return out


@dataclass
class CmaParams:
    """Static strategy constants for a given coefficient dimension and population."""

    dim: int
    lam: int
    weights: np.ndarray = field(init=False)
    mueff: float = field(init=False)
    cc: float = field(init=False)
    cs: float = field(init=False)
    c1: float = field(init=False)
    cmu: float = field(init=False)
    damps: float = field(init=False)
    chi_n: float = field(init=False)

    def __post_init__(self):
        n = self.dim
        self.weights = truncation_weights(self.lam)
        self.mueff = 1.0 / float(np.sum(self.weights ** 2))
        self.cc = (4.0 + self.mueff / n) / (n + 4.0 + 2.0 * self.mueff / n)
        self.cs = (self.mueff + 2.0) / (n + self.mueff + 5.0)
        self.c1 = 2.0 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1.0 - self.c1,
                       2.0 * (self.mueff - 2.0 + 1.0 / self.mueff)
                       / ((n + 2.0) ** 2 + self.mueff))
        self.damps = 1.0 + 2.0 * max(0.0, math.sqrt((self.mueff - 1.0) / (n + 1.0)) - 1.0) + self.cs
        self.chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))


class CoeffDistribution:
    """Gaussian N(mu, sigma^2 C) over branching coefficients, with adaptation paths."""

    def __init__(self, dim: int, sigma0: float):
        self.dim = dim
        self.sigma0 = float(sigma0)
        self.reset()

    def reset(self):
        self.mu = np.zeros(self.dim)
        self.sigma = self.sigma0
        self.C = np.eye(self.dim)
        self.p_sigma = np.zeros(self.dim)
        self.p_c = np.zeros(self.dim)
        self.count = 0

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.C)
        except np.linalg.LinAlgError as exc:
            raise CovarianceError("coefficient covariance is not positive definite") from exc

    def sample(self, lam: int, rng: np.random.Generator) -> np.ndarray:
        L = self.cholesky()
        z = rng.standard_normal((lam, self.dim))
        return self.mu + self.sigma * (z @ L.T)

    def is_healthy(self) -> bool:
        if not np.isfinite(self.sigma) or self.sigma > 1e6 or self.sigma < 0:
            return False
        if not np.all(np.isfinite(self.C)) or not np.all(np.isfinite(self.mu)):
            return False
        try:
            np.linalg.cholesky(self.C)
        except np.linalg.LinAlgError:
            return False
        return True

    def as_dict(self) -> dict:
        return {
            "dim": self.dim,
            "sigma0": self.sigma0,
            "mu": self.mu.tolist(),
            "sigma": self.sigma,
            "C": self.C.ravel().tolist(),
            "p_sigma": self.p_sigma.tolist(),
            "p_c": self.p_c.tolist(),
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CoeffDistribution":
        dist = cls(int(data["dim"]), float(data["sigma0"]))
        dist.mu = np.asarray(data["mu"], dtype=float)
        dist.sigma = float(data["sigma"])
        dist.C = np.asarray(data["C"], dtype=float).reshape(dist.dim, dist.dim)
        dist.p_sigma = np.asarray(data["p_sigma"], dtype=float)
        dist.p_c = np.asarray(data["p_c"], dtype=float)
        dist.count = int(data["count"])
        return dist


class GradientEmitter:
    """Search point plus coefficient distribution, stepped once per iteration."""

    def __init__(self, theta0, k: int, eta: float = 0.5, lam: int = 32,
                 sigma_g: float = 0.5):
        if eta <= 0:
            raise ConfigurationError("learning rate eta must be positive")
        if lam < 2:
            raise ConfigurationError("branch population lambda must be >= 2")
        self.theta0 = as_float_vector(theta0, "theta0").copy()
        self.theta = self.theta0.copy()
        self.k = int(k)
        self.eta = float(eta)
        self.lam = int(lam)
        self.sigma_g = float(sigma_g)
        self.params = CmaParams(dim=self.k + 1, lam=self.lam)
        self.dist = CoeffDistribution(dim=self.k + 1, sigma0=self.sigma_g)
        self.restarts = 0

    def sample_coeffs(self, rng: np.random.Generator) -> np.ndarray:
        """Draw lam coefficient vectors; deterministic for a given rng state."""
        return self.dist.sample(self.lam, rng)

    def ranked_ascent(self, branches, deltas) -> np.ndarray:
        """Move theta along the improvement-rank weighted branch displacements."""
        branches = [as_float_vector(b, "branch") for b in branches]
        deltas = np.asarray(deltas, dtype=float)
        if len(branches) == 0:
            raise ConfigurationError("ranked_ascent requires at least one branch")
        if len(branches) != len(deltas):
            raise ConfigurationError("branches and deltas must align")
        order = rank_by_delta(deltas)
        weights = truncation_weights(len(branches))
        step = np.zeros_like(self.theta)
        for rank, idx in enumerate(order):
            if weights[rank] == 0.0:
                break
            step += weights[rank] * (branches[idx] - self.theta)
        self.theta = self.theta + self.eta * step
        return self.theta

    def adapt(self, coeffs, deltas) -> bool:
        """Covariance matrix adaptation on the Delta-ranked coefficient sample.

        Returns False when the update blew up numerically (caller should
        treat the iteration as stagnated and restart).
        """
        coeffs = np.asarray(coeffs, dtype=float)
        deltas = np.asarray(deltas, dtype=float)
        if coeffs.shape != (self.lam, self.k + 1):
            raise ConfigurationError(
                f"expected coefficients of shape {(self.lam, self.k + 1)}, got {coeffs.shape}")
        par = self.params
        dist = self.dist
        n = dist.dim
        order = rank_by_delta(deltas)
        ranked = coeffs[order]

        mu_old = dist.mu
        sigma = dist.sigma
        mu_new = par.weights @ ranked
        y_w = (mu_new - mu_old) / max(sigma, 1e-300)

        # cumulative step-size adaptation needs C^(-1/2) y_w
        try:
            eigvals, eigvecs = np.linalg.eigh(dist.C)
        except np.linalg.LinAlgError:
            return False
        if np.any(eigvals <= 0) or not np.all(np.isfinite(eigvals)):
            return False
        inv_sqrt = eigvecs @ np.diag(eigvals ** -0.5) @ eigvecs.T

        dist.count += 1
        cs_norm = math.sqrt(par.cs * (2.0 - par.cs) * par.mueff)
        dist.p_sigma = (1.0 - par.cs) * dist.p_sigma + cs_norm * (inv_sqrt @ y_w)
        ps_norm2 = float(dist.p_sigma @ dist.p_sigma)
        hsig = (ps_norm2 / n
                / (1.0 - (1.0 - par.cs) ** (2.0 * dist.count))) < 2.0 + 4.0 / (n + 1.0)
        cc_norm = math.sqrt(par.cc * (2.0 - par.cc) * par.mueff)
        dist.p_c = (1.0 - par.cc) * dist.p_c + (cc_norm * y_w if hsig else 0.0)

        c1a = par.c1 * (1.0 - (0.0 if hsig else 1.0) * par.cc * (2.0 - par.cc))
        C = (1.0 - c1a - par.cmu) * dist.C + par.c1 * np.outer(dist.p_c, dist.p_c)
        ys = (ranked - mu_old) / max(sigma, 1e-300)
        C = C + par.cmu * (ys.T * par.weights) @ ys
        C = 0.5 * (C + C.T)

        dist.mu = mu_new
        dist.C = C
        dist.sigma = sigma * math.exp(
            (par.cs / par.damps) * (math.sqrt(ps_norm2) / par.chi_n - 1.0))
        return dist.is_healthy()

    def maybe_restart(self, archive_changed: bool, archive: Archive,
                      rng: np.random.Generator) -> bool:
        """Reset the distribution and reseed theta when the archive stagnated."""
        if archive_changed:
            return False
        self.dist.reset()
        if archive.occupied > 0:
            self.theta = archive.sample_elite(rng).theta.copy()
        else:
            self.theta = self.theta0.copy()
        self.restarts += 1
        return True

    def as_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "theta0": self.theta0.tolist(),
            "k": self.k,
            "eta": self.eta,
            "lam": self.lam,
            "sigma_g": self.sigma_g,
            "restarts": self.restarts,
            "dist": self.dist.as_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GradientEmitter":
        emitter = cls(theta0=data["theta0"], k=int(data["k"]), eta=float(data["eta"]),
                      lam=int(data["lam"]), sigma_g=float(data["sigma_g"]))
        emitter.theta = np.asarray(data["theta"], dtype=float)
        emitter.restarts = int(data["restarts"])
        emitter.dist = CoeffDistribution.from_dict(data["dist"])
        return emitter
