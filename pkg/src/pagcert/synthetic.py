"""A two-class linear classifier over a 2-D Gaussian mixture.

Margins m = w.x + b are a 1-D Gaussian mixture, so robustness
rho = |m| / ||w||_1 and confidence sigmoid(2|m|) have closed-form laws and
every counterexample range probability is an exact difference of normal
CDFs. This is the desk-scale world used to test the statistical laws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .model import MlpModel, linear_binary_model
from .oracles import OracleResult, analytic_linear_oracle
from .quality import CounterexampleRange


@dataclass(frozen=True)
class SyntheticLinearWorld:
    w: tuple = (1.5, 1.0)
    b: float = 0.1
    means: tuple = ((-0.6, -0.4), (0.5, 0.7))
    weights: tuple = (0.5, 0.5)
    std: float = 0.5
    box: float = 10.0

    @property
    def w_vec(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)

    @property
    def l1(self) -> float:
        return float(np.abs(self.w_vec).sum())

    @property
    def margin_means(self) -> np.ndarray:
        return np.asarray(self.means) @ self.w_vec + self.b

    @property
    def margin_std(self) -> float:
        return self.std * float(np.linalg.norm(self.w_vec))

    def model(self) -> MlpModel:
        box = np.tile([-self.box, self.box], (len(self.w), 1))
        return linear_binary_model(self.w_vec, self.b, box)

    def analytic_oracle(self, x) -> OracleResult:
        # logit_1 - logit_0 = -2 (w.x + b)
        return analytic_linear_oracle(-2 * self.w_vec, -2 * self.b, x)

    def sample_inputs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.normal(0.0, self.std, size=(n, len(self.w)))
        return np.asarray(self.means)[comp] + noise

    def labels(self, X) -> np.ndarray:
        # class 0 when w.x + b >= 0 (ties go to the lower index)
        return (np.asarray(X) @ self.w_vec + self.b < 0).astype(np.int64)

    def quality(self, X) -> tuple[np.ndarray, np.ndarray]:
        m = np.abs(np.asarray(X) @ self.w_vec + self.b)
        return m / self.l1, 1.0 / (1.0 + np.exp(-2.0 * m))

    def sample_quality(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return self.quality(self.sample_inputs(n, rng))

    # exact law of the quality map

    def rho_cdf(self, r) -> np.ndarray:
        """Pr(rho <= r)."""
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        t = np.maximum(r, 0.0)[:, None] * self.l1
        mu, sd = self.margin_means[None, :], self.margin_std
        per = norm.cdf((t - mu) / sd) - norm.cdf((-t - mu) / sd)
        return per @ np.asarray(self.weights)

    def rho_quantile(self, u: float) -> float:
        if u <= 0:
            return 0.0
        hi = 1.0
        while self.rho_cdf(hi)[0] < u:
            hi *= 2
        return brentq(lambda r: self.rho_cdf(r)[0] - u, 0.0, hi, xtol=1e-14, rtol=1e-14)

    def kappa_to_rho(self, kappa: float) -> float:
        """Smallest rho whose confidence is at least ``kappa``."""
        if kappa <= 0.5:
            return 0.0
        if kappa >= 1.0:
            return math.inf
        return math.log(kappa / (1.0 - kappa)) / (2.0 * self.l1)

    def rho_to_kappa(self, rho: float) -> float:
        return 1.0 / (1.0 + math.exp(-2.0 * self.l1 * rho))

    def range_probability(self, rho: float, kappa: float) -> float:
        lo = self.kappa_to_rho(kappa)
        if rho <= lo:
            return 0.0
        return float(self.rho_cdf(rho)[0] - self.rho_cdf(lo)[0])

    def witness_ranges(self, epsilon: float, count: int = 64) -> list:
        """``count`` ranges of probability mass just above ``epsilon``,
        sliding along the quality curve."""
        out = []
        for u in np.linspace(0.0, 1.0 - 1.001 * epsilon, count):
            lo = self.rho_quantile(u)
            hi = self.rho_quantile(min(1.0 - 1e-12, u + 1.0005 * epsilon))
            kappa = self.rho_to_kappa(lo)
            out.append(CounterexampleRange(hi, kappa))
        return out


@dataclass(frozen=True)
class SyntheticSetup:
    X: np.ndarray
    labels: np.ndarray
    model: MlpModel
    world: SyntheticLinearWorld


def synthetic_linear_world(seed: int, n: int = 2000) -> SyntheticSetup:
    """Dataset of ``n`` mixture draws plus the world's model and exact law."""
    world = SyntheticLinearWorld()
    X = world.sample_inputs(n, np.random.default_rng(seed))
    return SyntheticSetup(X, world.labels(X), world.model(), world)
