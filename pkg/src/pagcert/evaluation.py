"""Test-set estimators for a robustness map and Monte-Carlo checks of the
sampling laws behind the certificate."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import beta

from . import bounds
from .bounds import CertificateParams
from .certifier import RobustnessMap
from .errors import DatasetError, ParameterError
from .quality import QualitySample


@dataclass
class EvalReport:
    kappa: np.ndarray
    p_kappa: np.ndarray
    num: np.ndarray
    den: np.ndarray
    p_hat: float
    n_c: int
    map_size: int
    test_size: int
    bound: float
    n_c_limit: float
    good_run: bool
    zero_denominator: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def per_kappa(self) -> list:
        return [
            (float(k), float(p), int(a), int(b))
            for k, p, a, b in zip(self.kappa, self.p_kappa, self.num, self.den)
        ]

    def to_dict(self) -> dict:
        return {
            "p_hat": self.p_hat,
            "n_c": self.n_c,
            "map_size": self.map_size,
            "test_size": self.test_size,
            "thresholds": {"p_hat_max": self.bound, "n_c_max": self.n_c_limit},
            "good_run": self.good_run,
            "zero_denominator_rows": self.zero_denominator,
            "n_c_per_step": self.n_c / self.map_size if self.map_size else None,
            **self.extra,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kappa", "p_kappa", "num", "den"])
            for k, p, a, b in self.per_kappa:
                w.writerow([repr(k), repr(p), a, b])


def _columns(test) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(test, QualitySample):
        return test.rho, test.kappa
    sample = QualitySample.from_points(test)
    return sample.rho, sample.kappa


def evaluate_on_test(rmap: RobustnessMap, test, params: CertificateParams) -> EvalReport:
    """Empirical conditional violation p_kappa for every kappa <= kappa_max,
    its worst case p_hat, and the count n_c of test points below M.

    p_kappa only changes where the test confidences or the map steps do, so
    evaluating it at those breakpoints gives the exact maximum.
    """
    rho, kap = _columns(test)
    n = len(rho)
    if n == 0:
        raise DatasetError("empty test set")
    km = rmap.kappa_max

    bp = np.unique(np.concatenate([kap[kap <= km], rmap.kappas]))
    m_bp = rmap.lookup_many(bp)
    bp = bp[~np.isnan(m_bp)]

    den = n - np.searchsorted(np.sort(kap), bp, side="left")

    # point p violates at kappa_t iff rho_p < M(kappa_t) and kappa_p >= kappa_t,
    # which holds exactly for kappa_t in (a_p, kappa_p] where a_p is the kappa
    # of the last step whose rho does not exceed rho_p
    j = np.searchsorted(rmap.rhos, rho, side="right")
    usable = j < rmap.size
    a = np.where(j > 0, rmap.kappas[np.maximum(j - 1, 0)], -np.inf)
    usable &= a < kap
    top = np.sort(kap[usable])
    low = np.sort(a[usable])
    num = (len(top) - np.searchsorted(top, bp, side="left")) - (len(low) - np.searchsorted(low, bp, side="left"))

    nonzero = den > 0
    p = np.zeros(len(bp))
    p[nonzero] = num[nonzero] / den[nonzero]
    p_hat = float(p[nonzero].max()) if nonzero.any() else 0.0

    below = kap <= km
    m_pts = rmap.lookup_many(kap[below])
    n_c = int(np.sum(rho[below] < np.where(np.isnan(m_pts), -np.inf, m_pts)))

    bound = bounds.guarantee_bound(params)
    limit = n * rmap.size * params.epsilon
    return EvalReport(
        kappa=bp[nonzero],
        p_kappa=p[nonzero],
        num=num[nonzero],
        den=den[nonzero],
        p_hat=p_hat,
        n_c=n_c,
        map_size=rmap.size,
        test_size=n,
        bound=bound,
        n_c_limit=limit,
        good_run=bool(p_hat <= bound and n_c <= limit),
        zero_denominator=int((~nonzero).sum()),
    )


# -- Monte-Carlo law checks --------------------------------------------------


@dataclass(frozen=True)
class LawCheck:
    failures: int
    trials: int
    sample_size: int

    @property
    def failure_rate(self) -> float:
        return self.failures / self.trials

    @property
    def upper_99(self) -> float:
        """One-sided 99% Clopper-Pearson upper bound on the failure rate."""
        if self.failures >= self.trials:
            return 1.0
        return float(beta.ppf(0.99, self.failures + 1, self.trials - self.failures))

    @property
    def standard_error(self) -> float:
        p = self.failure_rate
        return math.sqrt(p * (1 - p) / self.trials)


def _trial_seeds(seed: int, trials: int):
    return np.random.SeedSequence(seed).spawn(trials)


def _map_trials(fn, args_list, workers):
    if workers <= 1:
        return [fn(*args) for args in args_list]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, *zip(*args_list)))


def _epsnet_trial(dist, s, ranges, seed_seq) -> bool:
    rho, kap = dist.sample_quality(s, np.random.default_rng(seed_seq))
    for r in ranges:
        if not np.any((rho < r.rho) & (kap >= r.kappa)):
            return True
    return False


def monte_carlo_epsnet_check(
    dist,
    params: CertificateParams,
    trials: int,
    seed: int,
    witnesses: Optional[Sequence] = None,
    workers: int = 1,
) -> LawCheck:
    """Fraction of size-s(epsilon, delta, d) samples that miss at least one
    witness range of probability >= epsilon."""
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    s = bounds.solve_sample_size(params.epsilon, params.delta, params.vc_dim)
    if witnesses is None:
        witnesses = dist.witness_ranges(params.epsilon)
    ranges = [r for r in witnesses if dist.range_probability(r.rho, r.kappa) >= params.epsilon]
    if not ranges:
        return LawCheck(0, trials, s)
    seeds = _trial_seeds(seed, trials)
    missed = _map_trials(_epsnet_trial, [(dist, s, ranges, sq) for sq in seeds], workers)
    return LawCheck(int(sum(missed)), trials, s)


@dataclass(frozen=True)
class Uniform01:
    def sample(self, n, rng):
        return rng.random(n)

    def cdf(self, v):
        return np.clip(v, 0.0, 1.0)

    def prob_below(self, v):
        return self.cdf(v)


@dataclass(frozen=True)
class PointMass:
    at: float = 0.5

    def sample(self, n, rng):
        return np.full(n, self.at)

    def cdf(self, v):
        return np.where(np.asarray(v) >= self.at, 1.0, 0.0)

    def prob_below(self, v):
        return np.where(np.asarray(v) > self.at, 1.0, 0.0)


def _quantile_trial(dist, s, i, p, seed_seq) -> bool:
    draws = dist.sample(s, np.random.default_rng(seed_seq))
    order_stat = np.partition(draws, i - 1)[i - 1]
    # Pr(K < N_(i)) is what kappa_max needs; it equals the CDF for continuous laws
    return bool(dist.prob_below(order_stat) > p)


def monte_carlo_quantile_check(dist, s: int, p: float, delta: float, trials: int, seed: int, workers: int = 1) -> LawCheck:
    """Fraction of trials where the i-th smallest of s draws has
    Pr(K < N_(i)) > p, with i = quantile_index(s, p, delta).

    ``dist`` needs ``sample(n, rng)`` and ``prob_below(v)``.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    i = bounds.quantile_index(s, p, delta)
    seeds = _trial_seeds(seed, trials)
    failed = _map_trials(_quantile_trial, [(dist, s, i, p, sq) for sq in seeds], workers)
    return LawCheck(int(sum(failed)), trials, s)
