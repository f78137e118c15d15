"""Sample-size and quantile-index solvers plus the derived guarantee bounds.

All functions here are pure and operate on plain Python numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConvergenceError, NoValidIndexError, ParameterError, ShiftTooLargeError

QUALITY_VC_DIM = 2

_MAX_DOUBLINGS = 80
_MINIMALITY_SCAN = 8


def _check_open_half(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value)):
        raise ParameterError(f"{name} must be a finite number, got {value!r}")
    if not 0.0 < value < 0.5:
        raise ParameterError(f"{name} must lie in (0, 1/2), got {value!r}")


def _check_vc_dim(vc_dim: int) -> None:
    if isinstance(vc_dim, bool) or not isinstance(vc_dim, int) or vc_dim < 1:
        raise ParameterError(f"vc_dim must be a positive integer, got {vc_dim!r}")


@dataclass(frozen=True)
class CertificateParams:
    """Parameters governing the sample size and the strength of a certificate.

    ``epsilon`` is the net resolution, ``delta`` the total failure probability
    of the sampling procedure and ``p_min`` the minimum probability mass of the
    confidence region a guarantee may speak about.
    """

    epsilon: float
    delta: float
    p_min: float
    vc_dim: int = QUALITY_VC_DIM

    def __post_init__(self):
        _check_open_half("epsilon", self.epsilon)
        _check_open_half("delta", self.delta)
        _check_open_half("p_min", self.p_min)
        _check_vc_dim(self.vc_dim)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "p_min": self.p_min,
            "vc_dim": self.vc_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CertificateParams":
        return cls(
            epsilon=float(data["epsilon"]),
            delta=float(data["delta"]),
            p_min=float(data["p_min"]),
            vc_dim=int(data.get("vc_dim", QUALITY_VC_DIM)),
        )


def log1mexp(x: float) -> float:
    """Return ln(1 - exp(-x)) for x > 0 without cancellation."""
    if x <= 0.0:
        raise ParameterError("log1mexp requires x > 0")
    if x < math.log(2.0):
        return math.log(-math.expm1(-x))
    return math.log1p(-math.exp(-x))


def sample_size_rhs(s: int, epsilon: float, delta: float, vc_dim: int) -> float:
    """Right-hand side of the epsilon-net sample-size inequality at ``s``."""
    return (2.0 / (math.log(2.0) * epsilon)) * (
        math.log(1.0 / delta) + vc_dim * math.log(2.0 * s) - log1mexp(s * epsilon / 8.0)
    )


def sample_size_residual(s: int, epsilon: float, delta: float, vc_dim: int) -> float:
    """``s - rhs(s)``; non-negative exactly when ``s`` is a valid sample size."""
    return s - sample_size_rhs(s, epsilon, delta, vc_dim)


def satisfies_sample_size(s: int, epsilon: float, delta: float, vc_dim: int) -> bool:
    if s < 1:
        return False
    return s >= sample_size_rhs(s, epsilon, delta, vc_dim)


def solve_sample_size(epsilon: float, delta: float, vc_dim: int = QUALITY_VC_DIM) -> int:
    """Smallest integer s such that an iid sample of size s is an epsilon-net
    with probability at least 1 - delta for a range space of VC dimension
    ``vc_dim``.

    Brackets the crossing by doubling, bisects on integers, then scans a few
    integers downwards so the result is minimal even if floating-point noise
    makes the predicate ragged near the crossing.
    """
    _check_open_half("epsilon", epsilon)
    _check_open_half("delta", delta)
    _check_vc_dim(vc_dim)

    def ok(s):
        return satisfies_sample_size(s, epsilon, delta, vc_dim)

    lo, hi = 0, 1
    for _ in range(_MAX_DOUBLINGS):
        if ok(hi):
            break
        lo, hi = hi, hi * 2
    else:
        raise ConvergenceError(
            f"could not bracket sample size for epsilon={epsilon}, delta={delta}, d={vc_dim}"
        )

    # invariant: not ok(lo) (or lo == 0), ok(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid

    s = hi
    for _ in range(_MINIMALITY_SCAN):
        if s > 1 and ok(s - 1):
            s -= 1
        else:
            break
    if not ok(s) or ok(s - 1):
        raise ConvergenceError(f"sample-size search ended at non-minimal s={s}")
    return s


def quantile_index_bound(s: int, p: float, delta: float) -> float:
    """The real-valued bound ``s p - sqrt(2 s p ln(1/delta))``."""
    sp = s * p
    return sp - math.sqrt(2.0 * sp * math.log(1.0 / delta))


def quantile_index(s: int, p: float, delta: float) -> int:
    """Largest integer i with ``i < s p - sqrt(2 s p ln(1/delta))``.

    The index is 1-based and counts order statistics from the smallest
    sample element: with probability at least 1 - delta the i-th smallest of
    ``s`` iid draws of K satisfies Pr(K <= N_(i)) <= p.
    """
    if isinstance(s, bool) or not isinstance(s, int) or s < 1:
        raise ParameterError(f"s must be a positive integer, got {s!r}")
    if not (math.isfinite(p) and 0.5 <= p < 1.0):
        raise ParameterError(f"p must lie in [1/2, 1), got {p!r}")
    _check_open_half("delta", delta)

    bound = quantile_index_bound(s, p, delta)
    if bound <= 1.0:
        raise NoValidIndexError(
            f"no valid quantile index: s={s}, p={p}, delta={delta} gives bound {bound:.6g} <= 1"
        )
    i = math.ceil(bound) - 1
    # ceil() of a float is exact, but guard the strict inequality explicitly
    while not i < bound:
        i -= 1
    while i + 1 < bound:
        i += 1
    return i


def guarantee_bound(params: CertificateParams) -> float:
    """Upper bound epsilon / p_min on the conditional violation probability."""
    return params.epsilon / params.p_min


def shift_adjusted_bound(params: CertificateParams, shift: float) -> float:
    """Bound under a total-variation shift ``shift`` between the sampling and
    the target distribution: ``(epsilon + shift) / (p_min - shift)``."""
    if not (math.isfinite(shift) and 0.0 <= shift < 1.0):
        raise ParameterError(f"shift must lie in [0, 1), got {shift!r}")
    if shift >= params.p_min:
        raise ShiftTooLargeError(
            f"shift {shift} >= p_min {params.p_min}: the shifted bound is vacuous"
        )
    return (params.epsilon + shift) / (params.p_min - shift)


def union_bound_violation(map_size: int, epsilon: float) -> float:
    """Bound min(1, |M| epsilon) on Pr(ROB(X) < M(conf(X)))."""
    if isinstance(map_size, bool) or not isinstance(map_size, int) or map_size < 1:
        raise ParameterError(f"map_size must be a positive integer, got {map_size!r}")
    if not (math.isfinite(epsilon) and 0.0 < epsilon < 1.0):
        raise ParameterError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    return min(1.0, map_size * epsilon)
