"""Robustness lower-bound map M(kappa) and PAG certificates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import bounds
from .bounds import CertificateParams
from .errors import InconsistentParamsError, ParameterError
from .oracles import ADVERSARIAL_UPPER
from .quality import QualityPoint, QualitySample

FORMAT_VERSION = 1

# lookup rules: the first step at or above kappa (min over conf >= kappa), or
# the step at the largest kappa' <= kappa (more conservative)
RULE_MIN_ABOVE = "min_above"
RULE_FLOOR = "floor"


@dataclass(frozen=True)
class RobustnessMap:
    """Monotone step function from confidence to a robustness lower bound.

    ``kappas`` and ``rhos`` are strictly increasing; the map is undefined
    above ``kappa_max``.
    """

    kappas: np.ndarray
    rhos: np.ndarray
    kappa_max: float
    rho_quantum: Optional[float] = None

    def __post_init__(self):
        k = np.asarray(self.kappas, dtype=np.float64).reshape(-1)
        r = np.asarray(self.rhos, dtype=np.float64).reshape(-1)
        if k.shape != r.shape:
            raise ParameterError("kappas and rhos differ in length")
        if np.any(np.diff(k) <= 0) or np.any(np.diff(r) <= 0):
            raise ParameterError("map steps must be strictly increasing in kappa and rho")
        if len(k) and k[-1] > self.kappa_max:
            raise ParameterError("map step above kappa_max")
        object.__setattr__(self, "kappas", k)
        object.__setattr__(self, "rhos", r)

    @property
    def size(self) -> int:
        return len(self.kappas)

    @property
    def steps(self) -> list:
        return [(float(k), float(r)) for k, r in zip(self.kappas, self.rhos)]

    def lookup(self, kappa: float, rule: str = RULE_MIN_ABOVE) -> Optional[float]:
        """M(kappa), or None where the map is undefined."""
        value = self.lookup_many(np.array([kappa]), rule)[0]
        return None if math.isnan(value) else float(value)

    def lookup_many(self, kappa, rule: str = RULE_MIN_ABOVE) -> np.ndarray:
        """Vectorised lookup; NaN marks undefined entries."""
        kappa = np.asarray(kappa, dtype=np.float64)
        out = np.full(kappa.shape, np.nan)
        if self.size == 0:
            return out
        if rule == RULE_MIN_ABOVE:
            idx = np.searchsorted(self.kappas, kappa, side="left")
            ok = (idx < self.size) & (kappa <= self.kappa_max)
        elif rule == RULE_FLOOR:
            idx = np.searchsorted(self.kappas, kappa, side="right") - 1
            ok = (idx >= 0) & (kappa <= self.kappa_max)
        else:
            raise ParameterError(f"unknown lookup rule {rule!r}")
        out[ok] = self.rhos[idx[ok]]
        return out

    def to_dict(self) -> dict:
        return {
            "kappa_max": self.kappa_max,
            "size": self.size,
            "rho_quantum": self.rho_quantum,
            "steps": [[k, r] for k, r in self.steps],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RobustnessMap":
        steps = np.array(data["steps"], dtype=np.float64).reshape(-1, 2)
        return cls(steps[:, 0], steps[:, 1], float(data["kappa_max"]), data.get("rho_quantum"))


def map_lookup(rmap: RobustnessMap, kappa: float, rule: str = RULE_MIN_ABOVE) -> Optional[float]:
    return rmap.lookup(kappa, rule)


def compute_kappa_max(sample: QualitySample, params: CertificateParams, index: Optional[int] = None) -> float:
    """The i-th smallest sampled confidence, i = i(|N|, 1 - p_min, delta/2)."""
    if index is None:
        index = bounds.quantile_index(len(sample), 1.0 - params.p_min, params.delta / 2)
    if not 1 <= index <= len(sample):
        raise ParameterError(f"order-statistic index {index} outside 1..{len(sample)}")
    return float(np.partition(sample.kappa, index - 1)[index - 1])


def quantize_down(rho: np.ndarray, quantum: float) -> np.ndarray:
    if not (quantum > 0 and math.isfinite(quantum)):
        raise ParameterError("rho_quantum must be positive")
    q = np.floor(rho / quantum) * quantum
    # floating point may round a multiple up past the original value
    return np.minimum(q, rho)


def build_map(sample: QualitySample, kappa_max: float, rho_quantum: Optional[float] = None) -> RobustnessMap:
    """Sweep the sample in lexicographic (rho, kappa) order, adding a step
    kappa -> rho whenever a point's confidence exceeds every confidence seen
    so far.

    Confidences above ``kappa_max`` are clamped to ``kappa_max``: such points
    still have conf >= kappa for every admissible kappa and must bound M.
    Consecutive steps with the same rho are merged, so ``size`` is the size
    of the codomain.
    """
    if len(sample) == 0:
        raise ParameterError("cannot build a map from an empty sample")
    rho = sample.rho if rho_quantum is None else quantize_down(sample.rho, rho_quantum)
    kap = np.minimum(sample.kappa, kappa_max)
    order = np.lexsort((kap, rho))
    rho_s, kap_s = rho[order], kap[order]

    seen = np.concatenate([[-np.inf], np.maximum.accumulate(kap_s)[:-1]])
    new = kap_s > seen
    step_k, step_r = kap_s[new], rho_s[new]

    # equal rho: keep only the step with the largest kappa
    last_of_run = np.append(step_r[1:] != step_r[:-1], True)
    return RobustnessMap(step_k[last_of_run], step_r[last_of_run], float(kappa_max), rho_quantum)


@dataclass(frozen=True)
class Certification:
    status: str  # "certified" | "not_certified" | "out_of_range"
    bound: Optional[float] = None
    confidence_level: Optional[float] = None
    witness: Optional[QualityPoint] = None
    note: str = ""

    @property
    def certified(self) -> bool:
        return self.status == "certified"


def certify(
    sample: QualitySample,
    params: CertificateParams,
    rho: float,
    kappa: float,
    kappa_max: Optional[float] = None,
    check_size: bool = True,
) -> Certification:
    """Decide the PAG statement for one (rho, kappa) pair.

    Certified means: with probability >= 1 - delta over the sampling,
    Pr(ROB(X) < rho | conf(X) >= kappa) < epsilon / p_min.
    """
    if check_size:
        need = bounds.solve_sample_size(params.epsilon, params.delta / 2, params.vc_dim)
        if len(sample) < need:
            raise InconsistentParamsError(f"sample has {len(sample)} points, need at least {need}")
    if kappa_max is None:
        kappa_max = compute_kappa_max(sample, params)
    if kappa > kappa_max:
        return Certification(
            "out_of_range",
            note=(
                f"kappa {kappa} exceeds kappa_max {kappa_max}; only the joint bound "
                f"Pr(ROB < rho and conf >= kappa) < {params.epsilon} applies"
            ),
        )
    bad = (sample.rho < rho) & (sample.kappa >= kappa)
    if bad.any():
        k = int(np.flatnonzero(bad)[np.argmin(sample.rho[bad])])
        return Certification("not_certified", witness=sample[k], note="counterexample in sample")
    return Certification("certified", bounds.guarantee_bound(params), 1.0 - params.delta)


def _map_is_sample_consistent(sample: QualitySample, rmap: RobustnessMap) -> bool:
    """No sample point lies strictly below M at its own confidence range."""
    if rmap.size == 0:
        return True
    order = np.argsort(sample.kappa)
    kap = sample.kappa[order]
    suffix_min = np.minimum.accumulate(sample.rho[order][::-1])[::-1]
    pos = np.searchsorted(kap, rmap.kappas, side="left")
    has = pos < len(kap)
    mins = np.full(rmap.size, np.inf)
    mins[has] = suffix_min[pos[has]]
    return bool(np.all(mins >= rmap.rhos))


@dataclass
class PagCertificate:
    params: CertificateParams
    sample_size: int
    required_sample_size: int
    quantile_index: int
    kappa_max: float
    map: RobustnessMap
    bound: float
    union_bound: float
    oracle_kind: str
    oracle_config: dict = field(default_factory=dict)
    shift_lambda: Optional[float] = None
    shift_bound: Optional[float] = None
    provenance: dict = field(default_factory=dict)

    @property
    def confidence_level(self) -> float:
        return 1.0 - self.params.delta

    @property
    def oracle_relative(self) -> bool:
        # an attack only upper-bounds the true radius, so the guarantee is
        # about the attack's output rather than about true robustness
        return self.oracle_kind == ADVERSARIAL_UPPER

    def validate(self) -> None:
        p = self.params
        problems = []
        if self.sample_size < self.required_sample_size:
            problems.append("sample smaller than required")
        if self.required_sample_size != bounds.solve_sample_size(p.epsilon, p.delta / 2, p.vc_dim):
            problems.append("required sample size does not match params")
        if self.bound != bounds.guarantee_bound(p):
            problems.append("bound != epsilon / p_min")
        expected_union = 0.0 if self.map.size == 0 else bounds.union_bound_violation(self.map.size, p.epsilon)
        if self.union_bound != expected_union:
            problems.append("union bound != |M| epsilon")
        if self.map.kappa_max > self.kappa_max:
            problems.append("map kappa_max above certified kappa_max")
        if self.shift_lambda is not None and self.shift_bound != bounds.shift_adjusted_bound(p, self.shift_lambda):
            problems.append("shift bound mismatch")
        if problems:
            raise InconsistentParamsError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "params": self.params.to_dict(),
            "sample_size": self.sample_size,
            "required_sample_size": self.required_sample_size,
            "quantile_index": self.quantile_index,
            "kappa_max": self.kappa_max,
            "map": self.map.to_dict(),
            "bound": self.bound,
            "union_bound": self.union_bound,
            "confidence_level": self.confidence_level,
            "oracle_kind": self.oracle_kind,
            "oracle_relative": self.oracle_relative,
            "oracle_config": self.oracle_config,
            "shift_lambda": self.shift_lambda,
            "shift_bound": self.shift_bound,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PagCertificate":
        if data.get("format_version") != FORMAT_VERSION:
            raise InconsistentParamsError(f"unsupported certificate format {data.get('format_version')!r}")
        cert = cls(
            params=CertificateParams.from_dict(data["params"]),
            sample_size=int(data["sample_size"]),
            required_sample_size=int(data["required_sample_size"]),
            quantile_index=int(data["quantile_index"]),
            kappa_max=float(data["kappa_max"]),
            map=RobustnessMap.from_dict(data["map"]),
            bound=float(data["bound"]),
            union_bound=float(data["union_bound"]),
            oracle_kind=data["oracle_kind"],
            oracle_config=data.get("oracle_config", {}),
            shift_lambda=data.get("shift_lambda"),
            shift_bound=data.get("shift_bound"),
            provenance=data.get("provenance", {}),
        )
        cert.validate()
        return cert

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "PagCertificate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def emit_certificate(
    sample: QualitySample,
    params: CertificateParams,
    rmap: RobustnessMap,
    oracle_kind: str,
    shift_lambda: Optional[float] = None,
    oracle_config: Optional[dict] = None,
    provenance: Optional[dict] = None,
) -> PagCertificate:
    """Assemble and validate a certificate for a sample and its map."""
    required = bounds.solve_sample_size(params.epsilon, params.delta / 2, params.vc_dim)
    if len(sample) < required:
        raise InconsistentParamsError(
            f"sample has {len(sample)} points but epsilon={params.epsilon}, delta/2={params.delta / 2} "
            f"need {required}"
        )
    index = bounds.quantile_index(len(sample), 1.0 - params.p_min, params.delta / 2)
    kappa_max = compute_kappa_max(sample, params, index)
    if rmap.kappa_max > kappa_max:
        raise InconsistentParamsError(f"map kappa_max {rmap.kappa_max} above certified {kappa_max}")
    if not _map_is_sample_consistent(sample, rmap):
        raise InconsistentParamsError("map has a counterexample in the sample")
    shift_bound = None if shift_lambda is None else bounds.shift_adjusted_bound(params, shift_lambda)
    cert = PagCertificate(
        params=params,
        sample_size=len(sample),
        required_sample_size=required,
        quantile_index=index,
        kappa_max=kappa_max,
        map=rmap,
        bound=bounds.guarantee_bound(params),
        union_bound=0.0 if rmap.size == 0 else bounds.union_bound_violation(rmap.size, params.epsilon),
        oracle_kind=oracle_kind,
        oracle_config=dict(oracle_config or {}),
        shift_lambda=shift_lambda,
        shift_bound=shift_bound,
        provenance=dict(provenance or {}),
    )
    cert.validate()
    return cert
