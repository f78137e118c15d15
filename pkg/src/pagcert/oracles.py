"""Local robustness oracles returning the L-inf distance to the nearest
class-changing input, tagged with what that number means."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, ParameterError
from .model import MlpModel, input_gradient_batch, predicted_class

EXACT = "exact"
CERTIFIED_LOWER = "certified_lower"
ADVERSARIAL_UPPER = "adversarial_upper"
KINDS = (EXACT, CERTIFIED_LOWER, ADVERSARIAL_UPPER)

_GRID_CHUNK = 1 << 18
_GRID_MAX_DIM = 3
_GRID_TILE = 16


@dataclass(frozen=True)
class OracleConfig:
    """Search settings shared by the built-in oracles (L-inf norm only)."""

    radius_cap: float = 0.5
    pgd_step: float = 0.5 / 256
    pgd_max_steps: int = 200
    binsearch_bits: int = 4
    grid_resolution: float = 1e-3

    def __post_init__(self):
        if not (math.isfinite(self.radius_cap) and self.radius_cap > 0):
            raise ParameterError("radius_cap must be positive")
        if not (0 < self.pgd_step < self.radius_cap):
            raise ParameterError("pgd_step must lie in (0, radius_cap)")
        if int(self.pgd_max_steps) < 1:
            raise ParameterError("pgd_max_steps must be >= 1")
        if int(self.binsearch_bits) < 1:
            raise ParameterError("binsearch_bits must be >= 1")
        if not self.grid_resolution > 0:
            raise ParameterError("grid_resolution must be positive")

    def to_dict(self) -> dict:
        return {"norm": "linf", **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "OracleConfig":
        fields = ("radius_cap", "pgd_step", "pgd_max_steps", "binsearch_bits", "grid_resolution")
        return cls(**{k: data[k] for k in fields if k in data})


# step settings used for the two image benchmarks
MNIST_PGD = OracleConfig(pgd_step=0.5 / 256, pgd_max_steps=200, radius_cap=0.5)
CIFAR_PGD = OracleConfig(pgd_step=0.1 / 256, pgd_max_steps=500, radius_cap=0.5)


@dataclass(frozen=True)
class OracleResult:
    radius: float
    kind: str
    found_adversarial: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown oracle kind {self.kind!r}")
        if not (math.isfinite(self.radius) and self.radius >= 0):
            raise ParameterError(f"radius must be finite and >= 0, got {self.radius!r}")


def _as_point(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise DimensionError(f"expected a vector of length {model.input_dim}, got shape {x.shape}")
    return x


# -- analytic ----------------------------------------------------------------


def analytic_linear_radius(weight_diff, bias_diff, X) -> np.ndarray:
    w = np.asarray(weight_diff, dtype=np.float64)
    norm1 = np.abs(w).sum()
    if norm1 == 0.0:
        raise ParameterError("zero-weight-vector: the decision function is constant")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.abs(X @ w + bias_diff) / norm1


def analytic_linear_oracle(weight_diff, bias_diff, x) -> OracleResult:
    """Exact L-inf distance from x to the hyperplane w.x + b = 0.

    The L-inf ball of radius r moves w.x by at most r * ||w||_1, so the
    distance is |w.x + b| / ||w||_1 (ignoring any input box).
    """
    r = analytic_linear_radius(weight_diff, bias_diff, np.asarray(x, dtype=np.float64)[None, :])
    return OracleResult(float(r[0]), EXACT)


def binary_linear_parts(model: MlpModel) -> tuple[np.ndarray, float]:
    """(w, b) of logit_1 - logit_0 for a single-layer two-class model."""
    if len(model.layers) != 1 or model.num_classes != 2 or model.layers[0].activation != "identity":
        raise ParameterError("analytic oracle needs a single identity layer with two classes")
    layer = model.layers[0]
    return layer.weight[1] - layer.weight[0], float(layer.bias[1] - layer.bias[0])


# -- exhaustive grid ---------------------------------------------------------


def _grid_axes(x, lower, upper, cap, res):
    axes = []
    k = int(math.floor(cap / res + 1e-9))
    offsets = np.arange(-k, k + 1) * res
    for xd, lo, hi in zip(x, lower, upper):
        coords = xd + offsets
        extra = [v for v in (lo, hi) if abs(v - xd) <= cap]
        coords = np.concatenate([coords, extra])
        coords = np.unique(coords[(coords >= lo) & (coords <= hi)])
        axes.append(coords)
    return axes


def _verified_tiles(model: MlpModel, axes, label: int, tile: int = _GRID_TILE) -> np.ndarray:
    """Mask over the grid of points inside tiles of ``tile`` points per axis
    that interval propagation proves to keep class ``label``."""
    starts = [np.arange(0, len(a), tile) for a in axes]
    los = [a[st] for a, st in zip(axes, starts)]
    his = [a[np.minimum(st + tile, len(a)) - 1] for a, st in zip(axes, starts)]
    lo = np.stack([m.reshape(-1) for m in np.meshgrid(*los, indexing="ij")], axis=1)
    hi = np.stack([m.reshape(-1) for m in np.meshgrid(*his, indexing="ij")], axis=1)
    ok = ibp_robust_batch(model, (lo + hi) / 2, (hi - lo) / 2, label)
    ok = ok.reshape([len(st) for st in starts])
    for d, a in enumerate(axes):
        ok = np.repeat(ok, tile, axis=d)
        ok = np.take(ok, np.arange(len(a)), axis=d)
    return ok


def exact_grid_oracle(model: MlpModel, x, cfg: OracleConfig = OracleConfig(), prune: bool = True) -> OracleResult:
    """Exhaustive grid search for the nearest class change (input_dim <= 3).

    Grid points are laid out around x at ``grid_resolution`` spacing, plus
    the input-box faces; shells of growing radius are scanned so that the
    search stops at the first radius holding a class change. The reported
    radius is that distance minus one resolution step, floored at 0.

    With ``prune`` the ball that interval propagation proves class-constant
    is skipped. No grid point in it can change class, so the result is the
    same as the full scan.
    """
    x = _as_point(model, x)
    if model.input_dim > _GRID_MAX_DIM:
        raise DimensionError(f"grid oracle supports input_dim <= {_GRID_MAX_DIM}, got {model.input_dim}")
    res, cap = cfg.grid_resolution, cfg.radius_cap
    c = int(predicted_class(model.logits(x))[0])
    axes = _grid_axes(x, model.lower, model.upper, cap, res)
    offsets = [np.abs(a - xd) for a, xd in zip(axes, x)]

    inner = -1.0
    band = 32 * res
    skip = None
    if prune:
        if ibp_robust_batch(model, x[None, :], cap)[0]:
            return OracleResult(cap, EXACT)
        skip = _verified_tiles(model, axes, c)
    while True:
        outer = min(band, cap)
        within = [o <= outer + 1e-12 for o in offsets]
        sub = [(a[w], o[w]) for a, o, w in zip(axes, offsets, within)]
        # Chebyshev distance is separable: max over per-axis offsets
        dist = np.zeros([len(a) for a, _ in sub])
        for d, (_, o) in enumerate(sub):
            shape = [1] * len(sub)
            shape[d] = len(o)
            dist = np.maximum(dist, o.reshape(shape))
        todo = dist > inner
        if skip is not None:
            todo &= ~skip[np.ix_(*within)]
        ring = np.nonzero(todo)
        dist = dist[ring]
        mesh = np.stack([a[idx] for (a, _), idx in zip(sub, ring)], axis=1)
        best = math.inf
        for start in range(0, len(mesh), _GRID_CHUNK):
            chunk = slice(start, start + _GRID_CHUNK)
            changed = predicted_class(model.logits(mesh[chunk])) != c
            if changed.any():
                best = min(best, float(dist[chunk][changed].min()))
        if best < math.inf:
            return OracleResult(max(0.0, best - res), EXACT)
        if outer >= cap:
            return OracleResult(cap, EXACT)
        inner = outer
        band *= 2


# -- projected gradient descent ----------------------------------------------


def pgd_batch(model: MlpModel, X, cfg: OracleConfig = OracleConfig()):
    """Signed-gradient ascent on the margin loss for a batch of points.

    Returns ``(radii, adversarial)``: radius is the L-inf distance to the
    first class-changing iterate, or ``radius_cap`` when none was found
    within ``pgd_max_steps``; rows of ``adversarial`` are NaN in that case.
    """
    X = model._check_batch(X)
    n = len(X)
    labels = predicted_class(model.logits(X))
    lo = np.maximum(X - cfg.radius_cap, model.lower)
    hi = np.minimum(X + cfg.radius_cap, model.upper)

    radii = np.full(n, cfg.radius_cap)
    adversarial = np.full_like(X, np.nan)
    active = np.arange(n)
    xt = X.copy()
    for _ in range(int(cfg.pgd_max_steps)):
        if active.size == 0:
            break
        g = input_gradient_batch(model, xt[active], "margin_to_runnerup", labels[active])
        step = xt[active] + cfg.pgd_step * np.sign(g)
        step = np.clip(step, lo[active], hi[active])
        xt[active] = step
        flipped = predicted_class(model.logits(step)) != labels[active]
        if flipped.any():
            idx = active[flipped]
            radii[idx] = np.abs(xt[idx] - X[idx]).max(axis=1)
            adversarial[idx] = xt[idx]
            active = active[~flipped]
    return radii, adversarial


def pgd_oracle(model: MlpModel, x, cfg: OracleConfig = OracleConfig()) -> OracleResult:
    x = _as_point(model, x)
    radii, adv = pgd_batch(model, x[None, :], cfg)
    found = None if np.isnan(adv[0]).any() else adv[0]
    return OracleResult(float(radii[0]), ADVERSARIAL_UPPER, found)


# -- interval bound propagation ----------------------------------------------


def ibp_margin_upper(model: MlpModel, X, rho, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Upper bounds of logit_j - logit_c over the box [x - rho, x + rho]
    intersected with the input box, c being the class predicted at x
    unless ``labels`` says otherwise. ``rho`` may be per row and per axis.

    Returns ``(upper, labels)`` with ``upper`` of shape (n, num_classes);
    the column of the predicted class is set to -inf.
    """
    X = model._check_batch(X)
    rho = np.asarray(rho, dtype=np.float64)
    rho = rho[:, None] if rho.ndim == 1 else rho
    if labels is None:
        labels = predicted_class(model.logits(X))
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(X),))
    lo = np.maximum(X - rho, model.lower)
    hi = np.minimum(X + rho, model.upper)
    mid, rad = (lo + hi) / 2, (hi - lo) / 2

    last = model.layers[-1]
    hidden = model.layers[:-1] if last.activation == "identity" else model.layers
    for layer in hidden:
        mid = mid @ layer.weight.T + layer.bias
        rad = rad @ np.abs(layer.weight).T
        if layer.activation == "relu":
            l, u = np.maximum(mid - rad, 0.0), np.maximum(mid + rad, 0.0)
            mid, rad = (l + u) / 2, (u - l) / 2

    rows = np.arange(len(X))
    if last.activation == "identity":
        # fold the final affine map into logit differences; exact for one layer
        diff_w = last.weight[None, :, :] - last.weight[labels][:, None, :]
        diff_b = last.bias[None, :] - last.bias[labels][:, None]
        upper = np.einsum("nkh,nh->nk", diff_w, mid) + diff_b + np.einsum("nkh,nh->nk", np.abs(diff_w), rad)
    else:
        upper = (mid + rad) - (mid - rad)[rows, labels][:, None]
    upper[rows, labels] = -np.inf
    return upper, labels


def ibp_robust_batch(model: MlpModel, X, rho, labels=None) -> np.ndarray:
    upper, _ = ibp_margin_upper(model, X, rho, labels)
    return np.all(upper < 0.0, axis=1)


def ibp_local_check(model: MlpModel, x, rho: float) -> str:
    """'robust' if interval propagation proves the class constant on the
    L-inf ball of radius rho around x, else 'unknown'."""
    x = _as_point(model, x)
    if rho < 0:
        raise ParameterError("rho must be >= 0")
    return "robust" if bool(ibp_robust_batch(model, x[None, :], rho)[0]) else "unknown"


def certified_binsearch_batch(model: MlpModel, X, cfg: OracleConfig = OracleConfig()) -> np.ndarray:
    """Largest radius verified robust by IBP, found by bisection of
    [0, radius_cap] for ``binsearch_bits`` rounds (rounded down)."""
    X = model._check_batch(X)
    cap = cfg.radius_cap
    at_cap = ibp_robust_batch(model, X, cap)
    lo = np.zeros(len(X))
    hi = np.full(len(X), cap)
    for _ in range(int(cfg.binsearch_bits)):
        mid = (lo + hi) / 2
        ok = ibp_robust_batch(model, X, mid)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return np.where(at_cap, cap, lo)


def certified_binsearch_oracle(model: MlpModel, x, cfg: OracleConfig = OracleConfig()) -> OracleResult:
    x = _as_point(model, x)
    return OracleResult(float(certified_binsearch_batch(model, x[None, :], cfg)[0]), CERTIFIED_LOWER)
