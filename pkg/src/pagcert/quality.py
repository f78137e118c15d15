"""Quality space: (rho, kappa) points, counterexample ranges, and
construction of the iid quality sample."""

from __future__ import annotations

import csv
import json
import logging
import os
import threading
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import oracles
from .errors import DatasetError, OracleError, ParameterError
from .external import ExternalOracle
from .model import MlpModel

log = logging.getLogger(__name__)

DEFAULT_NOISE_SIGMA = 8 / 256
CHUNK_SIZE = 1024
LOCAL_ORACLES = ("pgd", "ibp", "grid", "analytic")


@dataclass(frozen=True)
class QualityPoint:
    rho: float
    kappa: float


@dataclass(frozen=True)
class CounterexampleRange:
    """R(rho, kappa) = {(rho', kappa') : rho' < rho and kappa' >= kappa}."""

    rho: float
    kappa: float

    def contains(self, q: QualityPoint) -> bool:
        return q.rho < self.rho and q.kappa >= self.kappa


def contains(range_: CounterexampleRange, q: QualityPoint) -> bool:
    return range_.contains(q)


@dataclass
class QualitySample:
    """The image q(N) of an iid sample, stored column-wise."""

    rho: np.ndarray
    kappa: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64).reshape(-1)
        self.kappa = np.asarray(self.kappa, dtype=np.float64).reshape(-1)
        if self.rho.shape != self.kappa.shape:
            raise ParameterError("rho and kappa columns differ in length")

    @classmethod
    def from_points(cls, points: Sequence, provenance=None) -> "QualitySample":
        pts = [p if isinstance(p, QualityPoint) else QualityPoint(*p) for p in points]
        return cls(
            np.array([p.rho for p in pts], dtype=np.float64),
            np.array([p.kappa for p in pts], dtype=np.float64),
            dict(provenance or {}),
        )

    def __len__(self):
        return len(self.rho)

    def __getitem__(self, i) -> QualityPoint:
        return QualityPoint(float(self.rho[i]), float(self.kappa[i]))

    @property
    def points(self) -> list:
        return [QualityPoint(float(r), float(k)) for r, k in zip(self.rho, self.kappa)]


def counterexample_mask(sample: QualitySample, range_: CounterexampleRange) -> np.ndarray:
    return (sample.rho < range_.rho) & (sample.kappa >= range_.kappa)


def has_counterexample(sample: QualitySample, range_: CounterexampleRange) -> bool:
    if len(sample) == 0:
        return False
    return bool(counterexample_mask(sample, range_).any())


# -- datasets ----------------------------------------------------------------


def load_dataset(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Read a CSV with columns feature_0..feature_{d-1} and optional label."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if header is None:
        raise DatasetError(f"{path}: empty file")
    features = [k for k, h in enumerate(header) if h.startswith("feature_")]
    if not features:
        raise DatasetError(f"{path}: no feature_ columns in header")
    label_col = header.index("label") if "label" in header else None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    try:
        X = np.array([[float(r[k]) for k in features] for r in rows])
        y = None if label_col is None else np.array([int(float(r[label_col])) for r in rows])
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: bad row ({exc})") from exc
    return X, y


def save_dataset(path, X, labels=None) -> None:
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"feature_{k}" for k in range(X.shape[1])]
        if labels is not None:
            header.append("label")
        w.writerow(header)
        for k, row in enumerate(X):
            out = [repr(float(v)) for v in row]
            if labels is not None:
                out.append(str(int(labels[k])))
            w.writerow(out)


# -- quality providers -------------------------------------------------------


@dataclass(frozen=True)
class LocalProvider:
    """Evaluates (rho, kappa) in-process with one of the built-in oracles."""

    model: MlpModel
    oracle: str = "ibp"
    cfg: oracles.OracleConfig = oracles.OracleConfig()

    def __post_init__(self):
        if self.oracle not in LOCAL_ORACLES:
            raise ParameterError(f"unknown oracle {self.oracle!r}; choose from {LOCAL_ORACLES}")
        if self.oracle == "analytic":
            oracles.binary_linear_parts(self.model)

    @property
    def kind(self) -> str:
        return {
            "pgd": oracles.ADVERSARIAL_UPPER,
            "ibp": oracles.CERTIFIED_LOWER,
            "grid": oracles.EXACT,
            "analytic": oracles.EXACT,
        }[self.oracle]

    def describe(self) -> dict:
        return {"oracle": self.oracle, "kind": self.kind, "config": self.cfg.to_dict(), "model_hash": self.model.hash()}

    def evaluate(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        _, kappa = self.model.predict(X)
        if self.oracle == "pgd":
            rho, _ = oracles.pgd_batch(self.model, X, self.cfg)
        elif self.oracle == "ibp":
            rho = oracles.certified_binsearch_batch(self.model, X, self.cfg)
        elif self.oracle == "grid":
            rho = np.array([oracles.exact_grid_oracle(self.model, x, self.cfg).radius for x in X])
        else:
            w, b = oracles.binary_linear_parts(self.model)
            rho = oracles.analytic_linear_radius(w, b, X)
        return rho, kappa


@dataclass(frozen=True)
class ExternalProvider:
    """Evaluates (rho, kappa) through a tool speaking the wire protocol."""

    command: str
    timeout_ms: Optional[float] = None

    @property
    def kind(self) -> str:
        return "external"

    def describe(self) -> dict:
        return {"oracle": "external", "command": self.command, "timeout_ms": self.timeout_ms}


# -- sample construction -----------------------------------------------------


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    # one stream per fixed-size chunk: results do not depend on worker count
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))


def draw_inputs(data: np.ndarray, n: int, sigma: float, rng: np.random.Generator, box=None) -> np.ndarray:
    """Pick ``n`` rows uniformly with replacement and add N(0, sigma^2) noise,
    clamped to ``box`` when given."""
    rows = rng.integers(0, len(data), size=n)
    X = data[rows]
    if sigma > 0:
        X = X + rng.normal(0.0, sigma, size=X.shape)
    if box is not None:
        X = np.clip(X, box[:, 0], box[:, 1])
    return X


def _local_chunk(provider: LocalProvider, X):
    return provider.evaluate(X)


def _chunks(s: int):
    return [(c, c * CHUNK_SIZE, min(s, (c + 1) * CHUNK_SIZE)) for c in range((s + CHUNK_SIZE - 1) // CHUNK_SIZE)]


def _input_box(provider):
    return provider.model.input_box if isinstance(provider, LocalProvider) else None


def _external_chunks(provider, jobs, workers):
    """Yield (chunk, rho, kappa, kinds) in chunk order over a pool of tools."""
    n = max(1, min(workers, len(jobs)))
    slots = [(ExternalOracle(provider.command, provider.timeout_ms).start(), threading.Lock()) for _ in range(n)]
    try:
        with ThreadPoolExecutor(n) as pool:
            futures = [(c, pool.submit(_external_query, slots[k % n], X)) for k, (c, X) in enumerate(jobs)]
            for c, fut in futures:
                yield (c, *fut.result())
    finally:
        for client, _ in slots:
            client.close()


def _external_query(slot, X):
    client, lock = slot
    # a client serves one batch at a time
    with lock:
        return client.query_many(X)


def build_quality_sample(
    data: np.ndarray,
    provider,
    s: int,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
    workers: int = 1,
    out_path=None,
    resume: bool = False,
    extra_meta: Optional[dict] = None,
) -> QualitySample:
    """Draw ``s`` noisy copies of dataset rows and evaluate (rho, kappa).

    Each fixed-size chunk of draws has its own random stream derived from
    ``seed``, so the sample is identical for any ``workers``. When
    ``out_path`` is given, points are appended to a CSV in draw order as
    chunks finish and a JSON sidecar records the configuration; with
    ``resume`` an interrupted run continues from its last whole chunk.
    """
    if s < 1:
        raise ParameterError("sample size must be >= 1")
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.size == 0:
        raise DatasetError("dataset is empty")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be >= 0")

    meta = {
        "seed": seed,
        "noise_sigma": noise_sigma,
        "s": s,
        "chunk_size": CHUNK_SIZE,
        "provider": provider.describe(),
        **(extra_meta or {}),
    }
    rho = np.empty(s)
    kappa = np.empty(s)
    kinds = set()
    done_chunks = 0
    writer = None
    if out_path is not None:
        writer = SampleWriter(out_path, meta)
        if resume:
            prev = writer.resume()
            if prev is not None:
                n_prev = len(prev)
                rho[:n_prev], kappa[:n_prev] = prev.rho, prev.kappa
                done_chunks = len(_chunks(s)) if n_prev >= s else n_prev // CHUNK_SIZE
        else:
            writer.start()

    box = _input_box(provider)
    jobs = []
    for c, a, b in _chunks(s)[done_chunks:]:
        jobs.append((c, draw_inputs(data, b - a, noise_sigma, _chunk_rng(seed, c), box)))
    bounds = {c: (a, b) for c, a, b in _chunks(s)}

    def results():
        if isinstance(provider, ExternalProvider):
            yield from _external_chunks(provider, jobs, workers)
        elif workers <= 1:
            for c, X in jobs:
                r, k = provider.evaluate(X)
                yield c, r, k, [provider.kind]
        else:
            with ProcessPoolExecutor(workers) as pool:
                futures = [(c, pool.submit(_local_chunk, provider, X)) for c, X in jobs]
                for c, fut in futures:
                    r, k = fut.result()
                    yield c, r, k, [provider.kind]

    for c, r, k, ks in results():
        a, b = bounds[c]
        bad = ~(np.isfinite(r) & np.isfinite(k))
        if bad.any():
            index = a + int(np.flatnonzero(bad)[0])
            raise OracleError(f"draw {index}: non-finite quality value", index)
        rho[a:b], kappa[a:b] = r, k
        kinds.update(ks)
        if writer is not None:
            writer.append(a, r, k)
        log.info("quality sample: %d/%d draws", b, s)

    kind = kinds.pop() if len(kinds) == 1 else ("mixed" if kinds else provider.kind)
    meta["oracle_kind"] = kind
    if writer is not None:
        writer.finish(meta)
    return QualitySample(rho, kappa, meta)


def evaluate_points(provider, X, workers: int = 1) -> QualitySample:
    """Quality points of the rows of X, in row order and without noise."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.size == 0:
        raise DatasetError("no points to evaluate")
    jobs = [(c, X[a:b]) for c, a, b in _chunks(len(X))]
    rho = np.empty(len(X))
    kappa = np.empty(len(X))
    if isinstance(provider, ExternalProvider):
        parts = ((c, r, k) for c, r, k, _ in _external_chunks(provider, jobs, workers))
    elif workers <= 1:
        parts = ((c, *provider.evaluate(Xc)) for c, Xc in jobs)
    else:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_local_chunk, [provider] * len(jobs), [Xc for _, Xc in jobs]))
        parts = ((c, r, k) for (c, _), (r, k) in zip(jobs, done))
    for c, r, k in parts:
        a = c * CHUNK_SIZE
        rho[a:a + len(r)], kappa[a:a + len(r)] = r, k
    return QualitySample(rho, kappa, {"provider": provider.describe()})


# -- persistence -------------------------------------------------------------


def meta_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


class SampleWriter:
    """Append-only ``index,rho,kappa`` CSV plus a JSON sidecar whose
    ``complete`` flag marks a finished sample."""

    HEADER = "index,rho,kappa\n"

    def __init__(self, path, meta: dict):
        self.path = Path(path)
        self.meta = dict(meta)
        self.meta_path = meta_path_for(path)

    def _write_meta(self, complete: bool, meta=None):
        doc = dict(meta or self.meta)
        doc["complete"] = complete
        tmp = self.meta_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.meta_path)

    def start(self):
        self.path.write_text(self.HEADER)
        self._write_meta(False)

    def resume(self) -> Optional[QualitySample]:
        """Reload whole chunks of a previous run with the same configuration.

        Returns None (and starts afresh) when there is nothing compatible.
        """
        if not (self.path.exists() and self.meta_path.exists()):
            self.start()
            return None
        old = json.loads(self.meta_path.read_text())
        old.pop("complete", None)
        old.pop("oracle_kind", None)
        if old != json.loads(json.dumps(self.meta)):
            log.warning("existing sample %s has a different configuration; starting over", self.path)
            self.start()
            return None
        prev = read_sample_csv(self.path)
        if len(prev) < self.meta["s"]:
            keep = (len(prev) // CHUNK_SIZE) * CHUNK_SIZE
            prev = QualitySample(prev.rho[:keep], prev.kappa[:keep])
        else:
            prev = QualitySample(prev.rho[: self.meta["s"]], prev.kappa[: self.meta["s"]])
        with open(self.path, "w") as fh:
            fh.write(self.HEADER)
            for i in range(len(prev)):
                fh.write(f"{i},{float(prev.rho[i])!r},{float(prev.kappa[i])!r}\n")
        self._write_meta(False)
        return prev

    def append(self, start: int, rho, kappa):
        with open(self.path, "a") as fh:
            for j, (r, k) in enumerate(zip(rho, kappa)):
                fh.write(f"{start + j},{float(r)!r},{float(k)!r}\n")

    def finish(self, meta: dict):
        self._write_meta(True, meta)


def read_sample_csv(path) -> QualitySample:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    for expected, row in enumerate(rows):
        if int(row["index"]) != expected:
            raise DatasetError(f"{path}: indices not contiguous at row {expected}")
    return QualitySample(
        np.array([float(r["rho"]) for r in rows]),
        np.array([float(r["kappa"]) for r in rows]),
    )


def load_quality_sample(path) -> QualitySample:
    sample = read_sample_csv(path)
    mp = meta_path_for(path)
    if mp.exists():
        sample.provenance = json.loads(mp.read_text())
    return sample


def save_quality_sample(path, sample: QualitySample) -> None:
    writer = SampleWriter(path, sample.provenance)
    writer.start()
    writer.append(0, sample.rho, sample.kappa)
    writer.finish(sample.provenance)
