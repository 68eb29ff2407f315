"""Survival datasets: CSV ingestion, synthetic competing-risks cohorts, folds."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class SurvivalDataset:
    covariates: np.ndarray
    times: np.ndarray
    events: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    n_risks: int | None = None

    def __post_init__(self):
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=np.float64))
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.events = np.asarray(self.events).astype(np.int64).reshape(-1)
        n = self.times.shape[0]
        if n < 1:
            raise DataError("dataset is empty")
        if self.covariates.shape[0] != n or self.events.shape[0] != n:
            raise DataError(f"length mismatch: {self.covariates.shape[0]} covariate rows, "
                            f"{n} times, {self.events.shape[0]} events")
        if not np.all(np.isfinite(self.times)) or np.any(self.times < 0):
            raise DataError("times must be finite and non-negative")
        if self.n_risks is None:
            self.n_risks = max(int(self.events.max()), 1)
        if np.any(self.events < 0) or np.any(self.events > self.n_risks):
            raise DataError(f"event labels must lie in [0, {self.n_risks}]")
        if not self.feature_names:
            self.feature_names = [f"x{i + 1}" for i in range(self.covariates.shape[1])]

    def __len__(self):
        return self.times.shape[0]

    @property
    def n_features(self) -> int:
        return self.covariates.shape[1]

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(self.covariates[idx], self.times[idx], self.events[idx],
                               list(self.feature_names), self.n_risks)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.feature_names.index(name)]
        except ValueError:
            raise DataError(f"no feature column named {name!r}") from None

    def max_event_time(self) -> float:
        observed = self.times[self.events > 0]
        return float(observed.max()) if observed.size else float(self.times.max())


# -- CSV ---------------------------------------------------------------------

def load_csv(path, time_col: str = "time", event_col: str = "event",
             feature_cols: list[str] | None = None, n_risks: int | None = None) -> SurvivalDataset:
    """Read a header-first CSV; every non time/event column is a feature unless listed."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty, a header row is required") from None
        for col in (time_col, event_col, *(feature_cols or [])):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        if feature_cols is None:
            feature_cols = [h for h in header if h not in (time_col, event_col)]
        it, ie = header.index(time_col), header.index(event_col)
        ifeat = [header.index(c) for c in feature_cols]

        rows_x, rows_t, rows_e, missing = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if any(not row[i].strip() for i in (it, ie, *ifeat)):
                missing.append(lineno)
                continue

            def num(i):
                try:
                    return float(row[i])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {header[i]!r}: cannot parse "
                                    f"{row[i]!r} as a number") from None

            t, e = num(it), num(ie)
            if not math.isfinite(t) or t < 0:
                raise DataError(f"{path}:{lineno}: row has invalid time {row[it]!r} (must be >= 0)")
            if e != int(e) or e < 0:
                raise DataError(f"{path}:{lineno}: event label {row[ie]!r} out of range")
            rows_t.append(t)
            rows_e.append(int(e))
            rows_x.append([num(i) for i in ifeat])
    if missing:
        raise DataError(f"{path}: rows with missing values at lines {missing}")
    if not rows_t:
        raise DataError(f"{path}: no data rows (empty dataset)")
    events = np.array(rows_e)
    if n_risks is not None and events.max() > n_risks:
        bad = int(np.argmax(events > n_risks)) + 2
        raise DataError(f"{path}:{bad}: event label exceeds the declared {n_risks} risks")
    return SurvivalDataset(np.array(rows_x, dtype=np.float64).reshape(len(rows_t), len(ifeat)),
                           np.array(rows_t), events, list(feature_cols), n_risks)


def write_csv(dataset: SurvivalDataset, path, time_col: str = "time",
              event_col: str = "event") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*dataset.feature_names, time_col, event_col])
        for x, t, e in zip(dataset.covariates, dataset.times, dataset.events):
            w.writerow([*(repr(float(v)) for v in x), repr(float(t)), int(e)])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- synthetic cohorts ------------------------------------------------------

def _default_gamma(p: int, risk: int) -> np.ndarray:
    g = np.zeros(p)
    half = p // 2
    if risk == 1:
        g[:half] = 0.3
    else:
        g[half:] = 0.3
    return g


@dataclass
class SyntheticSpec:
    """Exponential competing risks whose log-rates are quadratic in the covariates.

    ``rate_r(x) = exp(scale * gamma_r . (x * x) / sqrt(p))``
    """

    n: int = 30_000
    p: int = 12
    n_risks: int = 2
    gammas: list | None = None
    nonlinearity_scale: float = 3.0
    censoring: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.censoring < 1.0:
            raise ValueError(f"censoring target must lie in [0, 1), got {self.censoring}")
        if self.gammas is None:
            self.gammas = [_default_gamma(self.p, r) for r in range(1, self.n_risks + 1)]
        self.gammas = [np.asarray(g, dtype=np.float64) for g in self.gammas]
        if len(self.gammas) != self.n_risks or any(g.shape != (self.p,) for g in self.gammas):
            raise ValueError("need one coefficient vector of length p per risk")

    def rates(self, X: np.ndarray) -> np.ndarray:
        """Cause-specific hazards, shape ``(N, R)``."""
        X = np.atleast_2d(X)
        G = np.stack(self.gammas, axis=1)
        return np.exp(self.nonlinearity_scale * (X * X) @ G / np.sqrt(self.p))

    def to_dict(self) -> dict:
        return {"n": self.n, "p": self.p, "n_risks": self.n_risks,
                "gammas": [g.tolist() for g in self.gammas],
                "nonlinearity_scale": self.nonlinearity_scale,
                "censoring": self.censoring, "seed": self.seed}


def sample_latent(spec: SyntheticSpec, X: np.ndarray, rng: np.random.Generator):
    """Uncensored event times and causes for the given covariates."""
    rates = spec.rates(X)
    latent = rng.exponential(1.0 / rates)
    return latent.min(axis=1), latent.argmin(axis=1) + 1


def calibrate_censoring(event_times: np.ndarray, u: np.ndarray, target: float,
                        max_steps: int = 50, tol: float = 0.01) -> float:
    """Upper bound ``c`` of ``Uniform(0, c)`` censoring hitting ``target`` fraction.

    ``u`` holds the uniform draws so that the realised censoring fraction
    ``mean(u * c < T)`` is a deterministic, nonincreasing function of ``c``.
    """
    def frac(c):
        return float(np.mean(u * c < event_times))

    lo, hi = 0.0, float(event_times.max()) * 2.0
    while frac(hi) > target:
        hi *= 2.0
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        if abs(f - target) <= tol * 0.5:
            return mid
        if f > target:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    if abs(frac(mid) - target) > tol:
        raise DataError(f"censoring calibration failed to reach {target:.3f} in {max_steps} steps")
    return mid


def generate_synthetic(spec: SyntheticSpec) -> SurvivalDataset:
    rng = np.random.default_rng(spec.seed)
    X = rng.standard_normal((spec.n, spec.p))
    T, cause = sample_latent(spec, X, rng)
    u = rng.random(spec.n)
    if spec.censoring <= 0.0:
        times, events = T, cause
    else:
        c = calibrate_censoring(T, u, spec.censoring)
        C = u * c
        censored = C < T
        times = np.where(censored, C, T)
        events = np.where(censored, 0, cause)
    names = [f"x{i + 1}" for i in range(spec.p)]
    return SurvivalDataset(X, times, events, names, spec.n_risks)


def analytic_cif(spec: SyntheticSpec, x, t, r: int) -> np.ndarray:
    """Closed-form CIF of risk ``r`` under constant cause-specific hazards."""
    rates = spec.rates(x)
    total = rates.sum(axis=1)
    t = np.asarray(t, dtype=np.float64)
    out = rates[:, r - 1] / total * -np.expm1(-total * t)
    return out[0] if np.ndim(x) == 1 else out


# -- folds and standardisation ---------------------------------------------

def _stable_keys(dataset: SurvivalDataset, seed: int) -> np.ndarray:
    """Per-row pseudo-random keys that depend on row content, not row order."""
    keys = np.empty(len(dataset), dtype=np.uint64)
    for i in range(len(dataset)):
        h = hashlib.blake2b(digest_size=8, key=int(seed).to_bytes(8, "little", signed=True))
        h.update(dataset.covariates[i].tobytes())
        h.update(np.float64(dataset.times[i]).tobytes())
        h.update(np.int64(dataset.events[i]).tobytes())
        keys[i] = int.from_bytes(h.digest(), "little")
    return keys


def split_folds(dataset: SurvivalDataset, k: int, seed: int) -> np.ndarray:
    """Stratified fold label in ``[0, k)`` per row.

    Rows are ordered by event label, then by a content hash, and dealt
    round-robin with a running offset so fold sizes differ by at most one.
    """
    n = len(dataset)
    if k < 2 or k > n:
        raise DataError(f"need 2 <= k <= {n}, got k={k}")
    keys = _stable_keys(dataset, seed)
    # lexsort with a full content tiebreak so duplicate rows stay order-free
    order = np.lexsort((dataset.events, dataset.times, keys, dataset.events))
    folds = np.empty(n, dtype=np.int64)
    folds[order] = np.arange(n) % k
    return folds


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard deviations; constant columns get std 1."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std < 1e-12
    if np.any(constant):
        log.warning("constant feature columns %s: std replaced by 1", np.flatnonzero(constant).tolist())
        std = np.where(constant, 1.0, std)
    return mean, std
