"""Empirical embedding semivariogram and spherical model fitting.

The empirical estimate bins unordered pairs by great-circle distance and
stores half the mean cosine distance per bin.  ``fit_spherical`` fits the
three-parameter spherical model to those bins by pair-count weighted
least squares.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize, nnls

from .dataset import Dataset
from .geodesy import haversine_array

log = logging.getLogger(__name__)

DEFAULT_BINS = 50
DEFAULT_H_MAX_KM = 5000.0
DEFAULT_MAX_PAIRS = 5_000_000
CHUNK_PAIRS = 200_000


class DegenerateVariogramWarning(UserWarning):
    pass


def worker_count(workers: int | None = None) -> int:
    """Resolve a worker count; ``None`` reads ``GEOVAR_THREADS`` (0 = auto)."""
    if workers is None:
        try:
            workers = int(os.environ.get("GEOVAR_THREADS", "0"))
        except ValueError:
            workers = 0
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


# ---------------------------------------------------------------------------
# cosine distance

def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1))
    if np.any(norms == 0):
        raise ValueError("cosine distance undefined for a zero-norm vector")
    return norms


def cosine_distance_matrix(a, b) -> np.ndarray:
    """Cosine distances between the rows of ``a`` and the rows of ``b``.

    Dot products are reduced elementwise along the last axis rather than
    through BLAS, so every entry is bit-identical to the scalar
    ``cosine_distance`` of the same two rows.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    na = _unit_rows(a)
    nb = _unit_rows(b)
    dots = (a[:, None, :] * b[None, :, :]).sum(axis=-1)
    return 1.0 - dots / (na[:, None] * nb[None, :])


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"need two vectors of equal length, got {u.shape} and {v.shape}")
    return float(cosine_distance_matrix(u[None], v[None])[0, 0])


# ---------------------------------------------------------------------------
# empirical variogram

@dataclass(frozen=True)
class VariogramBin:
    h_lo: float
    h_center: float
    h_hi: float
    gamma_hat: float
    pair_count: int

    @property
    def tolerance(self) -> float:
        return 0.5 * (self.h_hi - self.h_lo)


@dataclass(frozen=True)
class EmpiricalVariogram:
    bins: tuple[VariogramBin, ...]
    total_pairs_sampled: int
    seed: int

    @property
    def h_max(self) -> float:
        return self.bins[-1].h_hi

    @property
    def centers(self) -> np.ndarray:
        return np.array([b.h_center for b in self.bins])

    @property
    def gamma(self) -> np.ndarray:
        return np.array([b.gamma_hat for b in self.bins])

    @property
    def counts(self) -> np.ndarray:
        return np.array([b.pair_count for b in self.bins], dtype=np.int64)

    @classmethod
    def from_arrays(cls, edges, gamma, counts, total_pairs_sampled=None, seed=0):
        edges = np.asarray(edges, dtype=np.float64)
        bins = tuple(
            VariogramBin(float(lo), float(0.5 * (lo + hi)), float(hi),
                         float(g) if c > 0 else math.nan, int(c))
            for lo, hi, g, c in zip(edges[:-1], edges[1:], gamma, counts))
        if total_pairs_sampled is None:
            total_pairs_sampled = int(np.sum(counts))
        return cls(bins, int(total_pairs_sampled), int(seed))


def pair_index_to_ij(k: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices over the strict upper triangle (row-major) to (i, j)."""
    k = np.asarray(k, dtype=np.int64)
    # row i starts at s(i) = i*(2n - i - 1)/2
    b = 2 * n - 1
    i = np.floor((b - np.sqrt(float(b) * b - 8.0 * k)) / 2.0).astype(np.int64)
    i = np.clip(i, 0, n - 2)
    start = i * (2 * n - i - 1) // 2
    # correct float rounding by at most one row either way
    over = start > k
    i[over] -= 1
    nxt = (i + 1) * (2 * n - i - 2) // 2
    under = k >= nxt
    i[under] += 1
    start = i * (2 * n - i - 1) // 2
    j = k - start + i + 1
    return i, j


def _all_pairs_chunks(n: int, chunk: int):
    """Yield (i, j) arrays covering every unordered pair, row blocks in order."""
    rows_per = max(1, chunk // max(n, 1))
    for r0 in range(0, n - 1, rows_per):
        r1 = min(n - 1, r0 + rows_per)
        ii, jj = [], []
        for i in range(r0, r1):
            jj.append(np.arange(i + 1, n))
            ii.append(np.full(n - i - 1, i))
        yield np.concatenate(ii), np.concatenate(jj)


def _bin_chunk(i, j, lat, lon, unit, h_max, n_bins):
    d = haversine_array(lat[i], lon[i], lat[j], lon[j])
    dc = 1.0 - (unit[i] * unit[j]).sum(axis=1)
    keep = d <= h_max
    d = d[keep]
    dc = dc[keep]
    idx = np.minimum((d / h_max * n_bins).astype(np.int64), n_bins - 1)
    sums = np.bincount(idx, weights=dc, minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    return sums, counts


def estimate_empirical(d: Dataset, n_bins: int = DEFAULT_BINS, h_max_km: float = DEFAULT_H_MAX_KM,
                       max_pairs: int = DEFAULT_MAX_PAIRS, seed: int = 0,
                       workers: int | None = None) -> EmpiricalVariogram:
    """Binned half mean cosine distance against great-circle distance.

    Every unordered pair is used when there are at most ``max_pairs`` of
    them; otherwise ``max_pairs`` pairs are drawn uniformly without
    replacement.  Per-chunk partial sums are merged in chunk order, so the
    result does not depend on ``workers``.
    """
    n = len(d)
    if n < 2:
        raise ValueError(f"need at least 2 records, got {n}")
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if not h_max_km > 0:
        raise ValueError(f"h_max_km must be > 0, got {h_max_km}")
    feats = d.features.astype(np.float64)
    unit = feats / _unit_rows(feats)[:, None]
    total = n * (n - 1) // 2
    if total <= max_pairs:
        chunks = list(_all_pairs_chunks(n, CHUNK_PAIRS))
        sampled = total
    else:
        rng = np.random.default_rng(seed)
        k = np.sort(rng.choice(total, size=max_pairs, replace=False))
        chunks = [pair_index_to_ij(k[s:s + CHUNK_PAIRS], n) for s in range(0, max_pairs, CHUNK_PAIRS)]
        sampled = max_pairs

    def work(c):
        return _bin_chunk(c[0], c[1], d.lat, d.lon, unit, h_max_km, n_bins)

    nw = min(worker_count(workers), len(chunks))
    if nw > 1:
        with ThreadPoolExecutor(nw) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    for s, c in parts:
        sums += s
        counts += c
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sums / (2.0 * counts), np.nan)
    edges = np.linspace(0.0, h_max_km, n_bins + 1)
    return EmpiricalVariogram.from_arrays(edges, gamma, counts, sampled, seed)


# ---------------------------------------------------------------------------
# spherical model

@dataclass(frozen=True)
class SphericalModel:
    nugget: float
    partial_sill: float
    range_km: float
    objective: float = field(default=math.nan, compare=False)
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.nugget < 0 or self.partial_sill < 0:
            raise ValueError("nugget and partial_sill must be >= 0")
        if not self.range_km > 0:
            raise ValueError("range_km must be > 0")

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    def scaled(self, factor: float) -> "SphericalModel":
        """The curve ``factor * gamma(h)``."""
        return replace(self, nugget=self.nugget * factor, partial_sill=self.partial_sill * factor)

    def __call__(self, h):
        return evaluate_spherical(self, h)


def _spherical_shape(h, a):
    t = np.asarray(h, dtype=np.float64) / a
    return np.where(t < 1.0, 1.5 * t - 0.5 * t ** 3, 1.0)


def evaluate_spherical_array(m: SphericalModel, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0) or np.any(np.isnan(h)):
        raise ValueError("lag distance must be >= 0")
    return m.nugget + m.partial_sill * _spherical_shape(h, m.range_km)


def evaluate_spherical(m: SphericalModel, h):
    """Model value at lag ``h`` km; ``gamma(0)`` is the nugget."""
    out = evaluate_spherical_array(m, h)
    return float(out) if out.ndim == 0 else out


def spherical_objective(params, h, gamma, weights) -> float:
    c0, c, a = params
    r = gamma - (c0 + c * _spherical_shape(h, a))
    return float(np.sum(weights * r * r))


def _profile_linear(a, h, gamma, weights):
    """Optimal non-negative (c0, c) for a fixed range, by weighted NNLS."""
    sw = np.sqrt(weights)
    design = np.column_stack([np.ones_like(h), _spherical_shape(h, a)]) * sw[:, None]
    coef, _ = nnls(design, gamma * sw)
    return coef


def _valid_bins(ev: EmpiricalVariogram):
    h = ev.centers
    g = ev.gamma
    w = ev.counts.astype(np.float64)
    keep = (w > 0) & np.isfinite(g)
    return h[keep], g[keep], w[keep]


def initial_guess(ev: EmpiricalVariogram) -> tuple[float, float, float]:
    """Heuristic start: first bin as nugget, tail mean as sill, 95% crossing as range."""
    h, g, _ = _valid_bins(ev)
    c0 = float(g[0])
    tail = max(1, int(math.ceil(0.2 * len(g))))
    sill = float(np.mean(g[-tail:]))
    hit = np.nonzero(g >= 0.95 * sill)[0]
    a = float(h[hit[0]]) if len(hit) else ev.h_max
    a = min(max(a, 1e-6 * ev.h_max), ev.h_max)
    return max(c0, 0.0), max(sill - c0, 0.0), a


def grid_seed(ev: EmpiricalVariogram, n_grid: int = 64) -> tuple[np.ndarray, float]:
    """Best (c0, c, a) over a coarse range grid plus the heuristic start."""
    h, g, w = _valid_bins(ev)
    h_max = ev.h_max
    candidates = [np.array(initial_guess(ev))]
    for a in np.linspace(h_max / n_grid, h_max, n_grid):
        c0, c = _profile_linear(a, h, g, w)
        candidates.append(np.array([c0, c, a]))
    objs = [spherical_objective(p, h, g, w) for p in candidates]
    best = int(np.argmin(objs))
    return candidates[best], objs[best]


def fit_spherical(ev: EmpiricalVariogram) -> SphericalModel:
    """Weighted least-squares spherical fit: grid seed, then bounded Nelder-Mead."""
    h, g, w = _valid_bins(ev)
    if len(h) < 3:
        raise ValueError(f"need at least 3 nonempty bins, got {len(h)}")
    h_max = ev.h_max
    if np.all(g == 0):
        warnings.warn("all bins are zero; returning a zero model", DegenerateVariogramWarning,
                      stacklevel=2)
        return SphericalModel(0.0, 0.0, h_max, objective=0.0, degenerate=True)

    seed, seed_obj = grid_seed(ev)
    # optimise in rescaled coordinates so simplex steps are comparable
    scale = np.array([max(float(np.max(np.abs(g))), 1e-12)] * 2 + [h_max])

    def f(u):
        return spherical_objective(u * scale, h, g, w)

    bounds = [(0.0, None), (0.0, None), (1e-9, 1.0)]
    res = minimize(f, seed / scale, method="Nelder-Mead", bounds=bounds,
                   options={"xatol": 1e-10, "fatol": 1e-13 * seed_obj, "maxiter": 4000,
                            "maxfev": 8000})
    best = res.x * scale
    best_obj = spherical_objective(best, h, g, w)
    # polish the linear parameters at the refined range
    c0, c = _profile_linear(best[2], h, g, w)
    polished = np.array([c0, c, best[2]])
    pol_obj = spherical_objective(polished, h, g, w)
    if pol_obj <= best_obj:
        best, best_obj = polished, pol_obj
    if best_obj > seed_obj:
        best, best_obj = seed, seed_obj
    log.debug("spherical fit: seed objective %g, refined %g", seed_obj, best_obj)
    c0, c, a = (float(x) for x in best)
    return SphericalModel(max(c0, 0.0), max(c, 0.0), min(max(a, 1e-9 * h_max), h_max),
                          objective=best_obj)


# ---------------------------------------------------------------------------
# text interfaces

CSV_HEADER = "h_lo,h_center,h_hi,gamma_hat,pair_count"


def _fmt(x: float) -> str:
    return repr(float(x))


def variogram_to_csv(ev: EmpiricalVariogram) -> str:
    lines = [CSV_HEADER]
    for b in ev.bins:
        gamma = "" if b.pair_count == 0 else _fmt(b.gamma_hat)
        lines.append(f"{_fmt(b.h_lo)},{_fmt(b.h_center)},{_fmt(b.h_hi)},{gamma},{b.pair_count}")
    return "\n".join(lines) + "\n"


def write_variogram_csv(ev: EmpiricalVariogram, path) -> None:
    Path(path).write_text(variogram_to_csv(ev), encoding="utf-8")


def read_variogram_csv(path) -> EmpiricalVariogram:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != CSV_HEADER:
        raise ValueError(f"{path}: expected header {CSV_HEADER!r}")
    bins = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields")
        lo, center, hi = (float(p) for p in parts[:3])
        count = int(parts[4])
        gamma = float(parts[3]) if parts[3] else math.nan
        bins.append(VariogramBin(lo, center, hi, gamma, count))
    if not bins:
        raise ValueError(f"{path}: no bins")
    return EmpiricalVariogram(tuple(bins), sum(b.pair_count for b in bins), 0)


def model_to_text(m: SphericalModel) -> str:
    return (f"nugget={_fmt(m.nugget)}\npartial_sill={_fmt(m.partial_sill)}\n"
            f"range_km={_fmt(m.range_km)}\nobjective={_fmt(m.objective)}\n")


def write_model(m: SphericalModel, path) -> None:
    Path(path).write_text(model_to_text(m), encoding="utf-8")


def read_model(path) -> SphericalModel:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        values[key.strip()] = float(val)
    missing = {"nugget", "partial_sill", "range_km"} - values.keys()
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")
    return SphericalModel(values["nugget"], values["partial_sill"], values["range_km"],
                          objective=values.get("objective", math.nan))
