"""Geo-tagged embedding datasets: storage, loading, splitting and synthesis.

A dataset is held column-wise (ids, lat, lon, features) so the numeric
modules can work on whole arrays; iterating yields ``GeoTaggedEmbedding``
records in file order.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geodesy import GeoCoord, pairwise_haversine

log = logging.getLogger(__name__)

MAGIC = b"GEMB"
VERSION = 1
_HEADER = struct.Struct("<4sHQI")


class DatasetFormatError(ValueError):
    """Raised for unreadable ``.gemb`` or embedding-block files.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class GeoTaggedEmbedding:
    id: int
    coord: GeoCoord
    features: np.ndarray


@dataclass(eq=False)
class Dataset:
    ids: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    features: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.lat = np.ascontiguousarray(self.lat, dtype=np.float64)
        self.lon = np.ascontiguousarray(self.lon, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        n = len(self.ids)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.features.shape[1] < 2:
            raise ValueError(f"feature dimension must be >= 2, got {self.features.shape[1]}")
        if not (len(self.lat) == len(self.lon) == self.features.shape[0] == n):
            raise ValueError("column lengths differ")
        if n and len(np.unique(self.ids)) != n:
            raise ValueError("record ids are not unique")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature entries")
        if n and (np.any(np.abs(self.lat) > 90.0) or np.any(np.abs(self.lon) > 180.0)
                  or not np.all(np.isfinite(self.lat)) or not np.all(np.isfinite(self.lon))):
            raise ValueError("coordinates out of range")
        for arr in (self.ids, self.lat, self.lon, self.features):
            arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> GeoTaggedEmbedding:
        return GeoTaggedEmbedding(int(self.ids[i]), GeoCoord(self.lat[i], self.lon[i]),
                                  self.features[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        # name is metadata only and is not part of the wire format
        return (self.features.shape == other.features.shape
                and np.array_equal(self.ids, other.ids)
                and self.lat.tobytes() == other.lat.tobytes()
                and self.lon.tobytes() == other.lon.tobytes()
                and self.features.tobytes() == other.features.tobytes())

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.ids[index], self.lat[index], self.lon[index],
                       self.features[index], self.name)

    @classmethod
    def empty(cls, dim: int, name: str = "") -> "Dataset":
        return cls(np.zeros(0, np.uint64), np.zeros(0), np.zeros(0),
                   np.zeros((0, dim), np.float32), name)


# ---------------------------------------------------------------------------
# .gemb binary format

def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("lat", "<f8"), ("lon", "<f8"), ("f", "<f4", (dim,))])


def to_bytes(d: Dataset) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, len(d), d.dim)
    rec = np.empty(len(d), dtype=_record_dtype(d.dim))
    rec["id"] = d.ids
    rec["lat"] = d.lat
    rec["lon"] = d.lon
    rec["f"] = d.features
    return header + rec.tobytes()


def from_bytes(buf: bytes, name: str = "") -> Dataset:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than magic", len(buf))
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("truncated header", len(buf))
    _, version, count, dim = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if dim < 2:
        raise DimensionMismatchError(f"feature dimension {dim} < 2", 14)
    dt = _record_dtype(dim)
    body = len(buf) - _HEADER.size
    need = count * dt.itemsize
    if body < need:
        complete = body // dt.itemsize
        raise TruncatedFileError(
            f"expected {count} records of {dt.itemsize} bytes, file holds {complete}",
            _HEADER.size + complete * dt.itemsize)
    if body > need:
        raise DimensionMismatchError(
            f"{body - need} trailing bytes after {count} records of dim {dim}",
            _HEADER.size + need)
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    return Dataset(rec["id"].copy(), rec["lat"].copy(), rec["lon"].copy(),
                   rec["f"].reshape(count, dim).copy(), name)


def save_binary(d: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(d))


def load_binary(path) -> Dataset:
    path = Path(path)
    return from_bytes(path.read_bytes(), name=path.stem)


# ---------------------------------------------------------------------------
# CSV coordinates + raw embedding block

_BLOCK_HEADER = struct.Struct("<IQ")


def write_embedding_block(features: np.ndarray, path) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    count, dim = features.shape
    Path(path).write_bytes(_BLOCK_HEADER.pack(dim, count) + features.tobytes())


def read_embedding_block(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _BLOCK_HEADER.size:
        raise TruncatedFileError("truncated embedding block header", len(buf))
    dim, count = _BLOCK_HEADER.unpack_from(buf, 0)
    if dim < 2:
        raise DimensionMismatchError(f"embedding dimension {dim} < 2", 0)
    need = _BLOCK_HEADER.size + 4 * dim * count
    if len(buf) < need:
        raise TruncatedFileError(f"embedding block declares {count}x{dim} floats", len(buf))
    if len(buf) > need:
        raise DimensionMismatchError(f"{len(buf) - need} trailing bytes in embedding block", need)
    return np.frombuffer(buf, dtype="<f4", offset=_BLOCK_HEADER.size).reshape(count, dim).copy()


def load_csv(coords_path, embeddings_path, name: str = "") -> Dataset:
    """Join an ``id,lat,lon`` CSV with an embedding block by row order."""
    ids, lats, lons = [], [], []
    with open(coords_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "lat", "lon"]:
            raise ValueError(f"{coords_path}: expected header 'id,lat,lon', got {header}")
        for row_index, row in enumerate(reader):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"row {row_index}: expected 3 fields, got {len(row)}")
            try:
                rid = int(row[0])
                lat = float(row[1])
                lon = float(row[2])
            except ValueError as exc:
                raise ValueError(f"row {row_index}: unparsable number ({exc})") from None
            if rid < 0:
                raise ValueError(f"row {row_index}: negative id {rid}")
            if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
                raise ValueError(f"row {row_index}: latitude {lat} out of range")
            if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
                raise ValueError(f"row {row_index}: longitude {lon} out of range")
            ids.append(rid)
            lats.append(lat)
            lons.append(lon)
    feats = read_embedding_block(embeddings_path)
    if feats.shape[0] != len(ids):
        raise ValueError(f"row-count mismatch: {len(ids)} coordinates vs {feats.shape[0]} embeddings")
    return Dataset(np.array(ids, dtype=np.uint64), np.array(lats), np.array(lons), feats,
                   name or Path(coords_path).stem)


# ---------------------------------------------------------------------------
# splitting

def split_sizes(n: int, val_fraction: float) -> tuple[int, int]:
    """Validation size is n * val_fraction rounded half-up."""
    n_val = int(math.floor(n * val_fraction + 0.5))
    return n - n_val, n_val


def split(d: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_train, _ = split_sizes(len(d), val_fraction)
    perm = np.random.default_rng(seed).permutation(len(d))
    return d.subset(perm[:n_train]), d.subset(perm[n_train:])


# ---------------------------------------------------------------------------
# synthetic spatial Gaussian-process data

@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    dim: int = 32
    latent_dim: int = 8
    cov_range_km: float = 2000.0
    cov_sill: float = 1.0
    cov_nugget: float = 0.1
    seed: int = 0
    region: tuple[float, float, float, float] = (-30.0, 30.0, -30.0, 30.0)  # lat_min, lat_max, lon_min, lon_max
    name: str = field(default="synthetic", compare=False)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.cov_range_km > 0:
            raise ValueError("cov_range_km must be > 0")
        if self.cov_sill < 0 or self.cov_nugget < 0:
            raise ValueError("cov_sill and cov_nugget must be >= 0")
        lat0, lat1, lon0, lon1 = self.region
        if not (-90 <= lat0 < lat1 <= 90 and -180 <= lon0 < lon1 <= 180):
            raise ValueError(f"invalid region {self.region}")


class CovarianceError(np.linalg.LinAlgError):
    pass


def spherical_correlation(h, range_km):
    t = np.asarray(h, dtype=np.float64) / range_km
    return np.where(t < 1.0, 1.0 - 1.5 * t + 0.5 * t ** 3, 0.0)


def sample_region(rng: np.random.Generator, n: int, region) -> tuple[np.ndarray, np.ndarray]:
    """Points uniform by area inside a lat/lon box."""
    lat0, lat1, lon0, lon1 = region
    s0, s1 = np.sin(np.radians(lat0)), np.sin(np.radians(lat1))
    lat = np.degrees(np.arcsin(rng.uniform(s0, s1, n)))
    lon = rng.uniform(lon0, lon1, n)
    return lat, lon


def cholesky_with_jitter(k: np.ndarray, start=1e-10, max_jitter=1e-6) -> np.ndarray:
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(len(k)) if jitter else k)
        except np.linalg.LinAlgError:
            jitter = start if jitter == 0.0 else jitter * 2.0
            if jitter > max_jitter:
                raise CovarianceError(
                    f"covariance not positive definite with jitter up to {max_jitter:g}") from None
            log.debug("cholesky failed, retrying with jitter %g", jitter)


def latent_fields(spec: SyntheticSpec, lat, lon, rng: np.random.Generator) -> np.ndarray:
    """Draw ``latent_dim`` independent GP realisations at the given points."""
    d = pairwise_haversine(lat, lon, lat, lon)
    k = spec.cov_sill * spherical_correlation(d, spec.cov_range_km)
    k[np.diag_indices_from(k)] += spec.cov_nugget
    chol = cholesky_with_jitter(k)
    return chol @ rng.standard_normal((len(lat), spec.latent_dim))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Features from a spatially correlated Gaussian field, unit-normalised.

    Deterministic in ``spec.seed``.
    """
    if spec.cov_sill == 0 and spec.cov_nugget == 0:
        raise ValueError("zero-variance field: cov_sill and cov_nugget are both 0")
    rng = np.random.default_rng(spec.seed)
    lat, lon = sample_region(rng, spec.n, spec.region)
    z = latent_fields(spec, lat, lon, rng)
    mix = rng.standard_normal((spec.latent_dim, spec.dim)) / math.sqrt(spec.latent_dim)
    feats = z @ mix
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("generated a zero feature vector")
    feats = feats / norms
    return Dataset(np.arange(spec.n, dtype=np.uint64), lat, lon, feats.astype(np.float32), spec.name)
