"""GPS-gallery retrieval and accuracy at distance thresholds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import DualEncoder, encode_locations
from .geodesy import GeoCoord, haversine_array

THRESHOLDS_KM = (25.0, 200.0, 750.0)
_CHUNK = 128


@dataclass(frozen=True)
class GpsGallery:
    lat: np.ndarray
    lon: np.ndarray
    embeddings: np.ndarray

    def __len__(self):
        return len(self.lat)

    def coord(self, i: int) -> GeoCoord:
        return GeoCoord(self.lat[i], self.lon[i])


@dataclass(frozen=True)
class EvalReport:
    acc25: float
    acc200: float
    acc750: float
    n_queries: int
    median_error_km: float  # not one of the thresholded metrics; for regression tracking

    def as_row(self) -> dict:
        return {"val_acc25": self.acc25, "val_acc200": self.acc200, "val_acc750": self.acc750}

    def text(self) -> str:
        return (f"queries={self.n_queries} acc@25km={self.acc25:.4f} acc@200km={self.acc200:.4f} "
                f"acc@750km={self.acc750:.4f} median_error_km={self.median_error_km:.3f}")


def build_gallery(coords, encoder: DualEncoder) -> GpsGallery:
    """Gallery from a list of ``GeoCoord`` or a ``(lat, lon)`` pair of arrays."""
    if isinstance(coords, tuple) and len(coords) == 2 and not isinstance(coords[0], GeoCoord):
        lat, lon = (np.asarray(c, dtype=np.float64) for c in coords)
    else:
        coords = list(coords)
        lat = np.array([c.lat for c in coords], dtype=np.float64)
        lon = np.array([c.lon for c in coords], dtype=np.float64)
    if len(lat) == 0:
        raise ValueError("gallery needs at least one coordinate")
    emb = encode_locations(encoder, lat, lon)
    return GpsGallery(lat, lon, emb)


def similarities(gallery: GpsGallery, queries: np.ndarray) -> np.ndarray:
    """Dot products of each query with each gallery row.

    Reduced elementwise so equal gallery rows give equal scores.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return (q[:, None, :] * gallery.embeddings[None, :, :]).sum(axis=-1)


def predict_index(gallery: GpsGallery, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    idx = np.empty(len(q), dtype=np.int64)
    best = np.empty(len(q))
    for s in range(0, len(q), _CHUNK):
        sims = similarities(gallery, q[s:s + _CHUNK])
        # argmax returns the first maximum: ties go to the lowest index
        idx[s:s + _CHUNK] = np.argmax(sims, axis=1)
        best[s:s + _CHUNK] = sims[np.arange(len(sims)), idx[s:s + _CHUNK]]
    return idx, best


def predict(gallery: GpsGallery, query_embedding) -> tuple[GeoCoord, float]:
    idx, sim = predict_index(gallery, np.asarray(query_embedding)[None, :])
    return gallery.coord(int(idx[0])), float(sim[0])


def median(values: np.ndarray) -> float:
    s = np.sort(np.asarray(values, dtype=np.float64))
    n = len(s)
    mid = n // 2
    return float(s[mid]) if n % 2 else float(0.5 * (s[mid - 1] + s[mid]))


def report_from_errors(errors_km) -> EvalReport:
    errors_km = np.asarray(errors_km, dtype=np.float64)
    if len(errors_km) == 0:
        raise ValueError("no queries to evaluate")
    accs = [float(np.mean(errors_km <= t)) for t in THRESHOLDS_KM]
    return EvalReport(*accs, n_queries=len(errors_km), median_error_km=median(errors_km))


def evaluate(gallery: GpsGallery, query_embeddings, true_lat, true_lon) -> EvalReport:
    """Accuracy of nearest-embedding retrieval within 25/200/750 km."""
    q = np.atleast_2d(np.asarray(query_embeddings, dtype=np.float64))
    if len(q) == 0:
        raise ValueError("no queries to evaluate")
    idx, _ = predict_index(gallery, q)
    err = haversine_array(gallery.lat[idx], gallery.lon[idx],
                          np.asarray(true_lat, dtype=np.float64), np.asarray(true_lon, dtype=np.float64))
    return report_from_errors(err)


def evaluate_queries(gallery: GpsGallery, queries) -> EvalReport:
    """``queries`` is a sequence of ``(embedding, GeoCoord)``."""
    queries = list(queries)
    if not queries:
        raise ValueError("no queries to evaluate")
    emb = np.array([np.asarray(e, dtype=np.float64) for e, _ in queries])
    return evaluate(gallery, emb, [g.lat for _, g in queries], [g.lon for _, g in queries])


def evaluate_encoder(encoder: DualEncoder, gallery: GpsGallery, features, lat, lon) -> EvalReport:
    queries = encoder.forward_image(np.asarray(features, dtype=np.float64))
    return evaluate(gallery, queries, lat, lon)


def uniform_prediction_accuracy(gallery_lat, gallery_lon, query_lat, query_lon) -> tuple[float, ...]:
    """Expected accuracy when the prediction is a uniformly random gallery point."""
    d = haversine_array(np.asarray(query_lat)[:, None], np.asarray(query_lon)[:, None],
                        np.asarray(gallery_lat)[None, :], np.asarray(gallery_lon)[None, :])
    return tuple(float(np.mean(d <= t)) for t in THRESHOLDS_KM)
