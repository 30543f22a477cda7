"""Deviation from the fitted variogram and the hard/false-negative weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geodesy import GeoCoord, haversine_array, haversine_km
from .semivariogram import (SphericalModel, cosine_distance, cosine_distance_matrix,
                            evaluate_spherical_array)

W_MIN = 0.05
W_MAX = 20.0

HARD, FALSE, NEUTRAL = "hard", "false", "neutral"


@dataclass(frozen=True)
class ReweightConfig:
    model: SphericalModel
    s1: float = 0.5
    s2: float = 0.5
    theta1_km: float | None = None  # None -> the model's range
    theta2_km: float = 25.0
    delta_scale: int = 2
    clamp: tuple[float, float] = (W_MIN, W_MAX)

    def __post_init__(self):
        if self.theta1_km is None:
            object.__setattr__(self, "theta1_km", float(self.model.range_km))
        if not (self.s1 > 0 and self.s2 > 0):
            raise ValueError("s1 and s2 must be > 0")
        if self.theta2_km > self.theta1_km:
            raise ValueError(f"theta2 ({self.theta2_km}) must not exceed theta1 ({self.theta1_km})")
        if self.delta_scale not in (1, 2):
            raise ValueError("delta_scale must be 1 or 2")


def deviation_array(cfg: ReweightConfig, d_cos, d_km) -> np.ndarray:
    """Observed cosine distance minus the expected one at that lag."""
    return np.asarray(d_cos, dtype=np.float64) - cfg.delta_scale * evaluate_spherical_array(cfg.model, d_km)


def deviation(cfg: ReweightConfig, d_cos_ij: float, d_km: float) -> float:
    return float(deviation_array(cfg, d_cos_ij, d_km))


def classify_array(cfg: ReweightConfig, delta, d_km) -> np.ndarray:
    """0 = neutral, 1 = hard negative, 2 = false negative."""
    delta = np.asarray(delta, dtype=np.float64)
    d_km = np.asarray(d_km, dtype=np.float64)
    neg = delta < 0
    out = np.zeros(np.broadcast(delta, d_km).shape, dtype=np.int8)
    out[neg & (d_km > cfg.theta1_km)] = 1
    out[neg & (d_km < cfg.theta2_km)] = 2
    return out


def weight_array(cfg: ReweightConfig, delta, d_km, clamp: bool = True) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    cls = classify_array(cfg, delta, d_km)
    w = np.ones(cls.shape)
    hard = cls == 1
    false = cls == 2
    delta = np.broadcast_to(delta, cls.shape)
    w[hard] = np.exp(-delta[hard] / cfg.s1)
    w[false] = np.exp(delta[false] / cfg.s2)
    if clamp:
        w = np.clip(w, *cfg.clamp)
    return w


def weight(cfg: ReweightConfig, delta: float, d_km: float, clamp: bool = True) -> float:
    """Weight for one negative: above 1 for hard, below 1 for false negatives."""
    return float(weight_array(cfg, np.array([delta]), np.array([d_km]), clamp)[0])


def class_name(code: int) -> str:
    return (NEUTRAL, HARD, FALSE)[int(code)]


@dataclass
class PairTerms:
    d_km: np.ndarray
    d_cos: np.ndarray
    expected: np.ndarray
    delta: np.ndarray
    weight: np.ndarray
    cls: np.ndarray


def pair_terms(cfg: ReweightConfig, feats_a, lat_a, lon_a, feats_b, lat_b, lon_b,
               clamp: bool = True) -> PairTerms:
    """All intermediate quantities for every (anchor, negative) pair."""
    lat_a = np.asarray(lat_a, dtype=np.float64)[:, None]
    lon_a = np.asarray(lon_a, dtype=np.float64)[:, None]
    lat_b = np.asarray(lat_b, dtype=np.float64)[None, :]
    lon_b = np.asarray(lon_b, dtype=np.float64)[None, :]
    d_km = haversine_array(lat_a, lon_a, lat_b, lon_b)
    d_cos = cosine_distance_matrix(feats_a, feats_b)
    expected = cfg.delta_scale * evaluate_spherical_array(cfg.model, d_km)
    delta = d_cos - expected
    return PairTerms(d_km, d_cos, expected, delta, weight_array(cfg, delta, d_km, clamp),
                     classify_array(cfg, delta, d_km))



def pair_terms_rows(cfg: ReweightConfig, feats, lat, lon, i, j, clamp: bool = True) -> PairTerms:
    """Terms for the aligned pairs ``(i[k], j[k])`` of one record set."""
    feats = np.asarray(feats, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    d_km = haversine_array(lat[i], lon[i], lat[j], lon[j])
    norms = np.sqrt((feats * feats).sum(axis=-1))
    if np.any(norms == 0):
        raise ValueError("cosine distance undefined for a zero-norm vector")
    d_cos = 1.0 - (feats[i] * feats[j]).sum(axis=-1) / (norms[i] * norms[j])
    expected = cfg.delta_scale * evaluate_spherical_array(cfg.model, d_km)
    delta = d_cos - expected
    return PairTerms(d_km, d_cos, expected, delta, weight_array(cfg, delta, d_km, clamp),
                     classify_array(cfg, delta, d_km))


def weight_matrix(cfg: ReweightConfig, anchors, negatives) -> np.ndarray:
    """Weights for lists of ``(features, GeoCoord)`` anchors and negatives."""
    fa = np.array([np.asarray(f, dtype=np.float64) for f, _ in anchors])
    fb = np.array([np.asarray(f, dtype=np.float64) for f, _ in negatives])
    ga = [g for _, g in anchors]
    gb = [g for _, g in negatives]
    if fa.shape[1] != fb.shape[1]:
        raise ValueError("anchor and negative feature dimensions differ")
    return pair_terms(cfg, fa, [g.lat for g in ga], [g.lon for g in ga],
                      fb, [g.lat for g in gb], [g.lon for g in gb]).weight


def scalar_weight(cfg: ReweightConfig, fa, ga: GeoCoord, fb, gb: GeoCoord) -> float:
    """Scalar composition used to cross-check ``weight_matrix``."""
    d = haversine_km(ga, gb)
    return weight(cfg, deviation(cfg, cosine_distance(fa, fb), d), d)
