"""Coordinates, great-circle distance and the Equal Earth projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0088

# Equal Earth polynomial coefficients (Savric, Patterson & Jenny 2018)
EE_A1 = 1.340264
EE_A2 = -0.081106
EE_A3 = 0.000893
EE_A4 = 0.003796
EE_M = math.sqrt(3.0) / 2.0


def _wrap_lon(lon: float) -> float:
    if -180.0 <= lon <= 180.0:
        return lon
    wrapped = math.fmod(lon + 180.0, 360.0)
    if wrapped < 0.0:
        wrapped += 360.0
    return wrapped - 180.0


@dataclass(frozen=True)
class GeoCoord:
    """Latitude/longitude in degrees.

    Longitudes outside [-180, 180] are wrapped, so ``GeoCoord(0, 190)``
    equals ``GeoCoord(0, -170)``. Latitudes outside [-90, 90] and
    non-finite values are rejected.
    """

    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", _wrap_lon(lon))


@dataclass(frozen=True)
class ProjectedPoint:
    x: float
    y: float


def haversine_array(lat1, lon1, lat2, lon2):
    """Vectorised great-circle distance in km; inputs in degrees, broadcastable."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    h = np.sin(dphi * 0.5) ** 2 + (np.cos(p1) * np.cos(p2)) * np.sin(dlam * 0.5) ** 2
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(h), np.sqrt(1.0 - h))


def haversine_km(a: GeoCoord, b: GeoCoord) -> float:
    """Great-circle distance between two coordinates in kilometres."""
    return float(haversine_array(a.lat, a.lon, b.lat, b.lon))


def pairwise_haversine(lat_a, lon_a, lat_b, lon_b):
    """Distance matrix of shape (len(a), len(b))."""
    lat_a = np.asarray(lat_a, dtype=np.float64)[:, None]
    lon_a = np.asarray(lon_a, dtype=np.float64)[:, None]
    lat_b = np.asarray(lat_b, dtype=np.float64)[None, :]
    lon_b = np.asarray(lon_b, dtype=np.float64)[None, :]
    return haversine_array(lat_a, lon_a, lat_b, lon_b)


def equal_earth_array(lat, lon):
    """Equal Earth projection on the unit sphere; returns (x, y) arrays."""
    phi = np.radians(np.asarray(lat, dtype=np.float64))
    lam = np.radians(np.asarray(lon, dtype=np.float64))
    theta = np.arcsin(EE_M * np.sin(phi))
    t2 = theta * theta
    t6 = t2 * t2 * t2
    y = theta * (EE_A1 + EE_A2 * t2 + t6 * (EE_A3 + EE_A4 * t2))
    denom = 3.0 * (EE_A1 + 3.0 * EE_A2 * t2 + t6 * (7.0 * EE_A3 + 9.0 * EE_A4 * t2))
    x = 2.0 * math.sqrt(3.0) * lam * np.cos(theta) / denom
    return x, y


def equal_earth_project(g: GeoCoord) -> ProjectedPoint:
    x, y = equal_earth_array(g.lat, g.lon)
    return ProjectedPoint(float(x), float(y))
