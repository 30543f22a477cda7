"""Dual encoder: image-feature projection head and multi-scale RFF location encoder.

Everything is plain numpy in float64 with hand-written reverse mode.  A
forward pass records its activations on the encoder; ``backward`` consumes
them and returns gradients keyed by parameter name.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .geodesy import GeoCoord, equal_earth_array

EEP_SCALE = 1.0 / 2.7
NORM_EPS = 1e-12

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return x * _normal_cdf(x)


def _normal_cdf(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x, cdf=None):
    if cdf is None:
        cdf = _normal_cdf(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def l2_normalize(x):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + NORM_EPS)
    return x / norm, norm


def l2_normalize_backward(y, norm, dy):
    return (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / norm


class Mlp:
    """Dense layers with GELU between them (none after the last)."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("layer sizes do not chain")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "Mlp":
        weights = [rng.standard_normal((a, b)) / math.sqrt(a) for a, b in zip(sizes, sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"W{i}", w
            yield f"b{i}", b

    def forward(self, x):
        pre = []
        inputs = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                cdf = _normal_cdf(z)
                pre.append((z, cdf))
                h = z * cdf
            else:
                h = z
        return h, (inputs, pre)

    def backward(self, cache, dy):
        inputs, pre = cache
        grads = {}
        g = dy
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * gelu_grad(*pre[i])
            grads[f"W{i}"] = inputs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


@dataclass
class RffScale:
    sigma: float
    projection: np.ndarray  # (F, 2), frozen

    def features(self, x):
        z = 2.0 * math.pi * (x @ self.projection.T)
        return np.concatenate([np.cos(z), np.sin(z)], axis=-1)


def default_sigmas(m: int) -> np.ndarray:
    """``m`` dyadic frequency scales spanning 2**0 .. 2**8."""
    if m == 1:
        return np.array([1.0])
    return 2.0 ** np.linspace(0.0, 8.0, m)


@dataclass(frozen=True)
class EncoderDims:
    d_in: int = 32
    hidden: int = 64
    d_emb: int = 16
    n_scales: int = 9
    n_fourier: int = 16


def project_locations(lat, lon) -> np.ndarray:
    """Equal Earth coordinates scaled to roughly [-1, 1]^2, shape (n, 2)."""
    x, y = equal_earth_array(lat, lon)
    return np.stack([np.atleast_1d(x), np.atleast_1d(y)], axis=-1) * EEP_SCALE


class DualEncoder:
    def __init__(self, image_head: Mlp, scales: list[RffScale], location_heads: list[Mlp],
                 tau: float = 0.07):
        if not tau > 0:
            raise ValueError("tau must be > 0")
        if len(scales) != len(location_heads) or not scales:
            raise ValueError("need one location head per RFF scale")
        d_emb = image_head.sizes[-1]
        for s, head in zip(scales, location_heads):
            if head.sizes[-1] != d_emb:
                raise ValueError("all heads must share the embedding dimension")
            if head.sizes[0] != 2 * s.projection.shape[0]:
                raise ValueError("location head input must be 2 * n_fourier")
        self.image_head = image_head
        self.scales = scales
        self.location_heads = location_heads
        self.tau = float(tau)
        self._image_cache = None
        self._location_cache = None

    @classmethod
    def init(cls, dims: EncoderDims = EncoderDims(), seed: int = 0, tau: float = 0.07) -> "DualEncoder":
        rng = np.random.default_rng(seed)
        image_head = Mlp.init([dims.d_in, dims.hidden, dims.d_emb], rng)
        scales = [RffScale(float(s), rng.standard_normal((dims.n_fourier, 2)) * s)
                  for s in default_sigmas(dims.n_scales)]
        heads = [Mlp.init([2 * dims.n_fourier, dims.hidden, dims.d_emb], rng)
                 for _ in range(dims.n_scales)]
        return cls(image_head, scales, heads, tau)

    @property
    def dims(self) -> EncoderDims:
        return EncoderDims(self.image_head.sizes[0], self.image_head.sizes[1], self.image_head.sizes[-1],
                           len(self.scales), self.scales[0].projection.shape[0])

    def named_params(self):
        """Trainable parameters in declaration order (arrays are live views)."""
        for name, p in self.image_head.params():
            yield f"image.{name}", p
        for k, head in enumerate(self.location_heads):
            for name, p in head.params():
                yield f"loc{k}.{name}", p

    def copy(self) -> "DualEncoder":
        return DualEncoder(
            Mlp([w.copy() for w in self.image_head.weights], [b.copy() for b in self.image_head.biases]),
            [RffScale(s.sigma, s.projection.copy()) for s in self.scales],
            [Mlp([w.copy() for w in h.weights], [b.copy() for b in h.biases]) for h in self.location_heads],
            self.tau)

    # -- forward -----------------------------------------------------------

    def forward_image(self, features):
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.image_head.sizes[0]:
            raise ValueError(f"expected {self.image_head.sizes[0]} input features, got {x.shape[1]}")
        h, cache = self.image_head.forward(x)
        y, norm = l2_normalize(h)
        self._image_cache = (cache, y, norm)
        return y

    def forward_location(self, lat, lon):
        x = project_locations(lat, lon)
        total = 0.0
        caches = []
        for scale, head in zip(self.scales, self.location_heads):
            out, cache = head.forward(scale.features(x))
            caches.append(cache)
            total = total + out
        y, norm = l2_normalize(total)
        self._location_cache = (caches, y, norm)
        return y

    def forward(self, features, lat, lon):
        return self.forward_image(features), self.forward_location(lat, lon)

    # -- backward ----------------------------------------------------------

    def backward(self, d_image=None, d_location=None) -> dict[str, np.ndarray]:
        """Gradients of all trainable parameters given output gradients.

        Consumes the activations recorded by the last forward pass of each
        branch; parameters of a branch without an output gradient get zeros.
        """
        grads = {name: np.zeros_like(p) for name, p in self.named_params()}
        if d_image is not None:
            if self._image_cache is None:
                raise RuntimeError("backward called without a recorded image forward pass")
            cache, y, norm = self._image_cache
            dh = l2_normalize_backward(y, norm, np.asarray(d_image, dtype=np.float64))
            g, _ = self.image_head.backward(cache, dh)
            for name, v in g.items():
                grads[f"image.{name}"] = v
            self._image_cache = None
        if d_location is not None:
            if self._location_cache is None:
                raise RuntimeError("backward called without a recorded location forward pass")
            caches, y, norm = self._location_cache
            dsum = l2_normalize_backward(y, norm, np.asarray(d_location, dtype=np.float64))
            for k, (head, cache) in enumerate(zip(self.location_heads, caches)):
                g, _ = head.backward(cache, dsum)
                for name, v in g.items():
                    grads[f"loc{k}.{name}"] = v
            self._location_cache = None
        return grads


def encode_image(e: DualEncoder, features) -> np.ndarray:
    """Unit-norm embedding(s) of precomputed image features."""
    features = np.asarray(features, dtype=np.float64)
    out = e.forward_image(features)
    return out[0] if features.ndim == 1 else out


def encode_location(e: DualEncoder, g: GeoCoord) -> np.ndarray:
    return e.forward_location(np.array([g.lat]), np.array([g.lon]))[0]


def encode_locations(e: DualEncoder, lat, lon) -> np.ndarray:
    return e.forward_location(np.asarray(lat, dtype=np.float64), np.asarray(lon, dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"GCKP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIIIId")


def checkpoint_bytes(e: DualEncoder) -> bytes:
    d = e.dims
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, d.d_in, d.hidden, d.d_emb,
                               d.n_scales, d.n_fourier, e.tau)]
    for s in e.scales:
        parts.append(struct.pack("<d", s.sigma))
        parts.append(np.ascontiguousarray(s.projection, dtype="<f8").tobytes())
    for _, p in e.named_params():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def encoder_from_bytes(buf: bytes) -> DualEncoder:
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < _CKPT_HEADER.size:
        raise ValueError("truncated checkpoint header")
    _, version, d_in, hidden, d_emb, m, f, tau = _CKPT_HEADER.unpack_from(buf, 0)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = _CKPT_HEADER.size

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(buf):
            raise ValueError(f"truncated checkpoint at byte {pos}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
        return arr

    scales = []
    for _ in range(m):
        sigma = float(take((1,))[0])
        scales.append(RffScale(sigma, take((f, 2))))

    def mlp(sizes):
        ws, bs = [], []
        for a, b in zip(sizes, sizes[1:]):
            ws.append(take((a, b)))
            bs.append(take((b,)))
        return Mlp(ws, bs)

    image = mlp([d_in, hidden, d_emb])
    heads = [mlp([2 * f, hidden, d_emb]) for _ in range(m)]
    if pos != len(buf):
        raise ValueError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return DualEncoder(image, scales, heads, tau)


def save_checkpoint(e: DualEncoder, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(e))


def load_checkpoint(path) -> DualEncoder:
    return encoder_from_bytes(Path(path).read_bytes())
