"""Contrastive training: InfoNCE, variogram-reweighted InfoNCE, queue and Adam."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .encoders import DualEncoder, save_checkpoint
from .evalretrieval import EvalReport, build_gallery, evaluate_encoder
from .reweighting import ReweightConfig, pair_terms

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    queue_capacity: int = 1024
    augmentations: int = 2
    tau: float = 0.07
    reweight: ReweightConfig | None = None
    augment_noise_sigma: float = 0.01

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.augmentations < 1:
            raise ValueError("augmentations must be >= 1")
        if self.queue_capacity < 0:
            raise ValueError("queue_capacity must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# losses

def _logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))).squeeze(axis)


def reweighted_info_nce(v, l_pos, negs, weights, tau: float) -> float:
    """Single-anchor loss with each negative logit multiplied by its weight."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty embedding")
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, v.size)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != len(negs):
        raise ValueError(f"{len(weights)} weights for {len(negs)} negatives")
    pos = float(v @ np.asarray(l_pos, dtype=np.float64)) / tau
    logits = np.concatenate([[pos], weights * ((negs @ v) / tau)])
    return float(_logsumexp(logits) - pos)


def info_nce(v, l_pos, negs, tau: float) -> float:
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, np.asarray(v).size)
    return reweighted_info_nce(v, l_pos, negs, np.ones(len(negs)), tau)


def batch_loss(anchors, candidates, pos_index, weights, tau):
    """Mean reweighted InfoNCE over anchors and its gradients.

    ``candidates`` holds every location embedding in play; anchor ``a`` uses
    column ``pos_index[a]`` as positive and all other columns as negatives
    with ``weights[a]`` multiplying the negative logits.  Returns
    ``(loss, d_anchors, d_candidates)``; weights are constants.
    """
    n_anchor = len(anchors)
    rows = np.arange(n_anchor)
    sims = anchors @ candidates.T / tau
    w = np.array(weights, dtype=np.float64, copy=True)
    w[rows, pos_index] = 1.0
    z = w * sims
    lse = _logsumexp(z, axis=1)
    losses = lse - z[rows, pos_index]
    p = np.exp(z - lse[:, None])
    dz = p
    dz[rows, pos_index] -= 1.0
    dsims = dz * w / n_anchor
    d_anchors = dsims @ candidates / tau
    d_candidates = dsims.T @ anchors / tau
    return float(np.mean(losses)), d_anchors, d_candidates


# ---------------------------------------------------------------------------
# state

class NegativeQueue:
    """FIFO of frozen features and coordinates; embeddings are recomputed on use."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.features = np.zeros((0, dim), dtype=np.float64)
        self.lat = np.zeros(0)
        self.lon = np.zeros(0)

    def __len__(self):
        return len(self.lat)

    def push(self, features, lat, lon) -> None:
        if self.capacity == 0:
            return
        k = self.capacity
        self.features = np.concatenate([self.features, features])[-k:]
        self.lat = np.concatenate([self.lat, lat])[-k:]
        self.lon = np.concatenate([self.lon, lon])[-k:]


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class StepReport:
    step: int
    loss: float
    mean_weight: float
    max_weight: float
    hard_count: int
    false_count: int
    n_negatives: int


@dataclass
class TrainState:
    cfg: TrainConfig
    encoder: DualEncoder
    optimizer: Adam
    queue: NegativeQueue
    rng: np.random.Generator
    step: int = 0
    samples_seen: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig, encoder: DualEncoder, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        encoder.tau = cfg.tau
        return cls(cfg, encoder, Adam(cfg.learning_rate), NegativeQueue(cfg.queue_capacity,
                   encoder.dims.d_in), rng)


def augment(features: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise followed by renormalisation."""
    noisy = features + sigma * rng.standard_normal(features.shape)
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def batch_weights(cfg: TrainConfig, feats, lat, lon, cand_feats, cand_lat, cand_lon):
    """Weights and class codes for batch anchors against all candidates."""
    b, n = len(feats), len(cand_lat)
    if cfg.reweight is None:
        return np.ones((b, n)), np.zeros((b, n), dtype=np.int8)
    terms = pair_terms(cfg.reweight, feats, lat, lon, cand_feats, cand_lat, cand_lon)
    return terms.weight, terms.cls


def step_loss(state: TrainState, feats, lat, lon, views=None):
    """Forward pass for one batch: loss, gradients and bookkeeping.

    ``views`` are the augmented feature copies; drawn from the state rng
    when omitted.  Does not update parameters or the queue.
    """
    cfg = state.cfg
    enc = state.encoder
    b = len(lat)
    if views is None:
        views = [augment(feats, cfg.augment_noise_sigma, state.rng) for _ in range(cfg.augmentations)]
    q = state.queue
    cand_feats = np.concatenate([feats, q.features])
    cand_lat = np.concatenate([lat, q.lat])
    cand_lon = np.concatenate([lon, q.lon])
    weights, cls = batch_weights(cfg, feats, lat, lon, cand_feats, cand_lat, cand_lon)
    p = len(views)
    anchors = enc.forward_image(np.concatenate(views))
    candidates = enc.forward_location(cand_lat, cand_lon)
    pos = np.tile(np.arange(b), p)
    loss, d_anchors, d_cand = batch_loss(anchors, candidates, pos, np.tile(weights, (p, 1)), cfg.tau)
    grads = enc.backward(d_anchors, d_cand)
    neg_mask = np.ones(weights.shape, dtype=bool)
    neg_mask[np.arange(b), np.arange(b)] = False
    return loss, grads, weights[neg_mask], cls[neg_mask]


def train_step(state: TrainState, batch: Dataset) -> StepReport:
    if len(batch) < 2:
        raise ValueError("a step needs at least 2 samples")
    feats = batch.features.astype(np.float64)
    loss, grads, w, cls = step_loss(state, feats, batch.lat, batch.lon)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    state.optimizer.step(dict(state.encoder.named_params()), grads)
    state.queue.push(feats, batch.lat, batch.lon)
    state.samples_seen += len(batch)
    report = StepReport(state.step, loss, float(w.mean()), float(w.max()),
                        int(np.sum(cls == 1)), int(np.sum(cls == 2)), w.size // len(batch))
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    mean_weight: float
    hard_count: int
    false_count: int
    val: EvalReport | None = None

    def row(self) -> list[str]:
        accs = ["", "", ""] if self.val is None else [
            repr(self.val.acc25), repr(self.val.acc200), repr(self.val.acc750)]
        return [str(self.epoch), repr(self.mean_loss), repr(self.mean_weight),
                str(self.hard_count), str(self.false_count), *accs]


EPOCH_LOG_HEADER = ["epoch", "mean_loss", "mean_weight", "hard_count", "false_count",
                    "val_acc25", "val_acc200", "val_acc750"]


def epoch_log_csv(reports: list[EpochReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EPOCH_LOG_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


@dataclass
class TrainResult:
    encoder: DualEncoder
    epochs: list[EpochReport] = field(default_factory=list)
    steps: list[StepReport] = field(default_factory=list)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = perm[s:s + batch_size]
        if len(idx) >= 2:
            yield idx


def train(cfg: TrainConfig, train_set: Dataset, encoder: DualEncoder, val_set: Dataset | None = None,
          checkpoint_every: int = 0, checkpoint_dir=None, on_epoch=None) -> TrainResult:
    """Train in place and return the encoder with per-epoch and per-step reports.

    Batch order and augmentation noise come from independent streams of
    ``cfg.seed``, so a run is reproducible bit for bit.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if encoder.dims.d_in != train_set.dim:
        raise ValueError(f"encoder expects {encoder.dims.d_in} features, dataset has {train_set.dim}")
    shuffle_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    state = TrainState.create(cfg, encoder, np.random.default_rng(noise_seq))
    result = TrainResult(encoder)
    for epoch in range(1, cfg.epochs + 1):
        steps = [train_step(state, train_set.subset(idx))
                 for idx in iterate_batches(len(train_set), cfg.batch_size, shuffle_rng)]
        result.steps.extend(steps)
        val = None
        if val_set is not None and len(val_set):
            gallery = build_gallery((train_set.lat, train_set.lon), encoder)
            val = evaluate_encoder(encoder, gallery, val_set.features, val_set.lat, val_set.lon)
        rep = EpochReport(epoch, float(np.mean([s.loss for s in steps])),
                          float(np.mean([s.mean_weight for s in steps])),
                          sum(s.hard_count for s in steps), sum(s.false_count for s in steps), val)
        result.epochs.append(rep)
        log.info("epoch %d loss %.5f mean weight %.4f hard %d false %d%s", epoch, rep.mean_loss,
                 rep.mean_weight, rep.hard_count, rep.false_count, "" if val is None else " " + val.text())
        if checkpoint_every and checkpoint_dir is not None and epoch % checkpoint_every == 0:
            save_checkpoint(encoder, Path(checkpoint_dir) / f"epoch{epoch:04d}.gckpt")
        if on_epoch is not None:
            on_epoch(rep)
    return result
