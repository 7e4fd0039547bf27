"""Optimisation loop for the siamese network and the supervised baseline.

SGD with momentum and L2 weight decay; the learning rate decays
geometrically per epoch from ``lr_start`` to ``lr_end``. Training stops at
``epochs`` or once the validation loss has not improved for
``early_stop_patience`` epochs, and the best-validation parameters are
returned.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoder import EncoderConfig, HeadConfig, ModelParams, encoder_backward, encoder_forward, params_init
from .mining import PairSet, TrainingPair
from .siamese import bce_with_logits, siamese_logits, siamese_loss_and_grads

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    momentum: float = 0.91
    weight_decay: float = 1e-5
    lr_start: float = 1e-2
    lr_end: float = 1e-8
    early_stop_patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.weight_decay < 0 or self.early_stop_patience < 1:
            raise ValueError("weight_decay must be >= 0 and patience >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    train_accuracy: float | None = None


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def to_ndjson(self) -> str:
        lines = []
        for r in self.records:
            d = {k: v for k, v in asdict(r).items() if v is not None}
            lines.append(json.dumps(d, sort_keys=True))
        lines.append(json.dumps({"best_epoch": self.best_epoch, "stop_reason": self.stop_reason}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        if not self.records:
            return "no epochs run"
        best = self.records[self.best_epoch]
        return (f"{len(self.records)} epochs ({self.stop_reason}); best epoch {best.epoch} "
                f"val_loss={best.val_loss:.6f} train_loss={best.train_loss:.6f}")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch == 0 or cfg.epochs == 1:
        return cfg.lr_start
    if epoch == cfg.epochs - 1:
        return cfg.lr_end
    lo, hi = math.log10(cfg.lr_start), math.log10(cfg.lr_end)
    return 10 ** (lo + (hi - lo) * epoch / (cfg.epochs - 1))


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             velocity: dict, lr: float, cfg: TrainConfig):
    """In-place ``v <- m*v - lr*(g + wd*w); w <- w + v``. Returns (params, velocity)."""
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter tensor {name!r}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= cfg.momentum
        v -= lr * (g + cfg.weight_decay * w)
        w += v
    return params, velocity


def adam_step(params, grads, state: dict, lr: float, cfg: TrainConfig,
              beta2: float = 0.999, eps: float = 1e-8):
    """Adam with L2 weight decay; ``momentum`` is used as beta1."""
    step = state["_t"] = state.get("_t", 0) + 1
    b1 = cfg.momentum
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter tensor {name!r}")
        g = g + cfg.weight_decay * w
        m = state.setdefault(("m", name), np.zeros_like(w))
        s = state.setdefault(("s", name), np.zeros_like(w))
        m *= b1
        m += (1 - b1) * g
        s *= beta2
        s += (1 - beta2) * g * g
        w -= (lr * (m / (1 - b1 ** step)) / (np.sqrt(s / (1 - beta2 ** step)) + eps)).astype(w.dtype)
    return params, state


def _step(cfg: TrainConfig):
    return sgd_step if cfg.optimizer == "sgd" else adam_step


class ImageBank:
    """Images addressable by id, stacked into one ``(N, H, W, C)`` array."""

    def __init__(self, ids: Sequence[str], images: np.ndarray):
        if len(ids) != images.shape[0]:
            raise ValueError("ids and images differ in length")
        self.ids = list(ids)
        self.images = images
        self.index = {i: n for n, i in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate image ids")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, np.ndarray]) -> "ImageBank":
        ids = sorted(mapping)
        return cls(ids, np.stack([mapping[i] for i in ids]))

    def lookup(self, ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in ids if i not in self.index]
        if missing:
            raise KeyError(f"{len(missing)} pair ids have no image, e.g. {missing[0]!r}")
        return np.fromiter((self.index[i] for i in ids), dtype=np.int64, count=len(ids))


def _batched_loss(params, images, ia, ib, y, batch_size) -> float:
    total = 0.0
    for s in range(0, len(y), batch_size):
        logits = siamese_logits(params, images[ia[s:s + batch_size]], images[ib[s:s + batch_size]])
        total += bce_with_logits(logits, y[s:s + batch_size])[0] * len(logits)
    return total / len(y)


def train_pairs(params: ModelParams, images: np.ndarray, ia: np.ndarray, ib: np.ndarray,
                labels: np.ndarray, cfg: TrainConfig,
                on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train on index pairs into ``images``; returns (best params, TrainLog)."""
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty pair set")
    labels = np.asarray(labels, dtype=images.dtype)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
    val, train = perm[:n_val], np.sort(perm[n_val:])

    step = _step(cfg)
    state: dict = {}
    log = TrainLog()
    best_loss, best_params, wait = math.inf, params.copy(), 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(train)
        running = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss, grads = siamese_loss_and_grads(params, images[ia[b]], images[ib[b]], labels[b])
            step(params.tensors, grads, state, lr, cfg)
            running += loss * len(b)
        train_loss = running / len(order)
        if not params.all_finite():
            raise FloatingPointError(f"parameters became non-finite in epoch {epoch}")
        if n_val:
            val_loss = _batched_loss(params, images, ia[val], ib[val], labels[val], 256)
        else:
            val_loss = train_loss
        rec = EpochRecord(epoch, lr, train_loss, val_loss)
        log.records.append(rec)
        logger.info("epoch %d lr=%.3g train=%.5f val=%.5f", epoch, lr, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_loss:
            best_loss, best_params, wait = val_loss, params.copy(), 0
            log.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.early_stop_patience:
                log.stop_reason = "early_stop"
                break
    else:
        log.stop_reason = "max_epochs"
    return best_params, log


def train_siamese(pairs: PairSet | Sequence[TrainingPair], images: ImageBank | Mapping[str, np.ndarray],
                  cfg: TrainConfig = TrainConfig(), encoder: EncoderConfig = EncoderConfig(),
                  head: HeadConfig = HeadConfig(), params: ModelParams | None = None,
                  on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train the siamese scorer on mined pairs.

    Every pair id must resolve to an image in ``images``; this is checked
    before any computation. Returns ``(params, TrainLog)``.
    """
    pair_list = list(pairs)
    if not pair_list:
        raise ValueError("cannot train on an empty pair set")
    bank = images if isinstance(images, ImageBank) else ImageBank.from_mapping(images)
    ia = bank.lookup([p.anchor_id for p in pair_list])
    ib = bank.lookup([p.partner_id for p in pair_list])
    labels = np.array([p.label for p in pair_list])
    if params is None:
        params = params_init(encoder, head)
    return train_pairs(params, bank.images.astype(params["fc1.W"].dtype, copy=False),
                       ia, ib, labels, cfg, on_epoch)


def _softmax_ce(logits: np.ndarray, targets: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), targets], dtype=np.float64))
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1
    return loss, grad / n, logp.argmax(axis=1)


def baseline_loss_and_grads(params: ModelParams, images: np.ndarray, targets: np.ndarray):
    emb, cache = encoder_forward(params, images, return_cache=True)
    logits = emb @ params["cls.W"] + params["cls.b"]
    loss, dlogits, pred = _softmax_ce(logits, targets)
    grads = {"cls.W": emb.T @ dlogits, "cls.b": dlogits.sum(axis=0)}
    encoder_backward(params, cache, dlogits @ params["cls.W"].T, grads)
    return loss, grads, pred


def train_baseline(images: np.ndarray, labels: Sequence, cfg: TrainConfig = TrainConfig(),
                   encoder: EncoderConfig = EncoderConfig(),
                   on_epoch: Callable[[EpochRecord], None] | None = None):
    """Supervised comparison system: encoder + softmax over identities.

    Identities are mapped to class indices in sorted order. Stops early when
    the training loss stalls for ``early_stop_patience`` epochs. Returns
    ``(params, TrainLog, classes)``.
    """
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("the supervised baseline needs at least 2 identities")
    lookup = {c: i for i, c in enumerate(classes)}
    targets = np.array([lookup[c] for c in labels])
    params = params_init(encoder, HeadConfig(kind="classifier", num_classes=len(classes)))
    images = images.astype(params["fc1.W"].dtype, copy=False)

    rng = np.random.default_rng(cfg.seed)
    step = _step(cfg)
    state: dict = {}
    log = TrainLog()
    best, wait = math.inf, 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(targets))
        running, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss, grads, pred = baseline_loss_and_grads(params, images[b], targets[b])
            step(params.tensors, grads, state, lr, cfg)
            running += loss * len(b)
            correct += int(np.sum(pred == targets[b]))
        train_loss = running / len(order)
        rec = EpochRecord(epoch, lr, train_loss, train_loss, correct / len(order))
        log.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if train_loss < best:
            best, wait, log.best_epoch = train_loss, 0, epoch
        else:
            wait += 1
            if wait >= cfg.early_stop_patience:
                log.stop_reason = "early_stop"
                break
    else:
        log.stop_reason = "max_epochs"
    return params, log, classes
