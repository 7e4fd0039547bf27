"""Two-branch siamese scorer built on the shared encoder.

``score(a, b) = sigmoid(head(concat(enc(a), enc(b))))`` where ``head`` is
``FC -> ReLU -> FC(1)``. Concatenation is ordered, so the raw forward is not
symmetric; :func:`verification_score` averages both orders.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .encoder import ModelParams, encoder_backward, encoder_forward, relu_backward

BCE_EPS = 1e-7
SCORE_EPS = 1e-15


@dataclass(frozen=True)
class ScoredTrial:
    id_a: str
    id_b: str
    score: float
    label: Optional[int] = None

    def to_line(self) -> str:
        line = f"{self.id_a},{self.id_b},{self.score:.9g}"
        return line if self.label is None else f"{line},{self.label}"


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def head_forward(params: ModelParams, emb_a, emb_b):
    t = params.tensors
    cat = np.concatenate([emb_a, emb_b], axis=1)
    z = cat @ t["head1.W"] + t["head1.b"]
    h = np.maximum(z, 0)
    logit = (h @ t["head2.W"] + t["head2.b"])[:, 0]
    return logit, (cat, z, h)


def _check_pair(images_a, images_b):
    if images_a.shape != images_b.shape:
        raise ValueError(f"pair batches differ in shape: {images_a.shape} vs {images_b.shape}")


def siamese_logits(params: ModelParams, images_a, images_b):
    _check_pair(images_a, images_b)
    emb = encoder_forward(params, np.concatenate([images_a, images_b]))
    n = images_a.shape[0]
    return head_forward(params, emb[:n], emb[n:])[0]


def siamese_forward(params: ModelParams, images_a, images_b):
    """Match probabilities in (0, 1), one per pair."""
    return sigmoid(siamese_logits(params, images_a, images_b))


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy of probabilities, clamped to [eps, 1 - eps]."""
    s = np.clip(np.asarray(scores, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log1p(-s))))


def bce_with_logits(logits, labels):
    """Stable mean BCE from logits and its gradient with respect to the logits."""
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - y) / z.shape[0]
    return float(np.mean(per, dtype=np.float64)), grad


def siamese_loss_and_grads(params: ModelParams, images_a, images_b, labels):
    """BCE loss of a pair batch and gradients for every parameter tensor.

    Both branches run as one encoder batch; their gradients are summed into
    the shared encoder weights.
    """
    _check_pair(images_a, images_b)
    t = params.tensors
    n = images_a.shape[0]
    emb, cache = encoder_forward(params, np.concatenate([images_a, images_b]), return_cache=True)
    logit, (cat, z, h) = head_forward(params, emb[:n], emb[n:])
    loss, dlogit = bce_with_logits(logit, labels)

    grads = {}
    dlogit = dlogit[:, None]
    grads["head2.W"] = h.T @ dlogit
    grads["head2.b"] = dlogit.sum(axis=0)
    dz = relu_backward(dlogit @ t["head2.W"].T, z)
    grads["head1.W"] = cat.T @ dz
    grads["head1.b"] = dz.sum(axis=0)
    dcat = dz @ t["head1.W"].T
    d_emb = np.concatenate([dcat[:, :emb.shape[1]], dcat[:, emb.shape[1]:]])
    encoder_backward(params, cache, d_emb, grads)
    return loss, grads


def verification_score(params: ModelParams, images_a, images_b, batch_size: int = 256):
    """Order-free trial scores: mean of the forward pass over both orders."""
    _check_pair(images_a, images_b)
    out = []
    for start in range(0, images_a.shape[0], batch_size):
        a = images_a[start:start + batch_size]
        b = images_b[start:start + batch_size]
        emb = encoder_forward(params, np.concatenate([a, b]))
        ea, eb = emb[:a.shape[0]], emb[a.shape[0]:]
        fwd = sigmoid(head_forward(params, ea, eb)[0].astype(np.float64))
        rev = sigmoid(head_forward(params, eb, ea)[0].astype(np.float64))
        out.append((fwd + rev) / 2)
    if not out:
        return np.zeros(0)
    # keep scores strictly inside (0, 1) for downstream consumers
    return np.clip(np.concatenate(out), SCORE_EPS, 1 - SCORE_EPS)


def write_scores(trials: Iterable[ScoredTrial], path) -> None:
    Path(path).write_text("".join(t.to_line() + "\n" for t in trials), encoding="utf-8")


def read_scores(path) -> list[ScoredTrial]:
    trials = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        f = line.split(",")
        if len(f) not in (3, 4):
            raise ValueError(f"{path}:{n}: expected 3 or 4 fields")
        trials.append(ScoredTrial(f[0], f[1], float(f[2]), int(f[3]) if len(f) == 4 else None))
    return trials
