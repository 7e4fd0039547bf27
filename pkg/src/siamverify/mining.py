"""Unsupervised positive/negative pair mining over two identity-disjoint stores.

Positives for an anchor ``x`` are its top-k cosine neighbours inside X (self
excluded); negatives are its top-k neighbours in Y. Each side then passes a
threshold test whose direction is configurable: ``"below"`` keeps
``score < t`` and ``"above"`` keeps ``score >= t``.

Top-k ordering everywhere is (score desc, id asc).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingStore, EmbeddingVector, cosine, normalize_rows

MODES = ("below", "above")
DEFAULT_BLOCK = 256


class MiningError(ValueError):
    pass


class PairFileError(MiningError):
    pass


@dataclass(frozen=True)
class MiningConfig:
    k: int = 10
    pos_threshold: float = 0.3
    neg_threshold: float = 0.1
    pos_mode: str = "below"
    neg_mode: str = "below"
    bidirectional: bool = False

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise MiningError(f"k must be a positive integer, got {self.k}")
        for name in ("pos_threshold", "neg_threshold"):
            t = getattr(self, name)
            if not -1.0 <= t <= 1.0:
                raise MiningError(f"{name} must lie in [-1, 1], got {t}")
        for name in ("pos_mode", "neg_mode"):
            if getattr(self, name) not in MODES:
                raise MiningError(f"{name} must be one of {MODES}")

    @classmethod
    def unfiltered(cls, k: int, bidirectional: bool = False) -> "MiningConfig":
        """Config whose threshold tests accept every score."""
        return cls(k=k, pos_threshold=-1.0, neg_threshold=-1.0,
                   pos_mode="above", neg_mode="above", bidirectional=bidirectional)

    def header(self) -> str:
        return (f"#pairset v1 k={self.k} pos_t={self.pos_threshold!r} neg_t={self.neg_threshold!r} "
                f"mode={self.pos_mode}/{self.neg_mode} bidir={int(self.bidirectional)}")


@dataclass(frozen=True)
class TrainingPair:
    anchor_id: str
    partner_id: str
    label: int
    score: float

    def __post_init__(self):
        if self.anchor_id == self.partner_id:
            raise MiningError(f"self-pair for {self.anchor_id!r}")
        if self.label not in (0, 1):
            raise MiningError(f"label must be 0 or 1, got {self.label}")

    def sort_key(self):
        return (self.anchor_id, -self.label, -self.score, self.partner_id)


@dataclass
class PairSet:
    pairs: list[TrainingPair]
    config: MiningConfig
    x_ids: frozenset = field(default_factory=frozenset, repr=False)
    y_ids: frozenset = field(default_factory=frozenset, repr=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def positives(self) -> list[TrainingPair]:
        return [p for p in self.pairs if p.label == 1]

    @property
    def negatives(self) -> list[TrainingPair]:
        return [p for p in self.pairs if p.label == 0]

    def to_text(self) -> str:
        lines = [self.config.header()]
        lines += [f"{p.anchor_id},{p.partner_id},{p.label},{p.score:.9g}" for p in self.pairs]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def passes(scores: np.ndarray, threshold: float, mode: str) -> np.ndarray:
    if mode == "below":
        return scores < threshold
    return scores >= threshold


def top_k_oracle(anchor: EmbeddingVector, candidates: Sequence[EmbeddingVector], k: int) -> list[str]:
    """Reference top-k by a full sort on (score desc, id asc)."""
    if k > len(candidates):
        raise MiningError(f"k={k} exceeds {len(candidates)} candidates")
    scored = sorted(((cosine(anchor, c), c.id) for c in candidates), key=lambda t: (-t[0], t[1]))
    return [cid for _, cid in scored[:k]]


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k column indices of ``scores``.

    Columns must already be in ascending-id order so that the lower column
    index wins a tie. Entries set to ``-inf`` are never chosen unless a row
    has fewer than ``k`` finite entries. Returns an ``(rows, k)`` index array
    ordered by (score desc, index asc).
    """
    rows, cols = scores.shape
    if not 1 <= k <= cols:
        raise MiningError(f"k={k} out of range for {cols} candidates")
    kth = np.partition(scores, cols - k, axis=1)[:, cols - k][:, None]
    above = scores > kth
    tied = scores == kth
    need = k - above.sum(axis=1, keepdims=True)
    chosen = above | (tied & (np.cumsum(tied, axis=1) <= need))
    idx = np.nonzero(chosen)[1].reshape(rows, k)
    picked = np.take_along_axis(scores, idx, axis=1)
    # lexsort keys: last is primary
    order = np.lexsort((idx, -picked), axis=1)
    return np.take_along_axis(idx, order, axis=1)


def _mine_side(anchors: EmbeddingStore, candidates: EmbeddingStore, k: int, label: int,
               threshold: float, mode: str, exclude_self: bool, block: int) -> list[TrainingPair]:
    a_ids, c_ids = anchors.ids, candidates.ids
    a_mat = normalize_rows(anchors.matrix)
    c_mat = normalize_rows(candidates.matrix)
    out: list[TrainingPair] = []
    for start in range(0, len(a_ids), block):
        stop = min(start + block, len(a_ids))
        scores = np.clip(a_mat[start:stop] @ c_mat.T, -1.0, 1.0)
        if exclude_self:
            rows = np.arange(stop - start)
            scores[rows, rows + start] = -np.inf
        idx = select_top_k(scores, k)
        picked = np.take_along_axis(scores, idx, axis=1)
        keep = passes(picked, threshold, mode)
        for r, (cols, vals, mask) in enumerate(zip(idx, picked, keep)):
            anchor = a_ids[start + r]
            out.extend(TrainingPair(anchor, c_ids[c], label, float(v))
                       for c, v, m in zip(cols, vals, mask) if m)
    return out


def mine_positives(X: EmbeddingStore, cfg: MiningConfig, block: int = DEFAULT_BLOCK) -> list[TrainingPair]:
    """Label-1 pairs: each anchor with its top-k neighbours inside ``X``."""
    if len(X) < 2:
        raise MiningError("positive mining needs at least 2 embeddings")
    if cfg.k >= len(X):
        raise MiningError(f"k={cfg.k} must be smaller than |X|={len(X)}")
    X = X.sorted_by_id()
    return _mine_side(X, X, cfg.k, 1, cfg.pos_threshold, cfg.pos_mode, True, block)


def mine_negatives(X: EmbeddingStore, Y: EmbeddingStore, cfg: MiningConfig,
                   block: int = DEFAULT_BLOCK) -> list[TrainingPair]:
    """Label-0 pairs: each anchor in ``X`` with its most similar items in ``Y``."""
    if len(X) == 0 or len(Y) == 0:
        raise MiningError("negative mining needs non-empty stores")
    if X.dim != Y.dim:
        raise MiningError(f"dimension mismatch: {X.dim} vs {Y.dim}")
    if cfg.k > len(Y):
        raise MiningError(f"k={cfg.k} exceeds |Y|={len(Y)}")
    X, Y = X.sorted_by_id(), Y.sorted_by_id()
    return _mine_side(X, Y, cfg.k, 0, cfg.neg_threshold, cfg.neg_mode, False, block)


def mine(X: EmbeddingStore, Y: EmbeddingStore, cfg: MiningConfig, block: int = DEFAULT_BLOCK) -> PairSet:
    """Full mining pass. The result is canonically sorted and independent of store order."""
    shared = set(X.ids) & set(Y.ids)
    if shared:
        raise MiningError(f"stores share {len(shared)} ids, e.g. {sorted(shared)[0]!r}")
    pairs = mine_positives(X, cfg, block) + mine_negatives(X, Y, cfg, block)
    if cfg.bidirectional:
        pairs += mine_positives(Y, cfg, block) + mine_negatives(Y, X, cfg, block)
    pairs.sort(key=TrainingPair.sort_key)
    return PairSet(pairs, cfg, frozenset(X.ids), frozenset(Y.ids))


def _parse_header(line: str) -> MiningConfig:
    parts = line.split()
    if len(parts) != 7 or parts[:2] != ["#pairset", "v1"]:
        raise PairFileError(f"bad pair-set header: {line!r}")
    try:
        kv = dict(p.split("=", 1) for p in parts[2:])
        pos_mode, neg_mode = kv["mode"].split("/")
        return MiningConfig(k=int(kv["k"]), pos_threshold=float(kv["pos_t"]),
                            neg_threshold=float(kv["neg_t"]), pos_mode=pos_mode,
                            neg_mode=neg_mode, bidirectional=kv["bidir"] == "1")
    except (KeyError, ValueError) as exc:
        raise PairFileError(f"bad pair-set header: {line!r}") from exc


def read_pairset(path) -> PairSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PairFileError(f"{path}: empty pair file")
    cfg = _parse_header(lines[0])
    pairs = []
    for n, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 4:
            raise PairFileError(f"{path}:{n}: expected 4 fields, got {len(fields)}")
        try:
            score = float(fields[3])
            pair = TrainingPair(fields[0], fields[1], int(fields[2]), score)
        except ValueError as exc:
            raise PairFileError(f"{path}:{n}: {exc}") from exc
        if not math.isfinite(score):
            raise PairFileError(f"{path}:{n}: non-finite score")
        pairs.append(pair)
    return PairSet(pairs, cfg)


def pair_stats(pairs: Iterable[TrainingPair]) -> dict[str, dict[int, int]]:
    """Per-anchor counts of emitted pairs, keyed by label."""
    counts: dict[str, dict[int, int]] = {}
    for p in pairs:
        counts.setdefault(p.anchor_id, {0: 0, 1: 0})[p.label] += 1
    return counts
