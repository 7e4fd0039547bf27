import numpy as np
import pytest

from siamverify.embeddings import EmbeddingStore
from siamverify.encoder import EncoderConfig, HeadConfig
from siamverify.mining import MiningConfig, passes, top_k_oracle


def random_store(rng, n, dim, prefix, duplicates=0):
    """Gaussian store; ``duplicates`` rows copy earlier rows to force score ties."""
    values = rng.normal(size=(n, dim))
    for i in range(min(duplicates, n - 1)):
        values[n - 1 - i] = values[i]
    ids = [f"{prefix}{j:03d}" for j in rng.permutation(n)]
    return EmbeddingStore.from_arrays(ids, values)


def brute_force_mine(X: EmbeddingStore, Y: EmbeddingStore, cfg: MiningConfig):
    """Loop-and-sort reference for mining, returned as sorted tuples."""
    out = []

    def side(anchors, pool, label, threshold, mode, same):
        for a in anchors:
            cands = [c for c in pool if not (same and c.id == a.id)]
            for cid in top_k_oracle(a, cands, cfg.k):
                c = next(c for c in cands if c.id == cid)
                from siamverify.embeddings import cosine

                s = cosine(a, c)
                if passes(np.array([s]), threshold, mode)[0]:
                    out.append((a.id, cid, label, s))

    side(X, X, 1, cfg.pos_threshold, cfg.pos_mode, True)
    side(X, Y, 0, cfg.neg_threshold, cfg.neg_mode, False)
    if cfg.bidirectional:
        side(Y, Y, 1, cfg.pos_threshold, cfg.pos_mode, True)
        side(Y, X, 0, cfg.neg_threshold, cfg.neg_mode, False)
    out.sort(key=lambda t: (t[0], -t[2], -t[3], t[1]))
    return out


def check_pair_invariants(pairset, X, Y, k):
    """Return a list of violated invariants (empty when all hold)."""
    x_ids, y_ids = set(X.ids), set(Y.ids)
    problems = []
    counts = {}
    for p in pairset:
        if p.anchor_id == p.partner_id:
            problems.append(f"self pair {p}")
        same_x = p.anchor_id in x_ids and p.partner_id in x_ids
        same_y = p.anchor_id in y_ids and p.partner_id in y_ids
        if p.label == 1 and not (same_x or same_y):
            problems.append(f"positive crosses stores {p}")
        if p.label == 0 and (same_x or same_y):
            problems.append(f"negative inside one store {p}")
        c = counts.setdefault(p.anchor_id, [0, 0])
        c[p.label] += 1
    for anchor, (neg, pos) in counts.items():
        if neg > k or pos > k:
            problems.append(f"{anchor}: {pos} positives / {neg} negatives exceed k={k}")
    return problems


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(8, 8, 1, (2, 3, 4), 8, 4, seed=11)


@pytest.fixture
def tiny_head():
    return HeadConfig(hidden_units=5)


def relative_error(analytic, numeric):
    """Norm-based relative error, safe when both gradients are zero."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradients(loss_fn, tensors, eps=1e-5, names=None):
    """Central finite differences of ``loss_fn()`` w.r.t. each tensor in place."""
    out = {}
    for name in names or tensors:
        arr = tensors[name]
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            up = loss_fn()
            arr[idx] = old - eps
            down = loss_fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def randomize_biases(params, rng, scale=0.1):
    """Zero biases put pre-activations exactly on ReLU kinks; nudge them off."""
    for name, arr in params.tensors.items():
        if name.endswith(".b"):
            arr[...] = rng.normal(scale=scale, size=arr.shape)
    return params


def separable_pairs(seed, n_pairs=32, size=16):
    """Alternating same/different-identity pairs drawn from well-separated synthetic faces."""
    from siamverify.dataio import SyntheticSpec, synth_images

    ids, images, labels = synth_images(SyntheticSpec(num_identities=8, images_per_identity=4, image_size=size,
                                                     channels=1, separation=0.25, noise=0.05, seed=seed))
    who = np.array([labels[i] for i in ids])
    rng = np.random.default_rng(seed)
    ia, ib, y = [], [], []
    for t in range(n_pairs):
        i = int(rng.integers(len(ids)))
        if t % 2 == 0:
            pool = np.flatnonzero((who == who[i]) & (np.arange(len(ids)) != i))
        else:
            pool = np.flatnonzero(who != who[i])
        ia.append(i), ib.append(int(rng.choice(pool))), y.append(1 - t % 2)
    return images[ia], images[ib], np.array(y)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
