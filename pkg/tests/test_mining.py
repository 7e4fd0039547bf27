import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamverify.embeddings import EmbeddingStore, EmbeddingVector, normalize_rows
from siamverify.mining import (
    MiningConfig,
    MiningError,
    PairFileError,
    TrainingPair,
    mine,
    mine_negatives,
    mine_positives,
    read_pairset,
    select_top_k,
    top_k_oracle,
)

from conftest import brute_force_mine, check_pair_invariants, random_store


def store(**vectors):
    return EmbeddingStore.from_arrays(list(vectors), np.array(list(vectors.values()), dtype=float))


def triples(pairs):
    return {(p.anchor_id, p.partner_id, p.label) for p in pairs}


# --- config -------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(k=0), dict(pos_threshold=1.5), dict(neg_threshold=-2),
                                    dict(pos_mode="sideways"), dict(k=2.5)])
def test_config_validation(kwargs):
    with pytest.raises(MiningError):
        MiningConfig(**kwargs)


def test_config_defaults():
    cfg = MiningConfig()
    assert (cfg.pos_threshold, cfg.neg_threshold) == (0.3, 0.1)
    assert (cfg.pos_mode, cfg.neg_mode, cfg.bidirectional) == ("below", "below", False)


def test_training_pair_rejects_self_pair():
    with pytest.raises(MiningError):
        TrainingPair("a", "a", 1, 1.0)


# --- positives ------------------------------------------------------------------

def test_positive_example_above_mode():
    X = store(a=(1, 0), b=(1, 0), c=(0, 1))
    cfg = MiningConfig(k=1, pos_threshold=0.5, pos_mode="above")
    assert triples(mine_positives(X, cfg)) == {("a", "b", 1), ("b", "a", 1)}


def test_positive_disabled_threshold_gives_nearest_neighbour():
    X = store(a=(1, 0), b=(1, 0.1), c=(0, 1), d=(0.1, 1))
    cfg = MiningConfig(k=1, pos_threshold=-1, pos_mode="above")
    assert triples(mine_positives(X, cfg)) == {("a", "b", 1), ("b", "a", 1), ("c", "d", 1), ("d", "c", 1)}


def test_positive_count_hundred_by_ten():
    X = random_store(np.random.default_rng(0), 100, 16, "x")
    assert len(mine_positives(X, MiningConfig.unfiltered(10))) == 1000


def test_positive_errors():
    with pytest.raises(MiningError):
        mine_positives(store(a=(1, 0)), MiningConfig(k=1))
    with pytest.raises(MiningError):
        mine_positives(store(a=(1, 0), b=(0, 1)), MiningConfig(k=2))


def test_below_mode_keeps_low_scores_only():
    X = store(a=(1, 0), b=(1, 0.05), c=(0, 1))
    pairs = mine_positives(X, MiningConfig(k=2, pos_threshold=0.3, pos_mode="below"))
    assert all(p.score < 0.3 for p in pairs)
    assert ("a", "c", 1) in triples(pairs)
    assert ("a", "b", 1) not in triples(pairs)


# --- negatives ------------------------------------------------------------------

def test_negative_hardest_example():
    X = store(a=(1, 0))
    Y = store(p=(1, 0.01), q=(0, 1))
    pairs = mine_negatives(X, Y, MiningConfig.unfiltered(1))
    assert triples(pairs) == {("a", "p", 0)}
    assert pairs[0].score == pytest.approx(1 / np.sqrt(1 + 1e-4), abs=1e-12)
    assert pairs[0].score == pytest.approx(0.99995, abs=1e-6)


def test_negative_exhaustive_k():
    rng = np.random.default_rng(3)
    X, Y = random_store(rng, 4, 5, "x"), random_store(rng, 6, 5, "y")
    pairs = mine_negatives(X, Y, MiningConfig.unfiltered(6))
    assert triples(pairs) == {(a, b, 0) for a in X.ids for b in Y.ids}


def test_negative_counts_and_bidirectional():
    rng = np.random.default_rng(4)
    X, Y = random_store(rng, 100, 8, "x"), random_store(rng, 100, 8, "y")
    assert len(mine_negatives(X, Y, MiningConfig.unfiltered(10))) == 1000
    both = mine(X, Y, MiningConfig.unfiltered(10, bidirectional=True))
    assert len(both.negatives) == 2000 and len(both.positives) == 2000


def test_negative_errors():
    X = store(a=(1, 0))
    with pytest.raises(MiningError, match="dimension"):
        mine_negatives(X, store(p=(1, 0, 0)), MiningConfig(k=1))
    with pytest.raises(MiningError):
        mine_negatives(X, store(p=(1, 0)), MiningConfig(k=2))


# --- full mining --------------------------------------------------------------

def test_singleton_stores_fail():
    with pytest.raises(MiningError):
        mine(store(a=(1, 0)), store(b=(0, 1)), MiningConfig(k=1))


def test_shared_ids_rejected():
    with pytest.raises(MiningError, match="share"):
        mine(store(a=(1, 0), b=(0, 1)), store(a=(1, 1)), MiningConfig(k=1))


def test_two_cluster_data():
    rng = np.random.default_rng(5)
    centres = np.eye(8)[:4] * 10
    x_vals = np.repeat(centres[:2], 10, axis=0) + rng.normal(scale=0.3, size=(20, 8))
    y_vals = np.repeat(centres[2:], 10, axis=0) + rng.normal(scale=0.3, size=(20, 8))
    x_ids = [f"x{i:02d}" for i in range(20)]
    y_ids = [f"y{i:02d}" for i in range(20)]
    X, Y = EmbeddingStore.from_arrays(x_ids, x_vals), EmbeddingStore.from_arrays(y_ids, y_vals)
    cluster = {i: n // 10 for n, i in enumerate(x_ids)}
    result = mine(X, Y, MiningConfig.unfiltered(5))
    assert all(cluster[p.anchor_id] == cluster[p.partner_id] for p in result.positives)
    assert all(p.partner_id.startswith("y") for p in result.negatives)


def test_matches_brute_force_with_thresholds():
    rng = np.random.default_rng(6)
    for trial in range(20):
        X = random_store(rng, 15, 4, "x", duplicates=3)
        Y = random_store(rng, 12, 4, "y", duplicates=2)
        cfg = MiningConfig(k=3, pos_threshold=float(rng.uniform(-0.5, 0.5)),
                           neg_threshold=float(rng.uniform(-0.5, 0.5)),
                           pos_mode=("below", "above")[trial % 2], neg_mode=("above", "below")[trial % 2],
                           bidirectional=bool(trial % 3 == 0))
        got = [(p.anchor_id, p.partner_id, p.label) for p in mine(X, Y, cfg)]
        expected = [t[:3] for t in brute_force_mine(X, Y, cfg)]
        assert got == expected


def test_invariants_and_permutation_determinism():
    rng = np.random.default_rng(7)
    X, Y = random_store(rng, 40, 6, "x"), random_store(rng, 30, 6, "y")
    cfg = MiningConfig(k=4, pos_threshold=0.2, neg_threshold=0.0, pos_mode="above", neg_mode="above",
                       bidirectional=True)
    reference = mine(X, Y, cfg)
    assert check_pair_invariants(reference, X, Y, 4) == []
    for _ in range(3):
        px = EmbeddingStore(X.dim, [X[i] for i in rng.permutation(len(X))])
        py = EmbeddingStore(Y.dim, [Y[i] for i in rng.permutation(len(Y))])
        assert mine(px, py, cfg).to_text() == reference.to_text()


def test_block_size_does_not_change_result():
    rng = np.random.default_rng(8)
    X, Y = random_store(rng, 37, 5, "x"), random_store(rng, 23, 5, "y")
    cfg = MiningConfig.unfiltered(4, bidirectional=True)
    assert mine(X, Y, cfg, block=5).to_text() == mine(X, Y, cfg, block=1000).to_text()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1, 0.9), st.floats(0.01, 0.5))
def test_threshold_monotonicity_below(seed, t, bump):
    X = random_store(np.random.default_rng(seed), 20, 4, "x")
    low = MiningConfig(k=5, pos_threshold=t, pos_mode="below")
    high = MiningConfig(k=5, pos_threshold=min(1.0, t + bump), pos_mode="below")
    assert len(mine_positives(X, high)) >= len(mine_positives(X, low))


# --- top-k selection ------------------------------------------------------------

def test_oracle_ties_broken_by_id():
    anchor = EmbeddingVector("q", np.array([1.0, 0.0]))
    cands = [EmbeddingVector(i, np.array([1.0, 0.0])) for i in ("c", "a", "b")]
    assert top_k_oracle(anchor, cands, 2) == ["a", "b"]


def test_oracle_exhaustive_sorted():
    anchor = EmbeddingVector("q", np.array([1.0, 0.0]))
    cands = [EmbeddingVector("z", np.array([0.0, 1.0])), EmbeddingVector("y", np.array([1.0, 1.0])),
             EmbeddingVector("x", np.array([1.0, 0.0]))]
    assert top_k_oracle(anchor, cands, 3) == ["x", "y", "z"]


def test_select_top_k_ties_prefer_low_index():
    scores = np.array([[0.5, 0.9, 0.5, 0.5, 0.1]])
    assert select_top_k(scores, 3).tolist() == [[1, 0, 2]]


def test_select_top_k_never_picks_masked_entries():
    scores = np.array([[-np.inf, 0.2, 0.1], [0.3, -np.inf, 0.3]])
    assert select_top_k(scores, 2).tolist() == [[1, 2], [0, 2]]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_select_top_k_matches_full_sort_with_ties(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=(6, 50)) / 4.0
    k = int(rng.integers(1, 51))
    expected = [sorted(range(50), key=lambda j: (-row[j], j))[:k] for row in scores]
    assert select_top_k(scores, k).tolist() == expected


def test_random_fifty_candidates_match_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        C = random_store(rng, 50, 8, "c", duplicates=5).sorted_by_id()
        anchor = EmbeddingVector("q", rng.normal(size=8))
        scores = normalize_rows(anchor.values[None]) @ normalize_rows(C.matrix).T
        got = [C.ids[j] for j in select_top_k(scores, 5)[0]]
        assert got == top_k_oracle(anchor, list(C), 5)


# --- pair-set file ----------------------------------------------------------------

def test_pairset_file_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    X, Y = random_store(rng, 10, 4, "x"), random_store(rng, 10, 4, "y")
    cfg = MiningConfig(k=3, pos_threshold=0.25, neg_threshold=-0.5, pos_mode="above", neg_mode="below")
    ps = mine(X, Y, cfg)
    path = tmp_path / "pairs.txt"
    ps.write(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "#pairset v1 k=3 pos_t=0.25 neg_t=-0.5 mode=above/below bidir=0"
    assert all(len(line.split(",")) == 4 for line in lines[1:])
    back = read_pairset(path)
    assert back.config == cfg
    assert [(p.anchor_id, p.partner_id, p.label) for p in back] == [(p.anchor_id, p.partner_id, p.label) for p in ps]
    assert all(abs(a.score - b.score) < 1e-8 for a, b in zip(back, ps))
    assert back.to_text() == ps.to_text()


@pytest.mark.parametrize("content", ["", "garbage\n", "#pairset v1 k=1 pos_t=0.3 neg_t=0.1 mode=below/below bidir=0\na,b,1\n",
                                     "#pairset v1 k=1 pos_t=0.3 neg_t=0.1 mode=below/below bidir=0\na,a,1,0.5\n",
                                     "#pairset v1 k=1 pos_t=0.3 neg_t=0.1 mode=below/below bidir=0\na,b,1,nan\n"])
def test_pairset_file_errors(tmp_path, content):
    path = tmp_path / "bad.txt"
    path.write_text(content)
    with pytest.raises(PairFileError):
        read_pairset(path)
