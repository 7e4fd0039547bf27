import math

import numpy as np
import pytest

from siamverify.dataio import SyntheticSpec, synth_images
from siamverify.encoder import encoder_forward, params_init
from siamverify.evaluation import compute_eer
from siamverify.siamese import (
    ScoredTrial,
    bce_loss,
    bce_with_logits,
    read_scores,
    siamese_forward,
    siamese_loss_and_grads,
    sigmoid,
    verification_score,
    write_scores,
)

from conftest import numeric_gradients, randomize_biases, relative_error


def test_sigmoid_zero_and_extremes():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    out = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.isfinite(out).all() and out[0] >= 0 and out[1] == 1.0


def test_logit_zero_gives_half(tiny_encoder, tiny_head):
    params = params_init(tiny_encoder, tiny_head)
    params["head2.W"][...] = 0
    x = np.random.default_rng(0).random((3, 8, 8, 1))
    assert np.all(siamese_forward(params, x, x[::-1]) == 0.5)


def test_forward_is_ordered(tiny_encoder, tiny_head):
    rng = np.random.default_rng(1)
    params = params_init(tiny_encoder, tiny_head)
    # make the two halves of the first head layer differ
    params["head1.W"][:4] *= 3.0
    params["head2.W"][...] = np.abs(params["head2.W"])
    a, b = rng.random((4, 8, 8, 1)), rng.random((4, 8, 8, 1))
    assert not np.allclose(siamese_forward(params, a, b), siamese_forward(params, b, a))


def test_forward_shape_and_range(tiny_encoder, tiny_head):
    rng = np.random.default_rng(2)
    params = params_init(tiny_encoder, tiny_head)
    s = siamese_forward(params, rng.random((7, 8, 8, 1)), rng.random((7, 8, 8, 1)))
    assert s.shape == (7,) and np.all((s > 0) & (s < 1))


def test_forward_shape_mismatch(tiny_encoder, tiny_head):
    params = params_init(tiny_encoder, tiny_head)
    with pytest.raises(ValueError):
        siamese_forward(params, np.zeros((2, 8, 8, 1)), np.zeros((3, 8, 8, 1)))


# --- loss -----------------------------------------------------------------------

def test_bce_examples():
    assert bce_loss([0.5, 0.5, 0.5], [1, 0, 1]) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss([1.0, 0.0], [1, 0]) < 1e-6
    assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
    assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(0.164252, abs=1e-6)


def test_bce_clamps_and_is_nonnegative():
    assert np.isfinite(bce_loss([0.0, 1.0], [1, 0]))
    assert bce_loss([0.3, 0.7], [0, 1]) >= 0


def test_bce_with_logits_matches_probability_form():
    z = np.array([-3.0, -0.2, 0.0, 1.5, 4.0])
    y = np.array([0, 1, 1, 0, 1])
    loss, grad = bce_with_logits(z, y)
    assert loss == pytest.approx(bce_loss(sigmoid(z), y), rel=1e-9)
    num = [(bce_with_logits(z + e, y)[0] - bce_with_logits(z - e, y)[0]) / 2e-6
           for e in np.eye(5) * 1e-6]
    assert np.allclose(grad, num, atol=1e-8)


def test_bce_with_extreme_logits_is_finite():
    loss, grad = bce_with_logits(np.array([800.0, -800.0]), np.array([0, 1]))
    assert loss == pytest.approx(800.0) and np.isfinite(grad).all()


# --- composition ------------------------------------------------------------------

def test_weight_sharing(tiny_encoder, tiny_head):
    rng = np.random.default_rng(3)
    params = params_init(tiny_encoder, tiny_head, dtype=np.float64)
    x = rng.random((2, 8, 8, 1))
    params.tensors["conv2_1.W"] += rng.normal(scale=0.1, size=params["conv2_1.W"].shape)
    emb = encoder_forward(params, np.concatenate([x, x]))
    assert np.array_equal(emb[:2], emb[2:])


def test_full_composition_gradient(tiny_encoder, tiny_head):
    rng = np.random.default_rng(4)
    params = randomize_biases(params_init(tiny_encoder, tiny_head, dtype=np.float64), rng)
    a, b = rng.random((3, 8, 8, 1)), rng.random((3, 8, 8, 1))
    y = np.array([1, 0, 1])
    _, grads = siamese_loss_and_grads(params, a, b, y)
    num = numeric_gradients(lambda: siamese_loss_and_grads(params, a, b, y)[0], params.tensors)
    for name in params.tensors:
        assert relative_error(grads[name], num[name]) < 1e-4, name


def test_loss_decreases_with_small_lr(tiny_encoder, tiny_head):
    rng = np.random.default_rng(5)
    params = params_init(tiny_encoder, tiny_head, dtype=np.float64)
    a, b = rng.random((8, 8, 8, 1)), rng.random((8, 8, 8, 1))
    y = rng.integers(0, 2, size=8)
    losses = []
    for _ in range(11):
        loss, grads = siamese_loss_and_grads(params, a, b, y)
        losses.append(loss)
        for name, g in grads.items():
            params.tensors[name] -= 1e-4 * g
    assert all(later <= earlier for earlier, later in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


# --- verification scores ----------------------------------------------------------

def test_verification_score_symmetric(tiny_encoder, tiny_head):
    rng = np.random.default_rng(6)
    params = params_init(tiny_encoder, tiny_head)
    params["head1.W"][:4] *= 2.0
    a, b = rng.random((10, 8, 8, 1)), rng.random((10, 8, 8, 1))
    assert np.array_equal(verification_score(params, a, b), verification_score(params, b, a))
    s = verification_score(params, a, a)
    assert np.allclose(s, siamese_forward(params, a, a), atol=1e-7)


def test_verification_score_batching_invariant(tiny_encoder, tiny_head):
    rng = np.random.default_rng(7)
    params = params_init(tiny_encoder, tiny_head)
    a, b = rng.random((10, 8, 8, 1)), rng.random((10, 8, 8, 1))
    # BLAS may reorder sums per batch shape, so only near-equality is promised
    assert np.allclose(verification_score(params, a, b, batch_size=3),
                       verification_score(params, a, b, batch_size=100), atol=1e-6)


def test_untrained_eer_near_chance(tiny_encoder, tiny_head):
    ids, images, labels = synth_images(SyntheticSpec(num_identities=20, images_per_identity=20, image_size=8,
                                                     channels=1, seed=8))
    rng = np.random.default_rng(9)
    labels = np.array([labels[i] for i in ids])
    by_label = {lab: np.flatnonzero(labels == lab) for lab in np.unique(labels)}
    ia, ib, y = [], [], []
    for t in range(1000):
        i = int(rng.integers(len(ids)))
        if t % 2 == 0:
            j = int(rng.choice(by_label[labels[i]][by_label[labels[i]] != i]))
        else:
            j = int(rng.choice(np.flatnonzero(labels != labels[i])))
        ia.append(i), ib.append(j), y.append(1 - t % 2)
    params = params_init(tiny_encoder, tiny_head)
    s = verification_score(params, images[ia], images[ib])
    y = np.array(y)
    eer, _ = compute_eer(s[y == 1], s[y == 0])
    assert 0.4 <= eer <= 0.6


def test_score_file_round_trip(tmp_path):
    trials = [ScoredTrial("a", "b", 0.123456789123, 1), ScoredTrial("c", "d", 1e-12)]
    write_scores(trials, tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text()
    assert text == "a,b,0.123456789,1\nc,d,1e-12\n"
    back = read_scores(tmp_path / "s.csv")
    assert back[0].label == 1 and back[1].label is None
    assert back[0].score == pytest.approx(0.123456789, abs=1e-12)
