"""Toy backends: determinism, gradient hooks, registry, dataset helpers."""

import json
import os

import numpy as np
import pytest

from latentpatch import (ConditionEmbedding, ConfigurationError, LatentState,
                         LossConfig, ToyColorFeatureScorer, ToyDetector,
                         ToyLinearDiffusion, build_schedule, create_backend,
                         ensemble_gradient, list_backends, load_training_set,
                         make_toy_dataset, make_toy_scenes, pivotal_invert,
                         register_backend, resolve_backend)
from _oracles import oracle_inversion_pivots


# ---------------------------------------------------------------- registry

def test_builtin_backends_listed():
    names = list_backends()
    for name in ("toy-linear", "toy-detector", "toy-color"):
        assert name in names


def test_register_and_resolve_round_trip():
    sentinel = object()
    register_backend("test-sentinel-backend", lambda: sentinel)
    try:
        assert resolve_backend("test-sentinel-backend")() is sentinel
    finally:
        from latentpatch.backends.base import _REGISTRY
        _REGISTRY.pop("test-sentinel-backend")


def test_duplicate_registration_rejected():
    with pytest.raises(ConfigurationError):
        register_backend("toy-linear", ToyLinearDiffusion)


def test_unknown_backend_error_lists_known_names():
    with pytest.raises(ConfigurationError, match="toy-linear"):
        resolve_backend("no-such-backend")


def test_create_backend_bad_params():
    with pytest.raises(ConfigurationError):
        create_backend("toy-linear", {"definitely_not_a_param": 1})


# ------------------------------------------------------- diffusion backend

@pytest.fixture(scope="module")
def diffusion():
    return ToyLinearDiffusion(seed=0)


def test_latent_geometry(diffusion):
    assert diffusion.latent_shape == (3, 16, 16)
    assert diffusion.mask_factor == 8
    assert diffusion.image_size == 128


def test_encode_of_decode_is_identity(diffusion):
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 16, 16))
    back = diffusion.encode_image(diffusion.decode_latent(z))
    np.testing.assert_allclose(back, z, atol=diffusion.roundtrip_tolerance)


def test_decode_of_encode_on_block_constant_image(diffusion):
    rng = np.random.default_rng(2)
    z = rng.uniform(size=(3, 16, 16))
    image = diffusion.decode_latent(z)
    np.testing.assert_allclose(diffusion.decode_latent(diffusion.encode_image(image)),
                               image, atol=1e-12)


def test_encode_rejects_wrong_shape(diffusion):
    with pytest.raises(ConfigurationError):
        diffusion.encode_image(np.zeros((64, 64, 3)))
    with pytest.raises(ConfigurationError):
        diffusion.decode_latent(np.zeros((3, 8, 8)))


def test_empty_prompt_embedding_is_zero(diffusion):
    e = diffusion.embed_text("")
    assert np.all(e.e == 0.0)
    assert e.e.shape == (diffusion.embed_tokens, diffusion.embed_dim)


def test_prompt_embeddings_deterministic_and_distinct(diffusion):
    a1 = diffusion.embed_text("a person in a red shirt")
    a2 = diffusion.embed_text("a person in a red shirt")
    b = diffusion.embed_text("a cluttered desk")
    np.testing.assert_array_equal(a1.e, a2.e)
    assert np.any(a1.e != b.e)


def test_predict_noise_repeat_calls_bit_identical():
    d1 = ToyLinearDiffusion(seed=5)
    d2 = ToyLinearDiffusion(seed=5)
    rng = np.random.default_rng(3)
    z = rng.normal(size=(3, 16, 16))
    e = d1.embed_text("hello").e
    np.testing.assert_array_equal(d1.predict_noise(z, 40, e), d2.predict_noise(z, 40, e))


def test_predict_noise_linear_in_latent(diffusion):
    # the closed form is affine in z, so finite differences are exact
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 16, 16))
    v = rng.normal(size=(3, 16, 16))
    e = diffusion.embed_text("probe").e
    h = 1e-3
    fd = (diffusion.predict_noise(z + h * v, 17, e) - diffusion.predict_noise(z - h * v, 17, e)) / (2 * h)
    direct = diffusion.predict_noise(z + v, 17, e) - diffusion.predict_noise(z, 17, e)
    np.testing.assert_allclose(fd, direct, atol=1e-9)


def test_noise_embedding_grad_matches_finite_differences(diffusion):
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 16, 16))
    e = rng.normal(size=(diffusion.embed_tokens, diffusion.embed_dim))
    up = rng.normal(size=(3, 16, 16))
    g = diffusion.noise_embedding_grad(z, 9, e, up)
    assert g.shape == e.shape
    h = 1e-6
    for _ in range(10):
        i = int(rng.integers(e.shape[0]))
        j = int(rng.integers(e.shape[1]))
        ep = e.copy(); ep[i, j] += h
        em = e.copy(); em[i, j] -= h
        fd = (np.sum(up * diffusion.predict_noise(z, 9, ep))
              - np.sum(up * diffusion.predict_noise(z, 9, em))) / (2 * h)
        assert abs(fd - g[i, j]) <= 1e-6 * max(1.0, abs(fd))


def test_decode_grad_is_the_decoder_adjoint(diffusion):
    # <decode(z), g> == <z, decode_grad(g)> for a linear decoder
    rng = np.random.default_rng(6)
    z = rng.normal(size=(3, 16, 16))
    g = rng.normal(size=(128, 128, 3))
    lhs = float(np.sum(diffusion.decode_latent(z) * g))
    rhs = float(np.sum(z * diffusion.decode_grad(g)))
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)


def test_pivotal_inversion_matches_hand_unrolled_recurrence():
    """Run the inversion loop against the explicit recurrence oracle."""
    diffusion = ToyLinearDiffusion(seed=0)
    s = build_schedule(100, 0.001, 0.02, 10)
    cond = diffusion.embed_text("a test prompt")
    rng = np.random.default_rng(7)
    z0 = rng.normal(size=(3, 16, 16))

    def eps_fn(z, step):
        return diffusion.predict_noise(z, s.model_timestep(step), cond.e)

    for formula in ("paper", "standard"):
        for depth in (1, 2, 5):
            want = oracle_inversion_pivots(z0, depth, s.alpha_ladder, eps_fn, formula)
            got = pivotal_invert(LatentState(z=z0, step=0), cond, s, diffusion,
                                 depth, formula)
            # library returns deepest first
            assert len(got) == depth + 1
            for k, state in enumerate(reversed(got)):
                assert state.step == k
                err = np.abs(state.z - want[k]).max()
                assert err < 1e-10, f"{formula} depth {depth} rung {k}: {err}"


# -------------------------------------------------------------- detector

@pytest.fixture(scope="module")
def detector():
    return ToyDetector(seed=0)


@pytest.fixture(scope="module")
def scenes():
    return make_toy_scenes(8, seed=0)


def test_detector_finds_planted_persons(detector, scenes):
    from latentpatch import iou
    batches = detector.detect(scenes.images)
    for dets, gts in zip(batches, scenes.person_boxes):
        for g in gts:
            best = max((iou(d.box, g) for d in dets), default=0.0)
            assert best > 0.5, f"missed person at {g}"


def test_detector_quiet_on_plain_background(detector):
    image = np.full((64, 64, 3), 0.5)
    assert detector.detect(image[None])[0] == []


def test_detect_without_threshold_returns_every_anchor(detector, scenes):
    dets = detector.detect(scenes.images[:1], min_confidence=0.0, nms=False)[0]
    assert len(dets) == len(detector.anchors)


def test_nms_removes_heavy_overlaps(detector, scenes):
    from latentpatch import iou
    for dets in detector.detect(scenes.images):
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                assert iou(dets[i].box, dets[j].box) <= detector.nms_iou


def test_detector_deterministic(detector, scenes):
    a = detector.detect(scenes.images)
    b = detector.detect(scenes.images)
    for da, db in zip(a, b):
        assert [d.box for d in da] == [d.box for d in db]
        assert [d.p_obj for d in da] == [d.p_obj for d in db]


def test_detector_rejects_wrong_image_size(detector):
    with pytest.raises(ConfigurationError):
        detector.detect(np.zeros((1, 32, 32, 3)))


def test_detection_grad_spot_check_against_finite_differences(detector, scenes):
    image = scenes.images[0]
    dets = detector.detect(image[None], min_confidence=0.0, nms=False)[0]
    rng = np.random.default_rng(8)
    weights = list(rng.uniform(0, 1, size=len(dets)))

    def score(img):
        out = detector.detect(img[None], min_confidence=0.0, nms=False)[0]
        return sum(w * d.score(0) for w, d in zip(weights, out))

    grad = detector.detection_grad(image, dets, weights, target_class=0)
    h = 1e-5
    for _ in range(6):
        y = int(rng.integers(64)); x = int(rng.integers(64)); c = int(rng.integers(3))
        up = image.copy(); up[y, x, c] += h
        dn = image.copy(); dn[y, x, c] -= h
        fd = (score(up) - score(dn)) / (2 * h)
        denom = max(abs(fd), abs(grad[y, x, c]), 1e-8)
        assert abs(fd - grad[y, x, c]) / denom < 1e-4


# ------------------------------------------------------------- similarity

def test_scorer_self_similarity_is_one():
    scorer = ToyColorFeatureScorer(seed=0)
    rng = np.random.default_rng(9)
    image = rng.uniform(size=(48, 48, 3))
    f = scorer.embed_image(image)
    assert scorer.similarity(f, f) == pytest.approx(1.0)


def test_scorer_zero_vector_similarity_is_zero():
    scorer = ToyColorFeatureScorer(seed=0)
    f = scorer.embed_image(np.random.default_rng(0).uniform(size=(32, 32, 3)))
    assert scorer.similarity(f, np.zeros_like(f)) == 0.0


# --------------------------------------------------------------- ensemble

class _NonDiffDetector:
    differentiable = False


def test_ensemble_rejects_non_differentiable_member(scenes):
    cfg = LossConfig(kind="common_detection")
    with pytest.raises(ConfigurationError):
        ensemble_gradient([ToyDetector(seed=0), _NonDiffDetector()],
                          scenes.images[:2], scenes.person_boxes[:2], cfg)


def test_ensemble_of_identical_detectors_equals_single(scenes):
    cfg = LossConfig(kind="common_detection")
    images = scenes.images[:3]
    gts = scenes.person_boxes[:3]
    one = ensemble_gradient([ToyDetector(seed=0)], images, gts, cfg)
    two = ensemble_gradient([ToyDetector(seed=0), ToyDetector(seed=0)], images, gts, cfg)
    assert np.any(one != 0.0)
    np.testing.assert_allclose(two, one, rtol=0, atol=1e-15)


def test_empty_ensemble_rejected(scenes):
    with pytest.raises(ConfigurationError):
        ensemble_gradient([], scenes.images[:1], scenes.person_boxes[:1],
                          LossConfig(kind="common_detection"))


# ----------------------------------------------------------- toy datasets

def test_make_toy_scenes_geometry():
    data = make_toy_scenes(5, seed=3)
    assert data.images.shape == (5, 64, 64, 3)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    assert len(data.person_boxes) == 5
    for boxes in data.person_boxes:
        assert boxes
        for (x, y, w, h) in boxes:
            assert w > 0 and h > 0
            assert 0 <= x and x + w <= 64
            assert 0 <= y and y + h <= 64


def test_make_toy_scenes_deterministic():
    a = make_toy_scenes(4, seed=11)
    b = make_toy_scenes(4, seed=11)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.person_boxes == b.person_boxes


def test_make_toy_dataset_round_trip(tmp_path):
    manifest = make_toy_dataset(tmp_path / "ds", 6, seed=2)
    assert os.path.exists(manifest)
    data = load_training_set(manifest)
    assert data.images.shape[0] == 6
    with open(manifest) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    assert len(rows) == 6
    for row, boxes in zip(rows, data.person_boxes):
        persons = [tuple(b[1:]) for b in row["boxes"] if b[0] == 0]
        assert persons == [tuple(map(float, b)) for b in boxes]
