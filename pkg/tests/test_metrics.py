import math
import numpy as np
import pytest

from conftest import constant_image, random_image
from featprobe.imageops import Image
from featprobe.metrics import (
    ChangeMask,
    ClassifierHead,
    EmptyMaskError,
    PerceptualStack,
    StackLayer,
    build_change_mask,
    classify,
    jsd,
    load_classifier_head,
    load_perceptual_stack,
    lpips_distance,
    mdn_cs,
    normalize_stack,
    resize_bilinear,
    save_classifier_head,
    save_perceptual_stack,
    semantic_metrics,
    ssim,
)
from featprobe.tensorio import FeatureMap, Tensor


def fmap(arr):
    return FeatureMap(Tensor(np.asarray(arr, dtype=np.float32)), "toy", "feat3")


# ---------------------------------------------------------------------------
# mdn_cs
# ---------------------------------------------------------------------------

def test_mdncs_identity_scale_and_sign(rng):
    f1 = fmap(rng.standard_normal((8, 4, 4)))
    assert mdn_cs(f1, f1) == 1.0
    doubled = fmap(2.0 * f1.tensor.data)
    assert abs(mdn_cs(f1, doubled) - 1.0) <= 1e-7
    negated = fmap(-f1.tensor.data)
    assert abs(mdn_cs(f1, negated) + 1.0) <= 1e-7


def test_mdncs_even_count_averages_middle_pair():
    # two locations with cosines 1 and 0
    f1 = fmap([[[1.0, 1.0]], [[0.0, 0.0]]])  # C=2, 1x2 grid
    f2 = fmap([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert abs(mdn_cs(f1, f2) - 0.5) <= 1e-12


def test_mdncs_masked_and_empty_mask(rng):
    f1 = fmap([[[1.0, 1.0]], [[0.0, 0.0]]])
    f2 = fmap([[[1.0, 0.0]], [[0.0, 1.0]]])
    only_second = ChangeMask((1, 2), np.array([[False, True]]))
    assert abs(mdn_cs(f1, f2, only_second) - 0.0) <= 1e-12
    empty = ChangeMask((1, 2), np.zeros((1, 2), dtype=bool))
    with pytest.raises(EmptyMaskError):
        mdn_cs(f1, f2, empty)


def test_mdncs_shape_and_grid_guards(rng):
    f1 = fmap(rng.standard_normal((3, 2, 2)))
    f2 = fmap(rng.standard_normal((3, 2, 3)))
    with pytest.raises(ValueError):
        mdn_cs(f1, f2)
    with pytest.raises(ValueError):
        mdn_cs(f1, f1, ChangeMask((3, 3), np.zeros((3, 3), dtype=bool)))


def test_mdncs_per_location_rescale_invariance(rng):
    data = rng.standard_normal((4, 3, 3)).astype(np.float32)
    other = rng.standard_normal((4, 3, 3)).astype(np.float32)
    base = mdn_cs(fmap(data), fmap(other))
    # powers of two scale float32 exactly
    scales = 2.0 ** rng.integers(-3, 4, size=(3, 3))
    scaled = (data * scales[None]).astype(np.float32)
    assert abs(mdn_cs(fmap(scaled), fmap(other)) - base) <= 1e-12


def test_mdncs_zero_norm_guarded():
    f1 = fmap(np.zeros((2, 1, 1)))
    f2 = fmap(np.ones((2, 1, 1)))
    assert mdn_cs(f1, f2) == 0.0  # 0 / eps


# ---------------------------------------------------------------------------
# change mask
# ---------------------------------------------------------------------------

def test_identical_images_all_false(rng):
    img = random_image(rng, 32, 32)
    mask = build_change_mask(img, img, (4, 4), input_resolution=32)
    assert not mask.cells.any()


def test_threshold_is_strict():
    # constant difference (30,40,0): distance exactly 50 everywhere
    a = constant_image((100, 100, 100), 32, 32)
    b = constant_image((130, 140, 100), 32, 32)
    mask = build_change_mask(a, b, (4, 4), input_resolution=32)
    assert not mask.cells.any()
    # (29,29,29) -> sqrt(2523) ~ 50.23 > 50
    c = constant_image((129, 129, 129), 32, 32)
    mask2 = build_change_mask(a, c, (4, 4), input_resolution=32)
    assert mask2.cells.all()
    # (28,28,28) -> sqrt(2352) ~ 48.5 < 50
    d = constant_image((128, 128, 128), 32, 32)
    mask3 = build_change_mask(a, d, (4, 4), input_resolution=32)
    assert not mask3.cells.any()


def test_block_change_yields_plus_shaped_mask():
    # white block exactly covering grid cell (1,1); the 1-pixel smoothing halo
    # crosses into the 4 edge-adjacent cells but not the diagonal ones
    base = constant_image((0, 0, 0), 32, 32)
    changed = base.pixels.copy()
    changed[8:16, 8:16] = 255
    manip = Image(changed)
    mask = build_change_mask(base, manip, (4, 4), input_resolution=32)
    expected = np.zeros((4, 4), dtype=bool)
    for cell in [(1, 1), (0, 1), (2, 1), (1, 0), (1, 2)]:
        expected[cell] = True
    assert np.array_equal(mask.cells, expected)


def test_mask_monotone_under_region_growth(rng):
    base = constant_image((0, 0, 0), 48, 48)
    small = base.pixels.copy()
    small[10:20, 10:20] = 255
    big = base.pixels.copy()
    big[8:30, 8:30] = 255
    m_small = build_change_mask(base, Image(small), (6, 6), input_resolution=48)
    m_big = build_change_mask(base, Image(big), (6, 6), input_resolution=48)
    assert np.all(m_big.cells[m_small.cells])


def test_size_mismatch_raises(rng):
    with pytest.raises(ValueError):
        build_change_mask(random_image(rng, 10, 10), random_image(rng, 12, 12), (2, 2))


def test_resize_same_size_is_identity(rng):
    pix = rng.integers(0, 256, (16, 16, 3)).astype(np.float64)
    out = resize_bilinear(pix, 16, 16)
    assert np.array_equal(out, pix)


def test_resize_constant_stays_constant():
    pix = np.full((10, 10, 3), 77.0)
    out = resize_bilinear(pix, 288, 288)
    assert np.allclose(out, 77.0)


def test_nondivisible_grid_any_pool():
    base = constant_image((0, 0, 0), 30, 30)
    changed = base.pixels.copy()
    changed[0:10, 0:10] = 255
    mask = build_change_mask(base, Image(changed), (7, 5), input_resolution=30)
    assert mask.cells[0, 0]
    assert not mask.cells[-1, -1]


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def test_ssim_self_is_exactly_one(rng):
    img = random_image(rng, 24, 24)
    assert ssim(img, img) == 1.0


def test_ssim_black_white_closed_form():
    black = constant_image((0, 0, 0), 32, 32)
    white = constant_image((255, 255, 255), 32, 32)
    c1 = (0.01 * 255.0) ** 2
    expected = c1 / (255.0**2 + c1)
    assert abs(ssim(black, white) - expected) <= 1e-6


def test_ssim_symmetric(rng):
    a, b = random_image(rng, 20, 20), random_image(rng, 20, 20)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_ssim_bounded_and_less_than_one_when_different(rng):
    a, b = random_image(rng, 20, 20), random_image(rng, 20, 20)
    value = ssim(a, b)
    assert -1.0 < value < 1.0


def test_ssim_window_shrinks_with_warning(rng):
    a, b = random_image(rng, 7, 9), random_image(rng, 7, 9)
    with pytest.warns(UserWarning, match="shrunk"):
        value = ssim(a, b)
    assert -1.0 < value <= 1.0


def test_ssim_size_mismatch(rng):
    with pytest.raises(ValueError):
        ssim(random_image(rng, 8, 8), random_image(rng, 8, 9))


# ---------------------------------------------------------------------------
# perceptual distance
# ---------------------------------------------------------------------------

def unit_stack(vectors, weight=1.0):
    """One-layer stack with each vector at its own location."""
    arr = np.stack(vectors, axis=1)[:, None, :].astype(np.float32)  # [C,1,L]
    return PerceptualStack([StackLayer(Tensor(arr), weight)], normalized=True)


def test_lpips_identical_is_zero(rng):
    data = rng.standard_normal((4, 3, 3)).astype(np.float32)
    stack = normalize_stack(PerceptualStack([StackLayer(Tensor(data), 1.0)]))
    assert lpips_distance(stack, stack) == 0.0


def test_lpips_zero_weights(rng):
    a = normalize_stack(PerceptualStack(
        [StackLayer(Tensor(rng.standard_normal((4, 2, 2)).astype(np.float32)), 0.0)]))
    b = normalize_stack(PerceptualStack(
        [StackLayer(Tensor(rng.standard_normal((4, 2, 2)).astype(np.float32)), 0.0)]))
    assert lpips_distance(a, b) == 0.0


def test_lpips_orthogonal_unit_vectors():
    a = unit_stack([np.array([1.0, 0.0])])
    b = unit_stack([np.array([0.0, 1.0])])
    assert abs(lpips_distance(a, b) - 2.0) <= 1e-12


def test_lpips_requires_normalized_and_aligned(rng):
    raw = PerceptualStack(
        [StackLayer(Tensor(rng.standard_normal((4, 2, 2)).astype(np.float32)), 1.0)])
    with pytest.raises(ValueError):
        lpips_distance(raw, raw)
    a = normalize_stack(raw)
    b = normalize_stack(PerceptualStack(
        [StackLayer(Tensor(rng.standard_normal((4, 3, 3)).astype(np.float32)), 1.0)]))
    with pytest.raises(ValueError):
        lpips_distance(a, b)


def test_lpips_symmetric_nonnegative(rng):
    mk = lambda: normalize_stack(PerceptualStack(
        [StackLayer(Tensor(rng.standard_normal((6, 4, 4)).astype(np.float32)), 0.7),
         StackLayer(Tensor(rng.standard_normal((3, 2, 2)).astype(np.float32)), 0.3)]))
    a, b = mk(), mk()
    d1, d2 = lpips_distance(a, b), lpips_distance(b, a)
    assert d1 >= 0 and abs(d1 - d2) <= 1e-12


def test_stack_roundtrip(tmp_path, rng):
    stack = normalize_stack(PerceptualStack(
        [StackLayer(Tensor(rng.standard_normal((4, 3, 3)).astype(np.float32)), 0.5)]))
    save_perceptual_stack(stack, tmp_path / "stack")
    again = load_perceptual_stack(tmp_path / "stack")
    assert again.normalized
    assert lpips_distance(stack, again) == 0.0


def test_normalize_stack_unit_norms(rng):
    stack = normalize_stack(PerceptualStack(
        [StackLayer(Tensor(rng.standard_normal((8, 5, 5)).astype(np.float32)), 1.0)]))
    norms = np.linalg.norm(stack.layers[0].features.data, axis=0)
    assert np.max(np.abs(norms - 1.0)) <= 1e-4


# ---------------------------------------------------------------------------
# classifier metrics
# ---------------------------------------------------------------------------

def make_head(c=4, classes=2):
    w = np.zeros((classes, c), dtype=np.float32)
    w[0, 0] = 1.0
    w[1, 0] = -1.0
    return ClassifierHead(Tensor(np.ones(c, dtype=np.float32)),
                          Tensor(np.zeros(c, dtype=np.float32)),
                          Tensor(w), Tensor(np.zeros(classes, dtype=np.float32)))


def test_classify_two_class_oracle():
    # channel 0 dominates -> layernorm keeps it the largest -> class 0 wins
    head = make_head()
    data = np.ones((4, 2, 2), dtype=np.float32)
    data[0] = 3.0
    probs = classify(head, fmap(data))
    assert int(np.argmax(probs)) == 0
    flipped = np.ones((4, 2, 2), dtype=np.float32)
    flipped[0] = -1.0
    assert int(np.argmax(classify(head, fmap(flipped)))) == 1


def test_classify_probabilities_sum_to_one(rng):
    head = make_head(c=8, classes=5)
    for _ in range(5):
        probs = classify(head, fmap(rng.standard_normal((8, 3, 3))))
        assert abs(probs.sum() - 1.0) <= 1e-6
        assert np.all(probs >= 0)


def test_classify_deterministic(rng):
    head = make_head()
    f = fmap(rng.standard_normal((4, 2, 2)))
    assert np.array_equal(classify(head, f), classify(head, f))


def test_classify_channel_mismatch(rng):
    head = make_head(c=4)
    with pytest.raises(ValueError):
        classify(head, fmap(rng.standard_normal((5, 2, 2))))


def test_head_needs_two_classes():
    with pytest.raises(ValueError):
        ClassifierHead(Tensor(np.ones(4, dtype=np.float32)),
                       Tensor(np.zeros(4, dtype=np.float32)),
                       Tensor(np.ones((1, 4), dtype=np.float32)),
                       Tensor(np.zeros(1, dtype=np.float32)))


def test_jsd_closed_forms():
    assert jsd(np.array([0.5, 0.5]), np.array([0.5, 0.5])) == 0.0
    assert abs(jsd(np.array([1.0, 0.0]), np.array([0.0, 1.0])) - math.log(2)) <= 1e-9


def test_jsd_symmetric_and_bounded(rng):
    for _ in range(50):
        p = rng.random(6)
        p /= p.sum()
        q = rng.random(6)
        q /= q.sum()
        v = jsd(p, q)
        assert abs(v - jsd(q, p)) <= 1e-12
        assert -1e-12 <= v <= math.log(2) + 1e-12
    assert jsd(p, p) <= 1e-9


def test_semantic_metrics_identical(rng):
    head = make_head(c=6, classes=3)
    batch = [fmap(rng.standard_normal((6, 2, 2))) for _ in range(4)]
    out = semantic_metrics(head, batch, batch)
    assert out["agreement"] == 1.0
    assert out["jsd_mean"] == 0.0
    assert "top1_accuracy" not in out


def test_semantic_metrics_with_labels():
    head = make_head()
    up = np.ones((4, 2, 2), dtype=np.float32)
    up[0] = 3.0
    down = np.ones((4, 2, 2), dtype=np.float32)
    down[0] = -1.0
    batch = [fmap(up), fmap(down)]
    out = semantic_metrics(head, batch, batch, labels=[0, 0])
    assert out["agreement"] == 1.0
    assert out["top1_accuracy"] == 0.5


def test_semantic_metrics_empty_or_misaligned(rng):
    head = make_head()
    with pytest.raises(ValueError):
        semantic_metrics(head, [], [])
    f = fmap(rng.standard_normal((4, 2, 2)))
    with pytest.raises(ValueError):
        semantic_metrics(head, [f], [f, f])


def test_head_roundtrip(tmp_path, rng):
    head = make_head(c=6, classes=4)
    save_classifier_head(head, tmp_path / "head")
    again = load_classifier_head(tmp_path / "head")
    f = fmap(rng.standard_normal((6, 2, 2)))
    assert np.array_equal(classify(head, f), classify(again, f))
