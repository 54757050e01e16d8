import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvc.errors import ShapeError
from mvc.patching import (AnnotatedImage, decompose_image, derive_patch_labels, num_patches, patch_labels,
                          patchify, rasterize_boxes, rasterize_patch_mask, unpatchify)


def counting_oracle(boxes, n, m):
    """Visit every pixel of every patch and count how many fall inside each box."""
    k = n // m
    out = np.zeros(k * k, dtype=np.int8)
    for i in range(k * k):
        r0, c0 = (i // k) * m, (i % k) * m
        for x, y, w, h in boxes:
            x0, y0 = max(x, 0), max(y, 0)
            x1, y1 = min(x + w, n), min(y + h, n)
            inside = 0
            for r in range(r0, r0 + m):
                for c in range(c0, c0 + m):
                    if x0 <= c < x1 and y0 <= r < y1:
                        inside += 1
            if inside * 2 > m * m:
                out[i] = 1
    return out


def random_boxes(rng, n, count):
    boxes = []
    for _ in range(count):
        x, y = rng.integers(-n // 4, n, size=2)
        w, h = rng.integers(0, n // 2 + 1, size=2)
        boxes.append((int(x), int(y), int(w), int(h)))
    return boxes


@pytest.mark.parametrize("n,m,N", [(224, 16, 196), (224, 8, 784), (32, 8, 16)])
def test_patch_counts(n, m, N):
    assert num_patches(n, m) == N


def test_indivisible_size_rejected():
    with pytest.raises(ShapeError, match="224.*15"):
        num_patches(224, 15)


def test_box_covering_one_patch():
    labels = patch_labels([(16, 32, 16, 16)], 224, 16)
    assert labels.sum() == 1
    assert labels[2 * 14 + 1] == 1


def test_exact_half_is_negative():
    assert patch_labels([(0, 0, 8, 16)], 224, 16).sum() == 0
    assert patch_labels([(0, 0, 9, 16)], 224, 16)[0] == 1


def test_empty_boxes_all_negative():
    assert not patch_labels([], 64, 8).any()


def test_each_box_is_judged_alone():
    # two halves of one patch: the union covers it but neither box does alone
    assert patch_labels([(0, 0, 8, 16), (8, 0, 8, 16)], 32, 16)[0] == 0


def test_matches_counting_oracle_on_200_configs():
    rng = np.random.default_rng(0)
    grids = [(32, 8), (48, 16), (24, 4), (40, 8)]
    mismatches = 0
    for trial in range(200):
        n, m = grids[trial % len(grids)]
        boxes = random_boxes(rng, n, int(rng.integers(0, 4)))
        if trial % 10 == 0:
            boxes.append((m, 0, m // 2, m))  # exact-half boundary
        mismatches += int(np.sum(patch_labels(boxes, n, m) != counting_oracle(boxes, n, m)))
    assert mismatches == 0


@given(st.integers(0, 31), st.integers(0, 31), st.integers(0, 32), st.integers(0, 32),
       st.integers(0, 8), st.integers(0, 8))
def test_growing_a_box_never_clears_a_label(x, y, w, h, dw, dh):
    small = patch_labels([(x, y, w, h)], 32, 8)
    big = patch_labels([(x, y, w + dw, h + dh)], 32, 8)
    assert np.all(big >= small)


@given(st.sampled_from([(16, 4), (24, 8), (32, 16), (12, 3)]), st.integers(0, 2**32 - 1))
def test_tiling_is_a_partition(geom, seed):
    n, m = geom
    img = np.random.default_rng(seed).random((n, n))
    patches = patchify(img, m)
    assert patches.shape == ((n // m) ** 2, m * m)
    np.testing.assert_array_equal(unpatchify(patches, m), img)
    owner = patchify(np.arange(n * n).reshape(n, n), m)
    assert sorted(owner.ravel().tolist()) == list(range(n * n))


def test_row_major_patch_order():
    img = np.zeros((8, 8))
    img[0:4, 4:8] = 1  # top-right tile
    grid = decompose_image(AnnotatedImage(img, 0), 4)
    assert [p.max() for p in grid.patches] == [0, 1, 0, 0]


def test_derive_labels_sets_targets():
    grid = decompose_image(AnnotatedImage(np.zeros((16, 16)), 1, ((0, 0, 8, 8),)), 8)
    labelled = derive_patch_labels(grid, [(0, 0, 8, 8)])
    np.testing.assert_array_equal(labelled.target_probs, labelled.labels)
    assert labelled.labels.tolist() == [1, 0, 0, 0]


def test_annotated_image_clamps_boxes():
    img = AnnotatedImage(np.zeros((10, 10)), 0, ((-3, 5, 8, 20),))
    assert img.boxes == ((0, 5, 5, 5),)


def test_patch_mask_popcounts():
    assert rasterize_patch_mask(32, np.zeros(16), 8).sum() == 0
    one = np.zeros(16)
    one[5] = 1
    assert rasterize_patch_mask(32, one, 8).sum() == 64
    with pytest.raises(ShapeError):
        rasterize_patch_mask(32, np.zeros(15), 8)


@given(st.lists(st.booleans(), min_size=16, max_size=16))
def test_patch_mask_tiles_disjointly(flags):
    assert rasterize_patch_mask(32, flags, 8).sum() == 64 * sum(flags)


def test_box_mask_counts():
    assert rasterize_boxes([(3, 4, 10, 10)], 32).sum() == 100
    np.testing.assert_array_equal(rasterize_boxes([(3, 4, 10, 10)] * 2, 32), rasterize_boxes([(3, 4, 10, 10)], 32))


@given(st.tuples(*[st.integers(0, 20)] * 4), st.tuples(*[st.integers(0, 20)] * 4))
def test_overlapping_box_mask_inclusion_exclusion(a, b):
    n = 24
    ma, mb = rasterize_boxes([a], n), rasterize_boxes([b], n)
    inter = int(np.sum(ma.astype(bool) & mb.astype(bool)))
    assert rasterize_boxes([a, b], n).sum() == ma.sum() + mb.sum() - inter
