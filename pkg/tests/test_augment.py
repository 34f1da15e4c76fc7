import numpy as np
import pytest

from fewseg.augment import ALL_OPS, AugSpec, derive_query, invert_mask


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    image = rng.random((6, 6, 3)).astype(np.float32)
    mask = (rng.random((6, 6)) > 0.6).astype(np.uint8)
    return image, mask


def test_no_ops_is_identity(pair):
    image, mask = pair
    img, msk, rec = derive_query(image, mask, AugSpec(ops=()), np.random.default_rng(1))
    assert np.array_equal(img, image)
    assert np.array_equal(msk, mask)
    assert rec.applied == []


def test_hflip_index_map(pair):
    image, mask = pair
    spec = AugSpec(ops=("hflip",), probability=1.0)
    img, msk, rec = derive_query(image, mask, spec, np.random.default_rng(2))
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            assert msk[y, x] == mask[y, w - 1 - x]
            assert np.array_equal(img[y, x], image[y, w - 1 - x])


def test_rot90_plus_brightness_index_map_oracle():
    rng = np.random.default_rng(3)
    image = rng.random((4, 4, 3)).astype(np.float32) * 0.9
    mask = (rng.random((4, 4)) > 0.5).astype(np.uint8)
    spec = AugSpec(ops=("rot90", "brightness"), brightness_range=(1.3, 1.3), probability=1.0)
    img, msk, rec = derive_query(image, mask, spec, np.random.default_rng(4))
    assert [op for op, _ in rec.applied] == ["rot90", "brightness"]
    # compose per-pixel index maps: rotate indices, then scale-and-clip values
    expect_img = np.clip(np.rot90(image) * 1.3, 0, 1)
    expect_msk = np.rot90(mask)
    assert np.allclose(img, expect_img, atol=1e-6)
    assert np.array_equal(msk, expect_msk)


def test_photometric_never_touches_mask(pair):
    image, mask = pair
    spec = AugSpec(ops=("brightness", "hue"), probability=1.0)
    _, msk, _ = derive_query(image, mask, spec, np.random.default_rng(5))
    assert np.array_equal(msk, mask)


def test_deterministic_under_fixed_seed(pair):
    image, mask = pair
    spec = AugSpec()
    a = derive_query(image, mask, spec, np.random.default_rng(42))
    b = derive_query(image, mask, spec, np.random.default_rng(42))
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert a[2].applied == b[2].applied


def test_unknown_op_rejected():
    with pytest.raises(ValueError):
        AugSpec(ops=("shear",))


@pytest.mark.parametrize("seed", range(20))
def test_sampled_calls_contract(seed):
    # binarity, geometric foreground-count preservation, inverse round-trip
    rng = np.random.default_rng(seed)
    image = rng.random((8, 8, 3)).astype(np.float32)
    mask = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    spec = AugSpec()
    img, msk, rec = derive_query(image, mask, spec, rng)
    assert set(np.unique(msk)) <= {0, 1}
    assert msk.sum() == mask.sum()  # geometric ops are permutations
    assert np.array_equal(invert_mask(msk, rec), mask)
    assert img.min() >= 0.0 and img.max() <= 1.0
