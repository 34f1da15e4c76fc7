import numpy as np
import pytest
from PIL import Image

from fewseg.episodes import (
    Dataset,
    DatasetLoadError,
    SamplingError,
    SyntheticDomainSpec,
    generate_synthetic,
    load_directory,
    sample_episode,
    save_dataset,
)

PALETTE4 = ((0.9, 0.1, 0.2), (0.1, 0.9, 0.2), (0.2, 0.1, 0.9), (0.8, 0.8, 0.1))


def _spec(**kw):
    base = dict(palette=PALETTE4, categories=3, images_per_category=6,
                image_size=32, seed=7)
    base.update(kw)
    return SyntheticDomainSpec(**base)


class TestGeneration:
    def test_shapes_counts_and_ranges(self):
        ds = generate_synthetic(_spec())
        assert len(ds.categories) == 3
        assert len(ds) == 18
        for cat in ds.categories.values():
            for s in cat.samples:
                assert s.image.shape == (32, 32, 3)
                assert s.image.dtype == np.float32
                assert s.image.min() >= 0.0 and s.image.max() <= 1.0
                assert set(np.unique(s.mask)) <= {0, 1}
                assert s.mask.sum() > 0

    def test_deterministic_per_seed(self):
        a = generate_synthetic(_spec(seed=3))
        b = generate_synthetic(_spec(seed=3))
        c = generate_synthetic(_spec(seed=4))
        sa = a.categories["cat000"].samples[0]
        sb = b.categories["cat000"].samples[0]
        sc = c.categories["cat000"].samples[0]
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.mask, sb.mask)
        assert not np.array_equal(sa.image, sc.image)

    @pytest.mark.parametrize("family", ["blobs", "stripes", "rings"])
    def test_every_shape_family_yields_objects(self, family):
        ds = generate_synthetic(_spec(shape_family=family))
        for cat in ds.categories.values():
            for s in cat.samples:
                assert 0 < s.mask.sum() < s.mask.size

    def test_foreground_color_tracks_palette(self):
        ds = generate_synthetic(_spec(noise_sigma=0.0))
        for i, cat in enumerate(ds.categories.values()):
            s = cat.samples[0]
            fg_mean = s.image[s.mask == 1].reshape(-1, 3).mean(axis=0)
            assert np.allclose(fg_mean, PALETTE4[i], atol=1e-6)

    def test_category_id_offset(self):
        ds = generate_synthetic(_spec(category_id_start=100))
        assert ds.category_ids() == {100, 101, 102}

    def test_short_palette_rejected(self):
        with pytest.raises(ValueError):
            _spec(palette=PALETTE4[:2])

    def test_bad_shape_family_rejected(self):
        with pytest.raises(ValueError):
            _spec(shape_family="squares")


class TestSampling:
    @pytest.fixture
    def ds(self):
        return generate_synthetic(_spec())

    @pytest.mark.parametrize("k", [1, 3])
    def test_episode_structure(self, ds, k):
        ep = sample_episode(ds, k, np.random.default_rng(0))
        assert len(ep.support) == k
        assert ep.query_mask is not None
        assert ep.category_id in ds.category_ids()
        assert ep.domain_id == ds.domain_id

    def test_no_image_reuse_within_episode(self, ds):
        for seed in range(30):
            ep = sample_episode(ds, 3, np.random.default_rng(seed))
            images = [img.tobytes() for img, _ in ep.support] + [ep.query_image.tobytes()]
            assert len(set(images)) == 4

    def test_query_mask_withheld_on_request(self, ds):
        ep = sample_episode(ds, 1, np.random.default_rng(1), with_query_mask=False)
        assert ep.query_mask is None

    def test_category_pinning(self, ds):
        ep = sample_episode(ds, 1, np.random.default_rng(2), category="cat002")
        assert ep.category_id == 2

    def test_too_few_images_raises(self, ds):
        with pytest.raises(SamplingError):
            sample_episode(ds, 6, np.random.default_rng(0))

    def test_feature_resolution_rejection(self):
        # tiny objects vanish at 2x2 feature resolution; sampler must give up
        ds = generate_synthetic(_spec(scale_range=(0.08, 0.1), image_size=32))
        with pytest.raises(SamplingError):
            sample_episode(ds, 1, np.random.default_rng(0), feature_shape=(2, 2))

    def test_masks_survive_at_feature_resolution(self, ds):
        from fewseg.protos import shrink_mask
        ep = sample_episode(ds, 2, np.random.default_rng(3), feature_shape=(4, 4))
        for _, m in ep.support:
            assert shrink_mask(m, (4, 4)).sum() > 0
        assert shrink_mask(ep.query_mask, (4, 4)).sum() > 0


class TestDirectoryIO:
    def test_roundtrip(self, tmp_path):
        ds = generate_synthetic(_spec(images_per_category=2))
        save_dataset(ds, tmp_path)
        loaded = load_directory(tmp_path, domain_id=ds.domain_id)
        assert set(loaded.categories) == set(ds.categories)
        for name in ds.categories:
            for a, b in zip(ds.categories[name].samples, loaded.categories[name].samples):
                assert a.sample_id == b.sample_id
                assert np.array_equal(a.mask, b.mask)
                # images pass through 8-bit quantization once
                assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(DatasetLoadError):
            load_directory(tmp_path / "nope")

    def test_missing_mask_rejected(self, tmp_path):
        (tmp_path / "catA" / "images").mkdir(parents=True)
        (tmp_path / "catA" / "masks").mkdir(parents=True)
        Image.new("RGB", (8, 8)).save(tmp_path / "catA" / "images" / "a.png")
        with pytest.raises(DatasetLoadError, match="no mask"):
            load_directory(tmp_path)

    def test_nonbinary_mask_rejected(self, tmp_path):
        (tmp_path / "catA" / "images").mkdir(parents=True)
        (tmp_path / "catA" / "masks").mkdir(parents=True)
        Image.new("RGB", (8, 8)).save(tmp_path / "catA" / "images" / "a.png")
        Image.fromarray(np.full((8, 8), 17, dtype=np.uint8), mode="L").save(
            tmp_path / "catA" / "masks" / "a.png"
        )
        with pytest.raises(DatasetLoadError, match="values outside"):
            load_directory(tmp_path)

    def test_stray_mask_rejected(self, tmp_path):
        ds = generate_synthetic(_spec(categories=1, images_per_category=1))
        save_dataset(ds, tmp_path)
        extra = next((tmp_path / "cat000" / "masks").glob("*.png"))
        mask_bytes = extra.read_bytes()
        (tmp_path / "cat000" / "masks" / "ghost.png").write_bytes(mask_bytes)
        with pytest.raises(DatasetLoadError, match="masks without images"):
            load_directory(tmp_path)

    def test_empty_root_warns(self, tmp_path, caplog):
        import logging
        with caplog.at_level(logging.WARNING):
            ds = load_directory(tmp_path)
        assert isinstance(ds, Dataset)
        assert len(ds.categories) == 0
        assert any("no category directories" in r.message for r in caplog.records)
