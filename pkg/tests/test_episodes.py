import numpy as np
import pytest

from fsct.episodes import DatasetError, SplitDataset, episode_rng, hflip_episode, nearest_centroid_predict, sample_episode


def indexed_pool(categories, per_category, dim=3):
    # every sample is unique: value encodes (category, index)
    return {f"c{c:02d}": np.array([[c * 1000 + i] * dim for i in range(per_category)], dtype=float)
            for c in range(categories)}


class TestSampleEpisode:
    def test_exact_pool_is_partitioned(self):
        pool = indexed_pool(4, 5)
        ep = sample_episode(pool, 4, 2, 3, episode_rng(0))
        assert sorted(ep.category_ids) == sorted(pool)
        for j, cat in enumerate(ep.category_ids):
            used = np.concatenate([ep.support[j], ep.query[ep.query_labels == j]])[:, 0]
            assert sorted(used) == sorted(pool[cat][:, 0])

    def test_shapes_and_labels(self):
        ep = sample_episode(indexed_pool(8, 10), 5, 3, 4, episode_rng(1))
        assert ep.support.shape == (5, 3, 3)
        assert ep.query.shape == (20, 3)
        assert ep.query_labels.tolist() == sorted([0, 1, 2, 3, 4] * 4)
        assert ep.support_labels.shape == (5, 3)

    def test_support_query_disjoint_and_share_categories(self):
        ep = sample_episode(indexed_pool(8, 10), 5, 3, 4, episode_rng(2))
        s, q = set(ep.support[..., 0].ravel()), set(ep.query[:, 0])
        assert not s & q
        for j in range(5):
            cats = {int(v // 1000) for v in ep.support[j, :, 0]} | {int(v // 1000) for v in ep.query[ep.query_labels == j, 0]}
            assert len(cats) == 1

    def test_same_seed_same_episode(self):
        pool = indexed_pool(10, 10)
        a = sample_episode(pool, 5, 2, 3, episode_rng(7, 0, 3))
        b = sample_episode(pool, 5, 2, 3, episode_rng(7, 0, 3))
        np.testing.assert_array_equal(a.support, b.support)
        np.testing.assert_array_equal(a.query, b.query)
        assert a.category_ids == b.category_ids

    def test_pool_order_irrelevant(self):
        pool = indexed_pool(10, 10)
        reversed_pool = dict(reversed(list(pool.items())))
        a = sample_episode(pool, 5, 2, 3, episode_rng(3))
        b = sample_episode(reversed_pool, 5, 2, 3, episode_rng(3))
        assert a.category_ids == b.category_ids

    def test_category_frequency(self):
        pool = indexed_pool(20, 2, dim=1)
        draws = 10_000
        counts = dict.fromkeys(pool, 0)
        for i in range(draws):
            for cat in sample_episode(pool, 5, 1, 1, episode_rng(11, i)).category_ids:
                counts[cat] += 1
        sigma = np.sqrt(draws * 0.25 * 0.75)
        for cat, c in counts.items():
            assert abs(c - 0.25 * draws) <= 3 * sigma, (cat, c)

    def test_too_few_categories(self):
        with pytest.raises(DatasetError, match="3 categories, need 5"):
            sample_episode(indexed_pool(3, 10), 5, 1, 1, episode_rng(0))

    def test_too_few_samples(self):
        with pytest.raises(DatasetError, match="fewer than 6"):
            sample_episode(indexed_pool(5, 4), 5, 1, 5, episode_rng(0))


class TestSplitDataset:
    def test_overlap_rejected(self):
        with pytest.raises(DatasetError, match="shared"):
            SplitDataset(train={"shared": np.zeros((2, 1))}, val={"shared": np.zeros((2, 1))})

    def test_counts_and_shape(self):
        ds = SplitDataset(train=indexed_pool(2, 3), test={"x": np.zeros((4, 3))})
        assert ds.sample_shape == (3,)
        assert ds.counts()["test"] == {"x": 4}

    def test_unknown_split(self):
        with pytest.raises(DatasetError):
            SplitDataset().pool("holdout")


class TestHelpers:
    def test_flip_mirrors_images_only(self, rng):
        images = {f"c{i}": rng.standard_normal((4, 1, 2, 3)) for i in range(2)}
        ep = sample_episode(images, 2, 1, 3, episode_rng(0))
        flipped = hflip_episode(ep, episode_rng(5), p=1.0)
        np.testing.assert_array_equal(flipped.support, ep.support[..., ::-1])
        np.testing.assert_array_equal(flipped.query, ep.query[..., ::-1])
        features = sample_episode(indexed_pool(2, 4), 2, 1, 3, episode_rng(0))
        assert hflip_episode(features, episode_rng(5), p=1.0) is features

    def test_nearest_centroid_on_separated_pool(self, rng):
        pool = {f"c{i}": rng.standard_normal((10, 4)) + 20 * np.eye(4)[i] for i in range(4)}
        ep = sample_episode(pool, 4, 3, 5, episode_rng(0))
        np.testing.assert_array_equal(nearest_centroid_predict(ep), ep.query_labels)
