import unittest
import numpy as np
from data.exceptions import FeatureKindMismatch, InvalidCodeSize, NotEnoughDescriptors
from data.models import Dictionary
from services.encode_features import kmeans, llc_encode, lloyd, spatial_pyramid_max_pool


def three_clouds(seed=0, n=200):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    return centers, np.vstack([c + rng.normal(0, 0.5, (n, 2)) for c in centers])


class Kmeans_Should(unittest.TestCase):

    def test_find_well_separated_clusters(self):
        centers, points = three_clouds()

        dictionary = kmeans(points, 3, seed=1, kind='colorbank')

        found = sorted(map(tuple, np.round(dictionary.words)))
        self.assertEqual(found, sorted(map(tuple, centers)))

    def test_never_raise_the_objective(self):
        _, points = three_clouds(seed=2)
        start = points[[0, 1, 2, 3]]

        _, _, history = lloyd(points, start)

        self.assertTrue(all(b <= a + 1e-9 for a, b in zip(history, history[1:])))

    def test_reseed_an_empty_cluster(self):
        _, points = three_clouds(seed=3)
        start = np.vstack([points[:2], [[1000.0, 1000.0]]])

        centers, labels, _ = lloyd(points, start)

        self.assertEqual(len(np.unique(labels)), 3)
        self.assertTrue(np.all(np.abs(centers) < 20))

    def test_be_reproducible_from_its_seed(self):
        _, points = three_clouds(seed=4)

        first = kmeans(points, 5, seed=9)
        second = kmeans(points, 5, seed=9)

        np.testing.assert_array_equal(first.words, second.words)

    def test_need_k_distinct_descriptors(self):
        with self.assertRaises(NotEnoughDescriptors):
            kmeans(np.ones((50, 4)), 3, seed=0)


class LlcEncode_Should(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(5)
        self.words = rng.normal(size=(20, 6))
        self.dictionary = Dictionary(kind='colorbank', words=self.words, training_digest='test')

    def test_use_at_most_kappa_words_summing_to_one(self):
        codes = llc_encode(np.random.default_rng(6).normal(size=(40, 6)), self.dictionary)

        self.assertEqual(codes.shape, (40, 20))
        np.testing.assert_allclose(codes.sum(axis=1), 1.0, atol=1e-9)
        self.assertTrue(np.all(np.count_nonzero(codes, axis=1) <= 5))

    def test_code_a_dictionary_word_as_itself(self):
        code = llc_encode(self.words[7], self.dictionary)

        self.assertEqual(code.shape, (20,))
        self.assertGreater(code[7], 0.99)

    def test_pick_the_nearest_words(self):
        query = self.words[3] + 1e-3
        codes = llc_encode(query, self.dictionary)

        nearest = np.argsort(np.linalg.norm(self.words - query, axis=1))[:5]
        self.assertEqual(set(np.flatnonzero(codes)), set(nearest))

    def test_reject_kappa_above_the_dictionary_size(self):
        with self.assertRaises(InvalidCodeSize):
            llc_encode(self.words[:2], self.dictionary, kappa=21)

    def test_reject_descriptors_of_another_width(self):
        with self.assertRaises(FeatureKindMismatch):
            llc_encode(np.zeros((2, 5)), self.dictionary)


class SpatialPyramid_Should(unittest.TestCase):

    def test_pool_into_twenty_one_cells(self):
        codes = np.eye(3)
        positions = np.array([[1.0, 1.0], [99.0, 1.0], [99.0, 79.0]])

        pooled = spatial_pyramid_max_pool(codes, positions, (100, 80)).reshape(21, 3)

        np.testing.assert_array_equal(pooled[0], [1, 1, 1])
        np.testing.assert_array_equal(pooled[1], [1, 0, 0])
        np.testing.assert_array_equal(pooled[2], [0, 1, 0])
        np.testing.assert_array_equal(pooled[3], [0, 0, 0])
        np.testing.assert_array_equal(pooled[4], [0, 0, 1])
        np.testing.assert_array_equal(pooled[5], [1, 0, 0])
        np.testing.assert_array_equal(pooled[8], [0, 1, 0])
        np.testing.assert_array_equal(pooled[20], [0, 0, 1])
        self.assertEqual(pooled.sum(), 9)

    def test_take_the_maximum_within_a_cell(self):
        codes = np.array([[0.2, 0.9], [0.7, 0.1]])
        positions = np.array([[5.0, 5.0], [6.0, 6.0]])

        pooled = spatial_pyramid_max_pool(codes, positions, (100, 100))

        np.testing.assert_array_equal(pooled[:2], [0.7, 0.9])
