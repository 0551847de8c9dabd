"""
Tests for feature extraction and similarity matrices
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import pearsonr

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from pnm.errors import LengthMismatch  # noqa: E402
from pnm.features import (  # noqa: E402
    SimilarityMatrix,
    extract_numeric_pair,
    hamming_matrix,
    hamming_similarity,
    numeric_similarity,
    pearson,
    similarity_matrix,
)
from pnm.model import HOUR, Feature, Preprocessing  # noqa: E402
from pnm.preprocess import detect_epochs, resample_series  # noqa: E402
from tests.factories import channel, dataset, hyper, planted_fnode, series  # noqa: E402

DAY_WINDOW = (0.0, 24 * HOUR)


class TestPearson:
    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = rng.normal(size=12)
            b = 0.3 * a + rng.normal(size=12)
            assert pearson(a, b) == pytest.approx(pearsonr(a, b)[0], abs=1e-12)

    def test_worked_example(self):
        assert pearson([1, 2, 3, 4], [2, 4, 5, 9]) == pytest.approx(11 / np.sqrt(130), abs=1e-12)
        assert pearson([1, 2, 3, 4], [2, 4, 5, 9]) == pytest.approx(0.9648, abs=1e-4)

    def test_symmetric_and_affine_invariant(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            a = rng.normal(size=10)
            b = rng.normal(size=10)
            scale, shift = rng.uniform(0.1, 10.0), rng.normal(scale=50.0)

            assert pearson(a, b) == pytest.approx(pearson(b, a), abs=1e-12)
            assert pearson(scale * a + shift, b) == pytest.approx(pearson(a, b), abs=1e-12)

    def test_constant_vector_is_undefined(self):
        assert pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None
        assert pearson([1.0], [2.0]) is None

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            pearson([1.0, 2.0], [1.0, 2.0, 3.0])


class TestHamming:
    def test_similarity(self):
        assert hamming_similarity([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
        with pytest.raises(LengthMismatch):
            hamming_similarity([], [])

    def test_invariant_under_joint_bit_flip(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = rng.integers(0, 2, size=12)
            b = rng.integers(0, 2, size=12)
            assert hamming_similarity(1 - a, 1 - b) == hamming_similarity(a, b)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(2)
        vectors = rng.integers(0, 2, size=(5, 9))
        matrix = hamming_matrix(list("abcde"), vectors)

        for i in range(5):
            for j in range(5):
                assert matrix.get(i, j) == pytest.approx(hamming_similarity(vectors[i], vectors[j]))

    def test_empty_window_is_fully_similar(self):
        matrix = hamming_matrix(["a", "b"], np.empty((2, 0)))
        assert matrix.by_id("a", "b") == 1.0


class TestSimilarityMatrix:
    def test_from_dense_marks_undefined(self):
        matrix = SimilarityMatrix.from_dense(Feature.SNR, ["a", "b"], [[1.0, None], [None, 1.0]])

        assert matrix.get(0, 1) is None
        assert matrix.by_id("a", "a") == 1.0

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            SimilarityMatrix(Feature.SNR, ("a",), np.ones((2, 2)), np.ones((2, 2), dtype=bool))


class TestNumericSimilarity:
    def setup_method(self):
        self.fnode = planted_fnode()

    def test_shared_wobble_correlates(self):
        matrices = numeric_similarity(self.fnode, [Feature.SNR, Feature.TX_POWER, Feature.MISSING], DAY_WINDOW, hyper())

        assert set(matrices) == {Feature.SNR, Feature.TX_POWER}
        snr = matrices[Feature.SNR]
        assert snr.by_id("f0-m00", "f0-m07") == pytest.approx(1.0)
        assert snr.by_id("f0-m00", "f0-s00") == pytest.approx(0.0, abs=1e-9)
        assert snr.by_id("f0-h00", "f0-h01") == pytest.approx(0.0, abs=1e-9)
        assert matrices[Feature.TX_POWER].by_id("f0-m01", "f0-m02") == pytest.approx(1.0)

    def test_overlap_floor_leaves_pairs_undefined(self):
        matrix = numeric_similarity(self.fnode, [Feature.SNR], DAY_WINDOW, hyper(min_overlap=7))[Feature.SNR]

        assert not matrix.defined[~np.eye(len(matrix), dtype=bool)].any()
        assert matrix.by_id("f0-m00", "f0-m00") == 1.0

    def test_pair_extraction(self):
        x = self.fnode.devices["f0-m00"]
        y = self.fnode.devices["f0-s00"]
        vx, vy = extract_numeric_pair(x, y, Feature.SNR, DAY_WINDOW, hyper())

        assert len(vx) == len(vy) == 6
        assert extract_numeric_pair(x, y, Feature.SNR, (0.0, 8 * HOUR), hyper()) is None
        with pytest.raises(ValueError):
            extract_numeric_pair(x, y, Feature.MISSING, DAY_WINDOW, hyper())

    def test_resampled_series_pair_on_shared_grid(self):
        params = hyper(preprocessing=Preprocessing.RESAMPLE)
        resampled = self.fnode.map_devices(lambda s: resample_series(s, 4.0))
        snr = numeric_similarity(resampled, [Feature.SNR], DAY_WINDOW, params)[Feature.SNR]
        assert snr.by_id("f0-m00", "f0-m03") == pytest.approx(1.0)


class TestMissingFeature:
    def test_matrix_from_grid(self):
        full = series("a", [channel([1.0, 5.0, 9.0, 13.0], [30.0] * 4)])
        gappy = series("b", [channel([1.0, 13.0], [30.0] * 2)])
        fnode = dataset([full, gappy])
        grid = detect_epochs(fnode.timestamps(), 0.5, 1, 4.0)

        matrix = similarity_matrix(fnode, Feature.MISSING, (0.0, 16 * HOUR), grid, hyper())
        assert matrix.by_id("a", "b") == pytest.approx(0.5)
