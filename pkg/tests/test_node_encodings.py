import numpy as np
import pytest

from conftest import graph_from_edges
from errors import DimTooLarge, InvalidConfig, KTooLarge, MissingRegion, RaggedRows, ShapeMismatch, TooFewRows
from geo_graph import RegionGraph
from node_encodings import (EncodingSettings, NodeEncoding, assemble_features, compute_encoding,
                            encoding_frame, fallback_coordinate_encoding, fit_pca, laplacian_smooth,
                            laplacian_spectral_pe, load_location_embeddings, parse_encoding_combo, pca_reduce,
                            random_walk_pe)


class TestSpectralEncoding:
    def test_cycle_eigenvalues(self, cycle10):
        encoding = laplacian_spectral_pe(cycle10, 2)
        expected = 1 - np.cos(2 * np.pi / 10)
        np.testing.assert_allclose(encoding.eigenvalues, [expected, expected])
        np.testing.assert_allclose(encoding.values.T @ encoding.values, np.eye(2), atol=1e-10)
        assert encoding.columns == ['laplacian_spectral_1', 'laplacian_spectral_2']

    def test_sign_convention(self, path_graph):
        values = laplacian_spectral_pe(path_graph, 2).values
        for column in values.T:
            assert column[np.argmax(np.abs(column))] > 0

    def test_complete_graph(self, triangle):
        encoding = laplacian_spectral_pe(triangle, 1)
        assert encoding.eigenvalues[0] == pytest.approx(1.5)
        assert encoding.values[:, 0].sum() == pytest.approx(0.0, abs=1e-12)

    def test_eigenpair_residual(self, grid5):
        encoding = laplacian_spectral_pe(grid5, 4)
        inv_sqrt = 1.0 / np.sqrt(grid5.degrees)
        laplacian = np.eye(25) - inv_sqrt[:, None] * grid5.adjacency.toarray() * inv_sqrt[None, :]
        residual = laplacian @ encoding.values - encoding.values * encoding.eigenvalues
        assert np.abs(residual).max() < 1e-8

    def test_isolated_nodes_get_zeros(self):
        graph = graph_from_edges(4, [(0, 1), (1, 2)])
        values = laplacian_spectral_pe(graph, 1).values
        assert values[3].tolist() == [0.0]

    def test_dimension_limits(self, path_graph):
        with pytest.raises(DimTooLarge):
            laplacian_spectral_pe(path_graph, 5)
        with pytest.raises(DimTooLarge):
            laplacian_spectral_pe(graph_from_edges(3, []), 1)


class TestRandomWalkEncoding:
    def test_triangle_return_probabilities(self, triangle):
        values = random_walk_pe(triangle, steps=2).values
        np.testing.assert_allclose(values[:, 0], 0.0)
        np.testing.assert_allclose(values[:, 1], 0.5)

    def test_path_two_steps(self, path_graph):
        values = random_walk_pe(path_graph, steps=2).values
        assert values[0, 1] == pytest.approx(0.5)
        assert values[1, 1] == pytest.approx(0.75)

    def test_entries_are_probabilities(self, grid5):
        values = random_walk_pe(grid5, steps=4).values
        assert values.min() >= 0.0
        assert values.max() <= 1.0

    def test_isolated_node(self):
        values = random_walk_pe(graph_from_edges(3, [(0, 1)]), steps=2).values
        assert values[2].tolist() == [0.0, 0.0]

    def test_steps_must_be_positive(self, triangle):
        with pytest.raises(InvalidConfig):
            random_walk_pe(triangle, steps=0)


class TestLaplacianSmooth:
    def test_three_node_path(self):
        graph = graph_from_edges(3, [(0, 1), (1, 2)])
        values = laplacian_smooth(graph, np.array([1.0, 2.0, 3.0]), lam=1.0).values
        assert values[:, 0].tolist() == [3.0, 8.0, 5.0]

    def test_row_mismatch(self, triangle):
        with pytest.raises(ShapeMismatch):
            laplacian_smooth(triangle, np.ones((4, 2)))


class TestLocationEmbeddings:
    def test_aligned_to_graph_order(self, tmp_path, triangle):
        path = tmp_path / 'loc.csv'
        path.write_text("id,e1,e2\nn2,5,6\nn0,1,2\nn1,3,4\n")
        values = load_location_embeddings(path, triangle).values
        assert values.tolist() == [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]

    def test_missing_region(self, tmp_path, triangle):
        path = tmp_path / 'loc.csv'
        path.write_text("id,e1\nn0,1\nn1,2\n")
        with pytest.raises(MissingRegion):
            load_location_embeddings(path, triangle)

    def test_short_row(self, tmp_path, triangle):
        path = tmp_path / 'loc.csv'
        path.write_text("id,e1,e2\nn0,1,2\nn1,3\nn2,5,6\n")
        with pytest.raises(RaggedRows):
            load_location_embeddings(path, triangle)

    def test_long_row(self, tmp_path, triangle):
        path = tmp_path / 'loc.csv'
        path.write_text("id,e1,e2\nn0,1,2\nn1,3,4,9\nn2,5,6\n")
        with pytest.raises(RaggedRows):
            load_location_embeddings(path, triangle)

    def test_coordinate_fallback_width(self, grid5):
        encoding = fallback_coordinate_encoding(grid5, 3)
        assert encoding.dim == 12
        assert np.abs(encoding.values).max() <= 1.0


class TestPca:
    def test_axis_aligned_variance(self):
        matrix = np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
        fit = fit_pca(matrix)
        np.testing.assert_allclose(fit.ratios, [0.8, 0.2])
        np.testing.assert_allclose(fit.loadings[:, 0], [1.0, 0.0])
        np.testing.assert_allclose(fit.scores @ fit.loadings.T + fit.mean, matrix, atol=1e-12)

    def test_matches_covariance_eigendecomposition(self):
        matrix = np.random.default_rng(6).standard_normal((10, 5))
        eigenvalues, eigenvectors = np.linalg.eigh(np.cov(matrix, rowvar=False))
        expected = (matrix - matrix.mean(axis=0)) @ eigenvectors[:, ::-1][:, :2]
        scores = fit_pca(matrix).scores[:, :2]
        for j in range(2):
            sign = np.sign(scores[:, j] @ expected[:, j])
            np.testing.assert_allclose(scores[:, j], sign * expected[:, j], atol=1e-8)

    def test_ratios_descend(self):
        fit = fit_pca(np.random.default_rng(0).standard_normal((30, 5)) * [5, 1, 3, 0.5, 2])
        assert np.all(np.diff(fit.ratios) <= 0)
        assert fit.ratios.sum() == pytest.approx(1.0)

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            fit_pca(np.ones((1, 3)))

    def test_reduce_bounds(self):
        encoding = NodeEncoding(kind='location', values=np.random.default_rng(1).standard_normal((10, 4)))
        assert pca_reduce(encoding, 2).dim == 2
        with pytest.raises(KTooLarge):
            pca_reduce(encoding, 5)


class TestAssembly:
    def test_provenance_ranges(self, triangle):
        base = np.ones((3, 2))
        encodings = [random_walk_pe(triangle, 2), laplacian_smooth(triangle, base)]
        assembled = assemble_features(base, encodings, ['a', 'b'])
        assert assembled.values.shape == (3, 6)
        assert assembled.provenance == [('features', 0, 2), ('random_walk', 2, 4), ('laplacian_smooth', 4, 6)]
        assert assembled.columns[:3] == ['a', 'b', 'random_walk_1']
        assert assembled.source_of(5) == 'laplacian_smooth'

    def test_row_mismatch(self, triangle):
        with pytest.raises(ShapeMismatch):
            assemble_features(np.ones((4, 2)), [random_walk_pe(triangle)])

    def test_encoding_frame(self, triangle):
        frame = encoding_frame(random_walk_pe(triangle), triangle.region_ids)
        assert frame.columns.tolist() == ['id', 'random_walk_1']


class TestCombos:
    def test_parse(self):
        assert parse_encoding_combo('random_walk+location') == ['random_walk', 'location']
        assert parse_encoding_combo('none') == []

    def test_unknown(self):
        with pytest.raises(InvalidConfig):
            parse_encoding_combo('random_walk+magic')

    def test_compute_with_fallback_location(self, grid5):
        settings = EncodingSettings(spectral_dim=3, frequencies=4, pca_dim=8)
        encodings = compute_encoding('laplacian+random_walk+location', grid5, settings=settings)
        assert [e.kind for e in encodings] == ['laplacian_spectral', 'random_walk', 'location']
        assert [e.dim for e in encodings] == [3, 1, 8]

    def test_smooth_needs_features(self, grid5):
        with pytest.raises(InvalidConfig):
            compute_encoding('laplacian_smooth', grid5)


def relabel(graph, perm):
    """Graph whose node i is node perm[i] of the input"""
    return RegionGraph(regions=[graph.regions[p] for p in perm], adjacency=graph.adjacency[perm][:, perm])


class TestRelabelling:
    @pytest.fixture
    def perm(self):
        return np.random.default_rng(4).permutation(25)

    def test_random_walk(self, grid5, perm):
        expected = random_walk_pe(grid5, 3).values[perm]
        np.testing.assert_allclose(random_walk_pe(relabel(grid5, perm), 3).values, expected, atol=1e-12)

    def test_smoothing(self, grid5, perm):
        x = np.random.default_rng(5).standard_normal((25, 2))
        expected = laplacian_smooth(grid5, x, 0.5).values[perm]
        np.testing.assert_allclose(laplacian_smooth(relabel(grid5, perm), x[perm], 0.5).values, expected,
                                   atol=1e-12)

    def test_coordinate_sinusoids(self, grid5, perm):
        expected = fallback_coordinate_encoding(grid5, 3).values[perm]
        np.testing.assert_allclose(fallback_coordinate_encoding(relabel(grid5, perm), 3).values, expected)

    def test_spectral_up_to_column_sign(self):
        path = graph_from_edges(12, [(i, i + 1) for i in range(11)])
        perm = np.random.default_rng(6).permutation(12)
        expected = laplacian_spectral_pe(path, 3).values[perm]
        values = laplacian_spectral_pe(relabel(path, perm), 3).values
        # symmetric eigenvectors tie at both ends, so the sign pivot can move
        signs = np.sign(np.sum(values * expected, axis=0))
        np.testing.assert_allclose(values * signs, expected, atol=1e-8)
