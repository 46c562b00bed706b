import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from geo_graph import Region, RegionGraph, _adjacency_from_pairs, build_contiguity_graph  # noqa: E402
from synth import grid_regions  # noqa: E402


def graph_from_edges(n, edges, groups=None):
    regions = [Region(id=f"n{i}", centroid=(float(i), 0.0), group=None if groups is None else groups[i])
               for i in range(n)]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return RegionGraph(regions=regions, adjacency=_adjacency_from_pairs(n, edges[:, 0], edges[:, 1]))


@pytest.fixture
def path_graph():
    """0-1-2-3-4"""
    return graph_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])


@pytest.fixture
def triangle():
    return graph_from_edges(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def cycle10():
    return graph_from_edges(10, [(i, (i + 1) % 10) for i in range(10)])


@pytest.fixture
def grid5():
    return build_contiguity_graph(grid_regions(5, 5))


@pytest.fixture
def grid10():
    return build_contiguity_graph(grid_regions(10, 10))
