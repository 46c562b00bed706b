"""
Spatial graph construction over geographic regions.

Regions become nodes positioned at their centroids; adjacency comes from
queen contiguity of boundary polygons or from k nearest centroids, and can
be widened to k-hop reach. Fold plans carve a test set plus its hop buffer
out of a graph for leakage-aware evaluation.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.spatial.distance import cdist
from shapely.geometry import MultiPolygon, Point, Polygon, mapping, shape

import artifacts
from errors import (DegenerateGeometry, DuplicateCentroid, EmptyTestSet, InputFileNotFound,
                    InvalidConfig, InvalidRegion, KTooLarge, MissingBoundary, MissingColumn,
                    MissingRegion)

logger = logging.getLogger(__name__)

Ring = Tuple[Tuple[float, float], ...]

# Row block size for brute-force centroid distance tables
DISTANCE_BLOCK = 1024


@dataclass(frozen=True)
class Region:
    """A geographic unit positioned at its centroid"""
    id: str
    centroid: Tuple[float, float]
    boundary: Optional[Tuple[Ring, ...]] = None
    group: Optional[str] = None

    def __post_init__(self):
        x, y = (float(v) for v in self.centroid)
        if not (np.isfinite(x) and np.isfinite(y)):
            raise InvalidRegion(f"Region {self.id!r} has a non-finite centroid", region_id=self.id)
        object.__setattr__(self, 'centroid', (x, y))
        if self.boundary is not None:
            rings = tuple(tuple((float(px), float(py)) for px, py in ring) for ring in self.boundary)
            if not rings or not rings[0]:
                raise InvalidRegion(f"Region {self.id!r} has an empty boundary", region_id=self.id)
            if rings[0][0] != rings[0][-1]:
                raise InvalidRegion(f"Region {self.id!r} boundary ring is not closed", region_id=self.id)
            object.__setattr__(self, 'boundary', rings)


@dataclass
class RegionGraph:
    """Regions as nodes with a symmetric 0/1 sparse adjacency"""
    regions: List[Region]
    adjacency: sp.csr_matrix

    def __post_init__(self):
        n = len(self.regions)
        adjacency = sp.csr_matrix(self.adjacency, dtype=np.float64)
        if adjacency.shape != (n, n):
            raise InvalidConfig(f"Adjacency shape {adjacency.shape} does not match {n} regions")
        adjacency.data[:] = 1.0
        adjacency.eliminate_zeros()
        adjacency.sort_indices()
        if adjacency.diagonal().any():
            raise InvalidConfig("Adjacency has self-loops")
        if (adjacency != adjacency.T).nnz:
            raise InvalidConfig("Adjacency is not symmetric")
        ids = [r.id for r in self.regions]
        if len(set(ids)) != n:
            raise InvalidRegion("Region ids are not unique")
        self.adjacency = adjacency

    @property
    def n_nodes(self) -> int:
        return len(self.regions)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    @property
    def region_ids(self) -> List[str]:
        return [r.id for r in self.regions]

    @property
    def centroids(self) -> np.ndarray:
        return np.array([r.centroid for r in self.regions], dtype=np.float64).reshape(-1, 2)

    @property
    def groups(self) -> List[Optional[str]]:
        return [r.group for r in self.regions]

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def edge_list(self) -> np.ndarray:
        upper = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return np.column_stack([upper.row[order], upper.col[order]]).astype(np.int64)

    @property
    def has_boundaries(self) -> bool:
        return all(r.boundary is not None for r in self.regions)

    def neighbors(self, node: int) -> np.ndarray:
        start, stop = self.adjacency.indptr[node], self.adjacency.indptr[node + 1]
        return self.adjacency.indices[start:stop]

    def with_adjacency(self, adjacency) -> 'RegionGraph':
        return RegionGraph(regions=list(self.regions), adjacency=adjacency)


@dataclass
class FoldPlan:
    """Test, buffer and train node sets for one evaluation fold"""
    fold_id: int
    test_nodes: np.ndarray
    buffer_nodes: np.ndarray
    train_nodes: np.ndarray
    hops: int
    warnings: List[str] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return int(self.test_nodes.size + self.buffer_nodes.size + self.train_nodes.size)

    def mask(self, nodes: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_nodes, dtype=bool)
        out[nodes] = True
        return out

    @property
    def test_mask(self) -> np.ndarray:
        return self.mask(self.test_nodes)

    @property
    def buffer_mask(self) -> np.ndarray:
        return self.mask(self.buffer_nodes)

    @property
    def train_mask(self) -> np.ndarray:
        return self.mask(self.train_nodes)

    @property
    def context_nodes(self) -> np.ndarray:
        """Test plus buffer nodes, sorted"""
        return np.union1d(self.test_nodes, self.buffer_nodes)


@dataclass
class InducedSubgraph:
    """Subgraph over a node subset with the map back to the parent indices"""
    graph: RegionGraph
    node_map: np.ndarray

    def local_index(self, nodes: Iterable[int]) -> np.ndarray:
        lookup = {int(orig): local for local, orig in enumerate(self.node_map)}
        return np.array([lookup[int(v)] for v in nodes], dtype=np.int64)


def _adjacency_from_pairs(n: int, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    data = np.ones(rows.size * 2, dtype=np.float64)
    adjacency = sp.coo_matrix((data, (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
                              shape=(n, n)).tocsr()
    adjacency.data[:] = 1.0
    return adjacency


def _region_polygon(region: Region) -> Polygon:
    if region.boundary is None:
        raise MissingBoundary(f"Region {region.id!r} has no boundary polygon", region_id=region.id)
    exterior = region.boundary[0]
    if len(set(exterior)) < 3:
        raise DegenerateGeometry(f"Region {region.id!r} boundary has fewer than 3 distinct vertices",
                                 region_id=region.id)
    return Polygon(exterior, holes=region.boundary[1:])


def build_contiguity_graph(regions: Sequence[Region]) -> RegionGraph:
    """Queen contiguity: regions touching at any boundary point are neighbours"""
    polygons = [_region_polygon(r) for r in regions]
    n = len(polygons)
    if n == 0:
        return RegionGraph(regions=[], adjacency=sp.csr_matrix((0, 0)))

    bounds = np.array([p.bounds for p in polygons], dtype=np.float64)
    minx, miny, maxx, maxy = bounds.T
    # Bounding boxes that touch or overlap are the only candidates
    overlap = ((minx[:, None] <= maxx[None, :]) & (minx[None, :] <= maxx[:, None])
               & (miny[:, None] <= maxy[None, :]) & (miny[None, :] <= maxy[:, None]))
    rows, cols = np.nonzero(np.triu(overlap, k=1))

    touching = np.array([polygons[i].intersects(polygons[j]) for i, j in zip(rows, cols)], dtype=bool)
    rows, cols = rows[touching], cols[touching]
    logger.info(f"Contiguity graph: {n} regions, {len(touching)} candidate pairs, {rows.size} edges")
    return RegionGraph(regions=list(regions), adjacency=_adjacency_from_pairs(n, rows, cols))


def knn_graph(regions: Sequence[Region], k: int) -> RegionGraph:
    """Symmetrised k-nearest-neighbour graph over centroids"""
    n = len(regions)
    if k < 1:
        raise InvalidConfig(f"k must be positive, got {k}")
    if k >= n:
        raise KTooLarge(f"k={k} must be smaller than the number of regions ({n})", k=k, n=n)

    coords = np.array([r.centroid for r in regions], dtype=np.float64)
    rows, cols = [], []
    for start in range(0, n, DISTANCE_BLOCK):
        stop = min(start + DISTANCE_BLOCK, n)
        dist = cdist(coords[start:stop], coords)
        local = np.arange(stop - start)
        dist[local, local + start] = np.inf
        hits = np.argwhere(dist == 0.0)
        if hits.size:
            i, j = int(hits[0, 0]) + start, int(hits[0, 1])
            raise DuplicateCentroid(
                f"Regions {regions[i].id!r} and {regions[j].id!r} share the centroid {regions[i].centroid}",
                region_id=regions[i].id)
        # stable sort keeps the smaller index first on equal distances
        nearest = np.argsort(dist, axis=1, kind='stable')[:, :k]
        rows.append(np.repeat(np.arange(start, stop), k))
        cols.append(nearest.ravel())

    adjacency = _adjacency_from_pairs(n, np.concatenate(rows), np.concatenate(cols))
    graph = RegionGraph(regions=list(regions), adjacency=adjacency)
    logger.info(f"k-NN graph (k={k}): {n} regions, {graph.n_edges} edges")
    return graph


def khop_expand(graph: RegionGraph, k: int) -> RegionGraph:
    """Connect every pair within shortest-path distance 1..k"""
    if k < 1:
        raise InvalidConfig(f"Hop count must be at least 1, got {k}")
    n = graph.n_nodes
    step = (graph.adjacency + sp.identity(n, format='csr')).tocsr()
    reach = sp.identity(n, format='csr', dtype=np.float64)
    for _ in range(k):
        reach = (reach @ step).tocsr()
        reach.data[:] = 1.0
    reach = (reach - sp.diags(reach.diagonal())).tocsr()
    reach.eliminate_zeros()
    expanded = graph.with_adjacency(reach)
    logger.info(f"{k}-hop expansion: {graph.n_edges} -> {expanded.n_edges} edges")
    return expanded


def within_hops(graph: RegionGraph, sources: np.ndarray, hops: int) -> np.ndarray:
    """Boolean mask of nodes at distance <= hops from any source"""
    reached = np.zeros(graph.n_nodes, dtype=bool)
    reached[sources] = True
    frontier = reached.copy()
    for _ in range(hops):
        step = (graph.adjacency @ frontier.astype(np.float64)) > 0
        step &= ~reached
        if not step.any():
            break
        reached |= step
        frontier = step
    return reached


def induced_subgraph(graph: RegionGraph, nodes: Iterable[int]) -> InducedSubgraph:
    node_map = np.unique(np.asarray(list(nodes), dtype=np.int64))
    sub_adjacency = graph.adjacency[node_map][:, node_map]
    regions = [graph.regions[i] for i in node_map]
    return InducedSubgraph(graph=RegionGraph(regions=regions, adjacency=sub_adjacency), node_map=node_map)


def subgraph_with_buffer(graph: RegionGraph, test_nodes: Iterable[int], hops: int,
                         fold_id: int = 0) -> Tuple[FoldPlan, InducedSubgraph]:
    """Split nodes into test, hop buffer and train; return the test+buffer subgraph"""
    test = np.unique(np.asarray(list(test_nodes), dtype=np.int64))
    if test.size == 0:
        raise EmptyTestSet(f"Fold {fold_id} has no test nodes")
    if test[0] < 0 or test[-1] >= graph.n_nodes:
        raise InvalidConfig(f"Fold {fold_id} test node index out of range 0..{graph.n_nodes - 1}")
    if hops < 0:
        raise InvalidConfig(f"Buffer hops must be non-negative, got {hops}")

    reached = within_hops(graph, test, hops)
    is_test = np.zeros(graph.n_nodes, dtype=bool)
    is_test[test] = True
    plan = FoldPlan(
        fold_id=fold_id,
        test_nodes=test,
        buffer_nodes=np.flatnonzero(reached & ~is_test),
        train_nodes=np.flatnonzero(~reached),
        hops=hops,
    )
    subgraph = induced_subgraph(graph, np.flatnonzero(reached))
    n_parts = len(connected_components(subgraph.graph))
    if n_parts > 1:
        message = f"Fold {fold_id}: test+buffer subgraph has {n_parts} connected components"
        logger.warning(message)
        plan.warnings.append(message)
    return plan, subgraph


def connected_components(graph: RegionGraph) -> List[List[int]]:
    """Node sets of each component, ordered by smallest contained index"""
    if graph.n_nodes == 0:
        return []
    _, labels = csgraph.connected_components(graph.adjacency, directed=False)
    components: Dict[int, List[int]] = {}
    for node, label in enumerate(labels):
        components.setdefault(int(label), []).append(node)
    return sorted(components.values(), key=lambda nodes: nodes[0])


def build_base_graph(regions: Sequence[Region], base: str = 'contiguity', k: int = 8) -> RegionGraph:
    if base not in ('contiguity', 'knn'):
        raise InvalidConfig(f"Unknown base graph {base!r} (expected contiguity or knn)")
    if base == 'knn':
        return knn_graph(regions, k)
    if all(r.boundary is not None for r in regions):
        return build_contiguity_graph(regions)
    fallback_k = min(k, len(regions) - 1)
    if fallback_k < k:
        logger.warning(f"Some regions lack boundaries; falling back to k-NN with k clamped from {k} to "
                       f"{fallback_k} ({len(regions)} regions)")
    else:
        logger.warning(f"Some regions lack boundaries; falling back to k-NN (k={k})")
    return knn_graph(regions, fallback_k)


def graph_summary(graph: RegionGraph) -> Dict[str, int]:
    components = connected_components(graph)
    return {
        'nodes': graph.n_nodes,
        'edges': graph.n_edges,
        'components': len(components),
        'isolated': int(np.sum(graph.degrees == 0)),
    }


# === FILE I/O ===

def _rings_from_geometry(geom) -> Tuple[Ring, ...]:
    return (tuple(geom.exterior.coords),) + tuple(tuple(hole.coords) for hole in geom.interiors)


def _region_from_feature(feature: dict, index: int) -> Region:
    props = feature.get('properties') or {}
    region_id = props.get('id', feature.get('id'))
    if region_id is None:
        raise InvalidRegion(f"Feature {index} has no id property")
    region_id = str(region_id)
    group = props.get('group')
    group = None if group is None else str(group)

    geom = shape(feature['geometry'])
    boundary = None
    if isinstance(geom, MultiPolygon):
        parts = sorted(geom.geoms, key=lambda part: part.area, reverse=True)
        logger.warning(f"Region {region_id!r} is a MultiPolygon; keeping its largest of {len(parts)} parts")
        geom = parts[0]
    if isinstance(geom, Polygon):
        boundary = _rings_from_geometry(geom)
        centroid = (geom.centroid.x, geom.centroid.y)
    elif isinstance(geom, Point):
        centroid = (geom.x, geom.y)
    else:
        raise InvalidRegion(f"Region {region_id!r} has unsupported geometry {geom.geom_type}",
                            region_id=region_id)
    if 'x' in props and 'y' in props:
        centroid = (props['x'], props['y'])
    return Region(id=region_id, centroid=centroid, boundary=boundary, group=group)


def load_regions(path) -> List[Region]:
    """Load regions from a GeoJSON FeatureCollection or an id,x,y[,group] CSV"""
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)

    if path.suffix.lower() == '.csv':
        frame = pd.read_csv(path, dtype={'id': str, 'group': str})
        missing = [c for c in ('id', 'x', 'y') if c not in frame.columns]
        if missing:
            raise MissingColumn(f"{path} lacks columns {missing}", column=missing[0])
        has_group = 'group' in frame.columns
        regions = []
        for row in frame.itertuples(index=False):
            group = getattr(row, 'group') if has_group else None
            group = None if group is None or pd.isna(group) else str(group)
            regions.append(Region(id=str(row.id), centroid=(row.x, row.y), group=group))
    else:
        with open(path, 'r', encoding='utf-8') as handle:
            collection = json.load(handle)
        features = collection.get('features', [])
        regions = [_region_from_feature(feature, i) for i, feature in enumerate(features)]

    ids = [r.id for r in regions]
    if len(set(ids)) != len(ids):
        duplicate = pd.Series(ids)[pd.Series(ids).duplicated()].iloc[0]
        raise InvalidRegion(f"Duplicate region id {duplicate!r} in {path}", region_id=duplicate)
    logger.info(f"Loaded {len(regions)} regions from {path}")
    return regions


def regions_to_geojson(regions: Sequence[Region], properties: Optional[pd.DataFrame] = None) -> dict:
    """FeatureCollection with polygon (or point) geometry and optional per-region properties"""
    features = []
    for i, region in enumerate(regions):
        if region.boundary is not None:
            geometry = mapping(Polygon(region.boundary[0], holes=region.boundary[1:]))
        else:
            geometry = mapping(Point(region.centroid))
        props = {'id': region.id, 'group': region.group}
        if properties is not None:
            props.update(properties.iloc[i].to_dict())
        features.append({'type': 'Feature', 'geometry': geometry, 'properties': props})
    return artifacts.to_jsonable({'type': 'FeatureCollection', 'features': features})


def write_edge_list(graph: RegionGraph, path) -> Path:
    ids = np.array(graph.region_ids, dtype=object)
    edges = graph.edge_list
    frame = pd.DataFrame({'src': ids[edges[:, 0]] if len(edges) else [],
                          'dst': ids[edges[:, 1]] if len(edges) else []})
    return artifacts.write_csv(frame, path)


def read_edge_list(path, regions: Sequence[Region]) -> RegionGraph:
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)
    frame = pd.read_csv(path, dtype=str)
    missing = [c for c in ('src', 'dst') if c not in frame.columns]
    if missing:
        raise MissingColumn(f"{path} lacks columns {missing}", column=missing[0])
    index = {r.id: i for i, r in enumerate(regions)}
    for column in ('src', 'dst'):
        unknown = ~frame[column].isin(list(index))
        if unknown.any():
            raise MissingRegion(frame.loc[unknown, column].iloc[0], source=str(path))
    rows = frame['src'].map(index).to_numpy(dtype=np.int64)
    cols = frame['dst'].map(index).to_numpy(dtype=np.int64)
    graph = RegionGraph(regions=list(regions), adjacency=_adjacency_from_pairs(len(regions), rows, cols))
    logger.info(f"Read {graph.n_edges} edges from {path}")
    return graph
