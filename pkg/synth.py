"""
Deterministic synthetic geodata on a unit-square grid.

Features are seeded Gaussian noise smoothed over the queen-contiguity graph,
optionally extended with near-duplicate columns, and the outcome mixes a
linear signal, a spatial lag term, an optional squared term and noise.
Everything written here loads back through geo_graph and features.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

import artifacts
from baselines import spatial_weights
from errors import DegenerateData, InvalidConfig
from features import FeatureTable, TargetVector
from geo_graph import Region, RegionGraph, build_contiguity_graph, regions_to_geojson

logger = logging.getLogger(__name__)

LAG_MODES = ('approximate', 'exact')


@dataclass
class SynthConfig:
    """Grid size, feature construction and outcome model for one synthetic dataset"""
    grid_rows: int = 20
    grid_cols: int = 20
    n_features: int = 6
    spatial_smoothing_passes: int = 5
    collinear_pairs: List[Tuple[int, float]] = field(default_factory=list)
    beta: Optional[List[float]] = None
    rho: float = 0.4
    nonlinear: bool = False
    noise_std: float = 0.5
    lag_mode: str = 'approximate'
    fixed_controls: List[str] = field(default_factory=list)
    outcome_name: str = 'outcome'
    seed: int = 0

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1 or self.n_features < 1:
            raise InvalidConfig("Grid dimensions and feature count must be positive")
        if self.grid_rows * self.grid_cols < 2:
            raise InvalidConfig("A synthetic grid needs at least two cells")
        if self.spatial_smoothing_passes < 0:
            raise InvalidConfig("Smoothing passes must be non-negative")
        if not -1.0 < self.rho < 1.0:
            raise InvalidConfig(f"rho must lie in (-1, 1), got {self.rho}")
        if self.noise_std < 0:
            raise InvalidConfig(f"noise_std must be non-negative, got {self.noise_std}")
        if self.lag_mode not in LAG_MODES:
            raise InvalidConfig(f"Unknown lag mode {self.lag_mode!r} (expected one of {LAG_MODES})")
        pairs = []
        for pair in self.collinear_pairs:
            source, std = int(pair[0]), float(pair[1])
            if not 0 <= source < self.n_features:
                raise InvalidConfig(f"Collinear source column {source} is out of range")
            if std < 0:
                raise InvalidConfig("Collinear noise std must be non-negative")
            pairs.append((source, std))
        self.collinear_pairs = pairs
        if self.beta is None:
            self.beta = [(-1.0) ** j / (j + 1) for j in range(self.n_features)]
        self.beta = [float(b) for b in self.beta]
        if len(self.beta) != self.n_features:
            raise InvalidConfig(f"beta has {len(self.beta)} entries for {self.n_features} features")

    @property
    def n_regions(self) -> int:
        return self.grid_rows * self.grid_cols

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'SynthConfig':
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig(f"Unknown synth settings {unknown}")
        return cls(**dict(data))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SynthData:
    config: SynthConfig
    regions: List[Region]
    graph: RegionGraph
    features: FeatureTable
    target: TargetVector
    truth: Dict[str, Any]


def grid_regions(rows: int, cols: int) -> List[Region]:
    """Unit-square cells labelled rRRcCC with compass-quadrant groups"""
    width, height = 1.0 / cols, 1.0 / rows
    regions = []
    for r in range(rows):
        for c in range(cols):
            x0, x1 = c * width, (c + 1) * width
            y0, y1 = r * height, (r + 1) * height
            ring = ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))
            group = ('N' if r >= rows / 2 else 'S') + ('E' if c >= cols / 2 else 'W')
            regions.append(Region(id=f"r{r:02d}c{c:02d}", centroid=((x0 + x1) / 2, (y0 + y1) / 2),
                                  boundary=(ring,), group=group))
    return regions


def _standardize_columns(values: np.ndarray) -> np.ndarray:
    std = values.std(axis=0)
    return (values - values.mean(axis=0)) / np.where(std > 0, std, 1.0)


def smooth(graph: RegionGraph, values: np.ndarray, passes: int) -> np.ndarray:
    """Repeated averaging over each node and its neighbours"""
    with_self = graph.adjacency + sp.identity(graph.n_nodes, format='csr')
    row_sums = np.asarray(with_self.sum(axis=1)).ravel()
    averaging = (sp.diags(1.0 / row_sums) @ with_self).tocsr()
    for _ in range(passes):
        values = averaging @ values
    return values


def generate(config: SynthConfig) -> SynthData:
    logger.info(f"=== GENERATING SYNTHETIC GRID {config.grid_rows}x{config.grid_cols} (seed={config.seed}) ===")
    rng = np.random.default_rng(config.seed)
    regions = grid_regions(config.grid_rows, config.grid_cols)
    graph = build_contiguity_graph(regions)
    n = graph.n_nodes

    base = _standardize_columns(smooth(graph, rng.standard_normal((n, config.n_features)),
                                       config.spatial_smoothing_passes))
    columns = [f"f{j}" for j in range(config.n_features)]
    extra_values, collinear = [], {}
    for i, (source, std) in enumerate(config.collinear_pairs):
        name = f"f{source}_dup{i}"
        extra_values.append(base[:, source] + std * rng.standard_normal(n))
        collinear[name] = {'source': columns[source], 'noise_std': std}
        columns.append(name)
    values = np.column_stack([base] + extra_values) if extra_values else base

    unknown = [c for c in config.fixed_controls if c not in columns]
    if unknown:
        raise InvalidConfig(f"Fixed controls {unknown} are not synthetic columns")

    signal = base @ np.asarray(config.beta)
    if config.nonlinear:
        signal = signal + base[:, 0] ** 2
    noise = config.noise_std * rng.standard_normal(n)
    weights = spatial_weights(graph).matrix
    if config.lag_mode == 'exact':
        system = (sp.identity(n, format='csc') - config.rho * weights).tocsc()
        y = spsolve(system, signal + noise)
    else:
        y = signal + config.rho * (weights @ signal) + noise

    ids = [r.id for r in regions]
    table = FeatureTable(region_ids=ids, columns=columns, fixed=[c in config.fixed_controls for c in columns],
                         values=values, row_mask=np.ones(n, dtype=bool))
    target = TargetVector(outcome_name=config.outcome_name, values=np.asarray(y, dtype=np.float64),
                          mask=np.ones(n, dtype=bool))
    truth = {
        'beta': dict(zip(columns[:config.n_features], config.beta)),
        'rho': config.rho,
        'lag_mode': config.lag_mode,
        'nonlinear': config.nonlinear,
        'noise_std': config.noise_std,
        'collinear': collinear,
        'outcome_name': config.outcome_name,
    }
    logger.info(f"Synthetic data: {n} regions, {graph.n_edges} edges, {len(columns)} features")
    return SynthData(config=config, regions=regions, graph=graph, features=table, target=target, truth=truth)


def neighbor_correlation(values: np.ndarray, graph: RegionGraph) -> np.ndarray:
    """Moran's I per column with row-standardized weights"""
    values = np.asarray(values, dtype=np.float64)
    single = values.ndim == 1
    if single:
        values = values[:, None]
    centered = values - values.mean(axis=0)
    denominator = (centered ** 2).sum(axis=0)
    if np.any(denominator == 0):
        raise DegenerateData("Neighbour correlation is undefined for a constant column")
    weights = spatial_weights(graph).matrix
    statistic = (centered * (weights @ centered)).sum(axis=0) / denominator
    return statistic[0] if single else statistic


def write_synth(data: SynthData, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    targets = pd.DataFrame({'id': data.features.region_ids, data.target.outcome_name: data.target.values})
    fixed = ''.join(f"{name}\n" for name in data.features.fixed_columns)
    outputs = [
        artifacts.write_json(regions_to_geojson(data.regions), out_dir / 'regions.geojson'),
        artifacts.write_csv(data.features.to_frame(), out_dir / 'features.csv'),
        artifacts.write_csv(targets, out_dir / 'targets.csv'),
        artifacts.atomic_write_text(out_dir / 'fixed_controls.txt', fixed),
        artifacts.write_json(data.truth, out_dir / 'truth.json'),
        artifacts.write_json(data.config.to_dict(), out_dir / 'synth_config.json'),
    ]
    logger.info(f"Synthetic dataset written to {out_dir}")
    return outputs
