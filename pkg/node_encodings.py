"""
Positional and locational node encodings appended to region features.

Spectral Laplacian eigenvectors, one-pass Laplacian smoothing, random-walk
return probabilities, external location embeddings (reduced with PCA) and a
sinusoidal coordinate encoder used when no embedding file is available.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp

from errors import (DimTooLarge, InputFileNotFound, InvalidConfig, KTooLarge, MissingColumn,
                    MissingRegion, RaggedRows, ShapeMismatch, TooFewRows)
from features import FeatureTable
from geo_graph import RegionGraph

logger = logging.getLogger(__name__)

KINDS = ('laplacian_spectral', 'laplacian_smooth', 'random_walk', 'location')

# Encoding names accepted on the command line and in the ablation grid
ENCODING_NAMES = ('none', 'laplacian', 'laplacian_smooth', 'random_walk', 'location')

EIGEN_TOLERANCE = 1e-10


@dataclass
class NodeEncoding:
    kind: str
    values: np.ndarray
    eigenvalues: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"Unknown encoding kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"Encoding values must be 2-D, got shape {self.values.shape}")

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def columns(self) -> List[str]:
        return [f"{self.kind}_{t}" for t in range(1, self.dim + 1)]


@dataclass
class PcaFit:
    """Covariance-eigendecomposition PCA; components are columns of `loadings`"""
    mean: np.ndarray
    loadings: np.ndarray
    eigenvalues: np.ndarray
    ratios: np.ndarray
    scores: np.ndarray


@dataclass
class AssembledFeatures:
    values: np.ndarray
    columns: List[str]
    provenance: List[Tuple[str, int, int]] = field(default_factory=list)

    def source_of(self, column_index: int) -> str:
        for source, start, stop in self.provenance:
            if start <= column_index < stop:
                return source
        raise KeyError(column_index)


@dataclass
class EncodingSettings:
    spectral_dim: int = 8
    rw_steps: int = 1
    smooth_lambda: float = 1.0
    location_path: Optional[str] = None
    pca_dim: int = 8
    frequencies: int = 4


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive"""
    if vectors.size == 0:
        return vectors
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def laplacian_spectral_pe(graph: RegionGraph, d: int) -> NodeEncoding:
    """Eigenvectors of the symmetric normalized Laplacian for the d smallest nontrivial eigenvalues"""
    n = graph.n_nodes
    if d < 1:
        raise InvalidConfig(f"Spectral dimension must be positive, got {d}")
    if graph.n_edges == 0:
        raise DimTooLarge("Spectral encoding needs a graph with at least one edge")
    if d >= n:
        raise DimTooLarge(f"Spectral dimension {d} must be smaller than the node count {n}")

    degrees = graph.degrees
    active = np.flatnonzero(degrees > 0)
    adjacency = graph.adjacency[active][:, active].toarray()
    inv_sqrt = 1.0 / np.sqrt(degrees[active])
    laplacian = np.eye(active.size) - inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]
    eigenvalues, eigenvectors = scipy.linalg.eigh(laplacian)

    nontrivial = np.flatnonzero(eigenvalues >= EIGEN_TOLERANCE)
    if nontrivial.size < d:
        raise DimTooLarge(f"Only {nontrivial.size} nontrivial eigenpairs available, {d} requested")
    picks = nontrivial[:d]
    values = np.zeros((n, d))
    values[active] = _sign_fix(eigenvectors[:, picks])
    logger.info(f"Spectral PE: d={d}, eigenvalues {eigenvalues[picks[0]]:.4g}..{eigenvalues[picks[-1]]:.4g}")
    return NodeEncoding(kind='laplacian_spectral', values=values, eigenvalues=eigenvalues[picks])


def laplacian_smooth(graph: RegionGraph, features: Union[FeatureTable, np.ndarray],
                     lam: float = 1.0) -> NodeEncoding:
    """One pass of h_i = sum_j A_ij x_j + lam * deg(i) * x_i"""
    x = features.values if isinstance(features, FeatureTable) else np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != graph.n_nodes:
        raise ShapeMismatch(f"Feature rows ({x.shape[0]}) do not match graph nodes ({graph.n_nodes})")
    smoothed = graph.adjacency @ x + lam * graph.degrees[:, None] * x
    return NodeEncoding(kind='laplacian_smooth', values=np.asarray(smoothed))


def transition_matrix(graph: RegionGraph) -> sp.csr_matrix:
    """Row-normalized random-walk operator D^-1 A; isolated rows stay zero"""
    degrees = graph.degrees
    inverse = np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0)
    return sp.diags(inverse) @ graph.adjacency


def random_walk_pe(graph: RegionGraph, steps: int = 1) -> NodeEncoding:
    """Return probabilities diag(P^t) for t = 1..steps"""
    if steps < 1:
        raise InvalidConfig(f"Random-walk steps must be positive, got {steps}")
    transition = transition_matrix(graph).tocsr()
    power = transition
    columns = []
    for _ in range(steps):
        columns.append(power.diagonal())
        power = (power @ transition).tocsr()
    return NodeEncoding(kind='random_walk', values=np.column_stack(columns))


def load_location_embeddings(path, graph: RegionGraph) -> NodeEncoding:
    """Read an id + uniform-width embedding CSV aligned to graph order"""
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)
    try:
        frame = pd.read_csv(path, dtype={'id': str})
    except pd.errors.ParserError as exc:
        raise RaggedRows(f"{path} has rows of unequal width: {exc}") from exc
    if 'id' not in frame.columns:
        raise MissingColumn(f"{path} has no 'id' column", column='id')
    values = frame.drop(columns='id').apply(pd.to_numeric, errors='coerce')
    if values.isna().any().any():
        row = int(np.flatnonzero(values.isna().any(axis=1).to_numpy())[0])
        raise RaggedRows(f"{path} row {row + 1} is short or non-numeric")

    index = {str(region_id): i for i, region_id in enumerate(frame['id'])}
    for region_id in graph.region_ids:
        if region_id not in index:
            raise MissingRegion(region_id, source=str(path))
    order = [index[r] for r in graph.region_ids]
    matrix = values.to_numpy(dtype=np.float64)[order]
    logger.info(f"Loaded location embeddings {path}: width {matrix.shape[1]}")
    return NodeEncoding(kind='location', values=matrix)


def fallback_coordinate_encoding(graph: RegionGraph, frequencies: int) -> NodeEncoding:
    """Sinusoids of min-max normalized centroids, 4 features per octave"""
    if frequencies < 1:
        raise InvalidConfig(f"Frequencies must be positive, got {frequencies}")
    coords = graph.centroids
    low = coords.min(axis=0)
    span = coords.max(axis=0) - low
    unit = np.divide(coords - low, span, out=np.zeros_like(coords), where=span > 0)
    columns = []
    for octave in range(frequencies):
        scale = (2.0 ** octave) * np.pi
        ux, uy = scale * unit[:, 0], scale * unit[:, 1]
        columns.extend([np.sin(ux), np.cos(ux), np.sin(uy), np.cos(uy)])
    return NodeEncoding(kind='location', values=np.column_stack(columns))


def fit_pca(matrix: np.ndarray) -> PcaFit:
    """PCA by eigendecomposition of the sample covariance, components in descending variance"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] < 2:
        raise TooFewRows(f"PCA needs at least 2 rows, got {matrix.shape[0]}")
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    covariance = centered.T @ centered / (matrix.shape[0] - 1)
    eigenvalues, eigenvectors = scipy.linalg.eigh(covariance)
    order = np.argsort(-eigenvalues, kind='stable')
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    loadings = _sign_fix(eigenvectors[:, order])
    total = eigenvalues.sum()
    ratios = eigenvalues / total if total > 0 else np.zeros_like(eigenvalues)
    return PcaFit(mean=mean, loadings=loadings, eigenvalues=eigenvalues, ratios=ratios,
                  scores=centered @ loadings)


def pca_reduce(encoding: NodeEncoding, k: int) -> NodeEncoding:
    if k < 1 or k > encoding.dim:
        raise KTooLarge(f"PCA target {k} must be between 1 and the encoding width {encoding.dim}")
    fit = fit_pca(encoding.values)
    logger.info(f"PCA {encoding.kind}: {encoding.dim} -> {k} dims, "
                f"explained {fit.ratios[:k].sum():.3f} of variance")
    return NodeEncoding(kind=encoding.kind, values=fit.scores[:, :k])


def assemble_features(base: Union[FeatureTable, np.ndarray], encodings: Sequence[NodeEncoding],
                      base_columns: Optional[Sequence[str]] = None) -> AssembledFeatures:
    """Concatenate base features then encodings in order, recording column provenance"""
    if isinstance(base, FeatureTable):
        values, columns = base.values, list(base.columns)
    else:
        values = np.asarray(base, dtype=np.float64)
        columns = list(base_columns) if base_columns is not None else \
            [f"feature_{j + 1}" for j in range(values.shape[1])]
    blocks = [values]
    provenance = [('features', 0, values.shape[1])]
    offset = values.shape[1]
    for encoding in encodings:
        if encoding.values.shape[0] != values.shape[0]:
            raise ShapeMismatch(f"{encoding.kind} encoding has {encoding.values.shape[0]} rows, "
                                f"features have {values.shape[0]}")
        blocks.append(encoding.values)
        columns.extend(encoding.columns)
        provenance.append((encoding.kind, offset, offset + encoding.dim))
        offset += encoding.dim
    return AssembledFeatures(values=np.hstack(blocks), columns=columns, provenance=provenance)


def encoding_frame(encoding: NodeEncoding, region_ids: Sequence[str]) -> pd.DataFrame:
    frame = pd.DataFrame(encoding.values, columns=encoding.columns)
    frame.insert(0, 'id', list(region_ids))
    return frame


def parse_encoding_combo(combo: str) -> List[str]:
    """Split 'random_walk+location' into validated encoding names"""
    names = [part.strip() for part in combo.split('+') if part.strip()]
    for name in names:
        if name not in ENCODING_NAMES:
            raise InvalidConfig(f"Unknown encoding {name!r} (expected one of {ENCODING_NAMES})")
    return [n for n in names if n != 'none']


def compute_encoding(combo: str, graph: RegionGraph, features: Optional[np.ndarray] = None,
                     settings: Optional[EncodingSettings] = None) -> List[NodeEncoding]:
    """Build every encoding named in a '+'-joined combination"""
    settings = settings or EncodingSettings()
    encodings = []
    for name in parse_encoding_combo(combo):
        if name == 'laplacian':
            encodings.append(laplacian_spectral_pe(graph, settings.spectral_dim))
        elif name == 'laplacian_smooth':
            if features is None:
                raise InvalidConfig("laplacian_smooth needs the base feature matrix")
            encodings.append(laplacian_smooth(graph, features, settings.smooth_lambda))
        elif name == 'random_walk':
            encodings.append(random_walk_pe(graph, settings.rw_steps))
        elif name == 'location':
            if settings.location_path:
                location = load_location_embeddings(settings.location_path, graph)
            else:
                logger.info(f"No location embedding file; using {settings.frequencies}-octave coordinate encoding")
                location = fallback_coordinate_encoding(graph, settings.frequencies)
            if location.dim > settings.pca_dim:
                location = pca_reduce(location, settings.pca_dim)
            encodings.append(location)
    return encodings
