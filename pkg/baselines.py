"""
Statistical reference models: ordinary least squares, the spatial lag
model fitted by concentrated maximum likelihood, and geographically
weighted regression with a Gaussian kernel. Predictions produced by
external tools can be loaded for the same comparison tables.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp
import statsmodels.api as sm
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import spsolve
from scipy.spatial.distance import cdist

from errors import (DegenerateData, InputFileNotFound, InvalidConfig, MissingColumn, MissingRegion,
                    NonConvergence, RankDeficient, ShapeMismatch)
from features import parse_numeric_frame
from geo_graph import RegionGraph

logger = logging.getLogger(__name__)

# Local designs above this condition number fall back to global OLS
CONDITION_LIMIT = 1e12

SLM_TOLERANCE = 1e-6
SLM_BOUND_MARGIN = 1e-6

GWR_BLOCK = 256


@dataclass
class OlsResult:
    coefficients: np.ndarray
    r2: float
    fitted: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return _with_intercept(x) @ self.coefficients


@dataclass
class SpatialWeights:
    """Row-standardized weights; rows of isolated nodes stay zero"""
    matrix: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    def lag(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values


@dataclass
class SlmResult:
    rho: float
    coefficients: np.ndarray
    r2: float
    log_likelihood: float
    bounds: tuple
    fitted: np.ndarray

    def predict(self, graph: RegionGraph, x: np.ndarray) -> np.ndarray:
        """Reduced form (I - rho W)^-1 X beta; uses no outcome values"""
        weights = spatial_weights(graph).matrix
        system = (sp.identity(graph.n_nodes, format='csc') - self.rho * weights).tocsc()
        return np.asarray(spsolve(system, _with_intercept(x) @ self.coefficients)).ravel()


@dataclass
class GwrConfig:
    kernel: str = 'gaussian'
    bandwidth: Optional[float] = None
    adaptive_k: Optional[int] = None
    candidates: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kernel != 'gaussian':
            raise InvalidConfig(f"Only the gaussian kernel is supported, got {self.kernel!r}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise InvalidConfig(f"Bandwidth must be positive, got {self.bandwidth}")
        if self.adaptive_k is not None and self.adaptive_k < 1:
            raise InvalidConfig(f"Adaptive neighbour count must be positive, got {self.adaptive_k}")
        if any(c <= 0 for c in self.candidates):
            raise InvalidConfig("Candidate bandwidths must be positive")


@dataclass
class GwrResult:
    coefficients: np.ndarray
    predictions: np.ndarray
    r2: float
    bandwidth: float
    selection: pd.DataFrame
    fallback_regions: List[int] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _with_intercept(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return sm.add_constant(x, has_constant='add')


def _r2(y: np.ndarray, y_hat: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return float('nan')
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


# === OLS ===

def ols_fit(x: np.ndarray, y: np.ndarray) -> OlsResult:
    """Least squares with intercept; coefficients are (intercept, slopes...)"""
    design = _with_intercept(x)
    y = np.asarray(y, dtype=np.float64)
    if design.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"Design has {design.shape[0]} rows, target has {y.shape[0]}")
    if design.shape[0] <= design.shape[1] - 1 or np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficient(f"OLS design of shape {design.shape} is not full column rank")
    fit = sm.OLS(y, design).fit()
    return OlsResult(coefficients=np.asarray(fit.params), r2=_r2(y, fit.fittedvalues),
                     fitted=np.asarray(fit.fittedvalues))


# === SPATIAL LAG MODEL ===

def spatial_weights(graph: RegionGraph) -> SpatialWeights:
    degrees = graph.degrees
    inverse = np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0)
    return SpatialWeights(matrix=(sp.diags(inverse) @ graph.adjacency).tocsr())


def weight_eigenvalues(graph: RegionGraph) -> np.ndarray:
    """Eigenvalues of D^-1 A via its symmetric similar form D^-1/2 A D^-1/2"""
    degrees = graph.degrees
    inv_sqrt = np.divide(1.0, np.sqrt(degrees), out=np.zeros_like(degrees), where=degrees > 0)
    symmetric = (sp.diags(inv_sqrt) @ graph.adjacency @ sp.diags(inv_sqrt)).toarray()
    return scipy.linalg.eigvalsh(symmetric)


@dataclass
class _LagTerms:
    design: np.ndarray
    y: np.ndarray
    lagged: np.ndarray
    residual_y: np.ndarray
    residual_lag: np.ndarray
    beta_y: np.ndarray
    beta_lag: np.ndarray
    eigenvalues: np.ndarray


def _lag_terms(graph: RegionGraph, x: np.ndarray, y: np.ndarray) -> _LagTerms:
    design = _with_intercept(x)
    y = np.asarray(y, dtype=np.float64)
    if design.shape[0] != graph.n_nodes or y.shape[0] != graph.n_nodes:
        raise ShapeMismatch(f"SLM inputs must have {graph.n_nodes} rows")
    if np.ptp(y) == 0:
        raise DegenerateData("SLM needs a non-constant outcome")
    lagged = spatial_weights(graph).lag(y)
    beta_y = np.linalg.lstsq(design, y, rcond=None)[0]
    beta_lag = np.linalg.lstsq(design, lagged, rcond=None)[0]
    return _LagTerms(design=design, y=y, lagged=lagged, residual_y=y - design @ beta_y,
                     residual_lag=lagged - design @ beta_lag, beta_y=beta_y, beta_lag=beta_lag,
                     eigenvalues=weight_eigenvalues(graph))


def _concentrated_ll(rho: float, terms: _LagTerms) -> float:
    n = terms.y.shape[0]
    residual = terms.residual_y - rho * terms.residual_lag
    sigma2 = float(residual @ residual) / n
    log_det = float(np.sum(np.log(1.0 - rho * terms.eigenvalues)))
    return -0.5 * n * (np.log(2.0 * np.pi) + np.log(sigma2) + 1.0) + log_det


def slm_log_likelihood(rho: float, graph: RegionGraph, x: np.ndarray, y: np.ndarray) -> float:
    """Concentrated log-likelihood of the spatial lag model at rho"""
    return _concentrated_ll(rho, _lag_terms(graph, x, y))


def slm_bounds(eigenvalues: np.ndarray) -> tuple:
    smallest = float(eigenvalues.min())
    if smallest >= 0:
        raise NonConvergence("Spatial weights have no negative eigenvalue; the rho interval is undefined")
    return (1.0 / smallest + SLM_BOUND_MARGIN, 1.0 - SLM_BOUND_MARGIN)


def slm_fit(graph: RegionGraph, x: np.ndarray, y: np.ndarray) -> SlmResult:
    """Fit y = rho W y + X beta + e by maximizing the concentrated likelihood over rho"""
    terms = _lag_terms(graph, x, y)
    if graph.n_edges == 0:
        raise NonConvergence("Spatial lag model needs a graph with edges")
    bounds = slm_bounds(terms.eigenvalues)
    search = minimize_scalar(lambda rho: -_concentrated_ll(rho, terms), bounds=bounds,
                             method='bounded', options={'xatol': SLM_TOLERANCE})
    if not search.success or not np.isfinite(search.fun):
        raise NonConvergence(f"Likelihood search over rho in {bounds} failed: {search.message}")
    rho = float(search.x)
    coefficients = terms.beta_y - rho * terms.beta_lag
    result = SlmResult(rho=rho, coefficients=coefficients, r2=0.0, log_likelihood=-float(search.fun),
                       bounds=bounds, fitted=np.zeros_like(terms.y))
    result.fitted = result.predict(graph, terms.design[:, 1:])
    result.r2 = float(np.corrcoef(result.fitted, terms.y)[0, 1] ** 2)
    logger.info(f"SLM: rho={rho:.4f}, log-likelihood={result.log_likelihood:.4f}, pseudo-r2={result.r2:.4f}")
    return result


# === GWR ===

def gaussian_weights(distances: np.ndarray, bandwidth) -> np.ndarray:
    bandwidth = np.asarray(bandwidth, dtype=np.float64)
    if bandwidth.ndim == 1:
        bandwidth = bandwidth[:, None]
    return np.exp(-(distances ** 2) / (2.0 * bandwidth ** 2))


def adaptive_bandwidths(target_coords: np.ndarray, train_coords: np.ndarray, k: int) -> np.ndarray:
    """Distance from each target to its k-th nearest training point"""
    distances = cdist(target_coords, train_coords)
    k = min(k, distances.shape[1] - 1)
    widths = np.partition(distances, k, axis=1)[:, k]
    return np.where(widths > 0, widths, 1.0)


def _local_fits(target_coords, train_coords, design, y, bandwidths, exclude_self: bool = False):
    """Weighted least squares per target; returns coefficients and rows that fell back to OLS"""
    n_targets, p = target_coords.shape[0], design.shape[1]
    coefficients = np.empty((n_targets, p))
    fallback = np.zeros(n_targets, dtype=bool)
    global_beta = np.linalg.lstsq(design, y, rcond=None)[0]
    bandwidths = np.broadcast_to(np.asarray(bandwidths, dtype=np.float64), (n_targets,))
    for start in range(0, n_targets, GWR_BLOCK):
        stop = min(start + GWR_BLOCK, n_targets)
        weights = gaussian_weights(cdist(target_coords[start:stop], train_coords), bandwidths[start:stop])
        if exclude_self:
            local = np.arange(stop - start)
            weights[local, local + start] = 0.0
        gram = np.einsum('tj,jk,jl->tkl', weights, design, design)
        moment = weights @ (design * y[:, None])
        for row in range(stop - start):
            if np.linalg.cond(gram[row]) > CONDITION_LIMIT:
                fallback[start + row] = True
                coefficients[start + row] = global_beta
            else:
                coefficients[start + row] = np.linalg.solve(gram[row], moment[row])
    return coefficients, fallback


def _default_candidates(coords: np.ndarray, count: int = 10) -> List[float]:
    distances = cdist(coords, coords)
    positive = distances[distances > 0]
    if positive.size == 0:
        return [1.0]
    return list(np.geomspace(positive.min(), positive.max(), count))


def select_bandwidth(coords: np.ndarray, x: np.ndarray, y: np.ndarray,
                     candidates: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """Leave-one-out squared prediction error for each candidate bandwidth"""
    if not candidates:
        candidates = _default_candidates(coords)
    design = _with_intercept(x)
    rows = []
    for bandwidth in candidates:
        coefficients, _ = _local_fits(coords, coords, design, y, bandwidth, exclude_self=True)
        loo = np.einsum('ij,ij->i', design, coefficients)
        rows.append({'bandwidth': float(bandwidth), 'loo_sse': float(np.sum((y - loo) ** 2))})
    return pd.DataFrame(rows, columns=['bandwidth', 'loo_sse'])


def gwr_fit_predict(coords: np.ndarray, x: np.ndarray, y: np.ndarray,
                    config: Optional[GwrConfig] = None) -> GwrResult:
    """Local Gaussian-kernel regressions at every region; bandwidth chosen by LOO error unless fixed"""
    config = config or GwrConfig()
    coords = np.asarray(coords, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    design = _with_intercept(x)
    if coords.shape[0] != design.shape[0] or y.shape[0] != design.shape[0]:
        raise ShapeMismatch("GWR coordinates, features and outcome must have equal row counts")

    selection = pd.DataFrame(columns=['bandwidth', 'loo_sse'])
    if config.adaptive_k is not None:
        bandwidths = adaptive_bandwidths(coords, coords, config.adaptive_k)
        bandwidth = float(np.median(bandwidths))
    else:
        if config.bandwidth is not None:
            bandwidth = float(config.bandwidth)
        else:
            candidates = config.candidates or _default_candidates(coords)
            selection = select_bandwidth(coords, x, y, candidates)
            # idxmin keeps the first of equal scores
            bandwidth = float(selection.loc[selection['loo_sse'].idxmin(), 'bandwidth'])
            logger.info(f"GWR bandwidth {bandwidth:.6g} selected from {len(candidates)} candidates")
        bandwidths = np.full(coords.shape[0], bandwidth)

    coefficients, fallback = _local_fits(coords, coords, design, y, bandwidths)
    predictions = np.einsum('ij,ij->i', design, coefficients)
    warnings = []
    fallback_regions = [int(i) for i in np.flatnonzero(fallback)]
    if fallback_regions:
        message = (f"LocalRankDeficient: {len(fallback_regions)} regions use global OLS coefficients "
                   f"(e.g. {fallback_regions[:5]})")
        logger.warning(message)
        warnings.append(message)
    return GwrResult(coefficients=coefficients, predictions=predictions, r2=_r2(y, predictions),
                     bandwidth=bandwidth, selection=selection, fallback_regions=fallback_regions,
                     warnings=warnings)


def gwr_predict(train_coords: np.ndarray, train_x: np.ndarray, train_y: np.ndarray,
                target_coords: np.ndarray, target_x: np.ndarray, bandwidth: Optional[float] = None,
                adaptive_k: Optional[int] = None) -> np.ndarray:
    """Out-of-sample predictions from local fits centred on each target location"""
    if (bandwidth is None) == (adaptive_k is None):
        raise InvalidConfig("Pass exactly one of bandwidth or adaptive_k")
    train_coords = np.asarray(train_coords, dtype=np.float64)
    target_coords = np.asarray(target_coords, dtype=np.float64)
    design = _with_intercept(train_x)
    if adaptive_k is not None:
        widths = adaptive_bandwidths(target_coords, train_coords, adaptive_k)
    else:
        widths = np.full(target_coords.shape[0], float(bandwidth))
    coefficients, _ = _local_fits(target_coords, train_coords, design,
                                  np.asarray(train_y, dtype=np.float64), widths)
    return np.einsum('ij,ij->i', _with_intercept(target_x), coefficients)


# === EXTERNAL PREDICTIONS ===

def import_external_predictions(path, region_ids: Sequence[str]) -> np.ndarray:
    """Read an id,yhat CSV and align it to the given region ids"""
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    for column in ('id', 'yhat'):
        if column not in frame.columns:
            raise MissingColumn(f"{path} has no {column!r} column", column=column)
    ids = frame['id'].astype(str).str.strip().tolist()
    values = dict(zip(ids, parse_numeric_frame(frame, ['yhat'], ids)[:, 0]))
    for region_id in region_ids:
        if region_id not in values or not np.isfinite(values[region_id]):
            raise MissingRegion(region_id, source=str(path))
    logger.info(f"Loaded {len(region_ids)} external predictions from {path}")
    return np.array([values[r] for r in region_ids], dtype=np.float64)
