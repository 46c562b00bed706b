"""
Post-hoc explanation of trained embeddings: PCA of the penultimate layer,
PC x input-feature Pearson correlations, regression of the outcome on the
selected PCs, residual diagnostics and map-ready layers.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import artifacts
import neuralnet
from baselines import ols_fit
from errors import DegenerateData, EmptyMask, ShapeMismatch, UntrainedModel
from geo_graph import Region, RegionGraph, regions_to_geojson
from neuralnet import TrainedModel
from node_encodings import fit_pca

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 30


@dataclass
class PcaSelection:
    scores: np.ndarray
    loadings: np.ndarray
    ratios: np.ndarray
    n_selected: int
    warnings: List[str] = field(default_factory=list)


@dataclass
class PcRegression:
    coefficients: np.ndarray
    r2: float


@dataclass
class ResidualStats:
    mean: float
    std: float
    histogram: pd.DataFrame


@dataclass
class ExplainReport:
    variance_ratios: np.ndarray
    n_selected: int
    scores: np.ndarray
    loadings: np.ndarray
    corr: pd.DataFrame
    ranked: pd.DataFrame
    pc_regression: PcRegression
    residual_stats: ResidualStats
    residuals: pd.DataFrame
    warnings: List[str] = field(default_factory=list)

    @property
    def pc_names(self) -> List[str]:
        return [f"pc{i + 1}" for i in range(self.n_selected)]


def _warn(warnings: List[str], message: str):
    logger.warning(message)
    warnings.append(message)


def extract_embeddings(model: TrainedModel, graph: RegionGraph, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations in eval mode"""
    if not model.trained:
        raise UntrainedModel("Model has no training history; train it before extracting embeddings")
    return neuralnet.forward(model, graph, x).embeddings.data.copy()


def pca_embeddings(embeddings: np.ndarray, variance_target: float = 0.80) -> PcaSelection:
    """PCA keeping the fewest components whose cumulative variance reaches the target"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] >= 2 and np.all(embeddings == embeddings[0]):
        raise DegenerateData("All embedding rows are identical; PCA is undefined")
    fit = fit_pca(embeddings)
    if fit.eigenvalues.sum() == 0:
        raise DegenerateData("Embeddings have zero variance")
    warnings: List[str] = []
    cumulative = np.cumsum(fit.ratios)
    reached = np.flatnonzero(cumulative >= variance_target - 1e-12)
    if reached.size:
        n_selected = int(reached[0]) + 1
    else:
        n_selected = fit.ratios.size
        _warn(warnings, f"All components explain only {cumulative[-1]:.3f} < {variance_target} of variance")
    logger.info(f"PCA: {n_selected} components explain {cumulative[n_selected - 1]:.4f} of variance")
    return PcaSelection(scores=fit.scores[:, :n_selected], loadings=fit.loadings[:, :n_selected],
                        ratios=fit.ratios, n_selected=n_selected, warnings=warnings)


def pc_feature_correlations(scores: np.ndarray, features: np.ndarray, columns: Sequence[str],
                            provenance: Optional[Sequence[Tuple[str, int, int]]] = None
                            ) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Pearson r for each (PC, feature) pair, plus a per-PC ranking by |r|"""
    scores = np.asarray(scores, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if scores.shape[0] != features.shape[0]:
        raise ShapeMismatch(f"Scores have {scores.shape[0]} rows, features {features.shape[0]}")
    if features.shape[1] != len(columns):
        raise ShapeMismatch(f"{features.shape[1]} feature columns but {len(columns)} names")

    centered_scores = scores - scores.mean(axis=0)
    centered_features = features - features.mean(axis=0)
    score_norms = np.sqrt((centered_scores ** 2).sum(axis=0))
    feature_norms = np.sqrt((centered_features ** 2).sum(axis=0))
    constant = feature_norms == 0
    if constant.any():
        logger.warning(f"Constant features get r=0: {[c for c, flag in zip(columns, constant) if flag]}")
    denominator = np.outer(np.where(score_norms == 0, 1.0, score_norms),
                           np.where(constant, 1.0, feature_norms))
    r = np.clip(centered_scores.T @ centered_features / denominator, -1.0, 1.0)
    r[:, constant] = 0.0

    pc_names = [f"pc{i + 1}" for i in range(scores.shape[1])]
    corr = pd.DataFrame(r, index=pc_names, columns=list(columns))

    sources = ['features'] * len(columns)
    for source, start, stop in provenance or []:
        sources[start:stop] = [source] * (stop - start)
    rows = []
    for i, pc in enumerate(pc_names):
        order = np.argsort(-np.abs(r[i]), kind='stable')
        for rank, j in enumerate(order, start=1):
            rows.append({'pc': pc, 'rank': rank, 'feature': columns[j], 'source': sources[j],
                         'r': r[i, j], 'abs_r': abs(r[i, j])})
    ranked = pd.DataFrame(rows, columns=['pc', 'rank', 'feature', 'source', 'r', 'abs_r'])
    return corr, ranked


def pc_outcome_regression(scores: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None) -> PcRegression:
    """OLS of the outcome on the selected PC scores plus intercept"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    y = np.asarray(y, dtype=np.float64)
    mask = np.ones(y.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if scores.shape[1] < 2:
        logger.warning("Outcome regression on a single principal component")
    fit = ols_fit(scores[mask], y[mask])
    logger.info(f"PC outcome regression: r2={fit.r2:.4f}")
    return PcRegression(coefficients=fit.coefficients, r2=fit.r2)


def residual_diagnostics(y_hat: np.ndarray, y: np.ndarray, mask: np.ndarray,
                         region_ids: Optional[Sequence[str]] = None,
                         bins: int = HISTOGRAM_BINS) -> Tuple[ResidualStats, pd.DataFrame]:
    """Residual y - y_hat summary over masked nodes and a per-region residual table"""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("Residual mask selects no nodes")
    residual = y[mask] - y_hat[mask]
    counts, edges = np.histogram(residual, bins=bins)
    histogram = pd.DataFrame({'bin_left': edges[:-1], 'bin_right': edges[1:], 'count': counts})
    stats = ResidualStats(mean=float(residual.mean()), std=float(residual.std()), histogram=histogram)

    ids = list(region_ids) if region_ids is not None else [str(i) for i in range(y.shape[0])]
    full = np.where(mask, y - y_hat, np.nan)
    table = pd.DataFrame({
        'id': ids,
        'y': np.where(mask, y, np.nan),
        'yhat': np.where(mask, y_hat, np.nan),
        'residual': full,
        'abs_residual': np.abs(full),
        'missing': ~mask,
    })
    logger.info(f"Residuals: mean={stats.mean:.4f}, std={stats.std:.4f} over {int(mask.sum())} regions")
    return stats, table


def _layer_frame(scores: np.ndarray, residuals: pd.DataFrame) -> pd.DataFrame:
    frame = residuals[['id']].copy()
    for i in range(scores.shape[1]):
        frame[f"pc{i + 1}"] = scores[:, i]
    for column in ('residual', 'yhat', 'y', 'missing'):
        frame[column] = residuals[column].to_numpy()
    return frame


def export_geo_layers(regions: Sequence[Region], scores: np.ndarray, residuals: pd.DataFrame,
                      out_dir) -> List[Path]:
    """CSV layer always; GeoJSON too when every region has a boundary"""
    out_dir = Path(out_dir)
    frame = _layer_frame(scores, residuals)
    outputs = [artifacts.write_csv(frame, out_dir / 'layers.csv')]
    if regions and all(r.boundary is not None for r in regions):
        properties = frame.drop(columns='id')
        outputs.append(artifacts.write_json(regions_to_geojson(regions, properties), out_dir / 'layers.geojson'))
    else:
        logger.warning("Regions have no boundaries; writing the CSV layer only")
    return outputs


def build_explain_report(model: TrainedModel, graph: RegionGraph, x: np.ndarray, columns: Sequence[str],
                         provenance: Optional[Sequence[Tuple[str, int, int]]], y: np.ndarray,
                         mask: np.ndarray, variance_target: float = 0.80) -> ExplainReport:
    logger.info("=== BUILDING EXPLAIN REPORT ===")
    embeddings = extract_embeddings(model, graph, x)
    selection = pca_embeddings(embeddings, variance_target)
    corr, ranked = pc_feature_correlations(selection.scores, x, columns, provenance)
    regression = pc_outcome_regression(selection.scores, y, mask)
    y_hat = neuralnet.predict(model, graph, x)
    stats, residuals = residual_diagnostics(y_hat, y, mask, graph.region_ids)
    return ExplainReport(
        variance_ratios=selection.ratios,
        n_selected=selection.n_selected,
        scores=selection.scores,
        loadings=selection.loadings,
        corr=corr,
        ranked=ranked,
        pc_regression=regression,
        residual_stats=stats,
        residuals=residuals,
        warnings=list(selection.warnings),
    )


def write_report_bundle(report: ExplainReport, regions: Sequence[Region], out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    ids = report.residuals['id'].tolist()
    ratios = pd.DataFrame({
        'component': [f"pc{i + 1}" for i in range(report.variance_ratios.size)],
        'ratio': report.variance_ratios,
        'cumulative': np.cumsum(report.variance_ratios),
        'selected': np.arange(report.variance_ratios.size) < report.n_selected,
    })
    scores = pd.DataFrame(report.scores, columns=report.pc_names)
    scores.insert(0, 'id', ids)
    loadings = pd.DataFrame(report.loadings, columns=report.pc_names)
    loadings.insert(0, 'dimension', range(1, report.loadings.shape[0] + 1))
    correlations = report.corr.reset_index().rename(columns={'index': 'pc'})
    regression = {
        'intercept': report.pc_regression.coefficients[0],
        'coefficients': dict(zip(report.pc_names, report.pc_regression.coefficients[1:])),
        'r2': report.pc_regression.r2,
        'residual_mean': report.residual_stats.mean,
        'residual_std': report.residual_stats.std,
        'warnings': report.warnings,
    }
    outputs = [
        artifacts.write_csv(ratios, out_dir / 'ratios.csv'),
        artifacts.write_csv(scores, out_dir / 'scores.csv'),
        artifacts.write_csv(loadings, out_dir / 'loadings.csv'),
        artifacts.write_csv(correlations, out_dir / 'correlations.csv'),
        artifacts.write_csv(report.ranked, out_dir / 'correlations_ranked.csv'),
        artifacts.write_json(regression, out_dir / 'pc_regression.json'),
        artifacts.write_csv(report.residuals, out_dir / 'residuals.csv'),
        artifacts.write_csv(report.residual_stats.histogram, out_dir / 'residual_histogram.csv'),
    ]
    outputs.extend(export_geo_layers(regions, report.scores, report.residuals, out_dir))
    logger.info(f"Explain bundle written to {out_dir} ({len(outputs)} files)")
    return outputs
