"""
Per-region feature table ingestion and preprocessing: correlation
screening, iterative VIF selection with fixed control variables, and
z-score standardization.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Set

import numpy as np
import pandas as pd
import statsmodels.api as sm

import artifacts
from errors import (AlreadyStandardized, InputFileNotFound, InvalidConfig, MissingColumn,
                    NonNumericCell, RegionIdMismatch, TooFewRows)

logger = logging.getLogger(__name__)

NA_TOKENS = {'', 'na', 'nan', 'n/a', 'null', 'none', '-'}

# 1 - R^2 below this is treated as perfect collinearity
COLLINEAR_TOLERANCE = 1e-12
# VIFs this close (relative) count as a tie
VIF_TIE_RTOL = 1e-3


@dataclass
class FeatureTable:
    """N x F numeric features aligned to graph region order"""
    region_ids: List[str]
    columns: List[str]
    fixed: List[bool]
    values: np.ndarray
    row_mask: np.ndarray
    standardized: bool = False
    column_means: Optional[np.ndarray] = None
    column_stds: Optional[np.ndarray] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.region_ids)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def fixed_columns(self) -> List[str]:
        return [c for c, is_fixed in zip(self.columns, self.fixed) if is_fixed]

    def to_frame(self, mask_missing: bool = True) -> pd.DataFrame:
        values = self.values.copy()
        if mask_missing:
            values[~self.row_mask] = np.nan
        frame = pd.DataFrame(values, columns=self.columns)
        frame.insert(0, 'id', self.region_ids)
        return frame


@dataclass
class TargetVector:
    outcome_name: str
    values: np.ndarray
    mask: np.ndarray
    warnings: List[str] = field(default_factory=list)


@dataclass
class VifSelection:
    """Result of iterative VIF elimination"""
    retained: List[str]
    removals: pd.DataFrame
    violations: pd.DataFrame
    final_vifs: dict

    def write(self, out_dir) -> List[Path]:
        out_dir = Path(out_dir)
        return [artifacts.write_csv(self.removals, out_dir / 'vif_removals.csv'),
                artifacts.write_csv(self.violations, out_dir / 'vif_violations.csv')]


def _record_warning(warnings: List[str], message: str):
    logger.warning(message)
    warnings.append(message)


def parse_numeric_frame(frame: pd.DataFrame, columns: Sequence[str], ids: Sequence[str]) -> np.ndarray:
    """Parse string cells to floats; NA tokens and non-finite values become NaN"""
    out = np.empty((len(frame), len(columns)), dtype=np.float64)
    for j, column in enumerate(columns):
        raw = frame[column].fillna('').astype(str).str.strip()
        is_na = raw.str.lower().isin(NA_TOKENS)
        parsed = pd.to_numeric(raw.where(~is_na), errors='coerce')
        bad = parsed.isna() & ~is_na
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            logger.error(f"Non-numeric cell for region {ids[row]!r} in column {column!r}")
            raise NonNumericCell(row=row + 1, column=column, value=str(raw.iloc[row]))
        values = parsed.to_numpy(dtype=np.float64)
        values[~np.isfinite(values)] = np.nan
        out[:, j] = values
    return out


def _align_rows(ids: List[str], region_ids: Optional[Sequence[str]], source) -> np.ndarray:
    """Row order that maps file rows onto graph region order"""
    if len(set(ids)) != len(ids):
        duplicates = pd.Series(ids)[pd.Series(ids).duplicated()].tolist()
        raise RegionIdMismatch(f"{source} has duplicate ids {duplicates[:5]}")
    if region_ids is None:
        return np.arange(len(ids))
    position = {region_id: i for i, region_id in enumerate(ids)}
    missing = [r for r in region_ids if r not in position]
    extra = set(ids) - set(region_ids)
    if missing or extra:
        raise RegionIdMismatch(
            f"{source} ids differ from the graph: {len(missing)} missing (e.g. {missing[:3]}), "
            f"{len(extra)} unknown (e.g. {sorted(extra)[:3]})")
    return np.array([position[r] for r in region_ids], dtype=np.int64)


def load_feature_table(path, fixed_column_names: Iterable[str] = (),
                       region_ids: Optional[Sequence[str]] = None) -> FeatureTable:
    """Load an id + numeric feature CSV; rows with missing cells are masked out"""
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if 'id' not in frame.columns:
        raise MissingColumn(f"{path} has no 'id' column", column='id')
    columns = [c for c in frame.columns if c != 'id']
    fixed_names = set(fixed_column_names)
    absent = sorted(fixed_names - set(columns))
    if absent:
        raise MissingColumn(f"Fixed control column {absent[0]!r} not in {path}", column=absent[0])

    ids = frame['id'].astype(str).str.strip().tolist()
    values = parse_numeric_frame(frame, columns, ids)
    order = _align_rows(ids, region_ids, path)
    values = values[order]
    ids = [ids[i] for i in order]

    warnings: List[str] = []
    missing = np.isnan(values)
    row_mask = ~missing.any(axis=1)
    if missing.any():
        # placeholder so the matrix stays finite; masked rows never enter a loss
        observed_means = np.array([
            values[~missing[:, j], j].mean() if (~missing[:, j]).any() else 0.0
            for j in range(values.shape[1])
        ])
        values = np.where(missing, observed_means[None, :], values)
        masked_ids = [ids[i] for i in np.flatnonzero(~row_mask)]
        _record_warning(warnings, f"{len(masked_ids)} regions have missing feature values and are "
                                  f"masked out (e.g. {masked_ids[:5]})")

    table = FeatureTable(
        region_ids=ids,
        columns=columns,
        fixed=[c in fixed_names for c in columns],
        values=values,
        row_mask=row_mask,
        warnings=warnings,
    )
    logger.info(f"Loaded feature table {path}: {table.n_rows} rows, {table.n_columns} columns, "
                f"{len(fixed_names)} fixed, {int(row_mask.sum())} complete rows")
    return table


def load_target_vector(path, outcome_name: str, region_ids: Sequence[str]) -> TargetVector:
    """Load one outcome column aligned to region order; absent or missing values are masked"""
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    for column in ('id', outcome_name):
        if column not in frame.columns:
            raise MissingColumn(f"{path} has no {column!r} column", column=column)
    ids = frame['id'].astype(str).str.strip().tolist()
    if len(set(ids)) != len(ids):
        raise RegionIdMismatch(f"{path} has duplicate ids")
    parsed = parse_numeric_frame(frame, [outcome_name], ids)[:, 0]
    by_id = dict(zip(ids, parsed))

    warnings: List[str] = []
    values = np.array([by_id.get(r, np.nan) for r in region_ids], dtype=np.float64)
    mask = np.isfinite(values)
    values[~mask] = 0.0
    if (~mask).any():
        _record_warning(warnings, f"{int((~mask).sum())} regions have no observed {outcome_name!r}")
    unknown = set(ids) - set(region_ids)
    if unknown:
        _record_warning(warnings, f"{len(unknown)} ids in {path} are not graph regions and are ignored")
    return TargetVector(outcome_name=outcome_name, values=values, mask=mask, warnings=warnings)


def load_fixed_controls(path) -> Set[str]:
    """One column name per line; blank lines and # comments are skipped"""
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)
    names = set()
    with open(path, 'r', encoding='utf-8') as handle:
        for line in handle:
            line = line.split('#', 1)[0].strip()
            if line:
                names.add(line)
    return names


def select_columns(table: FeatureTable, names: Sequence[str]) -> FeatureTable:
    index = {c: j for j, c in enumerate(table.columns)}
    unknown = [n for n in names if n not in index]
    if unknown:
        raise MissingColumn(f"Unknown feature column {unknown[0]!r}", column=unknown[0])
    picks = [index[n] for n in names]
    return replace(
        table,
        columns=list(names),
        fixed=[table.fixed[j] for j in picks],
        values=table.values[:, picks].copy(),
        column_means=None if table.column_means is None else table.column_means[picks],
        column_stds=None if table.column_stds is None else table.column_stds[picks],
        warnings=list(table.warnings),
    )


def correlation_matrix(table: FeatureTable) -> pd.DataFrame:
    """Pearson correlations over complete rows; constant columns correlate 0"""
    values = table.values[table.row_mask]
    if values.shape[0] < 2:
        raise TooFewRows(f"Correlation needs at least 2 complete rows, got {values.shape[0]}")
    centered = values - values.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    constant = norms == 0
    warnings = []
    if constant.any():
        names = [c for c, flag in zip(table.columns, constant) if flag]
        _record_warning(warnings, f"Constant columns have no correlation: {names}")
    safe = np.where(constant, 1.0, norms)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    frame = pd.DataFrame(corr, index=table.columns, columns=table.columns)
    frame.attrs['warnings'] = warnings
    return frame


def vif(table: FeatureTable, column_index: int) -> float:
    """1 / (1 - R^2) of one column regressed on the other columns plus intercept"""
    values = table.values[table.row_mask]
    n_rows, n_columns = values.shape
    if n_rows < n_columns + 1:
        raise TooFewRows(f"VIF needs at least {n_columns + 1} complete rows, got {n_rows}")
    target = values[:, column_index]
    if np.ptp(target) == 0:
        return float('inf')
    others = np.delete(values, column_index, axis=1)
    design = sm.add_constant(others, has_constant='add')
    r_squared = sm.OLS(target, design).fit().rsquared
    if r_squared >= 1.0 - COLLINEAR_TOLERANCE:
        return float('inf')
    return float(1.0 / (1.0 - r_squared))


def vif_select(table: FeatureTable, threshold_free: float = 1000.0,
               threshold_fixed: float = 1500.0) -> VifSelection:
    """Drop the highest-VIF free column one at a time until all free columns are below threshold.

    Free columns whose VIF lies within VIF_TIE_RTOL (relative) of the highest
    are treated as tied with it, and the tie goes to the latest of them in
    header order. A near-duplicate pair has VIFs that differ only by the
    other columns' small contribution, so this removes the later copy
    rather than whichever happens to score a fraction higher. A column
    clearly above the rest is still removed first wherever it sits.
    """
    if threshold_free <= 1 or threshold_fixed <= 1:
        raise InvalidConfig(f"VIF thresholds must exceed 1 (got {threshold_free}, {threshold_fixed})")

    retained = list(table.columns)
    fixed = dict(zip(table.columns, table.fixed))
    removals = []
    iteration = 0
    while True:
        iteration += 1
        current = select_columns(table, retained)
        scores = [vif(current, j) for j in range(len(retained))]
        candidates = [(score, position) for position, (name, score) in enumerate(zip(retained, scores))
                      if not fixed[name] and score >= threshold_free]
        if not candidates:
            break
        # ties go to the later column in header order
        top = max(score for score, _ in candidates)
        position = max(p for score, p in candidates if score >= top * (1.0 - VIF_TIE_RTOL))
        score = scores[position]
        name = retained.pop(position)
        removals.append({'iteration': iteration, 'column': name, 'vif': score})
        logger.info(f"VIF iteration {iteration}: removed {name!r} (VIF={score:.4g})")

    final_vifs = dict(zip(retained, scores))
    violations = [{'column': name, 'vif': score} for name, score in final_vifs.items()
                  if fixed[name] and score >= threshold_fixed]
    for item in violations:
        logger.warning(f"Fixed control {item['column']!r} has VIF {item['vif']:.4g} >= {threshold_fixed}")
    logger.info(f"VIF selection kept {len(retained)} of {table.n_columns} columns "
                f"after {len(removals)} removals")
    return VifSelection(
        retained=retained,
        removals=pd.DataFrame(removals, columns=['iteration', 'column', 'vif']),
        violations=pd.DataFrame(violations, columns=['column', 'vif']),
        final_vifs=final_vifs,
    )


def standardize(table: FeatureTable) -> FeatureTable:
    """Z-score every column using complete rows and population std"""
    if table.standardized:
        raise AlreadyStandardized("Feature table is already standardized")
    observed = table.values[table.row_mask]
    if observed.shape[0] == 0:
        raise TooFewRows("No complete rows to standardize over")
    means = observed.mean(axis=0)
    stds = observed.std(axis=0)
    warnings = list(table.warnings)
    constant = stds == 0
    if constant.any():
        names = [c for c, flag in zip(table.columns, constant) if flag]
        _record_warning(warnings, f"Constant columns standardized to zeros: {names}")
    scale = np.where(constant, 1.0, stds)
    values = (table.values - means) / scale
    values[:, constant] = 0.0
    return replace(table, values=values, standardized=True, column_means=means,
                   column_stds=stds, warnings=warnings)


def inverse_standardize(table: FeatureTable) -> FeatureTable:
    if not table.standardized:
        return table
    values = table.values * table.column_stds + table.column_means
    return replace(table, values=values, standardized=False, column_means=None, column_stds=None)


def standardization_frame(table: FeatureTable) -> pd.DataFrame:
    return pd.DataFrame({'column': table.columns, 'mean': table.column_means, 'std': table.column_stds})
