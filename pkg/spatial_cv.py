"""
Leakage-aware spatial evaluation.

Buffered 10-fold CV grows connected test regions and excludes a hop buffer
around each from training; region leave-one-out isolates whole groups.
Test labels are withheld (replaced with NaN) before any model sees the
data, so a mask that touches a test node fails the run instead of
silently leaking.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import combinations
from pathlib import Path
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import csgraph

import artifacts
import neuralnet
from errors import (EmptyMask, EmptyTrainSet, GraphTooSmall, InvalidConfig, LeakageDetected,
                    UnknownGroup)
from geo_graph import (FoldPlan, Region, RegionGraph, build_base_graph, connected_components, induced_subgraph,
                       khop_expand, subgraph_with_buffer)
from neuralnet import ModelSpec, TrainConfig
from node_encodings import EncodingSettings, assemble_features, compute_encoding

logger = logging.getLogger(__name__)

SCHEMES = ('tenfold', 'loocv', 'random')
BUFFER_ROLES = ('train', 'excluded')
METRIC_NAMES = ('rmse', 'mae', 'r2')

# Six-borough leave-one-region-out protocol
DEFAULT_LOOCV_GROUPS = ('Camden', 'Barking', 'Barnet', 'Southwark', 'Croydon', 'Ealing')

# Greedy ablation axes, searched in this order
ABLATION_HOPS = (1, 2, 3)
ABLATION_DEPTHS = (1, 2, 3)
ABLATION_KNN_K = 8
_SINGLE_ENCODINGS = ('laplacian', 'random_walk', 'location')
ABLATION_ENCODINGS = (('none',) + _SINGLE_ENCODINGS
                      + tuple('+'.join(pair) for pair in combinations(_SINGLE_ENCODINGS, 2)))


@dataclass
class SearchSpace:
    lr: List[float] = field(default_factory=lambda: [0.001, 0.005, 0.01])
    weight_decay: List[float] = field(default_factory=lambda: [1e-4, 5e-4, 1e-3])
    hidden1: List[int] = field(default_factory=lambda: [64, 128, 256])
    hidden2: List[int] = field(default_factory=lambda: [16, 32, 64])
    dropout: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.5])
    epochs: List[int] = field(default_factory=lambda: [200, 300])
    optimizer: List[str] = field(default_factory=lambda: ['adam', 'sgd', 'rmsprop'])
    patience: List[int] = field(default_factory=lambda: [10, 20])

    def __post_init__(self):
        for item in fields(self):
            if not getattr(self, item.name):
                raise InvalidConfig(f"Search space axis {item.name!r} is empty")

    def sample(self, rng: np.random.Generator) -> Dict[str, object]:
        trial = {}
        for item in fields(self):
            values = getattr(self, item.name)
            trial[item.name] = values[int(rng.integers(len(values)))]
        return trial


class Metrics(NamedTuple):
    rmse: float
    mae: float
    r2: float


@dataclass
class FoldResult:
    fold_id: int
    rmse: float
    mae: float
    r2: float
    nodes: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    warnings: List[str] = field(default_factory=list)


@dataclass
class CvResult:
    per_fold: List[FoldResult]
    config: dict
    seed: int
    scheme: str
    warnings: List[str] = field(default_factory=list)

    @property
    def aggregate(self) -> Dict[str, Tuple[float, float]]:
        """Mean and population std of each metric over folds"""
        out = {}
        for name in METRIC_NAMES:
            values = np.array([getattr(fold, name) for fold in self.per_fold], dtype=np.float64)
            out[name] = (float(np.mean(values)), float(np.std(values)))
        return out

    def summary(self) -> dict:
        aggregate = self.aggregate
        return {
            'config': self.config,
            'seed': self.seed,
            'scheme': self.scheme,
            'folds': len(self.per_fold),
            'aggregate': {name: {'mean': mean, 'std': std,
                                 'formatted': format_mean_std([getattr(f, name) for f in self.per_fold])}
                          for name, (mean, std) in aggregate.items()},
            'warnings': self.warnings,
        }

    def metrics_frame(self) -> pd.DataFrame:
        rows = [{'fold': fold.fold_id, 'metric': name, 'value': getattr(fold, name)}
                for fold in self.per_fold for name in METRIC_NAMES]
        return pd.DataFrame(rows, columns=['fold', 'metric', 'value'])

    def predictions_frame(self, region_ids: Sequence[str]) -> pd.DataFrame:
        ids = np.asarray(region_ids, dtype=object)
        frames = [pd.DataFrame({'id': ids[fold.nodes], 'y': fold.y, 'yhat': fold.y_hat, 'fold': fold.fold_id})
                  for fold in self.per_fold]
        if not frames:
            return pd.DataFrame(columns=['id', 'y', 'yhat', 'fold'])
        return pd.concat(frames, ignore_index=True)


@dataclass
class SearchResult:
    best: Dict[str, object]
    best_index: int
    best_score: float
    trials: pd.DataFrame


@dataclass
class AblationResult:
    table: pd.DataFrame
    winners: Dict[str, object]


def format_mean_std(values: Sequence[float], digits: int = 3) -> str:
    values = np.asarray(values, dtype=np.float64)
    return f"{np.mean(values):.{digits}f} ± {np.std(values):.{digits}f}"


def metrics(y_hat: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None) -> Metrics:
    """RMSE, MAE and R^2 over masked nodes; R^2 is NaN for a constant target"""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.ones(y.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("Metric mask selects no nodes")
    residual = y[mask] - y_hat[mask]
    rmse = float(np.sqrt(np.mean(residual ** 2)))
    mae = float(np.mean(np.abs(residual)))
    ss_tot = float(np.sum((y[mask] - y[mask].mean()) ** 2))
    if ss_tot == 0.0:
        logger.warning("Target is constant over the mask; R^2 is undefined")
        r2 = float('nan')
    else:
        r2 = 1.0 - float(np.sum(residual ** 2)) / ss_tot
    return Metrics(rmse=rmse, mae=mae, r2=r2)


# === FOLD CONSTRUCTION ===

def _spread_seeds(graph: RegionGraph, n_folds: int, rng: np.random.Generator) -> List[int]:
    """Farthest-point seeds by hop distance, starting from a random node"""
    seeds = [int(rng.integers(graph.n_nodes))]
    nearest = csgraph.shortest_path(graph.adjacency, unweighted=True, directed=False, indices=seeds[0])
    for _ in range(n_folds - 1):
        candidates = nearest.copy()
        candidates[seeds] = -1.0
        seed = int(np.argmax(candidates))
        seeds.append(seed)
        distance = csgraph.shortest_path(graph.adjacency, unweighted=True, directed=False, indices=seed)
        nearest = np.minimum(nearest, distance)
    return seeds


def _grow_regions(graph: RegionGraph, seeds: List[int], targets: List[int]) -> np.ndarray:
    """Round-robin BFS growth from each seed up to its target size"""
    assignment = np.full(graph.n_nodes, -1, dtype=np.int64)
    queues = [deque([seed]) for seed in seeds]
    sizes = [0] * len(seeds)
    remaining = graph.n_nodes
    while remaining:
        for fold, queue in enumerate(queues):
            if sizes[fold] >= targets[fold] or not remaining:
                continue
            node = -1
            while queue:
                candidate = queue.popleft()
                if assignment[candidate] < 0:
                    node = candidate
                    break
            if node < 0:
                # frontier exhausted; jump to the smallest unassigned node
                node = int(np.flatnonzero(assignment < 0)[0])
            assignment[node] = fold
            sizes[fold] += 1
            remaining -= 1
            queue.extend(int(v) for v in graph.neighbors(node) if assignment[v] < 0)
    return assignment


def tenfold_split(graph: RegionGraph, seed: int, hops: int = 2, n_folds: int = 10) -> List[FoldPlan]:
    """Partition nodes into connected, near-equal test regions with hop buffers"""
    n = graph.n_nodes
    if n < n_folds:
        raise GraphTooSmall(f"{n_folds}-fold split needs at least {n_folds} nodes, graph has {n}")
    rng = np.random.default_rng(seed)
    seeds = _spread_seeds(graph, n_folds, rng)
    base, extra = divmod(n, n_folds)
    targets = [base + (1 if fold < extra else 0) for fold in range(n_folds)]
    assignment = _grow_regions(graph, seeds, targets)

    plans = []
    for fold in range(n_folds):
        test = np.flatnonzero(assignment == fold)
        plan, _ = subgraph_with_buffer(graph, test, hops, fold_id=fold)
        parts = len(connected_components(induced_subgraph(graph, test).graph))
        if parts > 1:
            message = f"Fold {fold}: test region is split into {parts} components"
            logger.warning(message)
            plan.warnings.append(message)
        plans.append(plan)
    logger.info(f"Built {n_folds} spatial folds (sizes {min(targets)}-{max(targets)}, buffer hops {hops})")
    return plans


def random_split(graph: RegionGraph, seed: int, n_folds: int = 10) -> List[FoldPlan]:
    """Unbuffered random K-fold partition, for comparison against spatial folds"""
    n = graph.n_nodes
    if n < n_folds:
        raise GraphTooSmall(f"{n_folds}-fold split needs at least {n_folds} nodes, graph has {n}")
    order = np.random.default_rng(seed).permutation(n)
    return [subgraph_with_buffer(graph, np.sort(chunk), 0, fold_id=fold)[0]
            for fold, chunk in enumerate(np.array_split(order, n_folds))]


def loocv_region_split(graph: RegionGraph, group_labels: Optional[Sequence[Optional[str]]],
                       target_group: str, hops: int = 2, fold_id: int = 0) -> FoldPlan:
    """Hold out every node of one group, with a hop buffer around it"""
    labels = graph.groups if group_labels is None else list(group_labels)
    if not target_group:
        raise UnknownGroup("Target group is empty")
    test = [i for i, label in enumerate(labels) if label == target_group]
    if not test:
        known = sorted({label for label in labels if label is not None})
        raise UnknownGroup(f"No region belongs to group {target_group!r} (known: {known[:10]})",
                           group=target_group)
    plan, _ = subgraph_with_buffer(graph, test, hops, fold_id=fold_id)
    return plan


def build_fold_plans(graph: RegionGraph, scheme: str, seed: int, hops: int,
                     groups: Optional[Sequence[str]] = None) -> List[FoldPlan]:
    if scheme == 'tenfold':
        return tenfold_split(graph, seed, hops)
    if scheme == 'loocv':
        groups = list(groups or DEFAULT_LOOCV_GROUPS)
        return [loocv_region_split(graph, None, group, hops, fold_id=i) for i, group in enumerate(groups)]
    if scheme == 'random':
        return random_split(graph, seed)
    raise InvalidConfig(f"Unknown CV scheme {scheme!r} (expected one of {SCHEMES})")


# === LEAKAGE AUDIT ===

def training_masks(plan: FoldPlan, y_mask: np.ndarray, buffer_role: str, seed: int,
                   val_fraction: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
    """Train and early-stopping masks drawn from labelled non-test nodes"""
    if buffer_role not in BUFFER_ROLES:
        raise InvalidConfig(f"Unknown buffer role {buffer_role!r} (expected one of {BUFFER_ROLES})")
    eligible = np.asarray(y_mask, dtype=bool) & ~plan.test_mask
    if buffer_role == 'excluded':
        eligible &= ~plan.buffer_mask
    index = np.flatnonzero(eligible)
    if index.size == 0:
        raise EmptyTrainSet(f"Fold {plan.fold_id} leaves no labelled training nodes")
    shuffled = np.random.default_rng(seed).permutation(index)
    n_val = int(round(val_fraction * index.size)) if index.size > 1 else 0
    train_mask = np.zeros_like(eligible)
    val_mask = np.zeros_like(eligible)
    train_mask[shuffled[n_val:]] = True
    val_mask[shuffled[:n_val]] = True
    return train_mask, val_mask


def audit_masks(plan: FoldPlan, *masks: np.ndarray):
    """Fail if any loss mask selects a test node"""
    test = plan.test_mask
    for mask in masks:
        overlap = np.flatnonzero(np.asarray(mask, dtype=bool) & test)
        if overlap.size:
            raise LeakageDetected(f"Fold {plan.fold_id}: loss mask includes test node {int(overlap[0])}",
                                  fold_id=plan.fold_id)


def withhold_test_labels(y: np.ndarray, plan: FoldPlan) -> np.ndarray:
    poisoned = np.asarray(y, dtype=np.float64).copy()
    poisoned[plan.test_nodes] = np.nan
    return poisoned


# === CROSS-VALIDATION ===

def _run_fold(plan: FoldPlan, graph: RegionGraph, x: np.ndarray, y: np.ndarray, y_mask: np.ndarray,
              spec: ModelSpec, config: TrainConfig, buffer_role: str, seed: int) -> Optional[FoldResult]:
    observed = np.asarray(y_mask, dtype=bool)[plan.test_nodes]
    if not observed.any():
        logger.warning(f"Fold {plan.fold_id}: no labelled test nodes, skipped")
        return None
    logger.info(f"=== STARTING FOLD {plan.fold_id}: {plan.test_nodes.size} test, "
                f"{plan.buffer_nodes.size} buffer, {plan.train_nodes.size} train nodes ===")
    fold_seed = seed + plan.fold_id
    train_mask, val_mask = training_masks(plan, y_mask, buffer_role, fold_seed)
    audit_masks(plan, train_mask, val_mask)
    model = neuralnet.train(spec, graph, x, withhold_test_labels(y, plan), train_mask, val_mask,
                            replace(config, seed=fold_seed))

    context = induced_subgraph(graph, plan.context_nodes)
    local_predictions = neuralnet.predict(model, context.graph, x[context.node_map])
    y_hat = local_predictions[context.local_index(plan.test_nodes)]
    scores = metrics(y_hat, y[plan.test_nodes], observed)
    logger.info(f"Fold {plan.fold_id}: rmse={scores.rmse:.4f} mae={scores.mae:.4f} r2={scores.r2:.4f}")
    return FoldResult(fold_id=plan.fold_id, rmse=scores.rmse, mae=scores.mae, r2=scores.r2,
                      nodes=plan.test_nodes[observed], y=y[plan.test_nodes][observed],
                      y_hat=y_hat[observed], warnings=list(plan.warnings))


def _map_jobs(function: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(function, items))


def run_cv(graph: RegionGraph, x: np.ndarray, y: np.ndarray, y_mask: np.ndarray, spec: ModelSpec,
           config: TrainConfig, scheme: str = 'tenfold', seed: int = 0, hops: Optional[int] = None,
           groups: Optional[Sequence[str]] = None, buffer_role: str = 'train', jobs: int = 1,
           plans: Optional[List[FoldPlan]] = None) -> CvResult:
    """Train on the full graph with test labels withheld; score test nodes on their test+buffer subgraph"""
    hops = spec.depth if hops is None else hops
    plans = plans if plans is not None else build_fold_plans(graph, scheme, seed, hops, groups)
    y = np.asarray(y, dtype=np.float64)
    y_mask = np.asarray(y_mask, dtype=bool)
    results = _map_jobs(lambda plan: _run_fold(plan, graph, x, y, y_mask, spec, config, buffer_role, seed),
                        plans, jobs)
    skipped = [plan.fold_id for plan, fold in zip(plans, results) if fold is None]
    results = sorted((fold for fold in results if fold is not None), key=lambda fold: fold.fold_id)
    warnings = [message for fold in results for message in fold.warnings]
    warnings += [f"Fold {fold_id}: no labelled test nodes, skipped" for fold_id in skipped]
    result = CvResult(
        per_fold=results,
        config={'model': asdict(spec), 'train': asdict(config), 'scheme': scheme, 'hops': hops,
                'buffer_role': buffer_role},
        seed=seed, scheme=scheme, warnings=warnings)
    logger.info(f"=== CV COMPLETE ({scheme}, {len(results)} folds): "
                f"r2 {format_mean_std([f.r2 for f in results])} ===")
    return result


def run_baseline_cv(plans: List[FoldPlan], y: np.ndarray, y_mask: np.ndarray,
                    fit_predict: Callable[[np.ndarray, np.ndarray], np.ndarray],
                    name: str, seed: int = 0, buffer_role: str = 'train',
                    scheme: str = 'tenfold') -> CvResult:
    """Score a baseline under the same fold plans; fit_predict(train_nodes, test_nodes) -> test predictions"""
    y = np.asarray(y, dtype=np.float64)
    y_mask = np.asarray(y_mask, dtype=bool)
    results = []
    skipped = []
    for plan in plans:
        eligible = y_mask & ~plan.test_mask
        if buffer_role == 'excluded':
            eligible &= ~plan.buffer_mask
        audit_masks(plan, eligible)
        train_nodes = np.flatnonzero(eligible)
        if train_nodes.size == 0:
            raise EmptyTrainSet(f"Fold {plan.fold_id} leaves no labelled training nodes")
        observed = y_mask[plan.test_nodes]
        if not observed.any():
            message = f"Fold {plan.fold_id}: no labelled test nodes, skipped"
            logger.warning(message)
            skipped.append(message)
            continue
        test_nodes = plan.test_nodes[observed]
        y_hat = np.asarray(fit_predict(train_nodes, test_nodes), dtype=np.float64)
        scores = metrics(y_hat, y[test_nodes])
        results.append(FoldResult(fold_id=plan.fold_id, rmse=scores.rmse, mae=scores.mae, r2=scores.r2,
                                  nodes=test_nodes, y=y[test_nodes], y_hat=y_hat, warnings=list(plan.warnings)))
    logger.info(f"Baseline {name}: r2 {format_mean_std([f.r2 for f in results])}")
    return CvResult(per_fold=results, config={'baseline': name, 'buffer_role': buffer_role},
                    seed=seed, scheme=scheme, warnings=[m for f in results for m in f.warnings] + skipped)


# === HYPERPARAMETER SEARCH ===

def apply_trial(spec: ModelSpec, config: TrainConfig, trial: Mapping[str, object]) -> Tuple[ModelSpec, TrainConfig]:
    spec_keys = {f.name for f in fields(ModelSpec)}
    config_keys = {f.name for f in fields(TrainConfig)}
    spec = replace(spec, **{k: v for k, v in trial.items() if k in spec_keys})
    config = replace(config, **{k: v for k, v in trial.items() if k in config_keys})
    return spec, config


def inner_cv_objective(graph: RegionGraph, x: np.ndarray, y: np.ndarray, y_mask: np.ndarray,
                       spec: ModelSpec, config: TrainConfig, seed: int, resamples: int = 3,
                       val_fraction: float = 0.2) -> Callable[[Mapping[str, object]], float]:
    """Mean validation R^2 over `resamples` random 80:20 splits of the labelled nodes"""
    labelled = np.flatnonzero(np.asarray(y_mask, dtype=bool))
    if labelled.size < 2:
        raise EmptyTrainSet("Inner validation needs at least 2 labelled nodes")

    def objective(trial: Mapping[str, object]) -> float:
        trial_spec, trial_config = apply_trial(spec, config, trial)
        scores = []
        for resample in range(resamples):
            rng = np.random.default_rng(seed + resample)
            shuffled = rng.permutation(labelled)
            n_val = max(1, int(round(val_fraction * labelled.size)))
            train_mask = np.zeros(graph.n_nodes, dtype=bool)
            val_mask = np.zeros(graph.n_nodes, dtype=bool)
            train_mask[shuffled[n_val:]] = True
            val_mask[shuffled[:n_val]] = True
            model = neuralnet.train(trial_spec, graph, x, y, train_mask, val_mask,
                                    replace(trial_config, seed=seed + resample))
            scores.append(metrics(neuralnet.predict(model, graph, x), y, val_mask).r2)
        return float(np.mean(scores))

    return objective


def random_search(space: SearchSpace, rounds: int, seed: int,
                  objective: Callable[[Mapping[str, object]], float], jobs: int = 1) -> SearchResult:
    """Sample `rounds` configurations with replacement; the earliest best trial wins ties"""
    if rounds < 1:
        raise InvalidConfig(f"Search rounds must be at least 1, got {rounds}")
    rng = np.random.default_rng(seed)
    trials = [space.sample(rng) for _ in range(rounds)]
    logger.info(f"=== RANDOM SEARCH: {rounds} trials ===")
    scores = _map_jobs(objective, trials, jobs)

    best_index, best_score = 0, -np.inf
    for index, score in enumerate(scores):
        value = score if np.isfinite(score) else -np.inf
        if value > best_score:
            best_index, best_score = index, value
    frame = pd.DataFrame(trials)
    frame.insert(0, 'trial', range(len(trials)))
    frame['score'] = scores
    logger.info(f"Best trial {best_index}: score {best_score:.4f} {trials[best_index]}")
    return SearchResult(best=trials[best_index], best_index=best_index, best_score=float(best_score),
                        trials=frame)


def tune_once(graph: RegionGraph, x: np.ndarray, y: np.ndarray, y_mask: np.ndarray, spec: ModelSpec,
              config: TrainConfig, space: SearchSpace, rounds: int, seed: int,
              jobs: int = 1) -> Tuple[ModelSpec, TrainConfig, SearchResult]:
    """Search hyperparameters on the labelled nodes, then return the winning spec and config"""
    objective = inner_cv_objective(graph, x, y, y_mask, spec, config, seed)
    result = random_search(space, rounds, seed, objective, jobs=jobs)
    best_spec, best_config = apply_trial(spec, config, result.best)
    return best_spec, best_config, result


# === ABLATION ===

def ablation_graphs(regions: Sequence[Region], base: str = 'contiguity', k: int = 8,
                    hops: Sequence[int] = ABLATION_HOPS,
                    knn_k: Optional[int] = ABLATION_KNN_K) -> Dict[str, RegionGraph]:
    """Spatial representation axis: k-hop expansions of the base graph plus an optional k-NN graph"""
    base_graph = build_base_graph(regions, base, k)
    graphs = {f"{h}-hop": base_graph if h == 1 else khop_expand(base_graph, h) for h in hops}
    if knn_k is not None:
        graphs['knn'] = build_base_graph(regions, 'knn', knn_k)
    return graphs


def ablation_grid(graphs: Mapping[str, RegionGraph], base_features: np.ndarray, y: np.ndarray,
                  y_mask: np.ndarray, encodings: Sequence[str], architectures: Sequence[str],
                  depths: Sequence[int], budget: int, seed: int, spec: Optional[ModelSpec] = None,
                  config: Optional[TrainConfig] = None, space: Optional[SearchSpace] = None,
                  settings: Optional[EncodingSettings] = None, jobs: int = 1) -> AblationResult:
    """Greedy axis-by-axis selection: architecture, spatial representation, depth, then encoding"""
    if not graphs or not encodings or not architectures or not depths:
        raise InvalidConfig("Every ablation axis needs at least one option")
    spec = spec or ModelSpec()
    config = config or TrainConfig(seed=seed)
    space = space or SearchSpace()

    current = {
        'architecture': architectures[0],
        'graph': '1-hop' if '1-hop' in graphs else next(iter(graphs)),
        'depth': spec.depth if spec.depth in depths else depths[0],
        'encoding': 'none' if 'none' in encodings else encodings[0],
    }
    axes = [('architecture', list(architectures)), ('graph', list(graphs)),
            ('depth', list(depths)), ('encoding', list(encodings))]
    feature_cache: Dict[Tuple[str, str], np.ndarray] = {}

    def features_for(graph_name: str, combo: str) -> np.ndarray:
        key = (graph_name, combo)
        if key not in feature_cache:
            encoded = compute_encoding(combo, graphs[graph_name], base_features, settings)
            feature_cache[key] = assemble_features(base_features, encoded).values
        return feature_cache[key]

    def evaluate(choice: Dict[str, object]) -> float:
        graph = graphs[choice['graph']]
        x = features_for(choice['graph'], choice['encoding'])
        trial_spec = replace(spec, architecture=choice['architecture'], depth=choice['depth'])
        objective = inner_cv_objective(graph, x, y, y_mask, trial_spec, config, seed)
        if budget > 0:
            return random_search(space, budget, seed, objective, jobs=jobs).best_score
        return objective({})

    rows = []
    for stage, (axis, options) in enumerate(axes):
        logger.info(f"=== ABLATION STAGE {stage + 1}: {axis} over {options} ===")
        best_option, best_score = options[0], -np.inf
        stage_rows = []
        for option in options:
            choice = dict(current, **{axis: option})
            score = evaluate(choice)
            stage_rows.append(dict(choice, stage=axis, score=score))
            if np.isfinite(score) and score > best_score:
                best_option, best_score = option, score
        current[axis] = best_option
        for row in stage_rows:
            row['selected'] = row[axis] == best_option
        stage_rows.sort(key=lambda row: -row['score'] if np.isfinite(row['score']) else np.inf)
        rows.extend(stage_rows)
        logger.info(f"Ablation {axis}: selected {best_option!r} (score {best_score:.4f})")

    table = pd.DataFrame(rows, columns=['stage', 'architecture', 'graph', 'depth', 'encoding', 'score', 'selected'])
    return AblationResult(table=table, winners=dict(current))


# === WRITERS ===

def write_cv_results(result: CvResult, region_ids: Sequence[str], out_dir, prefix: str = 'cv') -> List[Path]:
    out_dir = Path(out_dir)
    return [
        artifacts.write_csv(result.metrics_frame(), out_dir / f"{prefix}_results.csv"),
        artifacts.write_json(result.summary(), out_dir / f"{prefix}_summary.json"),
        artifacts.write_csv(result.predictions_frame(region_ids), out_dir / f"{prefix}_predictions.csv"),
    ]


def write_fold_plans(plans: List[FoldPlan], region_ids: Sequence[str], path) -> Path:
    ids = np.asarray(region_ids, dtype=object)
    rows = []
    for plan in plans:
        for role, nodes in (('test', plan.test_nodes), ('buffer', plan.buffer_nodes)):
            rows.extend({'fold': plan.fold_id, 'id': ids[node], 'role': role} for node in nodes)
    return artifacts.write_csv(pd.DataFrame(rows, columns=['fold', 'id', 'role']), path)
