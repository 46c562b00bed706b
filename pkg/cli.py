"""
Command line entry point for the geohealth-gnn pipeline.

Each subcommand runs one stage, writes its files atomically into --out,
records a manifest and prints a one-line JSON summary on stdout.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import artifacts
import baselines
import explain
import features
import neuralnet
import node_encodings
import spatial_cv
import synth
from errors import GeoHealthError, InvalidConfig
from geo_graph import (Region, RegionGraph, build_base_graph, graph_summary, induced_subgraph, khop_expand,
                       load_regions, read_edge_list, write_edge_list)
from run_config import RunConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# argparse destination -> dotted RunConfig key
OVERRIDES = {
    'seed': 'seed',
    'jobs': 'jobs',
    'out': 'out',
    'regions': 'paths.regions',
    'features': 'paths.features',
    'targets': 'paths.targets',
    'fixed_controls': 'paths.fixed_controls',
    'location_embeddings': 'paths.location_embeddings',
    'edges': 'paths.edges',
    'node_features': 'paths.node_features',
    'model': 'paths.model',
    'external_predictions': 'paths.external_predictions',
    'outcome': 'preprocess.outcome',
    'base': 'graph.base',
    'k': 'graph.k',
    'graph_hops': 'graph.hops',
    'encodings': 'encodings.combo',
    'architecture': 'model.architecture',
    'depth': 'model.depth',
    'epochs': 'train.epochs',
    'lr': 'train.lr',
    'scheme': 'cv.scheme',
    'buffer_hops': 'cv.hops',
    'buffer_role': 'cv.buffer_role',
    'search_rounds': 'cv.search_rounds',
    'groups': 'cv.groups',
    'budget': 'ablation.budget',
    'baselines': 'baselines.models',
    'variance_target': 'explain.variance_target',
    'rows': 'synth.grid_rows',
    'cols': 'synth.grid_cols',
    'n_features': 'synth.n_features',
    'passes': 'synth.spatial_smoothing_passes',
    'rho': 'synth.rho',
    'noise_std': 'synth.noise_std',
    'lag_mode': 'synth.lag_mode',
}


def _comma_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(',') if item.strip()]


# === SHARED LOADERS ===

def _load_graph(config: RunConfig) -> Tuple[List[Region], RegionGraph]:
    """Regions plus the model graph: a stored edge list when given, otherwise built from regions"""
    config.validate_paths('regions')
    regions = load_regions(config.paths.regions)
    if config.paths.edges:
        return regions, read_edge_list(config.paths.edges, regions)
    graph = build_base_graph(regions, config.graph.base, config.graph.k)
    if config.graph.hops > 1:
        graph = khop_expand(graph, config.graph.hops)
    return regions, graph


def _load_matrix(config: RunConfig, graph: RegionGraph) -> features.FeatureTable:
    """Encoded node features when present, otherwise the preprocessed feature table"""
    path = config.paths.node_features or config.paths.features
    if path is None:
        raise InvalidConfig("Pass --node-features or --features")
    return features.load_feature_table(path, region_ids=graph.region_ids)


def _load_provenance(config: RunConfig) -> Optional[list]:
    if not config.paths.node_features:
        return None
    path = Path(config.paths.node_features).with_name('provenance.json')
    if not path.exists():
        return None
    return [tuple(entry) for entry in artifacts.read_json(path)]


def _load_target(config: RunConfig, graph: RegionGraph, table: features.FeatureTable):
    config.validate_paths('targets')
    target = features.load_target_vector(config.paths.targets, config.preprocess.outcome, graph.region_ids)
    return target, target.mask & table.row_mask


def _used_paths(config: RunConfig, *names: str) -> List[str]:
    return [getattr(config.paths, name) for name in names if getattr(config.paths, name)]


# === STAGES ===

def cmd_synth(config: RunConfig, out: Path):
    seed = config.require_seed()
    settings = replace(config.synth, seed=seed)
    data = synth.generate(settings)
    outputs = synth.write_synth(data, out)
    summary = {'regions': data.graph.n_nodes, 'edges': data.graph.n_edges,
               'features': data.features.n_columns}
    return summary, [], outputs


def cmd_build_graph(config: RunConfig, out: Path):
    config.validate_paths('regions')
    regions = load_regions(config.paths.regions)
    graph = build_base_graph(regions, config.graph.base, config.graph.k)
    if config.graph.hops > 1:
        graph = khop_expand(graph, config.graph.hops)
    summary = graph_summary(graph)
    outputs = [write_edge_list(graph, out / 'edges.csv'),
               artifacts.write_json(summary, out / 'graph_summary.json')]
    logger.info(f"Graph: {summary}")
    return summary, _used_paths(config, 'regions'), outputs


def cmd_preprocess(config: RunConfig, out: Path):
    config.validate_paths('regions', 'features')
    regions = load_regions(config.paths.regions)
    ids = [r.id for r in regions]
    fixed = features.load_fixed_controls(config.paths.fixed_controls) if config.paths.fixed_controls else set()
    table = features.load_feature_table(config.paths.features, fixed, ids)
    selection = features.vif_select(table, config.preprocess.vif_threshold_free,
                                    config.preprocess.vif_threshold_fixed)
    retained = features.select_columns(table, selection.retained)
    correlation = features.correlation_matrix(retained)
    standardized = features.standardize(retained)

    outputs = [artifacts.write_csv(standardized.to_frame(), out / 'features_std.csv')]
    outputs.extend(selection.write(out))
    outputs.append(artifacts.write_csv(correlation.reset_index().rename(columns={'index': 'column'}),
                                       out / 'correlation.csv'))
    outputs.append(artifacts.write_csv(features.standardization_frame(standardized), out / 'standardization.csv'))
    warnings = table.warnings + list(correlation.attrs.get('warnings', [])) + standardized.warnings
    summary = {'rows': table.n_rows, 'complete_rows': int(table.row_mask.sum()),
               'columns_in': table.n_columns, 'columns_out': retained.n_columns,
               'removed': selection.removals['column'].tolist(), 'warnings': warnings}
    return summary, _used_paths(config, 'regions', 'features', 'fixed_controls'), outputs


def cmd_encode(config: RunConfig, out: Path):
    regions, graph = _load_graph(config)
    config.validate_paths('features')
    table = features.load_feature_table(config.paths.features, region_ids=graph.region_ids)
    settings = config.encodings.settings(config.paths.location_embeddings)
    encoded = node_encodings.compute_encoding(config.encodings.combo, graph, table.values, settings)
    assembled = node_encodings.assemble_features(table, encoded)

    values = assembled.values.copy()
    values[~table.row_mask] = np.nan
    frame = pd.DataFrame(values, columns=assembled.columns)
    frame.insert(0, 'id', graph.region_ids)
    outputs = [artifacts.write_csv(frame, out / 'node_features.csv'),
               artifacts.write_json(assembled.provenance, out / 'provenance.json')]
    summary = {'combo': config.encodings.combo, 'columns': len(assembled.columns),
               'provenance': assembled.provenance}
    return summary, _used_paths(config, 'regions', 'edges', 'features', 'location_embeddings'), outputs


def cmd_train(config: RunConfig, out: Path):
    seed = config.require_seed()
    regions, graph = _load_graph(config)
    table = _load_matrix(config, graph)
    target, mask = _load_target(config, graph, table)

    labelled = np.flatnonzero(mask)
    shuffled = np.random.default_rng(seed).permutation(labelled)
    n_val = int(round(0.2 * labelled.size)) if labelled.size > 1 else 0
    train_mask = np.zeros(graph.n_nodes, dtype=bool)
    val_mask = np.zeros(graph.n_nodes, dtype=bool)
    train_mask[shuffled[n_val:]] = True
    val_mask[shuffled[:n_val]] = True

    model = neuralnet.train(config.model, graph, table.values, target.values, train_mask, val_mask,
                            replace(config.train, seed=seed))
    y_hat = neuralnet.predict(model, graph, table.values)
    predictions = pd.DataFrame({'id': graph.region_ids, 'y': np.where(mask, target.values, np.nan),
                                'yhat': y_hat, 'split': np.where(train_mask, 'train',
                                                                  np.where(val_mask, 'val', 'unlabelled'))})
    outputs = [neuralnet.save_checkpoint(model, out / 'model.json'),
               neuralnet.write_training_log(model, out / 'training_log.csv'),
               artifacts.write_csv(predictions, out / 'predictions.csv')]
    val_scores = spatial_cv.metrics(y_hat, target.values, val_mask) if val_mask.any() else None
    summary = {'epochs': len(model.training_log), 'best_epoch': model.best_epoch,
               'val': None if val_scores is None else val_scores._asdict()}
    return summary, _used_paths(config, 'regions', 'edges', 'features', 'node_features', 'targets'), outputs


def cmd_cv(config: RunConfig, out: Path):
    seed = config.require_seed()
    regions, graph = _load_graph(config)
    table = _load_matrix(config, graph)
    target, mask = _load_target(config, graph, table)
    spec, train_config = config.model, replace(config.train, seed=seed)

    outputs = []
    if config.cv.search_rounds > 0:
        spec, train_config, search = spatial_cv.tune_once(graph, table.values, target.values, mask, spec,
                                                          train_config, config.search, config.cv.search_rounds,
                                                          seed, jobs=config.jobs)
        outputs.append(artifacts.write_csv(search.trials, out / 'search_trials.csv'))

    hops = spec.depth if config.cv.hops is None else config.cv.hops
    plans = spatial_cv.build_fold_plans(graph, config.cv.scheme, seed, hops, config.cv.groups)
    result = spatial_cv.run_cv(graph, table.values, target.values, mask, spec, train_config,
                               scheme=config.cv.scheme, seed=seed, hops=hops, groups=config.cv.groups,
                               buffer_role=config.cv.buffer_role, jobs=config.jobs, plans=plans)
    outputs.extend(spatial_cv.write_cv_results(result, graph.region_ids, out))
    outputs.append(spatial_cv.write_fold_plans(plans, graph.region_ids, out / 'fold_plans.csv'))
    summary = result.summary()
    return ({'scheme': summary['scheme'], 'folds': summary['folds'], 'aggregate': summary['aggregate']},
            _used_paths(config, 'regions', 'edges', 'features', 'node_features', 'targets'), outputs)


def cmd_ablate(config: RunConfig, out: Path):
    seed = config.require_seed()
    config.validate_paths('regions', 'features')
    regions = load_regions(config.paths.regions)
    graphs = spatial_cv.ablation_graphs(regions, config.graph.base, config.graph.k, config.ablation.graph_hops,
                                        config.ablation.knn_k)
    base = next(iter(graphs.values()))
    table = features.load_feature_table(config.paths.features, region_ids=base.region_ids)
    target, mask = _load_target(config, base, table)

    result = spatial_cv.ablation_grid(
        graphs, table.values, target.values, mask, config.ablation.encodings, config.ablation.architectures,
        config.ablation.depths, config.ablation.budget, seed, spec=config.model,
        config=replace(config.train, seed=seed), space=config.search,
        settings=config.encodings.settings(config.paths.location_embeddings), jobs=config.jobs)
    outputs = [artifacts.write_csv(result.table, out / 'ablation.csv'),
               artifacts.write_json(result.winners, out / 'ablation_winners.json')]
    return ({'winners': result.winners},
            _used_paths(config, 'regions', 'features', 'targets', 'location_embeddings'), outputs)


def _baseline_predictors(config: RunConfig, graph: RegionGraph, x: np.ndarray, y: np.ndarray):
    coords = graph.centroids
    gwr = config.baselines.gwr

    def ols(train_nodes, test_nodes):
        return baselines.ols_fit(x[train_nodes], y[train_nodes]).predict(x[test_nodes])

    def slm(train_nodes, test_nodes):
        fit = baselines.slm_fit(induced_subgraph(graph, train_nodes).graph, x[train_nodes], y[train_nodes])
        return fit.predict(graph, x)[test_nodes]

    def gwr_fold(train_nodes, test_nodes):
        bandwidth = gwr.bandwidth
        if bandwidth is None and gwr.adaptive_k is None:
            selection = baselines.select_bandwidth(coords[train_nodes], x[train_nodes], y[train_nodes],
                                                   gwr.candidates or None)
            bandwidth = float(selection.loc[selection['loo_sse'].idxmin(), 'bandwidth'])
        return baselines.gwr_predict(coords[train_nodes], x[train_nodes], y[train_nodes],
                                     coords[test_nodes], x[test_nodes],
                                     bandwidth=None if gwr.adaptive_k is not None else bandwidth,
                                     adaptive_k=gwr.adaptive_k)

    predictors = {'ols': ols, 'slm': slm, 'gwr': gwr_fold}
    if 'external' in config.baselines.models:
        config.validate_paths('external_predictions')
        external = baselines.import_external_predictions(config.paths.external_predictions, graph.region_ids)
        predictors['external'] = lambda train_nodes, test_nodes: external[test_nodes]
    return predictors


def cmd_baselines(config: RunConfig, out: Path):
    seed = config.require_seed()
    regions, graph = _load_graph(config)
    config.validate_paths('features')
    table = features.load_feature_table(config.paths.features, region_ids=graph.region_ids)
    target, mask = _load_target(config, graph, table)
    x, y = table.values, target.values
    labelled = np.flatnonzero(mask)

    in_sample: Dict[str, Any] = {}
    if 'ols' in config.baselines.models:
        in_sample['ols'] = {'r2': baselines.ols_fit(x[labelled], y[labelled]).r2}
    if 'slm' in config.baselines.models:
        fit = baselines.slm_fit(induced_subgraph(graph, labelled).graph, x[labelled], y[labelled])
        in_sample['slm'] = {'rho': fit.rho, 'r2': fit.r2, 'log_likelihood': fit.log_likelihood}
    if 'gwr' in config.baselines.models:
        fit = baselines.gwr_fit_predict(graph.centroids[labelled], x[labelled], y[labelled], config.baselines.gwr)
        in_sample['gwr'] = {'bandwidth': fit.bandwidth, 'r2': fit.r2, 'warnings': fit.warnings}

    hops = config.model.depth if config.cv.hops is None else config.cv.hops
    plans = spatial_cv.build_fold_plans(graph, config.cv.scheme, seed, hops, config.cv.groups)
    predictors = _baseline_predictors(config, graph, x, y)
    outputs = [artifacts.write_json(in_sample, out / 'baselines_insample.json')]
    cv_summary = {}
    for name in config.baselines.models:
        logger.info(f"=== BASELINE {name.upper()} ===")
        result = spatial_cv.run_baseline_cv(plans, y, mask, predictors[name], name, seed=seed,
                                            buffer_role=config.cv.buffer_role, scheme=config.cv.scheme)
        outputs.extend(spatial_cv.write_cv_results(result, graph.region_ids, out, prefix=f"baseline_{name}"))
        cv_summary[name] = result.summary()['aggregate']
    summary = {'in_sample': in_sample, 'cv': cv_summary}
    return summary, _used_paths(config, 'regions', 'edges', 'features', 'targets', 'external_predictions'), outputs


def cmd_explain(config: RunConfig, out: Path):
    regions, graph = _load_graph(config)
    config.validate_paths('model')
    model = neuralnet.load_checkpoint(config.paths.model)
    table = _load_matrix(config, graph)
    target, mask = _load_target(config, graph, table)
    report = explain.build_explain_report(model, graph, table.values, table.columns, _load_provenance(config),
                                          target.values, mask, config.explain.variance_target)
    outputs = explain.write_report_bundle(report, regions, out)
    summary = {'n_selected': report.n_selected, 'pc_regression_r2': report.pc_regression.r2,
               'residual_mean': report.residual_stats.mean, 'residual_std': report.residual_stats.std}
    return summary, _used_paths(config, 'regions', 'edges', 'model', 'features', 'node_features', 'targets'), outputs


COMMANDS = {
    'synth': cmd_synth,
    'build-graph': cmd_build_graph,
    'preprocess': cmd_preprocess,
    'encode': cmd_encode,
    'train': cmd_train,
    'cv': cmd_cv,
    'ablate': cmd_ablate,
    'baselines': cmd_baselines,
    'explain': cmd_explain,
}


# === ARGUMENT PARSING ===

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', help="JSON run config or a previous stage's manifest.json")
    common.add_argument('--seed', type=int, help='Random seed (required by stochastic stages)')
    common.add_argument('--jobs', type=int, help='Worker threads for folds and search trials')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    paths = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    paths.add_argument('--regions', help='Region GeoJSON or id,x,y[,group] CSV')
    paths.add_argument('--edges', help='Stored edge list (src,dst) from build-graph')
    paths.add_argument('--features', help='Feature CSV (raw for preprocess, standardized afterwards)')
    paths.add_argument('--targets', help='Outcome CSV with an id column')
    paths.add_argument('--outcome', help='Outcome column name')

    parser = argparse.ArgumentParser(prog='geohealth-gnn', description='Spatial GNN pipeline for regional health outcomes')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='Generate a synthetic grid dataset')
    p.add_argument('--rows', type=int)
    p.add_argument('--cols', type=int)
    p.add_argument('--n-features', type=int)
    p.add_argument('--passes', type=int, help='Spatial smoothing passes')
    p.add_argument('--rho', type=float)
    p.add_argument('--noise-std', type=float)
    p.add_argument('--lag-mode', choices=list(synth.LAG_MODES))

    p = sub.add_parser('build-graph', parents=[common], help='Build the region adjacency graph')
    p.add_argument('--regions')
    p.add_argument('--base', choices=['contiguity', 'knn'])
    p.add_argument('--k', type=int)
    p.add_argument('--hops', dest='graph_hops', type=int, help='k-hop expansion of the base graph')

    p = sub.add_parser('preprocess', parents=[common], help='VIF selection and standardization')
    p.add_argument('--regions')
    p.add_argument('--features')
    p.add_argument('--fixed-controls')

    p = sub.add_parser('encode', parents=[common, paths], help='Append node encodings to features')
    p.add_argument('--encodings', help="Encoding combination joined by '+'")
    p.add_argument('--location-embeddings')

    for name, text in (('train', 'Train one model on an 80:20 split'),
                       ('cv', 'Spatially buffered cross-validation')):
        p = sub.add_parser(name, parents=[common, paths], help=text)
        p.add_argument('--node-features')
        p.add_argument('--architecture', choices=list(neuralnet.ARCHITECTURES))
        p.add_argument('--depth', type=int)
        p.add_argument('--epochs', type=int)
        p.add_argument('--lr', type=float)
        if name == 'cv':
            p.add_argument('--scheme', choices=list(spatial_cv.SCHEMES))
            p.add_argument('--hops', dest='buffer_hops', type=int, help='Buffer radius (default: model depth)')
            p.add_argument('--buffer-role', choices=list(spatial_cv.BUFFER_ROLES))
            p.add_argument('--search-rounds', type=int)
            p.add_argument('--groups', type=_comma_list, help='Comma-separated LOOCV groups')

    p = sub.add_parser('ablate', parents=[common, paths], help='Greedy ablation over model design axes')
    p.add_argument('--budget', type=int, help='Search trials per configuration')
    p.add_argument('--location-embeddings')

    p = sub.add_parser('baselines', parents=[common, paths], help='OLS, SLM and GWR under the same folds')
    p.add_argument('--baselines', type=_comma_list, help='Comma-separated subset of ols,slm,gwr,external')
    p.add_argument('--external-predictions')
    p.add_argument('--scheme', choices=list(spatial_cv.SCHEMES))
    p.add_argument('--hops', dest='buffer_hops', type=int)
    p.add_argument('--groups', type=_comma_list)

    p = sub.add_parser('explain', parents=[common, paths], help='PCA of embeddings and residual maps')
    p.add_argument('--model')
    p.add_argument('--node-features')
    p.add_argument('--variance-target', type=float)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then --config, then explicit flags"""
    options = vars(args)
    config = RunConfig.from_file(options['config']) if 'config' in options else RunConfig()
    overrides = {key: options[dest] for dest, key in OVERRIDES.items() if dest in options}
    return config.merge(overrides) if overrides else config


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(args, 'log_level', 'INFO')
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr, force=True)

    try:
        config = resolve_config(args)
        out = Path(config.out)
        logger.info(f"=== {args.command.upper()} -> {out} ===")
        summary, inputs, outputs = COMMANDS[args.command](config, out)
        artifacts.write_manifest(out, args.command, config.to_dict(), config.seed, inputs, outputs)
        print(json.dumps(artifacts.to_jsonable(summary), sort_keys=True))
        return 0
    except GeoHealthError as e:
        logger.error(f"{args.command} failed: {e.name}: {e.message}")
        print(f"error: {e.name}: {e.message}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
