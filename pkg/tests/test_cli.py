import json

import pandas as pd
import pytest

import cli
from errors import InvalidConfig
from run_config import RunConfig


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    summary = json.loads(captured.out) if code == 0 else None
    return code, summary, captured.err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    out = tmp_path / 'synth'
    code, _, _ = run(capsys, 'synth', '--seed', 3, '--rows', 5, '--cols', 5, '--n-features', 3, '--out', out)
    assert code == 0
    return out


class TestRunConfig:
    def test_merge_dotted_keys(self):
        config = RunConfig().merge({'cv.scheme': 'loocv', 'model.depth': 3, 'seed': 5})
        assert config.cv.scheme == 'loocv'
        assert config.model.depth == 3
        assert config.seed == 5

    def test_unknown_override(self):
        with pytest.raises(InvalidConfig):
            RunConfig().merge({'model.width': 3})

    def test_unknown_section_key(self):
        with pytest.raises(InvalidConfig):
            RunConfig.from_dict({'graph': {'base': 'knn', 'radius': 2}})

    def test_invalid_value(self):
        with pytest.raises(InvalidConfig):
            RunConfig.from_dict({'model': {'architecture': 'mlp'}})

    def test_nested_gwr_section(self):
        config = RunConfig.from_dict({'baselines': {'models': ['ols'], 'gwr': {'bandwidth': 0.5}}})
        assert config.baselines.gwr.bandwidth == 0.5

    def test_round_trip(self):
        config = RunConfig(seed=4).merge({'synth.collinear_pairs': [[0, 0.1]]})
        assert RunConfig.from_dict(config.to_dict()) == config


class TestCommands:
    def test_synth_outputs(self, synth_dir):
        assert (synth_dir / 'regions.geojson').exists()
        manifest = json.loads((synth_dir / 'manifest.json').read_text(encoding='utf-8'))
        assert manifest['command'] == 'synth'
        assert manifest['seed'] == 3
        assert set(manifest['outputs']) >= {'features.csv', 'targets.csv', 'truth.json'}

    def test_build_graph_counts(self, tmp_path, capsys, synth_dir):
        code, summary, _ = run(capsys, 'build-graph', '--regions', synth_dir / 'regions.geojson', '--hops', 1,
                               '--out', tmp_path / 'graph')
        assert code == 0
        assert summary['nodes'] == 25
        assert summary['edges'] == 72
        assert len(pd.read_csv(tmp_path / 'graph' / 'edges.csv')) == 72

    def test_missing_input_exit_code(self, tmp_path, capsys):
        code, _, err = run(capsys, 'build-graph', '--regions', tmp_path / 'nowhere.geojson', '--out', tmp_path)
        assert code == 2
        assert 'nowhere.geojson' in err

    def test_missing_seed_exit_code(self, tmp_path, capsys):
        code, _, err = run(capsys, 'synth', '--out', tmp_path / 'synth')
        assert code == 4
        assert 'MissingSeed' in err

    def test_rerun_reproduces_manifest(self, tmp_path, capsys, synth_dir):
        args = ('build-graph', '--regions', synth_dir / 'regions.geojson', '--out', tmp_path / 'graph')
        run(capsys, *args)
        first = (tmp_path / 'graph' / 'manifest.json').read_bytes()
        run(capsys, *args)
        assert (tmp_path / 'graph' / 'manifest.json').read_bytes() == first

    def test_manifest_replays_as_config(self, tmp_path, capsys, synth_dir):
        out = tmp_path / 'graph'
        run(capsys, 'build-graph', '--regions', synth_dir / 'regions.geojson', '--k', 4, '--out', out)
        config = RunConfig.from_file(out / 'manifest.json')
        assert config.graph.k == 4
        assert config.paths.regions == str(synth_dir / 'regions.geojson')


class TestPipeline:
    def test_stages_chain(self, tmp_path, capsys, synth_dir):
        regions = synth_dir / 'regions.geojson'
        targets = synth_dir / 'targets.csv'

        code, summary, _ = run(capsys, 'build-graph', '--regions', regions, '--out', tmp_path / 'graph')
        assert code == 0
        edges = tmp_path / 'graph' / 'edges.csv'

        code, summary, _ = run(capsys, 'preprocess', '--regions', regions, '--features', synth_dir / 'features.csv',
                               '--fixed-controls', synth_dir / 'fixed_controls.txt', '--out', tmp_path / 'prep')
        assert code == 0
        assert summary['columns_out'] == 3

        code, summary, _ = run(capsys, 'encode', '--regions', regions, '--edges', edges,
                               '--features', tmp_path / 'prep' / 'features_std.csv', '--encodings', 'random_walk',
                               '--out', tmp_path / 'enc')
        assert code == 0
        assert summary['columns'] == 4
        node_features = tmp_path / 'enc' / 'node_features.csv'

        common = ('--regions', regions, '--edges', edges, '--targets', targets, '--node-features', node_features,
                  '--seed', 1, '--epochs', 5, '--architecture', 'gcn')
        code, summary, _ = run(capsys, 'train', *common, '--out', tmp_path / 'train')
        assert code == 0
        assert summary['epochs'] == 5
        predictions = pd.read_csv(tmp_path / 'train' / 'predictions.csv')
        assert sorted(predictions['split'].unique()) == ['train', 'val']

        code, summary, _ = run(capsys, 'cv', *common, '--depth', 1, '--out', tmp_path / 'cv')
        assert code == 0
        assert summary['folds'] == 10
        assert (tmp_path / 'cv' / 'fold_plans.csv').exists()

        code, summary, _ = run(capsys, 'baselines', '--regions', regions, '--edges', edges, '--targets', targets,
                               '--features', tmp_path / 'prep' / 'features_std.csv', '--seed', 1,
                               '--baselines', 'ols', '--out', tmp_path / 'base')
        assert code == 0
        assert summary['in_sample']['ols']['r2'] > 0
        assert (tmp_path / 'base' / 'baseline_ols_summary.json').exists()

        code, summary, _ = run(capsys, 'explain', '--regions', regions, '--edges', edges, '--targets', targets,
                               '--node-features', node_features, '--model', tmp_path / 'train' / 'model.json',
                               '--out', tmp_path / 'explain')
        assert code == 0
        assert summary['n_selected'] >= 1
        assert (tmp_path / 'explain' / 'layers.geojson').exists()

    def test_leave_one_group_out(self, tmp_path, capsys, synth_dir):
        code, summary, _ = run(capsys, 'baselines', '--regions', synth_dir / 'regions.geojson',
                               '--targets', synth_dir / 'targets.csv', '--features', synth_dir / 'features.csv',
                               '--seed', 0, '--baselines', 'ols,gwr', '--scheme', 'loocv',
                               '--groups', 'NE,SW', '--hops', 1, '--out', tmp_path / 'loocv')
        assert code == 0
        assert set(summary['cv']) == {'ols', 'gwr'}

    def test_unknown_group(self, tmp_path, capsys, synth_dir):
        code, _, err = run(capsys, 'baselines', '--regions', synth_dir / 'regions.geojson',
                           '--targets', synth_dir / 'targets.csv', '--features', synth_dir / 'features.csv',
                           '--seed', 0, '--baselines', 'ols', '--scheme', 'loocv', '--groups', 'Camden',
                           '--out', tmp_path / 'loocv')
        assert code == 2
        assert 'UnknownGroup' in err


@pytest.mark.slow
def test_gatv2_beats_ols_on_lagged_synthetic_grid(tmp_path, capsys):
    """Buffered 10-fold CV on a 20x20 grid with a spatially lagged outcome"""
    data = tmp_path / 'synth'
    code, _, _ = run(capsys, 'synth', '--seed', 0, '--rows', 20, '--cols', 20, '--passes', 5, '--rho', 0.4,
                     '--out', data)
    assert code == 0
    paths = ('--regions', data / 'regions.geojson', '--targets', data / 'targets.csv', '--seed', 0)

    code, gnn, _ = run(capsys, 'cv', *paths, '--features', data / 'features.csv', '--architecture', 'gatv2',
                       '--depth', 2, '--epochs', 200, '--lr', 0.01, '--out', tmp_path / 'cv')
    assert code == 0
    code, base, _ = run(capsys, 'baselines', *paths, '--features', data / 'features.csv', '--baselines', 'ols',
                        '--hops', 2, '--out', tmp_path / 'base')
    assert code == 0
    assert gnn['aggregate']['r2']['mean'] > base['cv']['ols']['r2']['mean']
