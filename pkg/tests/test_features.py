import math

import numpy as np
import pandas as pd
import pytest

from errors import (AlreadyStandardized, InputFileNotFound, InvalidConfig, MissingColumn, NonNumericCell,
                    RegionIdMismatch, TooFewRows)
from features import (FeatureTable, correlation_matrix, inverse_standardize, load_feature_table,
                      load_fixed_controls, load_target_vector, select_columns, standardize, vif, vif_select)


def make_table(columns, values, fixed=None, row_mask=None):
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    return FeatureTable(
        region_ids=[f"r{i}" for i in range(n)],
        columns=list(columns),
        fixed=list(fixed) if fixed is not None else [False] * len(columns),
        values=values,
        row_mask=np.ones(n, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool),
    )


@pytest.fixture
def random_columns():
    rng = np.random.default_rng(11)
    return rng.standard_normal((60, 3))


class TestLoadFeatureTable:
    def test_missing_cells_masked_with_mean_placeholder(self, tmp_path):
        path = tmp_path / 'features.csv'
        path.write_text("id,a,b\nx,1,2\ny,NA,3\nz,5,6\n")
        table = load_feature_table(path)
        assert table.row_mask.tolist() == [True, False, True]
        assert table.values[1, 0] == pytest.approx(3.0)
        assert table.warnings
        assert math.isnan(table.to_frame().loc[1, 'a'])

    def test_rows_follow_region_order(self, tmp_path):
        path = tmp_path / 'features.csv'
        path.write_text("id,a\nx,1\ny,2\nz,3\n")
        table = load_feature_table(path, region_ids=['z', 'x', 'y'])
        assert table.region_ids == ['z', 'x', 'y']
        assert table.values[:, 0].tolist() == [3.0, 1.0, 2.0]

    def test_non_numeric_cell_reports_position(self, tmp_path):
        path = tmp_path / 'features.csv'
        path.write_text("id,a,b\nx,1,2\ny,abc,3\n")
        with pytest.raises(NonNumericCell) as info:
            load_feature_table(path)
        assert info.value.row == 2
        assert info.value.column == 'a'

    def test_id_mismatch(self, tmp_path):
        path = tmp_path / 'features.csv'
        path.write_text("id,a\nx,1\ny,2\n")
        with pytest.raises(RegionIdMismatch):
            load_feature_table(path, region_ids=['x', 'q'])

    def test_unknown_fixed_column(self, tmp_path):
        path = tmp_path / 'features.csv'
        path.write_text("id,a\nx,1\ny,2\n")
        with pytest.raises(MissingColumn):
            load_feature_table(path, fixed_column_names=['age'])

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputFileNotFound):
            load_feature_table(tmp_path / 'nope.csv')


class TestLoadTargets:
    def test_absent_and_missing_values_masked(self, tmp_path):
        path = tmp_path / 'targets.csv'
        path.write_text("id,outcome\nx,1.5\ny,\n")
        target = load_target_vector(path, 'outcome', ['x', 'y', 'z'])
        assert target.mask.tolist() == [True, False, False]
        assert target.values[0] == 1.5
        assert target.warnings

    def test_missing_outcome_column(self, tmp_path):
        path = tmp_path / 'targets.csv'
        path.write_text("id,other\nx,1\n")
        with pytest.raises(MissingColumn):
            load_target_vector(path, 'outcome', ['x'])

    def test_fixed_controls_file(self, tmp_path):
        path = tmp_path / 'fixed.txt'
        path.write_text("# demographics\nage\n\nsex  # coded 0/1\n")
        assert load_fixed_controls(path) == {'age', 'sex'}


class TestCorrelation:
    def test_perfect_and_constant_columns(self):
        table = make_table(['a', 'b', 'c'], [[1, 2, 5], [2, 4, 5], [3, 6, 5], [4, 8, 5]])
        corr = correlation_matrix(table)
        assert corr.loc['a', 'b'] == pytest.approx(1.0)
        assert corr.loc['a', 'c'] == 0.0
        assert corr.loc['c', 'c'] == 1.0
        assert corr.attrs['warnings']

    def test_symmetric(self, random_columns):
        corr = correlation_matrix(make_table(['a', 'b', 'c'], random_columns)).to_numpy()
        np.testing.assert_allclose(corr, corr.T)

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            correlation_matrix(make_table(['a'], [[1.0]]))


class TestVif:
    def test_orthogonal_columns(self):
        table = make_table(['a', 'b'], [[1, 1], [-1, 1], [1, -1], [-1, -1]])
        assert vif(table, 0) == pytest.approx(1.0)

    def test_constant_column_is_infinite(self):
        table = make_table(['a', 'b'], [[1, 3], [2, 3], [4, 3], [5, 3]])
        assert vif(table, 1) == math.inf

    def test_exact_duplicate_is_infinite(self, random_columns):
        values = np.column_stack([random_columns, random_columns[:, 0]])
        assert vif(make_table(['a', 'b', 'c', 'd'], values), 3) == math.inf

    @pytest.mark.parametrize('seed', range(20))
    def test_matches_normal_equations(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((100, 5)) @ rng.standard_normal((5, 5))
        table = make_table(list('abcde'), values)
        for j in range(5):
            design = np.column_stack([np.ones(100), np.delete(values, j, axis=1)])
            beta = np.linalg.solve(design.T @ design, design.T @ values[:, j])
            residual = values[:, j] - design @ beta
            centered = values[:, j] - values[:, j].mean()
            expected = 1.0 / (residual @ residual / (centered @ centered))
            assert vif(table, j) == pytest.approx(expected, rel=1e-6)

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            vif(make_table(['a', 'b', 'c'], [[1, 2, 3], [4, 5, 7]]), 0)


class TestVifSelect:
    def test_duplicate_removes_later_column(self, random_columns):
        values = np.column_stack([random_columns, random_columns[:, 0]])
        selection = vif_select(make_table(['a', 'b', 'c', 'a_copy'], values))
        assert selection.retained == ['a', 'b', 'c']
        assert selection.removals['column'].tolist() == ['a_copy']
        assert selection.violations.empty

    def test_near_duplicate_removes_later_column(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal((200, 3))
        values = np.column_stack([base, base[:, 1] + 1e-3 * rng.standard_normal(200)])
        selection = vif_select(make_table(['a', 'b', 'c', 'b_near'], values))
        assert selection.removals['column'].tolist() == ['b_near']
        assert selection.removals['vif'].iloc[0] > 1000

    def test_clearly_highest_earlier_column_removed(self):
        rng = np.random.default_rng(9)
        b, c = rng.standard_normal((2, 200))
        # VIF(a) is about twice VIF(b) and VIF(c)
        a = b + c + 1e-3 * rng.standard_normal(200)
        selection = vif_select(make_table(['a', 'b', 'c'], np.column_stack([a, b, c])))
        assert selection.removals['column'].tolist() == ['a']

    def test_fixed_columns_never_removed(self, random_columns):
        values = np.column_stack([random_columns[:, 0], random_columns])
        selection = vif_select(make_table(['age', 'a', 'b', 'c'], values, fixed=[True, False, False, False]))
        assert 'age' in selection.retained
        assert selection.removals['column'].tolist() == ['a']

    def test_fixed_violations_reported(self, random_columns):
        values = np.column_stack([random_columns[:, :2], random_columns[:, 0]])
        selection = vif_select(make_table(['a', 'b', 'c'], values, fixed=[True, False, True]))
        assert selection.retained == ['a', 'b', 'c']
        assert sorted(selection.violations['column']) == ['a', 'c']

    def test_independent_columns_untouched(self, random_columns):
        selection = vif_select(make_table(['a', 'b', 'c'], random_columns))
        assert selection.retained == ['a', 'b', 'c']
        assert all(score < 2 for score in selection.final_vifs.values())

    def test_threshold_validation(self, random_columns):
        with pytest.raises(InvalidConfig):
            vif_select(make_table(['a', 'b', 'c'], random_columns), threshold_free=1.0)

    def test_writes_logs(self, tmp_path, random_columns):
        values = np.column_stack([random_columns, random_columns[:, 0]])
        paths = vif_select(make_table(['a', 'b', 'c', 'd'], values)).write(tmp_path)
        assert [p.name for p in paths] == ['vif_removals.csv', 'vif_violations.csv']
        assert pd.read_csv(paths[0])['column'].tolist() == ['d']


class TestStandardize:
    def test_zero_mean_unit_population_std(self, random_columns):
        table = standardize(make_table(['a', 'b', 'c'], random_columns * 5 + 2))
        np.testing.assert_allclose(table.values.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(table.values.std(axis=0), 1.0)

    def test_constant_column_becomes_zero(self):
        table = standardize(make_table(['a', 'b'], [[1, 7], [2, 7], [3, 7]]))
        assert table.values[:, 1].tolist() == [0.0, 0.0, 0.0]
        assert table.warnings

    def test_masked_rows_do_not_shift_statistics(self):
        table = make_table(['a'], [[1.0], [3.0], [100.0]], row_mask=[True, True, False])
        assert standardize(table).column_means[0] == pytest.approx(2.0)

    def test_twice_rejected(self, random_columns):
        with pytest.raises(AlreadyStandardized):
            standardize(standardize(make_table(['a', 'b', 'c'], random_columns)))

    def test_inverse_restores_values(self, random_columns):
        original = make_table(['a', 'b', 'c'], random_columns * 3 - 1)
        restored = inverse_standardize(standardize(original))
        np.testing.assert_allclose(restored.values, original.values)
        assert not restored.standardized

    def test_select_columns_keeps_statistics(self, random_columns):
        table = standardize(make_table(['a', 'b', 'c'], random_columns))
        picked = select_columns(table, ['c', 'a'])
        assert picked.columns == ['c', 'a']
        np.testing.assert_allclose(picked.column_stds, table.column_stds[[2, 0]])
