import math

import numpy as np
import pytest

from lometab.data import (
    Column,
    DatasetSchema,
    ParseError,
    SchemaError,
    TabularDataset,
    bayes_accuracy_two_gaussians,
    load_csv,
    make_synthetic,
    seeded_split,
    standardize,
    write_csv,
)
from lometab.numkernel import make_rng

SCHEMA = DatasetSchema("binary", [Column("a", "numeric"), Column("color", "categorical"), Column("label", "target")])


def write_rows(path, rows, header="a,color,label"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def ten_rows(tmp_path):
    rows = [f"{i * 0.5},{'red' if i % 2 else 'blue'},{i % 2}" for i in range(10)]
    return write_rows(tmp_path / "d.csv", rows)


class TestSplit:
    def test_ten_rows(self, tmp_path):
        ds = load_csv(ten_rows(tmp_path), SCHEMA, (0.6, 0.2, 0.2), seed=3)
        assert (len(ds.train_idx), len(ds.val_idx), len(ds.test_idx)) == (6, 2, 2)
        # oracle: one Philox permutation cut into consecutive blocks
        perm = make_rng(3).permutation(10)
        np.testing.assert_array_equal(ds.train_idx, np.sort(perm[:6]))
        np.testing.assert_array_equal(ds.val_idx, np.sort(perm[6:8]))
        np.testing.assert_array_equal(ds.test_idx, np.sort(perm[8:]))

    def test_deterministic_and_disjoint(self):
        for seed in range(20):
            a = seeded_split(37, seed=seed)
            b = seeded_split(37, seed=seed)
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)
            assert sorted(np.concatenate(a).tolist()) == list(range(37))

    def test_empty_split(self):
        with pytest.raises(ValueError):
            seeded_split(3, (0.9, 0.1, 0.0))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            seeded_split(10, (0.5, 0.2, 0.2))

    def test_index_files_take_precedence(self, tmp_path):
        path = ten_rows(tmp_path)
        files = {}
        for part, idx in (("train", "0\n1\n2\n3\n4\n"), ("val", "5\n6\n"), ("test", "7\n8\n9\n")):
            files[part] = tmp_path / f"{part}.idx"
            files[part].write_text(idx)
        ds = load_csv(path, SCHEMA, files)
        np.testing.assert_array_equal(ds.test_idx, [7, 8, 9])

    def test_overlapping_index_files(self, tmp_path):
        path = ten_rows(tmp_path)
        files = {}
        for part in ("train", "val", "test"):
            files[part] = tmp_path / f"{part}.idx"
            files[part].write_text("0\n")
        with pytest.raises(ValueError):
            load_csv(path, SCHEMA, files)


class TestLoad:
    def test_missing_target(self, tmp_path):
        path = write_rows(tmp_path / "d.csv", ["1,red"], header="a,color")
        with pytest.raises(SchemaError):
            load_csv(path, SCHEMA)

    def test_unparseable_cell(self, tmp_path):
        rows = [f"{i},red,0" for i in range(9)] + ["oops,red,1"]
        with pytest.raises(ParseError) as info:
            load_csv(write_rows(tmp_path / "d.csv", rows), SCHEMA)
        assert info.value.row == 9 and info.value.col == "a"

    def test_missing_numeric_rejected(self, tmp_path):
        rows = [f"{i},red,0" for i in range(9)] + [",red,1"]
        with pytest.raises(ParseError):
            load_csv(write_rows(tmp_path / "d.csv", rows), SCHEMA)

    def test_unknown_category_from_test_only(self, tmp_path):
        path = ten_rows(tmp_path)
        ds0 = load_csv(path, SCHEMA, (0.6, 0.2, 0.2), seed=1)
        row = int(ds0.test_idx[0])
        lines = path.read_text().splitlines()
        parts = lines[row + 1].split(",")
        parts[1] = "green"
        lines[row + 1] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        ds = load_csv(path, SCHEMA, (0.6, 0.2, 0.2), seed=1)
        assert "green" not in ds.vocabs[0]
        assert ds.x_cat[row, 0] == len(ds.vocabs[0])
        # the unknown code never occurs among training rows
        assert np.all(ds.x_cat[ds.train_idx, 0] < len(ds.vocabs[0]))

    def test_string_labels(self, tmp_path):
        rows = [f"{i},red,{'yes' if i % 2 else 'no'}" for i in range(10)]
        ds = load_csv(write_rows(tmp_path / "d.csv", rows), SCHEMA)
        assert ds.classes == ["no", "yes"]
        np.testing.assert_array_equal(ds.y[:2], [0, 1])

    def test_schema_validation(self, tmp_path):
        with pytest.raises(SchemaError):
            DatasetSchema("binary", [Column("a", "numeric")])
        with pytest.raises(SchemaError):
            DatasetSchema("binary", [Column("y", "target")])
        with pytest.raises(SchemaError):
            DatasetSchema("ranking", [Column("a", "numeric"), Column("y", "target")])
        p = tmp_path / "s.json"
        p.write_text('{"task": "binary", "columns": [], "extra": 1}')
        with pytest.raises(SchemaError):
            DatasetSchema.load(p)

    def test_schema_round_trip(self, tmp_path):
        SCHEMA.dump(tmp_path / "s.json")
        assert DatasetSchema.load(tmp_path / "s.json") == SCHEMA

    def test_csv_round_trip(self, tmp_path):
        ds = make_synthetic("xor_multiclass", 50, seed=2)
        back = load_csv(write_csv(ds, tmp_path / "x.csv"), ds.schema, (0.6, 0.2, 0.2), seed=2)
        np.testing.assert_array_equal(back.x_num, ds.x_num)
        np.testing.assert_array_equal(back.y, ds.y)


class TestStandardize:
    def _ds(self, values, y=None):
        x = np.asarray(values, dtype=float).reshape(len(values), -1)
        cols = [Column(f"x{j}", "numeric") for j in range(x.shape[1])] + [Column("y", "target")]
        y = np.zeros(len(x)) if y is None else np.asarray(y, dtype=float)
        return TabularDataset(DatasetSchema("regression", cols), x, np.zeros((len(x), 0), dtype=np.int64), y,
                              np.array([0, 1]), np.array([2]), np.array([2]))

    def test_two_values(self):
        ds = self._ds([0.0, 2.0, 5.0], y=[1.0, 3.0, 0.0])
        out = standardize(ds)
        np.testing.assert_array_equal(out.x_num[:2, 0], [-1.0, 1.0])
        np.testing.assert_array_equal(ds.x_num[:, 0], [0.0, 2.0, 5.0])  # input untouched

    def test_constant_feature(self):
        ds = self._ds([[3.0, 0.0], [3.0, 1.0], [3.0, 2.0]])
        out = standardize(ds)
        np.testing.assert_array_equal(out.x_num[:, 0], [3.0, 3.0, 3.0])
        np.testing.assert_array_equal(out.degenerate_features, [True, False])

    def test_target_scaler_round_trip(self):
        ds = standardize(make_synthetic("friedman_regression", 200, seed=1))
        s = ds.target_scaler
        np.testing.assert_allclose(s.inverse(s.transform(ds.y)), ds.y, rtol=0, atol=1e-12)
        z = s.transform(ds.y[ds.train_idx])
        assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12

    def test_no_leakage_from_val_test(self):
        ds = make_synthetic("friedman_regression", 200, seed=4)
        ref = standardize(ds)
        mutated = make_synthetic("friedman_regression", 200, seed=4)
        held = np.concatenate([mutated.val_idx, mutated.test_idx])
        mutated.x_num[held] = 1e6
        mutated.y[held] = -1e6
        out = standardize(mutated)
        np.testing.assert_array_equal(out.feature_mean, ref.feature_mean)
        np.testing.assert_array_equal(out.feature_std, ref.feature_std)
        assert out.target_scaler == ref.target_scaler
        np.testing.assert_array_equal(out.x_num[ds.train_idx], ref.x_num[ds.train_idx])


class TestSynthetic:
    @pytest.mark.parametrize("kind", ["TwoGaussiansBinary", "xor_multiclass", "linear-regression", "friedman_regression"])
    def test_same_seed_identical(self, kind):
        a, b = make_synthetic(kind, 100, seed=7), make_synthetic(kind, 100, seed=7)
        np.testing.assert_array_equal(a.x_num, b.x_num)
        np.testing.assert_array_equal(a.y, b.y)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_synthetic("spirals", 10)

    def test_linear_formula(self):
        ds = make_synthetic("linear_regression", 50, seed=0)
        np.testing.assert_array_equal(ds.y, 2 * ds.x_num[:, 0] - ds.x_num[:, 1])

    def test_bayes_accuracy(self):
        assert bayes_accuracy_two_gaussians() > 0.97
        assert bayes_accuracy_two_gaussians() == pytest.approx(0.5 * (1 + math.erf(math.sqrt(2))), rel=1e-15)

    def test_bayes_rule_empirical(self):
        ds = make_synthetic("two_gaussians_binary", 20000, seed=0)
        pred = (ds.x_num.sum(axis=1) > 0).astype(int)
        assert abs(np.mean(pred == ds.y) - bayes_accuracy_two_gaussians()) < 0.005

    def test_xor_labels(self):
        ds = make_synthetic("xor_multiclass", 500, seed=0)
        assert set(ds.y.tolist()) == {0, 1, 2, 3} and ds.n_classes == 4
