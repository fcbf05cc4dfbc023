import json

import numpy as np
import pytest

from fedbayes import data
from fedbayes.data import Dataset, PartitionSpec
from fedbayes.exceptions import AdultParseError, PartitionError

ROWS = [
    "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K",
    "50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, >50K",
    "38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, ?, <=50K",
    "53, Private, 234721, 11th, 7, Married-civ-spouse, Handlers-cleaners, Husband, Black, Male, 0, 0, 40, United-States, <=50K",
]
TEST_ROWS = [
    "|1x3 Cross validator",
    "25, Private, 226802, 11th, 7, Never-married, Machine-op-inspct, Own-child, Black, Male, 0, 0, 40, United-States, <=50K.",
    "44, Private, 160323, Some-college, 10, Married-civ-spouse, Machine-op-inspct, Husband, Black, Male, 7688, 0, 40, Cuba, >50K.",
]


@pytest.fixture
def tiny_files(tmp_path):
    train = tmp_path / "adult.data"
    test = tmp_path / "adult.test"
    train.write_text("\n".join(ROWS) + "\n\n")
    test.write_text("\n".join(TEST_ROWS) + "\n")
    return train, test


class TestLoad:
    def test_drop_missing(self, tiny_files):
        ds = data.load_adult(*tiny_files)
        assert len(ds) == 5
        np.testing.assert_array_equal(ds.t, [-1, 1, -1, -1, 1])

    def test_missing_as_category(self, tiny_files):
        ds = data.load_adult(*tiny_files, missing="category")
        assert len(ds) == 6
        assert "native-country=?" in ds.feature_names

    def test_encoding(self, tiny_files):
        ds = data.load_adult(*tiny_files)
        assert ds.feature_names[-1] == "bias"
        np.testing.assert_array_equal(ds.x[:, -1], 1.0)
        cont = ds.x[:, :len(data.CONTINUOUS)]
        np.testing.assert_allclose(cont.mean(0), 0.0, atol=1e-12)
        varying = cont.std(0) > 0
        np.testing.assert_allclose(cont.std(0)[varying], 1.0)
        assert varying.sum() == len(data.CONTINUOUS) - 1  # capital-loss is constant here
        onehot = ds.x[:, len(data.CONTINUOUS):-1]
        assert set(np.unique(onehot)) <= {0.0, 1.0}
        # exactly one active level per categorical column
        assert np.all(onehot.sum(1) == len(data.CATEGORICAL))
        assert ds.t.dtype == np.int8

    def test_standardize_on_subset(self, tiny_files):
        ds = data.load_adult(*tiny_files, standardize_rows=np.array([0, 1, 2]))
        cont = ds.x[:3, :len(data.CONTINUOUS)]
        np.testing.assert_allclose(cont.mean(0), 0.0, atol=1e-12)

    def test_row_with_every_feature_missing_dropped(self, tmp_path):
        f = tmp_path / "adult.data"
        f.write_text("\n".join(ROWS + [", ".join(["?"] * 14) + ", <=50K"]) + "\n")
        assert len(data.load_adult(f)) == 3
        assert len(data.load_adult(f, missing="category")) == 4

    @pytest.mark.parametrize("bad,lineno", [
        ("39, State-gov, 77516, Bachelors", 2),
        ("39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, maybe", 2),
        ("abc, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K", 2),
    ])
    def test_parse_errors_report_line(self, tmp_path, bad, lineno):
        f = tmp_path / "adult.data"
        f.write_text(ROWS[0] + "\n" + bad + "\n")
        with pytest.raises(AdultParseError, match=f"line {lineno}"):
            data.load_adult(f)

    def test_find_dir(self, tiny_files, monkeypatch, tmp_path):
        monkeypatch.setenv("FEDBAYES_DATA_DIR", str(tmp_path))
        assert data.find_adult_dir() == tmp_path
        monkeypatch.setenv("FEDBAYES_DATA_DIR", str(tmp_path / "nowhere"))
        monkeypatch.chdir(tmp_path / "..")
        with pytest.raises(FileNotFoundError):
            data.find_adult_dir(tmp_path / "nowhere")


class TestSplit:
    def test_sizes_and_disjoint(self, rng):
        ds = Dataset(rng.normal(size=(101, 2)), np.ones(101, dtype=np.int8))
        ds = Dataset(np.column_stack([np.arange(101.0), np.ones(101)]), np.ones(101, dtype=np.int8))
        tr, te = data.split_train_test(ds, 0.8, seed=3)
        assert len(tr) == 81 and len(te) == 20
        assert not set(tr.x[:, 0]) & set(te.x[:, 0])

    def test_seeded(self):
        ds = Dataset(np.arange(50.0)[:, None], np.ones(50, dtype=np.int8))
        a, _ = data.split_train_test(ds, seed=1)
        b, _ = data.split_train_test(ds, seed=1)
        c, _ = data.split_train_test(ds, seed=2)
        np.testing.assert_array_equal(a.x, b.x)
        assert not np.array_equal(a.x, c.x)


def toy_train(n_pos, n_neg):
    t = np.array([1] * n_pos + [-1] * n_neg, dtype=np.int8)
    return Dataset(np.arange(t.size, dtype=np.float64)[:, None], t)


class TestPartition:
    def test_sizes_formula(self):
        assert data.partition_sizes(39074, 10, 0.0) == (3907, 3907)
        assert data.partition_sizes(39074, 10, 0.9) == (390, 7424)
        assert data.partition_sizes(39074, 10, 0.7) == (1172, 6642)
        assert data.partition_sizes(39074, 10, 0.6) == (1562, 6251)

    def test_homogeneous_exchangeable(self):
        train = toy_train(2400, 7600)
        shards = data.partition(train, PartitionSpec(rho=0, kappa=0), 0)
        lam = 0.24
        for s in shards:
            assert len(s) == 1000
            frac = np.mean(train.t[s] == 1)
            assert abs(frac - lam) <= 3 * np.sqrt(lam * (1 - lam) / 1000)

    def test_disjoint_subset_and_floor_loss(self):
        train = toy_train(2500, 7503)
        spec = PartitionSpec(rho=0.5, kappa=0.5)
        shards = data.partition(train, spec, 7)
        flat = np.concatenate(shards)
        assert flat.size == np.unique(flat).size
        assert flat.max() < len(train)
        assert len(train) - flat.size < spec.m_clients

    def test_small_client_target(self):
        train = toy_train(2400, 7600)
        spec = PartitionSpec(rho=0.5, kappa=0.6)
        shards = data.partition(train, spec, 1)
        lam = 0.76
        target = lam + (1 - lam) * 0.6
        for s in shards[:5]:
            n_major = np.sum(train.t[s] == -1)
            assert abs(n_major - target * len(s)) <= 1

    def test_negative_kappa_flips_majority(self):
        train = toy_train(2400, 7600)
        shards = data.partition(train, PartitionSpec(rho=0.7, kappa=-3.0), 0)
        assert all(np.mean(train.t[s] == 1) > 0.9 for s in shards[:5])

    def test_class_conservation(self):
        train = toy_train(2400, 7600)
        shards = data.partition(train, PartitionSpec(rho=0.7, kappa=-3.0), 0)
        used_pos = sum(np.sum(train.t[s] == 1) for s in shards)
        assert used_pos <= 2400
        large = [np.mean(train.t[s] == 1) for s in shards[5:]]
        assert max(large) - min(large) < 1e-12

    @pytest.mark.parametrize("rho,kappa", [(0.0, -9.0), (0.0, 1.5), (0.0, -3.0)])
    def test_infeasible(self, rho, kappa):
        with pytest.raises(PartitionError):
            data.partition(toy_train(2400, 7600), PartitionSpec(rho=rho, kappa=kappa), 0)

    def test_seeded(self):
        train = toy_train(300, 700)
        a = data.partition(train, PartitionSpec(rho=0.3, kappa=0.2), 5)
        b = data.partition(train, PartitionSpec(rho=0.3, kappa=0.2), 5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("kwargs", [dict(m_clients=3), dict(m_clients=0), dict(rho=1.0), dict(rho=-0.1)])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            PartitionSpec(**kwargs)

    def test_manifest(self, tmp_path):
        train = toy_train(300, 700)
        spec = PartitionSpec(rho=0.3, kappa=0.2)
        shards = data.partition(train, spec, 0)
        data.write_manifest(tmp_path / "m.json", train, shards, spec)
        m = json.loads((tmp_path / "m.json").read_text())
        assert [s["n"] for s in m["shards"]] == [len(s) for s in shards]
        assert m["shards"][0]["group"] == "small"
        assert m["shards"][0]["indices"] == shards[0].tolist()


class TestSynthetic:
    def test_label_rate(self):
        ds = data.synthetic_logistic(3, 20000, np.array([1.0, -2.0, 0.5]), 0)
        assert ds.x.shape == (20000, 3)
        assert set(np.unique(ds.t)) == {-1, 1}
        from scipy.special import expit
        p = expit(ds.x @ np.array([1.0, -2.0, 0.5]))
        assert abs(np.mean(ds.t == 1) - p.mean()) < 0.02

    def test_bias_column(self):
        ds = data.synthetic_logistic(2, 10, np.zeros(2), 0, bias=True)
        np.testing.assert_array_equal(ds.x[:, -1], 1.0)


class TestAdultFiles:
    def test_row_counts(self, adult_dir):
        rows = data._load_rows([adult_dir / "adult.data", adult_dir / "adult.test"], "category")
        assert len(rows) == 48842
        dropped = data._load_rows([adult_dir / "adult.data", adult_dir / "adult.test"], "drop")
        assert len(dropped) == 45222

    def test_experiment_split(self, adult_split):
        train, test = adult_split
        assert len(train) == 39074 and len(test) == 9768
        assert train.dim == test.dim
        assert train.positive_fraction == pytest.approx(0.2388, abs=0.001)
