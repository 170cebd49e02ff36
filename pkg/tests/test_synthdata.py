from dataclasses import replace

import numpy as np
import pytest

from mscon.errors import ContractViolation
from mscon.evaluate import ProbeConfig, linear_probe
from mscon.synthdata import (
    CorruptionSpec,
    DatasetSpec,
    TaskSpec,
    augment_pair,
    corrupt_dataset,
    corrupt_labels,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
)


@pytest.fixture(scope="module")
def default_ds():
    return generate_dataset(DatasetSpec())


def small_spec(**kw):
    base = DatasetSpec(
        training_tasks=(TaskSpec("a", 4), TaskSpec("b", 5)),
        ood_tasks=(TaskSpec("o", 3),),
        num_samples=1000,
        input_dim=16,
    )
    return replace(base, **kw)


class TestGenerate:
    def test_shapes_and_cardinalities(self):
        ds = generate_dataset(small_spec())
        assert ds.inputs.shape == (1000, 16)
        assert ds.labels.shape == (1000, 3)
        assert sorted(np.unique(ds.labels[:, 0])) == [0, 1, 2, 3]
        assert sorted(np.unique(ds.labels[:, 1])) == [0, 1, 2, 3, 4]
        assert ds.ood_columns == [2]

    def test_same_seed_bit_identical(self):
        a, b = generate_dataset(small_spec()), generate_dataset(small_spec())
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.split.test.tobytes() == b.split.test.tobytes()

    def test_different_seed_differs(self):
        a, b = generate_dataset(small_spec()), generate_dataset(small_spec(seed=1))
        assert not np.array_equal(a.inputs, b.inputs)

    def test_mixing_has_orthonormal_columns(self):
        ds = generate_dataset(small_spec())
        W = ds.mixing
        np.testing.assert_allclose(W.T @ W, np.eye(W.shape[1]), atol=1e-12)

    def test_input_dim_too_small(self):
        with pytest.raises(ContractViolation):
            small_spec(input_dim=8)

    def test_too_few_samples(self):
        with pytest.raises(ContractViolation):
            small_spec(num_samples=40)

    def test_noiseless_data_is_linearly_separable(self):
        spec = small_spec(
            training_tasks=(TaskSpec("a", 4, within_class_noise=0.0), TaskSpec("b", 5, within_class_noise=0.0)),
            ood_tasks=(TaskSpec("o", 3, within_class_noise=0.0),),
            mixing_noise=0.0,
        )
        ds = generate_dataset(spec)
        for c in range(3):
            pr = linear_probe(ds.inputs, ds.labels[:, c], ds.split, ProbeConfig(probe_epochs=30))
            assert pr.accuracy == 1.0

    def test_recoverability_floor(self, default_ds):
        for c in range(default_ds.labels.shape[1]):
            k = default_ds.num_classes(c)
            pr = linear_probe(default_ds.inputs, default_ds.labels[:, c], default_ds.split)
            assert pr.accuracy >= 1.0 / k + 0.30, (c, pr.accuracy)

    def test_training_tasks_are_independent(self, default_ds):
        """Empirical mutual information between task columns stays within a permutation null band."""

        def mutual_info(a, b):
            joint = np.zeros((a.max() + 1, b.max() + 1))
            np.add.at(joint, (a, b), 1.0)
            joint /= joint.sum()
            pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
            nz = joint > 0
            return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())

        rng = np.random.default_rng(0)
        y = default_ds.labels
        for i in range(3):
            for j in range(i + 1, 3):
                observed = mutual_info(y[:, i], y[:, j])
                null = [mutual_info(y[:, i], rng.permutation(y[:, j])) for _ in range(200)]
                assert observed <= np.quantile(null, 0.999)


class TestCorruption:
    def test_rho_zero_identity(self):
        y = np.random.default_rng(0).integers(0, 5, 1000)
        np.testing.assert_array_equal(corrupt_labels(y, 5, CorruptionSpec(0, 0.0, seed=3)), y)

    def test_rho_one_uniform(self):
        y = np.zeros(10000, dtype=np.int64)
        out = corrupt_labels(y, 5, CorruptionSpec(0, 1.0, seed=1))
        freq = np.bincount(out, minlength=5) / out.size
        se = np.sqrt(0.2 * 0.8 / out.size)
        assert np.all(np.abs(freq - 0.2) < 3 * se)

    def test_rho_half_match_fraction(self):
        y = np.random.default_rng(0).integers(0, 5, 10000)
        out = corrupt_labels(y, 5, CorruptionSpec(0, 0.5, seed=2))
        expected = 1 - 0.5 * (1 - 1 / 5)
        se = np.sqrt(expected * (1 - expected) / y.size)
        assert abs(np.mean(out == y) - expected) < 3 * se

    @pytest.mark.parametrize("rho", [-0.1, 1.5])
    def test_rho_range(self, rho):
        with pytest.raises(ContractViolation):
            CorruptionSpec(0, rho)

    def test_labels_out_of_range(self):
        with pytest.raises(ContractViolation):
            corrupt_labels(np.array([0, 5]), 5, CorruptionSpec(0, 0.5))

    def test_other_columns_untouched(self):
        ds = generate_dataset(small_spec())
        bad = corrupt_dataset(ds, CorruptionSpec(1, 1.0, seed=4))
        np.testing.assert_array_equal(bad.labels[:, [0, 2]], ds.labels[:, [0, 2]])
        assert not np.array_equal(bad.labels[:, 1], ds.labels[:, 1])

    def test_rows_restrict_corruption(self):
        ds = generate_dataset(small_spec())
        bad = corrupt_dataset(ds, CorruptionSpec(0, 1.0, seed=4), rows=ds.split.train)
        np.testing.assert_array_equal(bad.labels[ds.split.test], ds.labels[ds.split.test])


class TestAugment:
    def test_zero_jitter(self):
        x = np.arange(5.0)
        a, b = augment_pair(x, 0.0, 0)
        np.testing.assert_array_equal(a, x)
        np.testing.assert_array_equal(b, x)

    def test_same_seed_same_views(self):
        x = np.arange(5.0)
        a1, b1 = augment_pair(x, 0.3, 11)
        a2, b2 = augment_pair(x, 0.3, 11)
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)

    def test_mean_view_distance(self):
        d, sigma, trials = 64, 0.1, 4000
        rng = np.random.default_rng(5)
        x = np.zeros(d)
        dists = []
        for _ in range(trials):
            a, b = augment_pair(x, sigma, rng)
            assert np.all(a != b)
            dists.append(np.linalg.norm(a - b))
        dists = np.array(dists)
        se = dists.std() / np.sqrt(trials)
        # |a - b| ~ sigma * sqrt(2) * chi_d, whose mean is just below sigma * sqrt(2d)
        assert abs(dists.mean() - sigma * np.sqrt(2 * d)) < 3 * se + 0.01 * sigma * np.sqrt(2 * d)

    def test_negative_jitter(self):
        with pytest.raises(ContractViolation):
            augment_pair(np.zeros(2), -1.0, 0)


class TestSplit:
    def test_sizes(self):
        s = split_dataset(1000, (0.7, 0.1, 0.2), 0)
        assert (len(s.train), len(s.val), len(s.test)) == (700, 100, 200)

    def test_partition(self):
        s = split_dataset(1003, (0.7, 0.1, 0.2), 1)
        allidx = np.concatenate([s.train, s.val, s.test])
        assert len(set(allidx.tolist())) == 1003
        assert sorted(allidx.tolist()) == list(range(1003))
        assert len(s.val) == 100 and len(s.test) == 200

    def test_deterministic(self):
        a, b = split_dataset(500, seed=9), split_dataset(500, seed=9)
        assert np.array_equal(a.test, b.test)

    @pytest.mark.parametrize("fr", [(0.5, 0.5, 0.0), (0.6, 0.3, 0.3), (0.7, 0.3)])
    def test_degenerate_fractions(self, fr):
        with pytest.raises(ContractViolation):
            split_dataset(100, fr, 0)


def test_save_load_roundtrip(tmp_path):
    ds = generate_dataset(small_spec())
    save_dataset(ds, tmp_path / "d")
    header = (tmp_path / "d" / "inputs.bin").read_bytes().split(b"\n", 1)[0]
    assert header == b"1000 16"
    back = load_dataset(tmp_path / "d")
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.split.train, ds.split.train)
    assert back.spec == ds.spec
