import numpy as np
import pytest

from mscon import autodiff as ad
from mscon.autodiff import Tape, backward, grad_check
from mscon.errors import ContractViolation
from mscon.model import EncoderConfig, encode, init_params, load_checkpoint, project, save_checkpoint


@pytest.fixture
def small():
    return init_params(EncoderConfig(input_dim=6, num_tasks=2, hidden_dims=(8,), embedding_dim=6,
                                     head_hidden_dim=8, projection_dim=3, seed=1))


def test_default_shapes():
    p = init_params(EncoderConfig(input_dim=64, num_tasks=3))
    assert p.arrays["enc.0.w"].shape == (64, 128)
    assert p.arrays["enc.2.w"].shape == (128, 64)
    assert p.arrays["head.2.1.w"].shape == (64, 32)
    assert p.num_heads == 3
    np.testing.assert_array_equal(p.sigma_sq, np.ones(3))


def test_init_is_seeded():
    cfg = EncoderConfig(input_dim=8, num_tasks=2)
    assert init_params(cfg).checksum() == init_params(cfg).checksum()
    other = EncoderConfig(input_dim=8, num_tasks=2, seed=5)
    assert init_params(cfg).checksum() != init_params(other).checksum()


def test_he_scaling():
    p = init_params(EncoderConfig(input_dim=400, num_tasks=1, hidden_dims=(300,)))
    w = p.arrays["enc.0.w"]
    assert w.std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)
    assert not p.arrays["enc.0.b"].any()


def test_projection_rows_are_unit(small):
    X = np.random.default_rng(0).normal(size=(7, 6))
    V = project(small, encode(small, X), 1).values
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-12)


def test_encode_rejects_wrong_width(small):
    with pytest.raises(ContractViolation):
        encode(small, np.zeros((3, 5)))


def test_project_unknown_head(small):
    with pytest.raises(ContractViolation):
        project(small, np.zeros((2, 6)), 2)


def test_grad_through_encoder_and_head(small):
    X = np.random.default_rng(1).normal(size=(5, 6))
    w = np.random.default_rng(2).normal(size=(5, 3))
    fixed = dict(small.arrays)

    def f(params):
        return ad.masked_sum(project(params, encode(params, X), 0), w)

    point = {k: fixed[k] for k in ("enc.0.w", "enc.1.w", "head.0.0.w", "head.0.1.b")}
    err = grad_check(lambda t: f({**fixed, **t}), point, max_coords=60)
    assert err < 1e-6


def test_unused_head_gets_no_gradient(small):
    leaves = small.leaves()
    X = np.ones((2, 6))
    with Tape() as tape:
        out = ad.reduce_sum(project(leaves, encode(leaves, X), 0))
        backward(tape, out)
    assert leaves["head.1.0.w"].grad is None or not leaves["head.1.0.w"].grad.any()
    assert leaves["enc.0.w"].grad is not None


def test_checkpoint_roundtrip(tmp_path, small):
    save_checkpoint(small, tmp_path / "ck")
    lines = (tmp_path / "ck" / "manifest.csv").read_text().splitlines()
    assert lines[0] == "name,shape,byte_offset"
    assert lines[1] == "enc.0.w,6x8,0"
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == small.config
    assert back.checksum() == small.checksum()
    assert list(back.arrays) == list(small.arrays)


def test_three_heads_unit_weights():
    p = init_params(EncoderConfig(input_dim=4, num_tasks=3))
    assert p.num_heads == 3
    np.testing.assert_array_equal(np.exp(-p.arrays["log_var"]), np.ones(3))


def test_encode_shape_and_identical_rows(small):
    X = np.tile(np.arange(6.0), (4, 1))
    H = encode(small, X).values
    assert H.shape == (4, 6)
    assert np.all(H == H[0])


def test_zero_params_give_zero_embeddings(small):
    zeroed = small.replace({k: np.zeros_like(v) for k, v in small.arrays.items()})
    assert not encode(zeroed, np.ones((3, 6))).values.any()


def test_heads_differ_at_init(small):
    H = encode(small, np.random.default_rng(3).normal(size=(5, 6)))
    a, b = project(small, H, 0).values, project(small, H, 1).values
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, project(small, H, 0).values)
