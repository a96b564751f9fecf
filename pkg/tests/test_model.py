import numpy as np
import pytest

from uncseg import losses
from uncseg import model as M
from uncseg import tensor as T
from uncseg.tensor import ShapeError

from conftest import params64


def test_zero_params_give_even_split():
    arch = M.ArchConfig()
    probs = M.forward(M.zeros_like_params(arch), np.random.default_rng(0).random((2, 3, 64, 64)), arch)
    assert np.all(probs == 0.5)


def test_output_dims():
    arch = M.ArchConfig()
    probs = M.forward(M.init_params(arch, 0), np.zeros((4, 3, 64, 64), np.float32), arch)
    assert probs.shape == (4, 2, 64, 64)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)


def test_forward_bitwise_reproducible():
    arch = M.ArchConfig()
    x = np.random.default_rng(3).random((2, 3, 64, 64)).astype(np.float32)
    a = M.forward(M.init_params(arch, 11), x, arch)
    b = M.forward(M.init_params(arch, 11), x, arch)
    assert a.tobytes() == b.tobytes()


def test_forward_does_not_mutate_inputs():
    arch = M.ArchConfig(side=16)
    params = M.init_params(arch, 0)
    before = {k: v.copy() for k, v in params.items()}
    x = np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32)
    x0 = x.copy()
    M.forward(params, x, arch)
    assert all(np.array_equal(before[k], params[k]) for k in params)
    assert np.array_equal(x, x0)


def test_forward_errors():
    arch = M.ArchConfig(side=16)
    params = M.init_params(arch, 0)
    with pytest.raises(ShapeError):
        M.forward(params, np.zeros((1, 3, 32, 32)), arch)
    with pytest.raises(ShapeError):
        M.forward(params, np.zeros((3, 16, 16)), arch)
    bad = np.zeros((1, 3, 16, 16))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(M.InputError):
        M.forward(params, bad, arch)


def test_init_is_seeded():
    arch = M.ArchConfig()
    a, b = M.init_params(arch, 7), M.init_params(arch, 7)
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = M.init_params(arch, 8)
    assert not np.array_equal(a["enc1.weight"], c["enc1.weight"])


def test_init_biases_zero_and_he_std():
    params = M.init_params(M.ArchConfig(), 0)
    for k, v in params.items():
        if k.endswith(".bias"):
            assert np.all(v == 0)
    # enc2 maps w0=8 -> w1=16 channels, fan_in = 8 * 9
    std = params["enc2.weight"].std()
    assert abs(std / np.sqrt(2 / (8 * 9)) - 1) < 0.2


def test_layer_layout_and_budget():
    arch = M.ArchConfig()
    params = M.init_params(arch, 0)
    assert list(params) == ["enc1.weight", "enc1.bias", "enc2.weight", "enc2.bias",
                            "mid.weight", "mid.bias", "dec1.weight", "dec1.bias",
                            "head.weight", "head.bias"]
    assert params["enc1.weight"].shape == (8, 3, 3, 3)
    assert params["head.weight"].shape == (2, 8, 3, 3)
    assert M.param_count(params) < 50_000


@pytest.mark.parametrize("kwargs", [dict(side=30), dict(widths=(8, 0, 8, 8)), dict(widths=(8, 8))])
def test_arch_validation(kwargs):
    with pytest.raises(ValueError):
        M.ArchConfig(**kwargs)


def test_predict_mask_rules():
    probs = np.array([0.7, 0.5, 0.2, 0.3, 0.5, 0.8]).reshape(1, 2, 1, 3)
    np.testing.assert_array_equal(M.predict_mask(probs)[0, 0], [0, 0, 1])
    np.testing.assert_array_equal(M.predict_mask(probs * 2), M.predict_mask(probs))


def test_mask_invariant_to_logit_shift(rng):
    z = rng.standard_normal((2, 2, 8, 8))
    shift = rng.uniform(-5, 5, (2, 1, 8, 8))
    np.testing.assert_array_equal(M.predict_mask(T.softmax_channels(z)),
                                  M.predict_mask(T.softmax_channels(z + shift)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_end_to_end_ce_gradient(seed):
    arch = M.ArchConfig(side=16)
    r = np.random.default_rng(seed)
    x = r.random((2, 3, 16, 16))
    y = (r.random((2, 16, 16)) > 0.5).astype(np.uint8)
    err = T.grad_check(lambda p: losses.mean_ce(M.forward(p, x, arch), y),
                       params64(arch, seed), eps=1e-5, n_coords=150, seed=seed)
    assert err < 1e-4
