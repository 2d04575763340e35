import numpy as np
import pytest

from asapnet import tensor as T
from asapnet.errors import ConfigurationError
from asapnet.hypernet import (
    GeneratorConfig,
    compute_factors,
    hypernet_backward,
    hypernet_forward,
    init_hypernet,
    upsample_params,
)
from helpers import GRAD_RTOL, numerical_grad, rel_error


def test_factors_1024_square():
    f = compute_factors(1024, 1024, GeneratorConfig())
    assert (f.bilinear, f.total, f.encoding_depth, f.grid) == (4, 64, 6, (16, 16))


def test_factors_wide_image():
    f = compute_factors(512, 1024, GeneratorConfig())
    assert (f.bilinear, f.total, f.grid) == (2, 32, (16, 32))


def test_factors_no_predownsampling():
    f = compute_factors(256, 256, GeneratorConfig(lowres_cap=256))
    assert (f.bilinear, f.total) == (1, 16)


@pytest.mark.parametrize("side", [256, 512, 1024, 2048])
def test_square_inputs_always_give_16x16_grid(side):
    assert compute_factors(side, side, GeneratorConfig()).grid == (16, 16)


def test_factors_reject_non_divisible():
    with pytest.raises(ConfigurationError, match="not divisible"):
        compute_factors(1000, 1024, GeneratorConfig())


def test_factors_follow_learned_downsampling_and_override():
    cfg = GeneratorConfig(learned_downsampling=8, lowres_cap=64)
    assert compute_factors(64, 64, cfg).total == 8
    assert compute_factors(128, 128, cfg).total == 16
    forced = GeneratorConfig(total_downsampling=64)
    assert compute_factors(512, 512, forced)[:3] == (4, 64, 6)
    with pytest.raises(ConfigurationError):
        GeneratorConfig(total_downsampling=8)  # below S_l
    with pytest.raises(ConfigurationError):
        GeneratorConfig(learned_downsampling=12)
    with pytest.raises(ConfigurationError, match="stride-2 stages"):
        GeneratorConfig(learned_downsampling=8, hypernet_widths=(4, 4))


def test_default_stage_widths():
    assert GeneratorConfig().stage_widths == (64, 128, 256, 512)
    assert GeneratorConfig(learned_downsampling=4).stage_widths == (64, 128)


def small_net(learned=16, widths=None, seed=0, head_scale=0.0, mlp_depth=2, mlp_width=4, c=3):
    widths = widths or (4,) * (learned.bit_length() - 1)
    cfg = GeneratorConfig(
        input_channels=c, mlp_depth=mlp_depth, mlp_width=mlp_width,
        learned_downsampling=learned, hypernet_widths=widths,
    )
    spec = cfg.mlp_spec(2)
    r = np.random.default_rng(seed)
    params = init_hypernet(cfg, spec, r)
    params["head.weight"] += head_scale * r.normal(size=params["head.weight"].shape)
    return cfg, spec, params


def test_hypernet_grid_shape_256():
    cfg, spec, params = small_net(16)
    grid, _ = hypernet_forward(np.random.default_rng(1).normal(size=(1, 3, 256, 256)), params, cfg)
    assert grid.shape == (1, spec.param_count, 16, 16)


def test_hypernet_toy_shape():
    cfg, spec, params = small_net(16, head_scale=0.1)
    grid, _ = hypernet_forward(np.random.default_rng(1).normal(size=(1, 3, 64, 64)), params, cfg)
    assert grid.shape == (1, spec.param_count, 4, 4)


def test_zero_head_returns_base_everywhere():
    cfg, spec, params = small_net(4)
    grid, _ = hypernet_forward(np.random.default_rng(2).normal(size=(2, 3, 16, 16)), params, cfg)
    np.testing.assert_array_equal(grid, np.broadcast_to(params["base"][None, :, None, None], grid.shape))


def test_base_shift_is_additive():
    cfg, spec, params = small_net(4, head_scale=0.3)
    x = np.random.default_rng(3).normal(size=(1, 3, 16, 16))
    g0, _ = hypernet_forward(x, params, cfg)
    delta = np.random.default_rng(4).normal(size=spec.param_count)
    params["base"] = params["base"] + delta
    g1, _ = hypernet_forward(x, params, cfg)
    np.testing.assert_allclose(g1 - g0, np.broadcast_to(delta[None, :, None, None], g0.shape), atol=1e-12)


def test_hypernet_rejects_non_divisible():
    cfg, _, params = small_net(4)
    with pytest.raises(ConfigurationError, match="S_l"):
        hypernet_forward(np.zeros((1, 3, 10, 12)), params, cfg)


def test_hypernet_backward_finite_differences():
    cfg, spec, params = small_net(4, widths=(3, 4), head_scale=0.2, seed=5)
    r = np.random.default_rng(6)
    x = r.normal(size=(1, 3, 8, 8))
    grid, cache = hypernet_forward(x, params, cfg, keep_cache=True)
    u = r.normal(size=grid.shape)
    f = lambda: float((hypernet_forward(x, params, cfg)[0] * u).sum())  # noqa: E731
    grads, gx = hypernet_backward(cache, params, cfg, u)
    for name, p in params.items():
        assert rel_error(grads[name], numerical_grad(f, p)) < GRAD_RTOL, name
    assert rel_error(gx, numerical_grad(f, x)) < GRAD_RTOL


def test_upsample_single_cell():
    grid = np.random.default_rng().normal(size=(1, 5, 1, 1))
    up = upsample_params(grid, 8, 8, 8)
    np.testing.assert_array_equal(up, np.broadcast_to(grid, (1, 5, 8, 8)))


def test_upsample_hand_blocks():
    grid = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
    up = upsample_params(grid, 2, 4, 4)
    expected0 = [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    np.testing.assert_array_equal(up[0, 0], expected0)
    np.testing.assert_array_equal(up[0, 1], np.array(expected0) + 4)


def test_upsample_block_constancy_random_pixels():
    r = np.random.default_rng(7)
    s = 8
    grid = r.normal(size=(1, 6, 3, 5))
    up = upsample_params(grid, s, 24, 40)
    for y, x in zip(r.integers(0, 24, 50), r.integers(0, 40, 50)):
        np.testing.assert_array_equal(up[0, :, y, x], up[0, :, s * (y // s), s * (x // s)])
        np.testing.assert_array_equal(up[0, :, y, x], grid[0, :, y // s, x // s])


def test_upsample_mismatch():
    with pytest.raises(ConfigurationError):
        upsample_params(np.zeros((1, 2, 2, 2)), 4, 8, 12)


def test_upsample_adjoint_sums_block():
    s = 4
    g = np.zeros((1, 1, 8, 8))
    g[0, 0, :4, 4:] = 0.25
    cell = T.nearest_upsample_backward(g, s)
    assert cell[0, 0, 0, 1] == pytest.approx(s * s * 0.25)
    assert cell.sum() == pytest.approx(cell[0, 0, 0, 1])
