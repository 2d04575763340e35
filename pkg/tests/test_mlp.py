import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asapnet import tensor as T
from asapnet.errors import ConfigurationError
from asapnet.mlp import (
    MlpSpec,
    evaluate_grid,
    evaluate_grid_backward,
    evaluate_image,
    mlp_backward,
    mlp_forward,
    pack_params,
    param_count,
    unpack_params,
)
from asapnet.posenc import PositionalEncodingSpec, encode_grid
from helpers import GRAD_RTOL, numerical_grad, rel_error


def rng(seed=0):
    return np.random.default_rng(seed)


def oracle_forward(x, phi, spec):
    """Layer-by-layer evaluation with explicit unit loops, reading phi sequentially."""
    pos = 0
    h = list(x)
    for li, (o, i) in enumerate(spec.layer_shapes()):
        w = [[phi[pos + r * i + c] for c in range(i)] for r in range(o)]
        pos += o * i
        b = phi[pos : pos + o]
        pos += o
        z = [sum(w[r][c] * h[c] for c in range(i)) + b[r] for r in range(o)]
        last = li == spec.depth - 1
        if not last:
            h = [max(v, 0.0) for v in z]
        else:
            h = z if spec.linear_output else [np.tanh(v) for v in z]
    return np.array(h)


@pytest.mark.parametrize(
    "spec,expected",
    [
        (MlpSpec(in_dim=2, out_dim=3, depth=1), 9),
        (MlpSpec(in_dim=9, out_dim=3, depth=3, width=4), 75),
        (MlpSpec(in_dim=3 + 4 * 6, out_dim=3, depth=5, width=64), 14467),
    ],
)
def test_param_count(spec, expected):
    assert param_count(spec) == spec.param_count == expected


def test_param_count_counts_every_weight_and_bias():
    spec = MlpSpec(in_dim=5, out_dim=2, depth=4, width=7)
    layers = unpack_params(np.zeros(spec.param_count), spec)
    assert sum(w.size + b.size for w, b in layers) == spec.param_count


def test_zero_dims_rejected():
    with pytest.raises(ConfigurationError):
        MlpSpec(in_dim=0)
    with pytest.raises(ConfigurationError):
        MlpSpec(in_dim=3, depth=0)


def test_unpack_layout_example():
    spec = MlpSpec(in_dim=2, out_dim=3, depth=1)
    (w, b), = unpack_params(np.arange(1.0, 10.0), spec)
    np.testing.assert_array_equal(w, [[1, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal(b, [7, 8, 9])


def test_unpack_zero_and_roundtrip():
    spec = MlpSpec(in_dim=6, out_dim=3, depth=3, width=5)
    assert all(not w.any() and not b.any() for w, b in unpack_params(np.zeros(spec.param_count), spec))
    phi = rng().normal(size=spec.param_count)
    np.testing.assert_array_equal(pack_params(unpack_params(phi, spec)), phi)
    with pytest.raises(ConfigurationError, match="parameter vector"):
        unpack_params(phi[:-1], spec)


def test_forward_zero_params():
    spec = MlpSpec(in_dim=4, depth=3, width=6)
    out = mlp_forward(rng().normal(size=4), np.zeros(spec.param_count), spec)
    np.testing.assert_array_equal(out, 0.0)


def test_forward_identity_linear():
    spec = MlpSpec(in_dim=3, out_dim=3, depth=1, linear_output=True)
    phi = pack_params([(np.eye(3), np.zeros(3))])
    x = rng().normal(size=3)
    np.testing.assert_array_equal(mlp_forward(x, phi, spec), x)


@pytest.mark.parametrize("linear", [False, True])
def test_forward_matches_oracle(linear):
    spec = MlpSpec(in_dim=7, out_dim=3, depth=3, width=5, linear_output=linear)
    for seed in range(5):
        r = rng(seed)
        x, phi = r.normal(size=7), r.normal(size=spec.param_count)
        np.testing.assert_allclose(mlp_forward(x, phi, spec), oracle_forward(x, phi, spec), rtol=0, atol=1e-12)


def test_forward_dimension_error():
    spec = MlpSpec(in_dim=3)
    with pytest.raises(ConfigurationError):
        mlp_forward(np.zeros(4), np.zeros(spec.param_count), spec)


def test_backward_zero_upstream():
    spec = MlpSpec(in_dim=4, depth=3, width=6)
    gx, gphi = mlp_backward(rng().normal(size=4), rng(1).normal(size=spec.param_count), spec, np.zeros(3))
    assert not gx.any() and not gphi.any()


def test_backward_affine():
    spec = MlpSpec(in_dim=4, out_dim=3, depth=1, linear_output=True)
    phi = rng().normal(size=spec.param_count)
    g = rng(1).normal(size=3)
    x = rng(2).normal(size=4)
    gx, gphi = mlp_backward(x, phi, spec, g)
    (w, _), = unpack_params(phi, spec)
    np.testing.assert_allclose(gx, w.T @ g)
    (gw, gb), = unpack_params(gphi, spec)
    np.testing.assert_array_equal(gb, g)
    np.testing.assert_allclose(gw, np.outer(g, x))


@pytest.mark.parametrize("linear", [False, True])
@pytest.mark.parametrize("depth", [1, 2, 3])
def test_backward_finite_differences(depth, linear):
    spec = MlpSpec(in_dim=6, out_dim=3, depth=depth, width=8, linear_output=linear)
    r = rng(depth)
    x, phi, u = r.normal(size=6), r.normal(size=spec.param_count), r.normal(size=3)
    f = lambda: float(mlp_forward(x, phi, spec) @ u)  # noqa: E731
    gx, gphi = mlp_backward(x, phi, spec, u)
    assert rel_error(gx, numerical_grad(f, x)) < GRAD_RTOL
    assert rel_error(gphi, numerical_grad(f, phi)) < GRAD_RTOL


# --- image level -------------------------------------------------------------


def image_case(h, w, depth_enc, seed=0, c=3, mlp_depth=3, width=8):
    r = rng(seed)
    enc_spec = PositionalEncodingSpec(depth_enc)
    spec = MlpSpec(in_dim=c + enc_spec.channels, depth=mlp_depth, width=width)
    image = r.normal(size=(1, c, h, w))
    enc = encode_grid(h, w, enc_spec)
    return spec, image, enc, r


def scalar_loop(image, params, enc, spec):
    n, _, h, w = image.shape
    out = np.zeros((n, spec.out_dim, h, w))
    for y in range(h):
        for x in range(w):
            xin = np.concatenate([image[0, :, y, x], enc[0, :, y, x]])
            out[0, :, y, x] = mlp_forward(xin, params[0, :, y, x], spec)
    return out


def test_evaluate_image_single_pixel():
    spec, image, enc, r = image_case(1, 1, 2)
    params = r.normal(size=(1, spec.param_count, 1, 1))
    out = evaluate_image(image, params, enc, spec)
    xin = np.concatenate([image[0, :, 0, 0], enc[0, :, 0, 0]])
    np.testing.assert_allclose(out[0, :, 0, 0], mlp_forward(xin, params[0, :, 0, 0], spec), atol=1e-12)


def test_evaluate_image_uniform():
    spec, _, _, r = image_case(4, 4, 0)
    image = np.full((1, 3, 4, 4), 0.3)
    phi = r.normal(size=spec.param_count)
    params = np.broadcast_to(phi[None, :, None, None], (1, spec.param_count, 4, 4)).copy()
    out = evaluate_image(image, params, np.zeros((1, 0, 4, 4)), spec)
    ref = mlp_forward(np.full(3, 0.3), phi, spec)
    np.testing.assert_allclose(out, np.broadcast_to(ref[None, :, None, None], out.shape), atol=1e-12)


def test_evaluate_image_matches_scalar_loop():
    spec, image, enc, r = image_case(8, 8, 2, seed=3)
    params = r.normal(size=(1, spec.param_count, 8, 8))
    np.testing.assert_allclose(evaluate_image(image, params, enc, spec), scalar_loop(image, params, enc, spec), rtol=0, atol=1e-12)


def test_evaluate_grid_equals_upsampled_field():
    spec, image, enc, r = image_case(8, 12, 2, seed=4)
    grid = r.normal(size=(1, spec.param_count, 2, 3))
    out, _ = evaluate_grid(image, grid, enc, spec, 4)
    ref = evaluate_image(image, T.nearest_upsample(grid, 4), enc, spec)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_evaluate_shape_errors():
    spec, image, enc, r = image_case(8, 8, 2)
    with pytest.raises(ConfigurationError):
        evaluate_image(image, r.normal(size=(1, spec.param_count, 4, 4)), enc, spec)
    with pytest.raises(ConfigurationError):
        evaluate_grid(image, r.normal(size=(1, spec.param_count, 2, 2)), enc[:, :4], spec, 4)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), qy=st.integers(0, 7), qx=st.integers(0, 7))
def test_pixel_independence(seed, qy, qx):
    spec, image, enc, r = image_case(8, 8, 2, seed=seed)
    grid = r.normal(size=(1, spec.param_count, 2, 2))
    out, _ = evaluate_grid(image, grid, enc, spec, 4)
    image2 = image.copy()
    image2[0, :, qy, qx] += r.normal(size=3) + 1.0
    out2, _ = evaluate_grid(image2, grid, enc, spec, 4)
    changed = np.any(out != out2, axis=1)[0]
    mask = np.zeros((8, 8), bool)
    mask[qy, qx] = True
    np.testing.assert_array_equal(out[0][:, ~mask], out2[0][:, ~mask])
    assert changed[qy, qx] or np.allclose(out[0, :, qy, qx], out2[0, :, qy, qx])


@pytest.mark.parametrize("workers", [2, 3, 7])
def test_parallel_determinism(workers):
    spec, image, enc, r = image_case(32, 48, 3, seed=5, width=16)
    grid = r.normal(size=(1, spec.param_count, 4, 6)).astype(np.float32)
    image, enc = image.astype(np.float32), enc.astype(np.float32)
    a, _ = evaluate_grid(image, grid, enc, spec, 8, workers=1)
    b, _ = evaluate_grid(image, grid, enc, spec, 8, workers=workers)
    assert a.tobytes() == b.tobytes()


def test_grid_gradients_finite_differences():
    spec, image, enc, r = image_case(8, 8, 2, seed=6)
    grid = r.normal(size=(1, spec.param_count, 2, 2))
    out, cache = evaluate_grid(image, grid, enc, spec, 4, keep_cache=True)
    u = r.normal(size=out.shape)
    f = lambda: float((evaluate_grid(image, grid, enc, spec, 4)[0] * u).sum())  # noqa: E731
    gimg, ggrid = evaluate_grid_backward(cache, u, 3, 4)
    assert rel_error(gimg, numerical_grad(f, image)) < GRAD_RTOL
    assert rel_error(ggrid, numerical_grad(f, grid)) < GRAD_RTOL


def test_image_gradients_into_params_finite_differences():
    spec, image, enc, r = image_case(4, 4, 1, seed=7, mlp_depth=2, width=4)
    params = r.normal(size=(1, spec.param_count, 4, 4))
    _, cache = evaluate_grid(image, params, enc, spec, 1, keep_cache=True)
    u = r.normal(size=(1, 3, 4, 4))
    f = lambda: float((evaluate_image(image, params, enc, spec) * u).sum())  # noqa: E731
    gimg, gparams = evaluate_grid_backward(cache, u, 3, 1)
    assert rel_error(gparams, numerical_grad(f, params)) < GRAD_RTOL
    assert rel_error(gimg, numerical_grad(f, image)) < GRAD_RTOL


def test_without_encoding_block_constant_in_gives_block_constant_out():
    s = 4
    spec = MlpSpec(in_dim=3, depth=3, width=8)
    r = rng(8)
    image = T.nearest_upsample(r.normal(size=(1, 3, 3, 2)), s)
    grid = r.normal(size=(1, spec.param_count, 3, 2))
    out, _ = evaluate_grid(image, grid, np.zeros((1, 0, 12, 8)), spec, s)
    np.testing.assert_array_equal(out, T.nearest_upsample(out[:, :, ::s, ::s], s))
