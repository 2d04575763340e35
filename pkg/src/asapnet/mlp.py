"""Spatially-varying pixelwise MLPs.

Parameter layout of one flat vector ``phi``: layers in order; for each
layer the weight matrix row-major with the output unit outermost, then the
bias. Hidden layers use ReLU, the last layer tanh (or identity when
``linear_output`` is set).

Two evaluation paths exist. :func:`mlp_forward` handles a single pixel.
The block path groups the pixels that share a parameter vector, so a
(nb, P, in) stack of pixels is pushed through nb different MLPs with one
batched matmul per layer. Evaluating with a coarse grid and a block size S
is exactly evaluating with the nearest-upsampled parameter field, without
ever materializing that field.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from asapnet.errors import ConfigurationError, UsageError
from asapnet.tensor import check_4d


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int = 3
    depth: int = 5
    width: int = 64
    linear_output: bool = False

    def __post_init__(self):
        if min(self.in_dim, self.out_dim, self.depth) < 1 or (self.depth > 1 and self.width < 1):
            raise ConfigurationError(f"MLP dimensions must be positive: {self}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) per layer."""
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return [(dims[i + 1], dims[i]) for i in range(self.depth)]

    @property
    def param_count(self) -> int:
        return param_count(self)


def param_count(spec: MlpSpec) -> int:
    return sum(o * i + o for o, i in spec.layer_shapes())


def _slices(spec: MlpSpec):
    off = 0
    for o, i in spec.layer_shapes():
        yield o, i, off, off + o * i, off + o * i + o
        off += o * i + o


def unpack_params(phi: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    phi = np.asarray(phi)
    if phi.shape != (spec.param_count,):
        raise ConfigurationError(
            f"parameter vector has shape {phi.shape}, expected ({spec.param_count},)"
        )
    return [(phi[a:b].reshape(o, i), phi[b:c]) for o, i, a, b, c in _slices(spec)]


def pack_params(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def mlp_forward(x: np.ndarray, phi: np.ndarray, spec: MlpSpec) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (spec.in_dim,):
        raise ConfigurationError(f"MLP input has shape {x.shape}, expected ({spec.in_dim},)")
    layers = unpack_params(phi, spec)
    h = x
    for w, b in layers[:-1]:
        h = np.maximum(w @ h + b, 0)
    w, b = layers[-1]
    z = w @ h + b
    return z if spec.linear_output else np.tanh(z)


def mlp_backward(
    x: np.ndarray, phi: np.ndarray, spec: MlpSpec, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``grad_out . mlp_forward(x, phi)`` w.r.t. x and phi."""
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    if x.shape != (spec.in_dim,) or grad_out.shape != (spec.out_dim,):
        raise ConfigurationError(
            f"shapes x={x.shape}, grad_out={grad_out.shape} do not match {spec}"
        )
    layers = unpack_params(phi, spec)
    hs = [x]
    for w, b in layers[:-1]:
        hs.append(np.maximum(w @ hs[-1] + b, 0))
    w, b = layers[-1]
    z = w @ hs[-1] + b
    g = grad_out if spec.linear_output else grad_out * (1 - np.tanh(z) ** 2)

    grads = []
    for li in range(spec.depth - 1, -1, -1):
        w, _ = layers[li]
        h_in = hs[li]
        grads.append((np.outer(g, h_in), g.copy()))
        g = w.T @ g
        if li > 0:
            g = g * (h_in > 0)
    return g, pack_params(grads[::-1])


# --- block path -------------------------------------------------------------


def to_blocks(t: np.ndarray, factor: int) -> np.ndarray:
    """(N, C, H, W) -> (N * H/f * W/f, f*f, C), blocks in row-major grid order."""
    n, c, h, w = t.shape
    gh, gw = h // factor, w // factor
    b = t.reshape(n, c, gh, factor, gw, factor).transpose(0, 2, 4, 3, 5, 1)
    return b.reshape(n * gh * gw, factor * factor, c)


def from_blocks(blocks: np.ndarray, n: int, h: int, w: int, factor: int) -> np.ndarray:
    c = blocks.shape[-1]
    gh, gw = h // factor, w // factor
    t = blocks.reshape(n, gh, gw, factor, factor, c).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(t.reshape(n, c, h, w))


def grid_to_rows(grid: np.ndarray) -> np.ndarray:
    """(N, P, gh, gw) parameter grid -> (N*gh*gw, P) rows matching :func:`to_blocks` order."""
    n, p = grid.shape[:2]
    return grid.transpose(0, 2, 3, 1).reshape(-1, p)


def rows_to_grid(rows: np.ndarray, n: int, gh: int, gw: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(n, gh, gw, -1).transpose(0, 3, 1, 2))


def block_weights(rows: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-block (W, b) views: W (nb, out, in), b (nb, out)."""
    nb = rows.shape[0]
    return [(rows[:, a:b].reshape(nb, o, i), rows[:, b:c]) for o, i, a, b, c in _slices(spec)]


@dataclass
class BlockCache:
    spec: MlpSpec
    rows: np.ndarray
    acts: list[np.ndarray]  # input to each layer, acts[0] is the pixel input
    out: np.ndarray


# pixels per inner batch on the inference path; keeps activations cache-sized
INFER_CHUNK_PIXELS = 1 << 14


def _forward_chunk(x, rows, spec, keep):
    step = max(1, INFER_CHUNK_PIXELS // x.shape[1])
    if keep or x.shape[0] <= step:
        return _forward_dense(x, rows, spec, keep)
    out = np.empty((x.shape[0], x.shape[1], spec.out_dim), dtype=np.result_type(x, rows))
    for a in range(0, x.shape[0], step):
        out[a : a + step] = _forward_dense(x[a : a + step], rows[a : a + step], spec, False)[0]
    return out, [x]


def _forward_dense(x, rows, spec, keep):
    layers = block_weights(rows, spec)
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        z = np.matmul(h, w.transpose(0, 2, 1))
        z += b[:, None, :]
        h = np.maximum(z, 0, out=z)
        if keep:
            acts.append(h)
    w, b = layers[-1]
    z = np.matmul(h, w.transpose(0, 2, 1))
    z += b[:, None, :]
    out = z if spec.linear_output else np.tanh(z, out=z)
    return out, acts


def _chunks(nb: int, workers: int) -> list[slice]:
    workers = max(1, min(workers, nb))
    bounds = np.linspace(0, nb, workers + 1).astype(int)
    return [slice(bounds[i], bounds[i + 1]) for i in range(workers)]


def block_forward(
    x: np.ndarray, rows: np.ndarray, spec: MlpSpec, workers: int = 1, keep_cache: bool = False
) -> tuple[np.ndarray, BlockCache | None]:
    """Run block i's pixels ``x[i]`` (P, in) through the MLP parameterized by ``rows[i]``.

    Blocks are split across ``workers`` threads. Each block is always computed
    by the same per-block matmuls, so the result does not depend on the split.
    """
    nb, npix, d = x.shape
    if d != spec.in_dim or rows.shape != (nb, spec.param_count):
        raise ConfigurationError(
            f"block input {x.shape} / params {rows.shape} inconsistent with {spec}"
        )
    if workers <= 1 or nb == 1:
        out, acts = _forward_chunk(x, rows, spec, keep_cache)
    else:
        parts = _chunks(nb, workers)
        with ThreadPoolExecutor(len(parts)) as pool:
            results = list(pool.map(lambda s: _forward_chunk(x[s], rows[s], spec, keep_cache), parts))
        out = np.concatenate([r[0] for r in results])
        acts = [np.concatenate([r[1][i] for r in results]) for i in range(len(results[0][1]))]
    cache = BlockCache(spec, rows, acts, out) if keep_cache else None
    return out, cache


def block_backward(cache: BlockCache, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (grad_x (nb, P, in), grad_rows (nb, param_count))."""
    spec = cache.spec
    if grad_out.shape != cache.out.shape:
        raise UsageError(f"grad_out shape {grad_out.shape} != cached output {cache.out.shape}")
    layers = block_weights(cache.rows, spec)
    g = grad_out if spec.linear_output else grad_out * (1 - cache.out * cache.out)
    grad_rows = np.empty_like(cache.rows, shape=cache.rows.shape)
    for li, (o, i, a, b, c) in reversed(list(enumerate(_slices(spec)))):
        h_in = cache.acts[li]
        w, _ = layers[li]
        grad_rows[:, a:b] = np.matmul(g.transpose(0, 2, 1), h_in).reshape(-1, o * i)
        grad_rows[:, b:c] = g.sum(axis=1)
        g = np.matmul(g, w)
        if li > 0:
            g = g * (h_in > 0)
    return g, grad_rows


# --- image-level wrappers -----------------------------------------------------


def _pixel_inputs(image: np.ndarray, enc: np.ndarray, spec: MlpSpec) -> np.ndarray:
    check_4d(image, "input image")
    check_4d(enc, "positional encoding")
    if enc.shape[2:] != image.shape[2:]:
        raise ConfigurationError(f"encoding extents {enc.shape[2:]} != image {image.shape[2:]}")
    if image.shape[1] + enc.shape[1] != spec.in_dim:
        raise ConfigurationError(
            f"{image.shape[1]} input + {enc.shape[1]} encoding channels != MLP in_dim {spec.in_dim}"
        )
    if enc.shape[0] != image.shape[0]:
        enc = np.broadcast_to(enc, (image.shape[0],) + enc.shape[1:])
    return np.concatenate([image, enc.astype(image.dtype, copy=False)], axis=1)


def evaluate_grid(
    image: np.ndarray,
    grid: np.ndarray,
    enc: np.ndarray,
    spec: MlpSpec,
    factor: int,
    workers: int = 1,
    keep_cache: bool = False,
) -> tuple[np.ndarray, BlockCache | None]:
    """Evaluate with one parameter vector per factor x factor block.

    ``grid`` has shape (N, param_count, H/factor, W/factor).
    """
    check_4d(grid, "parameter grid")
    n, _, h, w = image.shape
    if grid.shape != (n, spec.param_count, h // factor, w // factor) or h % factor or w % factor:
        raise ConfigurationError(
            f"grid {grid.shape} x factor {factor} does not tile a {h}x{w} image "
            f"with {spec.param_count} parameters"
        )
    return evaluate_rows(image, grid_to_rows(grid), enc, spec, factor, workers, keep_cache)


def evaluate_rows(
    image: np.ndarray,
    rows: np.ndarray,
    enc: np.ndarray,
    spec: MlpSpec,
    factor: int,
    workers: int = 1,
    keep_cache: bool = False,
) -> tuple[np.ndarray, BlockCache | None]:
    """Like :func:`evaluate_grid` with the grid already laid out by :func:`grid_to_rows`."""
    inp = _pixel_inputs(image, enc, spec)
    n, _, h, w = inp.shape
    out, cache = block_forward(
        to_blocks(inp, factor), rows, spec, workers=workers, keep_cache=keep_cache
    )
    return from_blocks(out, n, h, w, factor), cache


def evaluate_grid_backward(
    cache: BlockCache, grad_out: np.ndarray, in_channels: int, factor: int
) -> tuple[np.ndarray, np.ndarray]:
    """Return (grad_image, grad_grid); the encoding gets no gradient."""
    n, _, h, w = grad_out.shape
    gx, grows = block_backward(cache, to_blocks(grad_out, factor))
    grad_inp = from_blocks(gx, n, h, w, factor)
    return grad_inp[:, :in_channels], rows_to_grid(grows, n, h // factor, w // factor)


def evaluate_image(
    image: np.ndarray, params: np.ndarray, enc: np.ndarray, spec: MlpSpec, workers: int = 1
) -> np.ndarray:
    """Evaluate with a full-resolution parameter field (N, param_count, H, W)."""
    return evaluate_grid(image, params, enc, spec, 1, workers=workers)[0]
