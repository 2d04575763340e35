"""Low-resolution convolutional network predicting the MLP parameter grid.

The input is first box/bilinear-downsampled by S_b so its short axis is at
most ``lowres_cap`` pixels, then log2(S_l) stride-2 conv stages reduce it by
S_l, and a 1x1 head emits one parameter vector per cell. The head predicts a
residual around a learned shared vector ``base``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from asapnet import tensor as T
from asapnet.errors import ConfigurationError
from asapnet.mlp import MlpSpec
from asapnet.posenc import is_power_of_two


@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 3
    output_channels: int = 3
    mlp_depth: int = 5
    mlp_width: int = 64
    linear_output: bool = False
    learned_downsampling: int = 16
    lowres_cap: int = 256
    hypernet_widths: tuple[int, ...] | None = None
    # forces S = S_b * S_l instead of deriving S_b from lowres_cap
    total_downsampling: int | None = None
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if not is_power_of_two(self.learned_downsampling):
            raise ConfigurationError(
                f"learned downsampling must be a power of two, got {self.learned_downsampling}"
            )
        if self.lowres_cap < 1:
            raise ConfigurationError(f"lowres_cap must be positive, got {self.lowres_cap}")
        if self.hypernet_widths is not None:
            object.__setattr__(self, "hypernet_widths", tuple(self.hypernet_widths))
            if len(self.hypernet_widths) != self.num_stages:
                raise ConfigurationError(
                    f"{len(self.hypernet_widths)} hypernet widths given but S_l = "
                    f"{self.learned_downsampling} needs {self.num_stages} stride-2 stages"
                )
        if self.total_downsampling is not None:
            s = self.total_downsampling
            if not is_power_of_two(s) or s < self.learned_downsampling:
                raise ConfigurationError(
                    f"total downsampling {s} must be a power of two >= S_l = {self.learned_downsampling}"
                )

    @property
    def num_stages(self) -> int:
        return self.learned_downsampling.bit_length() - 1

    @property
    def stage_widths(self) -> tuple[int, ...]:
        if self.hypernet_widths is not None:
            return self.hypernet_widths
        return tuple(min(64 * 2**i, 512) for i in range(self.num_stages))

    def mlp_spec(self, encoding_depth: int) -> MlpSpec:
        return MlpSpec(
            in_dim=self.input_channels + 4 * encoding_depth,
            out_dim=self.output_channels,
            depth=self.mlp_depth,
            width=self.mlp_width,
            linear_output=self.linear_output,
        )


class Factors(NamedTuple):
    bilinear: int  # S_b
    total: int  # S
    encoding_depth: int  # K = log2(S)
    grid: tuple[int, int]


def compute_factors(height: int, width: int, config: GeneratorConfig) -> Factors:
    if height < 1 or width < 1:
        raise ConfigurationError(f"image extents must be positive, got {height}x{width}")
    if config.total_downsampling is not None:
        s_b = config.total_downsampling // config.learned_downsampling
    else:
        s_b = 1
        while min(height, width) / s_b > config.lowres_cap:
            s_b *= 2
    s = s_b * config.learned_downsampling
    if height % s or width % s:
        raise ConfigurationError(
            f"image {height}x{width} is not divisible by total downsampling S = {s} "
            f"(S_b = {s_b}, S_l = {config.learned_downsampling})"
        )
    return Factors(s_b, s, s.bit_length() - 1, (height // s, width // s))


def init_hypernet(
    config: GeneratorConfig, spec: MlpSpec, rng: np.random.Generator, dtype=np.float64
) -> dict[str, np.ndarray]:
    params = {}
    c_in = config.input_channels
    for i, c_out in enumerate(config.stage_widths):
        fan_in = c_in * 9
        params[f"stage{i}.weight"] = rng.normal(0, np.sqrt(2 / fan_in), (c_out, c_in, 3, 3))
        params[f"stage{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    params["head.weight"] = np.zeros((spec.param_count, c_in, 1, 1))
    params["head.bias"] = np.zeros(spec.param_count)
    params["base"] = init_base_params(spec, rng)
    return {k: v.astype(dtype) for k, v in params.items()}


def init_base_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """He-scaled weights, zero biases, in the flat MLP layout."""
    parts = []
    for o, i in spec.layer_shapes():
        parts += [rng.normal(0, np.sqrt(2 / i), o * i), np.zeros(o)]
    return np.concatenate(parts)


def _stage(params, i) -> T.Conv2dParams:
    return T.Conv2dParams(params[f"stage{i}.weight"], params[f"stage{i}.bias"], stride=2, padding=1)


def _head(params) -> T.Conv2dParams:
    return T.Conv2dParams(params["head.weight"], params["head.bias"])


@dataclass
class HypernetCache:
    conv_inputs: list[np.ndarray] = field(default_factory=list)
    norm_caches: list[tuple] = field(default_factory=list)
    normed: list[np.ndarray] = field(default_factory=list)


def hypernet_forward(
    lowres: np.ndarray, params: dict[str, np.ndarray], config: GeneratorConfig, keep_cache: bool = False
) -> tuple[np.ndarray, HypernetCache | None]:
    """Map the downsampled input (N, C, h, w) to a grid (N, param_count, h/S_l, w/S_l)."""
    T.check_4d(lowres, "low-resolution input")
    h, w = lowres.shape[2:]
    sl = config.learned_downsampling
    if h % sl or w % sl:
        raise ConfigurationError(f"low-res input {h}x{w} not divisible by S_l = {sl}")
    cache = HypernetCache() if keep_cache else None
    x = lowres
    for i in range(config.num_stages):
        layer = _stage(params, i)
        z = T.conv2d_forward(x, layer)
        y, nc = T.instance_norm(z)
        if cache is not None:
            cache.conv_inputs.append(x)
            cache.norm_caches.append(nc)
            cache.normed.append(y)
        x = T.leaky_relu(y, config.leaky_slope)
    if cache is not None:
        cache.conv_inputs.append(x)
    grid = T.conv2d_forward(x, _head(params))
    grid += params["base"][None, :, None, None]
    return grid, cache


def hypernet_backward(
    cache: HypernetCache, params: dict[str, np.ndarray], config: GeneratorConfig, grad_grid: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Return (parameter gradients, gradient w.r.t. the low-res input)."""
    grads = {"base": grad_grid.sum(axis=(0, 2, 3))}
    g, grads["head.weight"], grads["head.bias"] = T.conv2d_backward(
        cache.conv_inputs[-1], _head(params), grad_grid
    )
    for i in reversed(range(config.num_stages)):
        g = T.leaky_relu_backward(cache.normed[i], g, config.leaky_slope)
        g = T.instance_norm_backward(cache.norm_caches[i], g)
        g, grads[f"stage{i}.weight"], grads[f"stage{i}.bias"] = T.conv2d_backward(
            cache.conv_inputs[i], _stage(params, i), g
        )
    return grads, g


def upsample_params(grid: np.ndarray, total_downsampling: int, height: int, width: int) -> np.ndarray:
    """Per-pixel parameter field phi_p = grid[p // S] of shape (N, P, height, width)."""
    T.check_4d(grid, "parameter grid")
    gh, gw = grid.shape[2:]
    if gh * total_downsampling != height or gw * total_downsampling != width:
        raise ConfigurationError(
            f"grid {gh}x{gw} x S = {total_downsampling} does not cover {height}x{width}"
        )
    return T.nearest_upsample(grid, total_downsampling)
