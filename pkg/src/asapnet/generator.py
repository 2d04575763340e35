"""End-to-end generator: downsample -> hypernet -> parameter grid -> pixelwise MLPs."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from asapnet import tensor as T
from asapnet.errors import ConfigurationError, UsageError
from asapnet.hypernet import (
    Factors,
    GeneratorConfig,
    HypernetCache,
    compute_factors,
    hypernet_backward,
    hypernet_forward,
    init_base_params,
    init_hypernet,
)
from asapnet.mlp import BlockCache, MlpSpec, evaluate_grid, evaluate_grid_backward
from asapnet.posenc import PositionalEncodingSpec, encode_grid


class AblationMode(str, enum.Enum):
    FULL = "full"
    NO_POSITIONAL_ENCODING = "no_positional_encoding"
    # one learned parameter vector everywhere: a fixed stack of 1x1 convolutions
    SPATIALLY_UNIFORM = "spatially_uniform"


@dataclass
class Generator:
    """Parameters plus the resolution-dependent bookkeeping they were built for.

    The MLP input width depends on K = log2(S), and S depends on the image
    size, so a generator is tied to one (height, width).
    """

    config: GeneratorConfig
    height: int
    width: int
    mode: AblationMode
    params: dict[str, np.ndarray]
    factors: Factors = field(init=False)
    spec: MlpSpec = field(init=False)
    encoding: PositionalEncodingSpec = field(init=False)
    version: int = 0

    def __post_init__(self):
        self.mode = AblationMode(self.mode)
        self.factors = compute_factors(self.height, self.width, self.config)
        depth = 0 if self.mode is AblationMode.NO_POSITIONAL_ENCODING else self.factors.encoding_depth
        self.encoding = PositionalEncodingSpec(depth)
        self.spec = self.config.mlp_spec(depth)
        if self.params["base"].shape != (self.spec.param_count,):
            raise ConfigurationError(
                f"base parameters {self.params['base'].shape} do not match "
                f"MLP parameter count {self.spec.param_count}"
            )

    @classmethod
    def create(
        cls,
        config: GeneratorConfig,
        height: int,
        width: int,
        mode: AblationMode | str = AblationMode.FULL,
        rng: np.random.Generator | int = 0,
        dtype=np.float64,
    ) -> "Generator":
        rng = np.random.default_rng(rng)
        mode = AblationMode(mode)
        factors = compute_factors(height, width, config)
        depth = 0 if mode is AblationMode.NO_POSITIONAL_ENCODING else factors.encoding_depth
        spec = config.mlp_spec(depth)
        if mode is AblationMode.SPATIALLY_UNIFORM:
            params = {"base": init_base_params(spec, rng).astype(dtype)}
        else:
            params = init_hypernet(config, spec, rng, dtype)
        return cls(config, height, width, mode, params)

    @property
    def dtype(self):
        return self.params["base"].dtype

    def positional_encoding(self) -> np.ndarray:
        return encode_grid(self.height, self.width, self.encoding, dtype=self.dtype)

    def touch(self) -> None:
        """Mark parameters as modified; caches from earlier forwards become stale."""
        self.version += 1


@dataclass
class GeneratorCache:
    version: int
    gen_id: int
    in_channels: int
    batch: int
    hypernet: HypernetCache | None
    mlp: BlockCache
    injected_grid: bool


def lowres_input(gen: Generator, x: np.ndarray) -> np.ndarray:
    return T.bilinear_downsample(x, gen.factors.bilinear)


def predict_grid(
    gen: Generator, x: np.ndarray, keep_cache: bool = False
) -> tuple[np.ndarray, HypernetCache | None]:
    """Parameter grid (N, param_count, H/S, W/S) for a full-resolution input."""
    n = x.shape[0]
    gh, gw = gen.factors.grid
    if gen.mode is AblationMode.SPATIALLY_UNIFORM:
        base = gen.params["base"]
        grid = np.broadcast_to(base[None, :, None, None], (n, base.size, gh, gw))
        return np.ascontiguousarray(grid), None
    return hypernet_forward(lowres_input(gen, x), gen.params, gen.config, keep_cache=keep_cache)


def generator_forward(
    gen: Generator,
    x: np.ndarray,
    workers: int = 1,
    grid: np.ndarray | None = None,
    keep_cache: bool = True,
) -> tuple[np.ndarray, GeneratorCache | None]:
    """Translate ``x`` (N, C, H, W); pass ``grid`` to bypass the hypernetwork."""
    T.check_4d(x, "generator input")
    if x.shape[1] != gen.config.input_channels or x.shape[2:] != (gen.height, gen.width):
        raise ConfigurationError(
            f"generator built for (*, {gen.config.input_channels}, {gen.height}, {gen.width}), "
            f"got {x.shape}"
        )
    x = x.astype(gen.dtype, copy=False)
    injected = grid is not None
    hcache = None
    if grid is None:
        grid, hcache = predict_grid(gen, x, keep_cache=keep_cache)
    out, mcache = evaluate_grid(
        x, grid, gen.positional_encoding(), gen.spec, gen.factors.total,
        workers=workers, keep_cache=keep_cache,
    )
    if not keep_cache:
        return out, None
    return out, GeneratorCache(gen.version, id(gen), x.shape[1], x.shape[0], hcache, mcache, injected)


def generator_backward(
    gen: Generator, cache: GeneratorCache, grad_output: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients for every entry of ``gen.params`` (plus ``"input"`` and ``"grid"``)."""
    if cache is None or cache.gen_id != id(gen) or cache.version != gen.version:
        raise UsageError("stale generator cache: parameters changed since the forward pass")
    grad_x, grad_grid = evaluate_grid_backward(
        cache.mlp, grad_output, cache.in_channels, gen.factors.total
    )
    grads: dict[str, np.ndarray] = {"input": grad_x, "grid": grad_grid}
    if cache.injected_grid:
        grads.update({k: np.zeros_like(v) for k, v in gen.params.items()})
    elif gen.mode is AblationMode.SPATIALLY_UNIFORM:
        grads["base"] = grad_grid.sum(axis=(0, 2, 3))
    else:
        pgrads, grad_low = hypernet_backward(cache.hypernet, gen.params, gen.config, grad_grid)
        grads.update(pgrads)
        grads["input"] = grad_x + T.bilinear_downsample_backward(grad_low, gen.factors.bilinear)
    return grads
