"""Adversarial training: multi-scale patch discriminator, hinge + feature
matching + L1 reconstruction losses, Adam, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from asapnet import tensor as T
from asapnet.errors import ConfigurationError, UsageError
from asapnet.generator import AblationMode, Generator, generator_backward, generator_forward
from asapnet.hypernet import GeneratorConfig

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "d_loss", "g_adv", "g_fm", "g_rec")


@dataclass(frozen=True)
class DiscriminatorConfig:
    scales: int = 2
    layers_per_scale: int = 4
    base_width: int = 64
    max_width: int = 512
    leaky_slope: float = 0.2
    init_std: float = 0.02

    def __post_init__(self):
        if self.scales < 1 or self.layers_per_scale < 1 or self.base_width < 1:
            raise ConfigurationError(f"invalid discriminator config {self}")

    def widths(self) -> list[int]:
        return [min(self.base_width * 2**j, self.max_width) for j in range(self.layers_per_scale)]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 1
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_fm: float = 10.0
    lambda_rec: float = 10.0
    seed: int = 0
    mode: str = "full"
    precision: str = "float32"
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.mode not in {m.value for m in AblationMode}:
            raise ConfigurationError(
                f"unknown mode {self.mode!r}; expected one of {[m.value for m in AblationMode]}"
            )
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError(f"invalid steps/batch_size in {self}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


# --- discriminator --------------------------------------------------------------


def init_discriminator(
    cfg: DiscriminatorConfig, in_channels: int, rng: np.random.Generator, dtype=np.float64
) -> dict[str, np.ndarray]:
    params = {}
    for s in range(cfg.scales):
        c = in_channels
        for j, w in enumerate(cfg.widths()):
            params[f"s{s}.l{j}.weight"] = rng.normal(0, cfg.init_std, (w, c, 4, 4)).astype(dtype)
            params[f"s{s}.l{j}.bias"] = np.zeros(w, dtype)
            c = w
        params[f"s{s}.out.weight"] = rng.normal(0, cfg.init_std, (1, c, 3, 3)).astype(dtype)
        params[f"s{s}.out.bias"] = np.zeros(1, dtype)
    return params


def _d_layer(params, s, j) -> T.Conv2dParams:
    return T.Conv2dParams(params[f"s{s}.l{j}.weight"], params[f"s{s}.l{j}.bias"], stride=2, padding=1)


def _d_out(params, s) -> T.Conv2dParams:
    return T.Conv2dParams(params[f"s{s}.out.weight"], params[f"s{s}.out.bias"], stride=1, padding=1)


@dataclass
class _ScaleCache:
    conv_inputs: list = field(default_factory=list)
    norm_caches: list = field(default_factory=list)
    pre_act: list = field(default_factory=list)


@dataclass
class DiscriminatorCache:
    pair_shape: tuple
    scales: list[_ScaleCache]


def discriminator_forward(
    params: dict[str, np.ndarray], pair: np.ndarray, cfg: DiscriminatorConfig, keep_cache: bool = False
) -> tuple[list[np.ndarray], list[list[np.ndarray]], DiscriminatorCache | None]:
    """Patch logits and intermediate features for every scale.

    Scale ``s`` sees the (input ++ output) pair average-pooled by 2**s.
    """
    T.check_4d(pair, "discriminator input")
    expected_c = params["s0.l0.weight"].shape[1]
    if pair.shape[1] != expected_c:
        raise ConfigurationError(f"discriminator expects {expected_c} channels, got {pair.shape[1]}")
    logits, feats = [], []
    cache = DiscriminatorCache(pair.shape, []) if keep_cache else None
    for s in range(cfg.scales):
        x = T.bilinear_downsample(pair, 2**s)
        sc = _ScaleCache()
        scale_feats = []
        for j in range(cfg.layers_per_scale):
            sc.conv_inputs.append(x)
            z = T.conv2d_forward(x, _d_layer(params, s, j))
            if j > 0:
                z, nc = T.instance_norm(z)
                sc.norm_caches.append(nc)
            sc.pre_act.append(z)
            x = T.leaky_relu(z, cfg.leaky_slope)
            scale_feats.append(x)
        sc.conv_inputs.append(x)
        logits.append(T.conv2d_forward(x, _d_out(params, s)))
        feats.append(scale_feats)
        if cache is not None:
            cache.scales.append(sc)
    return logits, feats, cache


def discriminator_backward(
    params: dict[str, np.ndarray],
    cache: DiscriminatorCache,
    cfg: DiscriminatorConfig,
    grad_logits: Sequence[np.ndarray],
    grad_features: Sequence[Sequence[np.ndarray]] | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Return (parameter gradients, gradient w.r.t. the input pair)."""
    if cache is None:
        raise UsageError("discriminator_backward needs a cache from discriminator_forward(keep_cache=True)")
    grads = {}
    grad_pair = np.zeros(cache.pair_shape, dtype=grad_logits[0].dtype)
    for s in range(cfg.scales):
        sc = cache.scales[s]
        g, grads[f"s{s}.out.weight"], grads[f"s{s}.out.bias"] = T.conv2d_backward(
            sc.conv_inputs[-1], _d_out(params, s), grad_logits[s]
        )
        for j in reversed(range(cfg.layers_per_scale)):
            if grad_features is not None:
                g = g + grad_features[s][j]
            g = T.leaky_relu_backward(sc.pre_act[j], g, cfg.leaky_slope)
            if j > 0:
                g = T.instance_norm_backward(sc.norm_caches[j - 1], g)
            g, grads[f"s{s}.l{j}.weight"], grads[f"s{s}.l{j}.bias"] = T.conv2d_backward(
                sc.conv_inputs[j], _d_layer(params, s, j), g
            )
        grad_pair += T.bilinear_downsample_backward(g, 2**s)
    return grads, grad_pair


# --- losses -----------------------------------------------------------------------


def hinge_d_loss(real_logits: Sequence[np.ndarray], fake_logits: Sequence[np.ndarray]) -> float:
    terms = [
        np.maximum(0, 1 - r).mean() + np.maximum(0, 1 + f).mean()
        for r, f in zip(real_logits, fake_logits)
    ]
    return float(np.mean(terms))


def hinge_d_loss_grad(real_logits, fake_logits):
    n = len(real_logits)
    g_real = [-(r < 1).astype(r.dtype) / (r.size * n) for r in real_logits]
    g_fake = [(f > -1).astype(f.dtype) / (f.size * n) for f in fake_logits]
    return g_real, g_fake


def hinge_g_loss(fake_logits: Sequence[np.ndarray]) -> float:
    return float(-np.mean([f.mean() for f in fake_logits]))


def hinge_g_loss_grad(fake_logits):
    n = len(fake_logits)
    return [np.full_like(f, -1.0 / (f.size * n)) for f in fake_logits]


def _check_feature_structure(real, fake):
    if len(real) != len(fake) or any(
        len(r) != len(f) or any(a.shape != b.shape for a, b in zip(r, f)) for r, f in zip(real, fake)
    ):
        raise UsageError("real and fake feature lists differ in structure")


def feature_matching_loss(real_features, fake_features, weight: float = 10.0) -> float:
    """``weight`` times the L1 feature distance averaged over layers and scales."""
    _check_feature_structure(real_features, fake_features)
    terms = [np.abs(r - f).mean() for rs, fs in zip(real_features, fake_features) for r, f in zip(rs, fs)]
    return float(weight * np.mean(terms))


def feature_matching_loss_grad(real_features, fake_features, weight: float = 10.0):
    """Gradient w.r.t. the fake features; real features are treated as constants."""
    _check_feature_structure(real_features, fake_features)
    n = sum(len(fs) for fs in fake_features)
    return [
        [weight * np.sign(f - r) / (f.size * n) for r, f in zip(rs, fs)]
        for rs, fs in zip(real_features, fake_features)
    ]


def reconstruction_loss(output: np.ndarray, target: np.ndarray, weight: float = 10.0) -> float:
    if output.shape != target.shape:
        raise ConfigurationError(f"output {output.shape} and target {target.shape} differ")
    return float(weight * np.abs(output - target).mean())


def reconstruction_loss_grad(output, target, weight: float = 10.0):
    return weight * np.sign(output - target) / output.size


# --- optimizer and state ----------------------------------------------------------------


def adam_update(params, grads, m, v, step: int, lr: float, beta1: float, beta2: float, eps: float):
    """In-place Adam update; ``step`` is 1-based."""
    c1 = 1 - beta1**step
    c2 = 1 - beta2**step
    for k, p in params.items():
        g = grads[k]
        m[k] *= beta1
        m[k] += (1 - beta1) * g
        v[k] *= beta2
        v[k] += (1 - beta2) * g * g
        p -= (lr / c1) * m[k] / (np.sqrt(v[k] / c2) + eps)


@dataclass
class TrainState:
    gen: dict[str, np.ndarray]
    disc: dict[str, np.ndarray]
    gen_m: dict[str, np.ndarray]
    gen_v: dict[str, np.ndarray]
    disc_m: dict[str, np.ndarray]
    disc_v: dict[str, np.ndarray]
    height: int
    width: int
    mode: AblationMode
    step: int = 0
    loss_history: list[tuple] = field(default_factory=list)

    def generator(self, config: GeneratorConfig) -> Generator:
        return Generator(config, self.height, self.width, self.mode, self.gen)

    def g_total(self) -> np.ndarray:
        """Generator total loss per recorded step."""
        return np.array([sum(row[2:]) for row in self.loss_history])


def init_train_state(
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    train_config: TrainConfig,
    height: int,
    width: int,
) -> TrainState:
    rng = np.random.default_rng(train_config.seed)
    dtype = train_config.dtype
    gen = Generator.create(gen_config, height, width, train_config.mode, rng=rng, dtype=dtype)
    disc = init_discriminator(disc_config, gen_config.input_channels + gen_config.output_channels, rng, dtype)
    zeros = lambda d: {k: np.zeros_like(v) for k, v in d.items()}  # noqa: E731
    return TrainState(
        gen.params, disc, zeros(gen.params), zeros(gen.params), zeros(disc), zeros(disc),
        height, width, gen.mode,
    )


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def train_step(
    batch: tuple[np.ndarray, np.ndarray],
    state: TrainState,
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    train_config: TrainConfig,
    workers: int = 1,
) -> tuple[TrainState, dict[str, float]]:
    """One discriminator update followed by one generator update (in place)."""
    tc = train_config
    x, target = (a.astype(tc.dtype, copy=False) for a in batch)
    gen = state.generator(gen_config)
    if target.shape != (x.shape[0], gen_config.output_channels, state.height, state.width):
        raise ConfigurationError(f"target shape {target.shape} does not match generator output")
    step = state.step + 1

    fake, gcache = generator_forward(gen, x, workers=workers)
    real_pair = np.concatenate([x, target], axis=1)
    fake_pair = np.concatenate([x, fake], axis=1)

    # discriminator
    real_logits, _, rcache = discriminator_forward(state.disc, real_pair, disc_config, keep_cache=True)
    fake_logits, _, fcache = discriminator_forward(state.disc, fake_pair, disc_config, keep_cache=True)
    d_loss = hinge_d_loss(real_logits, fake_logits)
    g_real, g_fake = hinge_d_loss_grad(real_logits, fake_logits)
    d_grads, _ = discriminator_backward(state.disc, rcache, disc_config, g_real)
    d_grads_fake, _ = discriminator_backward(state.disc, fcache, disc_config, g_fake)
    for k in d_grads:
        d_grads[k] += d_grads_fake[k]
    adam_update(state.disc, d_grads, state.disc_m, state.disc_v, step, tc.lr_d, tc.beta1, tc.beta2, tc.eps)

    # generator, against the updated discriminator
    _, real_feats, _ = discriminator_forward(state.disc, real_pair, disc_config)
    fake_logits, fake_feats, fcache = discriminator_forward(state.disc, fake_pair, disc_config, keep_cache=True)
    g_adv = hinge_g_loss(fake_logits)
    g_fm = feature_matching_loss(real_feats, fake_feats, tc.lambda_fm)
    g_rec = reconstruction_loss(fake, target, tc.lambda_rec)
    losses = {"d_loss": d_loss, "g_adv": g_adv, "g_fm": g_fm, "g_rec": g_rec}
    if not all(np.isfinite(v) for v in losses.values()):
        raise TrainingDiverged(f"non-finite loss at step {step}: {losses}", {"step": step, **losses})

    _, grad_pair = discriminator_backward(
        state.disc, fcache, disc_config,
        hinge_g_loss_grad(fake_logits),
        feature_matching_loss_grad(real_feats, fake_feats, tc.lambda_fm),
    )
    grad_fake = grad_pair[:, x.shape[1]:] + reconstruction_loss_grad(fake, target, tc.lambda_rec)
    g_grads = generator_backward(gen, gcache, grad_fake)
    adam_update(state.gen, g_grads, state.gen_m, state.gen_v, step, tc.lr_g, tc.beta1, tc.beta2, tc.eps)

    state.step = step
    # rounded to single precision so checkpoints reproduce the history exactly
    state.loss_history.append((step,) + tuple(float(np.float32(losses[k])) for k in LOSS_COLUMNS[1:]))
    return state, losses


def batch_indices(step: int, dataset_size: int, batch_size: int, seed: int) -> np.ndarray:
    """Sample indices for 0-based ``step``; shuffled per epoch from (seed, epoch)."""
    idx = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, i = divmod(pos, dataset_size)
        perm = np.random.default_rng([seed, epoch]).permutation(dataset_size)
        idx.append(perm[i])
    return np.array(idx)


def train(
    dataset: Sequence,
    state: TrainState,
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    train_config: TrainConfig,
    workers: int = 1,
    on_step: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Run until ``train_config.steps``; resumes from ``state.step``.

    ``dataset`` holds samples with ``input`` and ``target`` arrays of shape
    (1, C, H, W).
    """
    if not dataset:
        raise ConfigurationError("empty dataset")
    while state.step < train_config.steps:
        idx = batch_indices(state.step, len(dataset), train_config.batch_size, train_config.seed)
        x = np.concatenate([dataset[i].input for i in idx])
        y = np.concatenate([dataset[i].target for i in idx])
        state, losses = train_step((x, y), state, gen_config, disc_config, train_config, workers)
        if train_config.log_every and state.step % train_config.log_every == 0:
            log.info("step %d %s", state.step, " ".join(f"{k}={v:.4f}" for k, v in losses.items()))
        if on_step is not None:
            on_step(state, losses)
    return state
