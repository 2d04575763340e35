"""Image/label I/O, one-hot encoding, the synthetic texture dataset,
binary checkpoints and CSV loss logs.

Checkpoint layout (all integers little-endian)::

    b"ASAPCKPT"            8-byte magic
    u32 version
    u32 array count
    per array:
        u32 name length, UTF-8 name
        u32 ndim, ndim x u32 dims
        float32 data, row-major
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from asapnet.errors import ConfigurationError, DataError, FormatError
from asapnet.generator import AblationMode
from asapnet.training import LOSS_COLUMNS, TrainState

MAGIC = b"ASAPCKPT"
VERSION = 1
_MODES = list(AblationMode)


# --- images -----------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8-bit PNG/PPM, 1 or 3 channels -> (1, C, H, W) float64 in [-1, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise FormatError(f"{path}: unsupported image mode {im.mode!r} (need 8-bit L or RGB)")
            a = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot read image ({e})") from e
    if a.ndim == 2:
        a = a[:, :, None]
    return (a.transpose(2, 0, 1)[None].astype(np.float64) * 2 / 255 - 1)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def to_uint8(t: np.ndarray) -> np.ndarray:
    """Inverse of the [0, 255] -> [-1, 1] map, rounding half away from zero."""
    v = (np.asarray(t, dtype=np.float64) + 1) * 255 / 2
    return np.clip(round_half_away(v), 0, 255).astype(np.uint8)


def write_image(t: np.ndarray, path) -> None:
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] not in (1, 3):
        raise ConfigurationError(f"can only write (1, 1|3, H, W) tensors, got {t.shape}")
    a = to_uint8(t[0]).transpose(1, 2, 0)
    if a.shape[2] == 1:
        a = a[:, :, 0]
    try:
        Image.fromarray(a).save(path)
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(f"{path}: cannot write image ({e})") from e


def load_label_map(path) -> np.ndarray:
    """Indexed or grayscale PNG -> (H, W) integer class indices."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise FormatError(f"{path}: label maps must be grayscale or palette images, got {im.mode!r}")
            return np.asarray(im, dtype=np.int64)
    except FormatError:
        raise
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot read label map ({e})") from e


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    bad = np.argwhere((labels < 0) | (labels >= num_classes))
    if bad.size:
        y, x = bad[0]
        raise DataError(
            f"label {labels[y, x]} at pixel (x={x}, y={y}) outside [0, {num_classes})"
        )
    out = (labels[None, None] == np.arange(num_classes)[None, :, None, None])
    return out.astype(np.float64)


def argmax_labels(t: np.ndarray) -> np.ndarray:
    return t[0].argmax(axis=0)


def center_crop(t: np.ndarray, multiple: int) -> np.ndarray:
    """Crop (N, C, H, W) around the center to extents divisible by ``multiple``."""
    h, w = t.shape[2:]
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ConfigurationError(f"{h}x{w} image is smaller than the required multiple {multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return t[:, :, top : top + nh, left : left + nw]


# --- synthetic dataset -----------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 3
    # (fx, fy) in cycles per pixel, one per class
    texture_frequencies: tuple = ((0.25, 0.0), (0.0, 0.25), (0.25, 0.25))
    size: int = 64
    count: int = 16
    seed: int = 0
    amplitude: float = 0.45
    rects_per_class: int = 2

    def __post_init__(self):
        freqs = tuple(tuple(float(v) for v in f) for f in self.texture_frequencies)
        object.__setattr__(self, "texture_frequencies", freqs)
        if len(freqs) < self.classes:
            raise ConfigurationError(f"{len(freqs)} texture frequencies for {self.classes} classes")


@dataclass
class Sample:
    input: np.ndarray  # (1, C, H, W) one-hot
    target: np.ndarray  # (1, 3, H, W) in [-1, 1]
    labels: np.ndarray  # (H, W)


def class_colors(classes: int) -> np.ndarray:
    """Fixed, well separated per-class mean colors in [-0.5, 0.5]."""
    palette = np.array(
        [[0.5, -0.3, -0.4], [-0.4, 0.5, -0.2], [-0.3, -0.4, 0.5], [0.4, 0.4, -0.4], [-0.5, 0.3, 0.3]]
    )
    reps = -(-classes // len(palette))
    return np.tile(palette, (reps, 1))[:classes]


def synth_dataset(spec: SynthSpec) -> list[Sample]:
    """Random-rectangle label maps with one sinusoidal texture per class.

    Each class region is its class color plus ``amplitude * sin(2 pi (fx x + fy y) + phase)``
    with one random phase per sample, so fine detail cannot be read off the
    label map and has to be synthesized.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    colors = class_colors(spec.classes)
    samples = []
    for _ in range(spec.count):
        labels = np.zeros((n, n), dtype=np.int64)
        for c in range(1, spec.classes):
            for _ in range(spec.rects_per_class):
                h, w = rng.integers(n // 8, n // 2, size=2)
                top, left = rng.integers(0, n - h), rng.integers(0, n - w)
                labels[top : top + h, left : left + w] = c
        phase = rng.uniform(0, 2 * np.pi)
        target = np.empty((1, 3, n, n))
        for c in range(spec.classes):
            fx, fy = spec.texture_frequencies[c]
            tex = spec.amplitude * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
            mask = labels == c
            target[0, :, mask] = (colors[c][:, None] + tex[mask][None, :]).T
        samples.append(Sample(one_hot(labels, spec.classes), target, labels))
    return samples


def highband_energy_fraction(img: np.ndarray, factor: int) -> float:
    """Share of non-DC spectral energy at frequencies above 1/factor cycles/pixel.

    A frequency counts as high when either axis component exceeds 1/factor.
    ``img`` is (N, C, H, W); energy is pooled over samples and channels.
    """
    h, w = img.shape[2:]
    spec = np.abs(np.fft.fft2(img - img.mean(axis=(2, 3), keepdims=True))) ** 2
    fy = np.abs(np.fft.fftfreq(h))[:, None]
    fx = np.abs(np.fft.fftfreq(w))[None, :]
    high = (fx > 1 / factor) | (fy > 1 / factor)
    total = spec.sum()
    return float(spec[..., high].sum() / total) if total > 0 else 0.0


# --- checkpoints -------------------------------------------------------------------------


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for group in ("gen", "disc", "gen_m", "gen_v", "disc_m", "disc_v"):
        for k, v in getattr(state, group).items():
            arrays[f"{group}/{k}"] = v
    arrays["meta/step"] = np.array([state.step])
    arrays["meta/shape"] = np.array([state.height, state.width])
    arrays["meta/mode"] = np.array([_MODES.index(state.mode)])
    arrays["meta/loss_history"] = np.array(state.loss_history, dtype=np.float64).reshape(-1, len(LOSS_COLUMNS))
    return arrays


def save_arrays(arrays: dict[str, np.ndarray], path) -> None:
    """Write named arrays atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(a)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: cannot read checkpoint ({e})") from e
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not an ASAPCKPT checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise FormatError(f"{path}: checkpoint format version {version}, expected {VERSION}")
        off = 16
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + nlen > len(buf):
                raise FormatError(f"{path}: truncated checkpoint")
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(buf):
                raise FormatError(f"{path}: truncated checkpoint")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint ({e})") from e
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after last array")
    return arrays


def checkpoint_save(state: TrainState, path) -> None:
    save_arrays(_state_arrays(state), path)


def checkpoint_load(path, dtype=np.float32) -> TrainState:
    arrays = load_arrays(path)
    try:
        groups = {g: {} for g in ("gen", "disc", "gen_m", "gen_v", "disc_m", "disc_v")}
        for name, a in arrays.items():
            group, _, key = name.partition("/")
            if group in groups:
                groups[group][key] = a.astype(dtype, copy=False)
        h, w = (int(v) for v in arrays["meta/shape"])
        history = [
            (int(r[0]),) + tuple(float(v) for v in r[1:]) for r in arrays["meta/loss_history"]
        ]
        return TrainState(
            **groups,
            height=h,
            width=w,
            mode=_MODES[int(arrays["meta/mode"][0])],
            step=int(arrays["meta/step"][0]),
            loss_history=history,
        )
    except (KeyError, IndexError) as e:
        raise FormatError(f"{path}: checkpoint is missing entry {e}") from e


# --- loss log ---------------------------------------------------------------------------


class LossLog:
    """Append-only CSV with columns step, d_loss, g_adv, g_fm, g_rec."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(LOSS_COLUMNS)

    def append(self, rows: Sequence[tuple]) -> None:
        with self.path.open("a", newline="") as f:
            w = csv.writer(f)
            for r in rows:
                w.writerow([r[0]] + [f"{v:.8g}" for v in r[1:]])
