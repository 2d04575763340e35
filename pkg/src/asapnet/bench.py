"""Per-stage wall-clock breakdown of the generator forward pass.

Stages, run in order on one input:

- ``bilinear_downsample``: full resolution to the hypernetwork input
- ``hypernet``: strided conv stack plus head, producing the parameter grid
- ``param_upsample``: laying the grid out as one parameter row per S x S block.
  The block path never materializes the replicated per-pixel field (14467
  floats per pixel at 1024^2 would be ~60 GB), so this is the stage that
  stands in for nearest-neighbor replication.
- ``posenc``: positional encoding channels
- ``pixelwise``: the per-block MLPs

Every timed rep is checked against an untimed reference output.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from asapnet import tensor as T
from asapnet.errors import ConfigurationError
from asapnet.generator import AblationMode, Generator, predict_grid
from asapnet.hypernet import GeneratorConfig, compute_factors, hypernet_forward
from asapnet.mlp import evaluate_rows, grid_to_rows

log = logging.getLogger(__name__)

STAGES = ("bilinear_downsample", "hypernet", "param_upsample", "posenc", "pixelwise")
MIN_REPS = 20
MIN_WARMUP = 3


@dataclass(frozen=True)
class StageTiming:
    median_ms: float
    iqr_ms: float
    reps: int


@dataclass
class BenchReport:
    timings: dict[tuple[int, int], dict[str, StageTiming]] = field(default_factory=dict)
    failures: dict[tuple[int, int], str] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for (h, w), stages in self.timings.items():
            for stage, t in stages.items():
                out.append(
                    {"resolution": f"{h}x{w}", "stage": stage, "median_ms": t.median_ms,
                     "iqr_ms": t.iqr_ms, "reps": t.reps, "status": "ok"}
                )
        for (h, w), msg in self.failures.items():
            out.append(
                {"resolution": f"{h}x{w}", "stage": "*", "median_ms": float("nan"),
                 "iqr_ms": float("nan"), "reps": 0, "status": f"FAILED: {msg}"}
            )
        return out

    def median(self, resolution, stage: str) -> float:
        return self.timings[_hw(resolution)][stage].median_ms

    def ratio(self, stage: str, hi, lo) -> float:
        return self.median(hi, stage) / self.median(lo, stage)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(_COLUMNS), lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "rows": self.rows()}, indent=2)

    def table(self) -> str:
        return format_table(self.rows(), _COLUMNS)


_COLUMNS = ("resolution", "stage", "median_ms", "iqr_ms", "reps", "status")


def format_table(rows: list[dict], columns) -> str:
    def cell(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    cells = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _hw(resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    h, w = resolution
    return int(h), int(w)


def config_hash(config: GeneratorConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _stages(gen: Generator, x: np.ndarray, workers: int):
    """Callables for each stage, threaded through a shared dict."""
    f = gen.factors

    def down(s):
        s["lowres"] = T.bilinear_downsample(x, f.bilinear)

    def hyper(s):
        if gen.mode is AblationMode.SPATIALLY_UNIFORM:
            s["grid"], _ = predict_grid(gen, x)
        else:
            s["grid"], _ = hypernet_forward(s["lowres"], gen.params, gen.config)

    def layout(s):
        s["rows"] = np.ascontiguousarray(grid_to_rows(s["grid"]))

    def posenc(s):
        s["enc"] = gen.positional_encoding()

    def pixel(s):
        s["out"], _ = evaluate_rows(x, s["rows"], s["enc"], gen.spec, f.total, workers=workers)

    return dict(zip(STAGES, (down, hyper, layout, posenc, pixel)))


def _run_once(stages) -> tuple[dict, dict[str, float]]:
    state: dict = {}
    times = {}
    for name, fn in stages.items():
        t0 = time.perf_counter()
        fn(state)
        times[name] = (time.perf_counter() - t0) * 1e3
    return state, times


def _summary(samples: list[float]) -> StageTiming:
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return StageTiming(float(med), float(q3 - q1), len(samples))


def bench_generator(
    config: GeneratorConfig, h: int, w: int, mode=AblationMode.FULL, seed: int = 0, dtype=np.float32
) -> tuple[Generator, np.ndarray]:
    """Generator with randomized (nonzero) head and a seeded input."""
    rng = np.random.default_rng(seed)
    gen = Generator.create(config, h, w, mode, rng=rng, dtype=dtype)
    if "head.weight" in gen.params:
        hw = gen.params["head.weight"]
        hw += (0.01 * rng.standard_normal(hw.shape)).astype(dtype)
    x = rng.uniform(-1, 1, (1, config.input_channels, h, w)).astype(dtype)
    return gen, x


def time_breakdown(
    config: GeneratorConfig,
    resolutions,
    reps: int = MIN_REPS,
    warmup: int = MIN_WARMUP,
    workers: int = 1,
    dtype="float32",
    seed: int = 0,
    mode=AblationMode.FULL,
) -> BenchReport:
    if reps < MIN_REPS or warmup < MIN_WARMUP:
        raise ConfigurationError(
            f"need reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}, got {reps} and {warmup}"
        )
    dtype = np.dtype(dtype)
    resolutions = [_hw(r) for r in resolutions]
    for h, w in resolutions:
        compute_factors(h, w, config)  # validate before any timing
    report = BenchReport(
        metadata={
            "workers": workers, "precision": dtype.name, "config_hash": config_hash(config),
            "reps": reps, "warmup": warmup, "seed": seed, "mode": AblationMode(mode).value,
            "clock": "perf_counter",
        }
    )
    for h, w in resolutions:
        try:
            gen, x = bench_generator(config, h, w, mode, seed, dtype)
            stages = _stages(gen, x, workers)
            reference, _ = _run_once(stages)
            ref_out = reference["out"]
            samples = {s: [] for s in STAGES}
            for i in range(warmup + reps):
                state, times = _run_once(stages)
                if not np.array_equal(state["out"], ref_out):
                    raise RuntimeError(f"benchmark output at {h}x{w} differs from the reference run")
                if i >= warmup:
                    for s, t in times.items():
                        samples[s].append(t)
            report.timings[(h, w)] = {s: _summary(v) for s, v in samples.items()}
            log.info("bench %dx%d done", h, w)
        except MemoryError as exc:
            report.failures[(h, w)] = f"out of memory ({exc})"
            log.warning("bench %dx%d: out of memory", h, w)
    return report


@dataclass(frozen=True)
class SweepRow:
    S: int
    grid: tuple[int, int]
    param_count: int
    total_ms: float
    hypernet_ms: float
    pixelwise_ms: float


def ablation_sweep(
    config: GeneratorConfig,
    s_values,
    resolution=512,
    reps: int = MIN_REPS,
    warmup: int = MIN_WARMUP,
    workers: int = 1,
    dtype="float32",
    seed: int = 0,
) -> tuple[list[SweepRow], bool]:
    """Total forward time per S. Returns the rows and whether time is non-increasing in S."""
    h, w = _hw(resolution)
    configs = []
    for s in s_values:
        if s > min(h, w):
            raise ConfigurationError(f"S = {s} at {h}x{w} leaves an empty parameter grid")
        cfg = dataclasses.replace(config, total_downsampling=int(s))
        configs.append((int(s), cfg, compute_factors(h, w, cfg)))
    rows = []
    for s, cfg, f in configs:
        rep = time_breakdown(cfg, [(h, w)], reps, warmup, workers, dtype, seed)
        if (h, w) in rep.failures:
            raise MemoryError(rep.failures[(h, w)])
        t = rep.timings[(h, w)]
        rows.append(
            SweepRow(
                s, f.grid, cfg.mlp_spec(f.encoding_depth).param_count,
                sum(v.median_ms for v in t.values()), t["hypernet"].median_ms, t["pixelwise"].median_ms,
            )
        )
    ordered = sorted(rows, key=lambda r: r.S)
    monotone = all(a.total_ms >= b.total_ms for a, b in zip(ordered, ordered[1:]))
    return rows, monotone


def sweep_table(rows: list[SweepRow]) -> str:
    dicts = [
        {"S": r.S, "grid": f"{r.grid[0]}x{r.grid[1]}", "param_count": r.param_count,
         "total_ms": r.total_ms, "hypernet_ms": r.hypernet_ms, "pixelwise_ms": r.pixelwise_ms}
        for r in rows
    ]
    return format_table(dicts, ("S", "grid", "param_count", "total_ms", "hypernet_ms", "pixelwise_ms"))
