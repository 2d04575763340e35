"""Train the toy configuration and report the smoke-test quantities.

    python3 scripts/toy_training.py [--config configs/toy.json] [--out runs/toy]
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from asapnet.cli import run_training
from asapnet.config import config_load
from asapnet.data import highband_energy_fraction, synth_dataset, write_image
from asapnet.generator import generator_forward
from asapnet.hypernet import compute_factors

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.json")
    p.add_argument("--out", type=Path, default=ROOT / "runs" / "toy")
    p.add_argument("--override", action="append", default=[])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = config_load(args.config, args.override)
    args.out.mkdir(parents=True, exist_ok=True)
    state = run_training(cfg, args.out / "model.ckpt")

    g = state.g_total()
    s = compute_factors(cfg.data.size, cfg.data.size, cfg.generator).total
    data = synth_dataset(cfg.data)
    x = np.concatenate([d.input for d in data]).astype(cfg.train.dtype)
    y = np.concatenate([d.target for d in data])
    out, _ = generator_forward(state.generator(cfg.generator), x, keep_cache=False)
    for i in range(min(4, len(data))):
        write_image(out[i : i + 1], args.out / f"sample{i}_output.png")
        write_image(y[i : i + 1], args.out / f"sample{i}_target.png")

    summary = {
        "S": s,
        "steps": state.step,
        "g_total_step50": float(g[49]) if len(g) >= 50 else None,
        "g_total_final": float(g[-1]),
        "ratio_final_over_step50": float(g[-1] / g[49]) if len(g) >= 50 else None,
        "highband_output": highband_energy_fraction(out, s),
        "highband_target": highband_energy_fraction(y, s),
        "all_finite": bool(np.isfinite(np.array(state.loss_history)).all()),
    }
    print(json.dumps(summary, indent=2))
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
