"""Regenerate the golden CLI fixture under tests/golden/.

The golden report freezes the exact output of one tiny divergence run; the
CLI test replays it and compares canonical bytes (wall_time excluded). Only
regenerate when an intentional behavior change invalidates the frozen file.
"""

import json
from pathlib import Path

import numpy as np

from nndiv.cli import main
from nndiv.data import SampleSet, save_nnds

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"

CONFIG = {
    "format_version": 1,
    "critic_spec": {"kind": "mlp", "input_shape": [1], "channel_multiplier": 1.0,
                    "mlp_hidden": [8]},
    "train_spec": {"iterations": 100, "batch_size": 8, "base_lr": 1e-3,
                   "lr_schedule": "linear_decay_to_zero", "adam_beta1": 0.0,
                   "adam_beta2": 0.9, "adam_eps": 1e-8, "gp_lambda": 10.0,
                   "ema_coefficient": 0.99, "seed": 0},
    "objective": {"kind": "wgan_gp"},
}


def main_() -> None:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    grid = np.linspace(-1.0, 1.0, 32, dtype=np.float32).reshape(32, 1)
    save_nnds(GOLDEN / "real.nnds", SampleSet(grid, provenance="golden real grid"))
    save_nnds(GOLDEN / "model.nnds", SampleSet(grid + 1.0, provenance="golden model grid"))
    (GOLDEN / "config.json").write_text(json.dumps(CONFIG, indent=2, sort_keys=True) + "\n")
    rc = main(["nnd",
               "--real", str(GOLDEN / "real.nnds"),
               "--model", str(GOLDEN / "model.nnds"),
               "--config", str(GOLDEN / "config.json"),
               "--seed", "7",
               "--out", str(GOLDEN / "report.json")])
    assert rc == 0
    print("wrote", GOLDEN / "report.json")


if __name__ == "__main__":
    main_()
