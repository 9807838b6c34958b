"""Toy-scale comparison of the training schemes on synthetic textures."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .noise_model import BUILTIN_PRESETS
from .schedule import Schedule, build_schedule
from .training import TrainConfig, Validator, make_textures, train

log = logging.getLogger(__name__)


@dataclass
class AblationSpec:
    schemes: tuple = ("C1", "C2", "C3", "B1")
    iterations: int | None = 6000
    n_train: int = 200
    n_val: int = 6
    size: int = 32
    crop: int = 16
    batch: int = 16
    learning_rate: float = 2e-3
    val_points: int = 15
    val_preset: str = "gain16"
    seed: int = 0
    schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations is None:
            self.iterations = 6000
        self.schemes = tuple(self.schemes)

    def build_schedule(self) -> Schedule:
        return build_schedule(**self.schedule) if self.schedule else build_schedule()

    def train_config(self, scheme: str) -> TrainConfig:
        return TrainConfig(scheme=scheme, iterations=self.iterations, crop=self.crop, batch=self.batch,
                           learning_rate=self.learning_rate, seed=self.seed,
                           val_every=max(self.iterations // self.val_points, 1))


def run_ablation(spec: AblationSpec) -> dict:
    """Train every scheme from the same seed; returns ``{scheme: log rows}``."""
    s = spec.build_schedule()
    data = make_textures(spec.n_train, spec.size, seed=spec.seed)
    val_imgs = make_textures(spec.n_val, spec.size, seed=spec.seed + 99)
    logs = {}
    for scheme in spec.schemes:
        validator = Validator(val_imgs, BUILTIN_PRESETS[spec.val_preset].params(), s)
        t0 = time.perf_counter()
        logs[scheme] = train(data, spec.train_config(scheme), s, validator).log
        log.info("%s trained in %.0f s", scheme, time.perf_counter() - t0)
    return logs


def _smooth(v: np.ndarray, k: int = 3) -> np.ndarray:
    """Centered running mean that shrinks the window at the ends."""
    out = np.empty_like(v)
    for i in range(len(v)):
        lo, hi = max(0, i - k // 2), min(len(v), i + k // 2 + 1)
        out[i] = v[lo:hi].mean()
    return out


def summarize(logs: dict) -> dict:
    """Final and peak validation SSIM per scheme (the t=0 row is skipped)."""
    out = {}
    for scheme, rows in logs.items():
        ssim = np.array([r["val_ssim"] for r in rows[1:]], dtype=float)
        psnr = np.array([r["val_psnr"] for r in rows[1:]], dtype=float)
        out[scheme] = {"final_ssim": float(ssim[-1]), "peak_ssim": float(ssim.max()),
                       "peak_iter": int(rows[1 + int(ssim.argmax())]["iter"]),
                       "final_psnr": float(psnr[-1]), "untrained_ssim": float(rows[0]["val_ssim"]),
                       "smoothed_final_ssim": float(_smooth(ssim)[-1])}
    return out


def ordering_holds(summary: dict) -> dict:
    """Each ordering / signature check as a boolean."""
    f = {k: v["final_ssim"] for k, v in summary.items()}
    checks = {}
    if {"C1", "C2", "C3"} <= f.keys():
        checks["C3>C2>C1"] = f["C3"] > f["C2"] > f["C1"]
    if {"C3", "B1"} <= f.keys():
        checks["C3>B1"] = f["C3"] > f["B1"]
    if "C1" in summary:
        checks["C1 collapses"] = summary["C1"]["final_ssim"] <= summary["C1"]["peak_ssim"] - 0.05
    if "C3" in summary:
        checks["C3 stable"] = summary["C3"]["final_ssim"] >= summary["C3"]["peak_ssim"] - 0.02
    return checks


def write_ablation(out_dir, logs: dict, spec: AblationSpec) -> None:
    """CSV of every log row, JSON summary and the validation-curve figures."""
    from .plotting import plot_training_curves
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "iter", "loss", "val_psnr", "val_ssim"])
        for scheme, rows in logs.items():
            for r in rows:
                w.writerow([scheme, r["iter"]] + [f"{r[k]:.6f}" for k in ("loss", "val_psnr", "val_ssim")])
    summary = summarize(logs)
    (out / "summary.json").write_text(json.dumps(
        {"spec": asdict(spec), "summary": summary, "checks": ordering_holds(summary)}, indent=2))
    plot_training_curves(logs, out / "val_ssim.png", "val_ssim")
    plot_training_curves(logs, out / "val_psnr.png", "val_psnr")
