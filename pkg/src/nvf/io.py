"""Run artefacts: PPM images with scale sidecars, CSV tables, the run manifest."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .evaluation import MetricsRecord


def write_ppm(path, rgb) -> None:
    """Binary P6 image from floats in [0, 1], shape (H, W, 3)."""
    img = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pix = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / maxval


def colormap(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map [lo, hi] linearly to t in [0, 1], then to rgb = (t, 1 - |2t - 1|, 1 - t)."""
    t = np.zeros_like(values, dtype=np.float64) if hi <= lo else np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return np.stack([t, 1.0 - np.abs(2.0 * t - 1.0), 1.0 - t], axis=-1)


def write_scalar_image(path, values: np.ndarray, unit: str = "nats") -> tuple[float, float]:
    """Colour-mapped PPM plus a ``.txt`` sidecar recording the value range."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    write_ppm(path, colormap(values, lo, hi))
    sidecar = Path(path).with_suffix(".txt")
    sidecar.write_text(
        f"min {lo!r}\nmax {hi!r}\nunit {unit}\n"
        "colormap linear: t = (value - min) / (max - min); rgb = (t, 1 - |2t - 1|, 1 - t)\n"
    )
    return lo, hi


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRecord.header())
        for r in records:
            w.writerow(r.row())


def write_candidates_csv(path, steps) -> None:
    """One row per candidate: step, index, 12 pose numbers, entropy, selected flag."""
    pose_cols = [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "candidate", *pose_cols, "entropy", "selected"])
        for rec in steps:
            cands = rec.candidates
            for i, pose in enumerate(cands.poses):
                w.writerow([rec.step, i, *(f"{x:.9g}" for x in pose.flat()), f"{cands.entropies[i]:.9g}",
                            int(i == rec.selected)])


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
