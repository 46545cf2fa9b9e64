"""Run-directory plumbing: metrics CSV, summaries, locks, image files."""

from __future__ import annotations

import json
import os
from contextlib import contextmanager

import numpy as np

from .errors import ContractError

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
RESOLVED_CONFIG_FILE = "resolved-config.txt"
LOCK_FILE = ".divc-lock"


def metrics_header(condition_ids) -> list:
    return ["step", "l_diff", "l_repa", "l_total", "lr"] + \
        [f"cond_{c}" for c in condition_ids]


class MetricsWriter:
    """Append-only CSV stream; one row per optimizer step."""

    def __init__(self, run_dir, condition_ids, resume: bool = False):
        self.path = os.path.join(run_dir, METRICS_FILE)
        self.header = metrics_header(condition_ids)
        mode = "a" if resume and os.path.exists(self.path) else "w"
        self._fh = open(self.path, mode, encoding="utf-8")
        if mode == "w":
            self._fh.write(",".join(self.header) + "\n")

    def write(self, step: int, l_diff: float, l_repa: float, l_total: float,
              lr: float, per_condition) -> None:
        row = [str(step)] + [repr(float(v))
                             for v in (l_diff, l_repa, l_total, lr)]
        row += [repr(float(v)) for v in per_condition]
        self._fh.write(",".join(row) + "\n")

    def flush(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self.flush()
        self._fh.close()


def read_metrics(run_dir):
    path = os.path.join(run_dir, METRICS_FILE)
    if not os.path.exists(path):
        raise ContractError(f"no metrics found under '{run_dir}'")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    return header, rows


def export_metrics(run_dir, extra: dict | None = None) -> dict:
    """Write summary.json derived from metrics.csv; re-export is idempotent.

    Derived fields are recomputed from the CSV; any previously stored or
    newly passed extra fields are preserved under their own keys.
    """
    header, rows = read_metrics(run_dir)
    summary_path = os.path.join(run_dir, SUMMARY_FILE)
    summary: dict = {}
    if os.path.exists(summary_path):
        with open(summary_path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
    if extra:
        summary.update(extra)
    if rows:
        last = dict(zip(header, rows[-1]))
        summary["steps_recorded"] = len(rows)
        summary["final"] = {k: last[k] for k in header}
        tail = rows[-min(100, len(rows)):]
        idx = {name: i for i, name in enumerate(header)}
        summary["final_100_mean_l_diff"] = float(
            np.mean([r[idx["l_diff"]] for r in tail]))
    tmp = summary_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, summary_path)
    return summary


def write_resolved_config(run_dir, text: str) -> None:
    with open(os.path.join(run_dir, RESOLVED_CONFIG_FILE), "w",
              encoding="utf-8") as fh:
        fh.write(text)


@contextmanager
def run_lock(run_dir):
    """Single-writer lock on a run directory (O_EXCL lock file)."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(
            f"run directory '{run_dir}' is locked by another writer "
            f"(remove {LOCK_FILE} if that run is dead)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(path):
            os.unlink(path)


# ----------------------------------------------------------------------
# images
# ----------------------------------------------------------------------

def _to_u8(img: np.ndarray) -> np.ndarray:
    scaled = np.clip((np.asarray(img) + 1.0) * 0.5, 0.0, 1.0) * 255.0
    return np.round(scaled).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit grayscale PGM (binary P5), input in [-1, 1]."""
    u8 = _to_u8(img)
    if u8.ndim != 2:
        raise ContractError("write_pgm expects a 2-D image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """8-bit RGB PPM (binary P6); grayscale input is replicated per channel."""
    u8 = _to_u8(img)
    if u8.ndim == 2:
        u8 = np.stack([u8] * 3, axis=-1)
    if u8.ndim != 3 or u8.shape[-1] != 3:
        raise ContractError("write_ppm expects (H, W) or (H, W, 3)")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def image_grid(images, columns: int, pad: int = 1, fill: float = -1.0) -> np.ndarray:
    """Tile equally sized [-1, 1] images into one image, row-major."""
    images = [np.asarray(im) for im in images]
    h, w = images[0].shape
    rows = (len(images) + columns - 1) // columns
    grid = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad), fill)
    for i, im in enumerate(images):
        r, c = divmod(i, columns)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        grid[top:top + h, left:left + w] = im
    return grid
