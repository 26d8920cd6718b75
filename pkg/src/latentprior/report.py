"""Image/CSV export, error metrics and the output-directory manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__

__all__ = [
    "export_pgm",
    "boundary_band",
    "error_metrics",
    "write_csv",
    "Manifest",
    "ManifestError",
    "OutputLock",
    "file_sha256",
]

FIXED_RANGE = (0.0, 12.0)


def export_pgm(field: np.ndarray, path, normalization: str = "fixed-range", vrange=FIXED_RANGE) -> None:
    """Write an 8-bit binary PGM (P5).

    ``fixed-range`` maps ``vrange`` linearly onto 0..255 with clamping;
    ``per-image`` maps the field's own min..max, and a constant field maps to
    all zeros.  Rounding is half-up.
    """
    v = np.asarray(field, dtype=np.float64)
    if v.ndim == 1:
        n = int(round(np.sqrt(v.size)))
        v = v.reshape(n, n)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot export a non-finite field")
    if normalization == "fixed-range":
        lo, hi = vrange
    elif normalization == "per-image":
        lo, hi = float(v.min()), float(v.max())
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if hi > lo:
        scaled = np.clip((v - lo) * (255.0 / (hi - lo)), 0.0, 255.0)
        pix = np.floor(scaled + 0.5).astype(np.uint8)
    else:
        pix = np.zeros(v.shape, dtype=np.uint8)
    rows, cols = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def boundary_band(support: np.ndarray, width: int = 2) -> np.ndarray:
    """Pixels within ``width`` steps (4-connected) of the edge of a binary support, on either side."""
    s = np.asarray(support, dtype=bool)
    return ndimage.binary_dilation(s, iterations=width) & ~ndimage.binary_erosion(s, iterations=width)


def error_metrics(x_est: np.ndarray, x_true: np.ndarray, band_width: int = 2) -> dict[str, float]:
    """Relative L2 error, max abs error and RMS error over the band around ``x_true``'s support."""
    x_est = np.asarray(x_est, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_est.size != x_true.size:
        raise ValueError("estimate and truth live on different grids")
    x_est = x_est.reshape(x_true.shape)
    norm = np.linalg.norm(x_true)
    if norm == 0.0:
        raise ValueError("relative error undefined for an all-zero truth")
    diff = x_est - x_true
    out = {"rel_l2": float(np.linalg.norm(diff) / norm), "max_abs": float(np.abs(diff).max())}
    if x_true.ndim == 2:
        band = boundary_band(x_true != 0, band_width)
        out["band_rms"] = float(np.sqrt(np.mean(diff[band] ** 2))) if band.any() else 0.0
    return out


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class ManifestError(RuntimeError):
    pass


class Manifest:
    """``manifest.json`` in an output directory: one provenance entry per produced file."""

    name = "manifest.json"

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / self.name
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"version": f"v{__version__}", "files": {}}

    def add(self, path, *, command: str, config_hash: str, seed: int | None = None, **extra) -> None:
        rel = Path(path).resolve().relative_to(self.root.resolve()).as_posix()
        entry = {"command": command, "config_hash": config_hash, "seed": seed}
        entry.update(extra)
        self.data["files"][rel] = entry

    def files(self) -> dict[str, dict]:
        return dict(self.data["files"])

    def check(self) -> None:
        missing = [f for f in self.data["files"] if not (self.root / f).exists()]
        if missing:
            raise ManifestError(f"manifest lists missing files: {', '.join(sorted(missing))}")

    def save(self) -> None:
        self.data["version"] = f"v{__version__}"
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


class OutputLock:
    """Exclusive lockfile guarding an output directory against concurrent invocations."""

    def __init__(self, root):
        self.path = Path(root) / ".lpb.lock"
        self._fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ManifestError(
                f"output directory {self.path.parent} is locked by another run (remove {self.path} if stale)"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        self.path.unlink(missing_ok=True)
        return False
