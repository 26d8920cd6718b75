"""Rectangular-patch temperature fields, the training set and noisy measurements."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heat import ForwardOperator

__all__ = [
    "PatchParams",
    "Dataset",
    "NoiseModel",
    "MeasurementProblem",
    "DatasetFormatError",
    "sample_patch",
    "rasterize",
    "paper_target",
    "node_coordinates",
    "build_dataset",
    "make_measurement",
    "write_dataset",
    "read_dataset",
]

TOP_LEFT_RANGE = (0.2, 0.4)
BOTTOM_RIGHT_RANGE = (0.6, 0.8)
AMPLITUDE_RANGE = (9.0, 11.0)


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PatchParams:
    """Corners in length units; ``u`` is horizontal, ``v`` vertical (positive downward)."""

    top_left: tuple[float, float]
    bottom_right: tuple[float, float]
    amplitude: float

    def as_array(self) -> np.ndarray:
        return np.array([*self.top_left, *self.bottom_right, self.amplitude])

    @classmethod
    def from_array(cls, a) -> "PatchParams":
        a = [float(x) for x in a]
        return cls((a[0], a[1]), (a[2], a[3]), a[4])

    def is_valid(self, L: float) -> bool:
        lo, hi = TOP_LEFT_RANGE
        lo2, hi2 = BOTTOM_RIGHT_RANGE
        return (
            all(lo * L <= c <= hi * L for c in self.top_left)
            and all(lo2 * L <= c <= hi2 * L for c in self.bottom_right)
            and AMPLITUDE_RANGE[0] <= self.amplitude <= AMPLITUDE_RANGE[1]
        )


def sample_patch(rng: np.random.Generator, L: float = 2.0 * math.pi) -> PatchParams:
    tl = rng.uniform(TOP_LEFT_RANGE[0] * L, TOP_LEFT_RANGE[1] * L, size=2)
    br = rng.uniform(BOTTOM_RIGHT_RANGE[0] * L, BOTTOM_RIGHT_RANGE[1] * L, size=2)
    amp = rng.uniform(*AMPLITUDE_RANGE)
    return PatchParams((float(tl[0]), float(tl[1])), (float(br[0]), float(br[1])), float(amp))


def node_coordinates(n: int, L: float) -> np.ndarray:
    """Coordinates ``(k + 1) * h`` of the ``n`` interior nodes along one axis."""
    return np.arange(1, n + 1) * (L / (n + 1))


def rasterize(params: PatchParams, n: int, L: float = 2.0 * math.pi) -> np.ndarray:
    """Field equal to the amplitude on nodes inside the closed rectangle, zero elsewhere.

    Rows index the vertical coordinate ``v`` and columns the horizontal ``u``.
    """
    c = node_coordinates(n, L)
    (u0, v0), (u1, v1) = params.top_left, params.bottom_right
    cols = (c >= u0) & (c <= u1)
    rows = (c >= v0) & (c <= v1)
    return np.where(rows[:, None] & cols[None, :], params.amplitude, 0.0)


def paper_target(L: float = 2.0 * math.pi, amplitude: float = 10.0) -> PatchParams:
    """Centered square patch of edge ``L/2``."""
    return PatchParams((0.25 * L, 0.25 * L), (0.75 * L, 0.75 * L), amplitude)


@dataclass
class Dataset:
    n: int
    L: float
    fields: np.ndarray  # (count, n, n)
    params: np.ndarray | None = None  # (count, 5)
    seed: int = 0

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 3 or self.fields.shape[1:] != (self.n, self.n):
            raise ValueError(f"fields must have shape (count, {self.n}, {self.n})")
        if len(self.fields) < 1:
            raise ValueError("a dataset needs at least one field")
        if self.params is not None:
            self.params = np.asarray(self.params, dtype=np.float64)
            if self.params.shape != (len(self.fields), 5):
                raise ValueError("params must have shape (count, 5)")

    def __len__(self) -> int:
        return len(self.fields)

    def flat(self) -> np.ndarray:
        return self.fields.reshape(len(self.fields), -1)

    def patches(self) -> list[PatchParams]:
        if self.params is None:
            return []
        return [PatchParams.from_array(p) for p in self.params]


def build_dataset(count: int, seed: int, n: int, L: float = 2.0 * math.pi) -> Dataset:
    """``count`` rasterized random patches; sample ``k`` uses its own child stream of ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(count)
    fields = np.empty((count, n, n))
    params = np.empty((count, 5))
    for k, ss in enumerate(streams):
        p = sample_patch(np.random.default_rng(ss), L)
        params[k] = p.as_array()
        fields[k] = rasterize(p, n, L)
    return Dataset(n=n, L=L, fields=fields, params=params, seed=seed)


@dataclass(frozen=True)
class NoiseModel:
    """iid Gaussian measurement noise with standard deviation ``sigma``."""

    sigma: float = 1.0
    structure: str = "iid"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("noise sigma must be positive")
        if self.structure != "iid":
            raise ValueError(f"unsupported noise structure {self.structure!r}")


@dataclass
class MeasurementProblem:
    target: np.ndarray
    clean: np.ndarray
    observed: np.ndarray
    noise: NoiseModel
    target_params: PatchParams
    op_config: object = field(repr=False, default=None)

    @property
    def noise_to_signal(self) -> float:
        return float(np.linalg.norm(self.observed - self.clean) / np.linalg.norm(self.clean))


def make_measurement(
    op: ForwardOperator,
    rng: np.random.Generator,
    noise: NoiseModel | None = None,
    mode: str = "paper-target",
) -> MeasurementProblem:
    """Target field, its image under ``op`` and a noisy copy ``y* + sigma * N(0, I)``."""
    noise = noise or NoiseModel()
    L, n = op.cfg.L, op.cfg.n
    if mode == "paper-target":
        params = paper_target(L)
    elif mode == "random":
        params = sample_patch(rng, L)
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    x = rasterize(params, n, L)
    y = op.apply(x)
    y_hat = y + noise.sigma * rng.standard_normal(y.shape)
    return MeasurementProblem(x, y, y_hat, noise, params, op.cfg)


_DATASET_MAGIC = b"GPD1"
_HAS_PARAMS = 1
# magic, u32 count, u32 n, u32 n, u64 seed, u32 flags, f64 L
_HEADER = struct.Struct("<4sIIIQId")


def write_dataset(dataset: Dataset, path) -> None:
    flags = _HAS_PARAMS if dataset.params is not None else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_DATASET_MAGIC, len(dataset), dataset.n, dataset.n, dataset.seed, flags, dataset.L))
        f.write(dataset.fields.astype("<f8").tobytes())
        if dataset.params is not None:
            f.write(dataset.params.astype("<f8").tobytes())


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != _DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a GPD1 dataset file")
    _, count, n1, n2, seed, flags, L = _HEADER.unpack_from(data)
    if n1 != n2:
        raise DatasetFormatError(f"{path}: non-square grid header {n1}x{n2}")
    n_fields = count * n1 * n2
    n_params = 5 * count if flags & _HAS_PARAMS else 0
    expected = _HEADER.size + 8 * (n_fields + n_params)
    if len(data) != expected:
        raise DatasetFormatError(
            f"{path}: truncated or oversized payload ({len(data)} bytes, header implies {expected})"
        )
    fields = np.frombuffer(data, "<f8", count=n_fields, offset=_HEADER.size).reshape(count, n1, n2)
    params = None
    if n_params:
        params = np.frombuffer(data, "<f8", count=n_params, offset=_HEADER.size + 8 * n_fields).reshape(count, 5)
        params = params.astype(np.float64)
    return Dataset(n=n1, L=L, fields=fields.astype(np.float64), params=params, seed=seed)
