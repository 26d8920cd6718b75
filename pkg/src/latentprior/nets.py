"""Dense generator and critic networks built on :mod:`latentprior.autodiff` tapes.

Batches are row vectors: a layer computes ``act(x @ W + b)`` with ``W`` of
shape ``(n_in, n_out)``.  The generator ends in ``tanh`` followed by a fixed
affine map ``out_scale * t + out_shift`` so its range is the temperature band
``[out_shift - out_scale, out_shift + out_scale]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape, as_tensor

__all__ = [
    "Layer",
    "MLP",
    "GeneratorNet",
    "CriticNet",
    "WeightsFormatError",
    "ArchitectureMismatch",
    "save_weights",
    "load_weights",
    "sample_prior_latent",
]

ACTIVATIONS = ("linear", "leaky_relu", "tanh")


@dataclass(frozen=True)
class Layer:
    n_in: int
    n_out: int
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer dimensions must be positive")


class MLP:
    """A stack of dense layers with an output affine map.

    Parameters live in ``self.params`` as a flat list ``[W0, b0, W1, b1, ...]``.
    Tapes are built lazily per batch size and cached; an ``MLP`` is safe to
    share for reading, but tape evaluation is not re-entrant across threads.
    """

    kind = "mlp"

    def __init__(
        self,
        layers: Sequence[Layer],
        params: Sequence[np.ndarray] | None = None,
        *,
        slope: float = 0.2,
        out_scale: float = 1.0,
        out_shift: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        layers = tuple(layers)
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = layers
        self.slope = float(slope)
        self.out_scale = float(out_scale)
        self.out_shift = float(out_shift)
        if params is None:
            params = self._init_params(rng or np.random.default_rng(0))
        self.params = [as_tensor(p) for p in params]
        self._check_params()
        self._tapes: dict[int, Tape] = {}

    def _init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            gain = np.sqrt(2.0 / (1.0 + self.slope**2)) if layer.activation == "leaky_relu" else 1.0
            out.append(rng.standard_normal((layer.n_in, layer.n_out)) * (gain / np.sqrt(layer.n_in)))
            out.append(np.zeros(layer.n_out))
        return out

    def _check_params(self):
        if len(self.params) != 2 * len(self.layers):
            raise ValueError("expected one weight and one bias per layer")
        for layer, w, b in zip(self.layers, self.params[::2], self.params[1::2]):
            if w.shape != (layer.n_in, layer.n_out) or b.shape != (layer.n_out,):
                raise ValueError(f"parameter shapes {w.shape}, {b.shape} do not fit {layer}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def param_names(self) -> list[str]:
        return [f"{p}{i}" for i in range(len(self.layers)) for p in ("W", "b")]

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = [p.copy() for p in self.params]
        new._tapes = {}
        return new

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "layers": [(l.n_in, l.n_out, l.activation) for l in self.layers],
            "slope": self.slope,
            "out_scale": self.out_scale,
            "out_shift": self.out_shift,
        }

    # -- tape -----------------------------------------------------------------

    def tape(self, batch: int) -> Tape:
        t = self._tapes.get(batch)
        if t is None:
            t = self._build_tape(batch)
            self._tapes[batch] = t
        return t

    def _build_tape(self, batch: int) -> Tape:
        t = Tape()
        h = t.input("x", (batch, self.n_in))
        for i, layer in enumerate(self.layers):
            w = t.input(f"W{i}", (layer.n_in, layer.n_out))
            b = t.input(f"b{i}", (layer.n_out,))
            h = t.add(t.matmul(h, w), b)
            if layer.activation == "leaky_relu":
                h = t.leaky_relu(h, self.slope)
            elif layer.activation == "tanh":
                h = t.tanh(h)
        if self.out_scale != 1.0:
            h = t.scale(h, self.out_scale)
        if self.out_shift != 0.0:
            h = t.add(h, t.input("out_shift", (self.n_out,)))
        t.set_outputs(h)
        return t

    def _feed(self, x: np.ndarray) -> dict[str, np.ndarray]:
        feed = dict(zip(self.param_names(), self.params))
        feed["x"] = x
        if self.out_shift != 0.0:
            feed["out_shift"] = np.full(self.n_out, self.out_shift)
        return feed

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input of shape (batch, {self.n_in}), got {x.shape}")
        (y,) = self.tape(x.shape[0]).forward(self._feed(x))
        return y

    def vjp_batch(self, x: np.ndarray, cotangent: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward on ``x`` then pull ``cotangent`` back; returns (grad wrt x, grads wrt params)."""
        x = as_tensor(x)
        tape = self.tape(x.shape[0])
        tape.forward(self._feed(x))
        g = tape.backward(cotangent)
        return g["x"], [g[name] for name in self.param_names()]


class GeneratorNet(MLP):
    """Maps latent vectors of length ``latent_dim`` to ``n x n`` fields."""

    kind = "generator"

    @classmethod
    def build(
        cls,
        latent_dim: int = 8,
        n: int = 16,
        hidden: Sequence[int] = (64, 256),
        *,
        slope: float = 0.2,
        out_range: tuple[float, float] = (0.0, 12.0),
        rng: np.random.Generator | None = None,
    ) -> "GeneratorNet":
        dims = [latent_dim, *hidden, n * n]
        layers = [Layer(a, b, "leaky_relu") for a, b in zip(dims[:-2], dims[1:-1])]
        layers.append(Layer(dims[-2], dims[-1], "tanh"))
        lo, hi = out_range
        return cls(layers, slope=slope, out_scale=(hi - lo) / 2, out_shift=(hi + lo) / 2, rng=rng)

    @property
    def latent_dim(self) -> int:
        return self.n_in

    @property
    def grid_n(self) -> int:
        n = int(round(np.sqrt(self.n_out)))
        return n if n * n == self.n_out else -1

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Generator output for one latent vector, shaped ``(n, n)`` when square."""
        z = as_tensor(z)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent vector must have length {self.latent_dim}, got shape {z.shape}")
        y = self.forward_batch(z[None, :])[0]
        n = self.grid_n
        return y.reshape(n, n) if n > 0 else y

    def sample_fields(self, z: np.ndarray) -> np.ndarray:
        """Batch of outputs ``(count, n_out)`` for latent rows ``z``."""
        return self.forward_batch(np.atleast_2d(z))

    def vjp(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``(dg/dz)^T v`` for one latent vector."""
        z = as_tensor(z)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent vector must have length {self.latent_dim}, got shape {z.shape}")
        v = as_tensor(v).reshape(1, -1)
        if v.shape[1] != self.n_out:
            raise ValueError(f"cotangent must have {self.n_out} entries")
        gx, _ = self.vjp_batch(z[None, :], v)
        return gx[0]


class CriticNet(MLP):
    kind = "critic"

    @classmethod
    def build(
        cls,
        n: int = 16,
        hidden: Sequence[int] = (256, 64),
        *,
        slope: float = 0.2,
        rng: np.random.Generator | None = None,
    ) -> "CriticNet":
        dims = [n * n, *hidden]
        layers = [Layer(a, b, "leaky_relu") for a, b in zip(dims[:-1], dims[1:])]
        layers.append(Layer(dims[-1], 1, "linear"))
        return cls(layers, slope=slope, rng=rng)

    def score(self, x: np.ndarray) -> np.ndarray:
        """Critic values for a batch ``(batch, n*n)``; returns shape ``(batch,)``."""
        return self.forward_batch(x)[:, 0]


def sample_prior_latent(rng: np.random.Generator, count: int, latent_dim: int = 8) -> np.ndarray:
    """``count`` iid standard-normal latent vectors as rows of a ``(count, latent_dim)`` array."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.standard_normal((count, latent_dim))


# -- weights file ---------------------------------------------------------------

_WEIGHTS_MAGIC = b"GPW1"
_WEIGHTS_VERSION = 1
_KIND_IDS = {"mlp": 0, "generator": 1, "critic": 2}
_ACT_IDS = {name: i for i, name in enumerate(ACTIVATIONS)}


class WeightsFormatError(ValueError):
    pass


class ArchitectureMismatch(ValueError):
    pass


def save_weights(net: MLP, path) -> None:
    """Write ``GPW1``: magic, u16 version, u8 net kind, u32 layer count,
    per layer (u32 in, u32 out, u8 activation id), f64 slope, f64 output
    scale, f64 output shift, then every W and b as little-endian f64 in
    layer order."""
    parts = [
        _WEIGHTS_MAGIC,
        struct.pack("<HBI", _WEIGHTS_VERSION, _KIND_IDS[net.kind], len(net.layers)),
    ]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.n_in, layer.n_out, _ACT_IDS[layer.activation]))
    parts.append(struct.pack("<ddd", net.slope, net.out_scale, net.out_shift))
    for p in net.params:
        parts.append(p.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path, *, expected: MLP | dict | None = None, latent_dim: int | None = None) -> MLP:
    """Read a ``GPW1`` file.

    ``expected`` (a net or its :meth:`MLP.descriptor`) and ``latent_dim`` are
    optional architecture constraints; a mismatch raises :class:`ArchitectureMismatch`.
    """
    data = Path(path).read_bytes()
    if data[:4] != _WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic, not a GPW1 weights file")
    try:
        version, kind_id, n_layers = struct.unpack_from("<HBI", data, 4)
        if version != _WEIGHTS_VERSION:
            raise WeightsFormatError(f"{path}: unsupported weights version {version}")
        off = 4 + struct.calcsize("<HBI")
        kinds = {v: k for k, v in _KIND_IDS.items()}
        acts = {v: k for k, v in _ACT_IDS.items()}
        if kind_id not in kinds:
            raise WeightsFormatError(f"{path}: unknown network kind id {kind_id}")
        layers = []
        for _ in range(n_layers):
            n_in, n_out, act = struct.unpack_from("<IIB", data, off)
            off += struct.calcsize("<IIB")
            if act not in acts:
                raise WeightsFormatError(f"{path}: unknown activation id {act}")
            layers.append(Layer(n_in, n_out, acts[act]))
        slope, out_scale, out_shift = struct.unpack_from("<ddd", data, off)
        off += 24
    except struct.error as exc:
        raise WeightsFormatError(f"{path}: truncated header") from exc
    sizes = [s for l in layers for s in ((l.n_in, l.n_out), (l.n_out,))]
    total = sum(int(np.prod(s)) for s in sizes)
    if len(data) - off != 8 * total:
        raise WeightsFormatError(f"{path}: parameter payload has wrong length")
    flat = np.frombuffer(data, "<f8", count=total, offset=off).astype(np.float64)
    params, k = [], 0
    for s in sizes:
        m = int(np.prod(s))
        params.append(flat[k : k + m].reshape(s).copy())
        k += m
    kind = kinds[kind_id]
    desc = {
        "kind": kind,
        "layers": [(l.n_in, l.n_out, l.activation) for l in layers],
        "slope": slope,
        "out_scale": out_scale,
        "out_shift": out_shift,
    }
    if latent_dim is not None and layers[0].n_in != latent_dim:
        raise ArchitectureMismatch(
            f"{path}: file has input dimension {layers[0].n_in}, context expects latent dimension {latent_dim}"
        )
    if expected is not None:
        want = expected.descriptor() if isinstance(expected, MLP) else expected
        if want != desc:
            raise ArchitectureMismatch(f"{path}: architecture {desc} does not match expected {want}")
    cls = {"generator": GeneratorNet, "critic": CriticNet}.get(kind, MLP)
    try:
        return cls(layers, params, slope=slope, out_scale=out_scale, out_shift=out_shift)
    except ValueError as exc:
        raise WeightsFormatError(f"{path}: {exc}") from exc
