"""Backward-Euler heat conduction on a square grid with zero Dirichlet boundary.

The forward map takes an initial temperature field ``x`` to the field after
``nt`` implicit steps, ``A x = (I + dt K)^{-nt} x`` with ``K = kappa * (-Lap_h)``
and ``Lap_h`` the 5-point Laplacian on ``n x n`` interior nodes spaced
``h = L / (n + 1)``.

Because the stencil has constant coefficients, ``I + dt K`` is diagonalised
exactly by the orthonormal type-I discrete sine transform; :meth:`ForwardOperator.apply`
uses that factorisation.  :meth:`ForwardOperator.single_step_solve` solves a
single step with Jacobi-preconditioned conjugate gradients and
:meth:`ForwardOperator.apply_stepped` chains ``nt`` of those solves.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import fft

__all__ = [
    "HeatOpConfig",
    "ForwardOperator",
    "SolverError",
    "FieldFormatError",
    "assemble_operator",
    "conjugate_gradient",
    "neg_laplacian",
    "write_field",
    "read_field",
    "write_spectrum_csv",
]


class SolverError(RuntimeError):
    pass


class FieldFormatError(ValueError):
    pass


@dataclass(frozen=True)
class HeatOpConfig:
    n: int = 32
    L: float = 2.0 * math.pi
    kappa: float = 0.64
    dt: float = 0.01
    nt: int = 100
    boundary: str = "dirichlet"

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid size n must be an integer >= 3, got {self.n}")
        if not self.L > 0:
            raise ValueError("domain length L must be positive")
        if not self.kappa >= 0:
            raise ValueError("conductivity kappa must be >= 0")
        if not self.dt > 0:
            raise ValueError("time step dt must be positive")
        if int(self.nt) != self.nt or self.nt < 0:
            raise ValueError("number of time steps nt must be a non-negative integer")
        if self.boundary != "dirichlet":
            raise ValueError(f"unsupported boundary condition {self.boundary!r}")

    @property
    def h(self) -> float:
        return self.L / (self.n + 1)


def neg_laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """Apply ``-Lap_h`` with zero Dirichlet data to the trailing two axes of ``u``."""
    p = np.pad(u, [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)])
    out = 4.0 * u - p[..., :-2, 1:-1] - p[..., 2:, 1:-1] - p[..., 1:-1, :-2] - p[..., 1:-1, 2:]
    return out / (h * h)


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    *,
    tol: float = 1e-12,
    maxiter: int | None = None,
    diag: np.ndarray | float | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Solve ``M x = b`` for SPD ``M`` given as a matvec.

    Stops when ``||b - M x|| <= tol * ||b||`` (true residual, recomputed at
    exit).  ``diag`` is an optional Jacobi preconditioner.  Returns the
    solution and the iteration count; raises :class:`SolverError` if the
    tolerance is not met within ``maxiter`` iterations.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    if maxiter is None:
        maxiter = 10 * b.size + 100
    inv_diag = 1.0 if diag is None else 1.0 / diag
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    target = tol * bnorm
    for restart in range(3):
        s = inv_diag * r
        p = s.copy()
        rs = np.vdot(r, s)
        it = 0
        while np.linalg.norm(r) > target and it < maxiter:
            q = matvec(p)
            alpha = rs / np.vdot(p, q)
            x += alpha * p
            r -= alpha * q
            s = inv_diag * r
            rs_new = np.vdot(r, s)
            p = s + (rs_new / rs) * p
            rs = rs_new
            it += 1
        # guard against drift between the recursive and true residual
        r = b - matvec(x)
        if np.linalg.norm(r) <= target:
            return x, it
    raise SolverError(
        f"conjugate gradient did not reach relative residual {tol:g} "
        f"(got {np.linalg.norm(r) / bnorm:.3e})"
    )


def _dst2(u: np.ndarray) -> np.ndarray:
    return fft.dstn(u, type=1, axes=(-2, -1), norm="ortho")


class ForwardOperator:
    """The discrete heat map ``A = (I + dt K)^{-nt}``; immutable after construction."""

    def __init__(self, cfg: HeatOpConfig):
        self.cfg = cfg
        n, h = cfg.n, cfg.h
        j = np.arange(1, n + 1)
        mu1 = (4.0 / h**2) * np.sin(j * np.pi / (2 * (n + 1))) ** 2
        # eigenvalues of -Lap_h on the sine basis, indexed [row mode, column mode]
        self.laplacian_eigs = mu1[:, None] + mu1[None, :]
        self.step_eigs = 1.0 + cfg.dt * cfg.kappa * self.laplacian_eigs
        self.gain = self.step_eigs ** (-float(cfg.nt))
        self._diag = 1.0 + cfg.dt * cfg.kappa * 4.0 / h**2
        for a in (self.laplacian_eigs, self.step_eigs, self.gain):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.cfg.n

    def _as_grid(self, x) -> tuple[np.ndarray, tuple[int, ...]]:
        x = np.asarray(x, dtype=np.float64)
        n = self.cfg.n
        if x.shape[-2:] == (n, n):
            return x, x.shape
        if x.shape[-1:] == (n * n,):
            return x.reshape(x.shape[:-1] + (n, n)), x.shape
        raise ValueError(f"field shape {x.shape} does not match a {n}x{n} grid")

    def step_matvec(self, u: np.ndarray) -> np.ndarray:
        """``(I + dt K) u`` on grid-shaped ``u``."""
        c = self.cfg
        return u + (c.dt * c.kappa) * neg_laplacian(u, c.h)

    def apply(self, x) -> np.ndarray:
        """``A x``.  Accepts ``(..., n, n)`` or ``(..., n*n)`` arrays and keeps the shape."""
        u, shape = self._as_grid(x)
        return _dst2(self.gain * _dst2(u)).reshape(shape)

    def apply_adjoint(self, y) -> np.ndarray:
        """``A^T y``; ``A`` is symmetric so this is the same map as :meth:`apply`."""
        u, shape = self._as_grid(y)
        return _dst2(self.gain * _dst2(u)).reshape(shape)

    def single_step_solve(self, v, tol: float = 1e-12) -> np.ndarray:
        """Solve ``(I + dt K) u = v`` with Jacobi-preconditioned CG."""
        v, shape = self._as_grid(v)
        if v.ndim != 2:
            raise ValueError("single_step_solve takes one field")
        if not np.all(np.isfinite(v)):
            raise ValueError("right-hand side contains non-finite values")
        u, _ = conjugate_gradient(self.step_matvec, v, tol=tol, diag=self._diag)
        return u.reshape(shape)

    def apply_stepped(self, x, tol: float = 1e-12) -> np.ndarray:
        """``A x`` by ``nt`` successive CG solves (slow reference route)."""
        u, shape = self._as_grid(x)
        for _ in range(self.cfg.nt):
            u = self.single_step_solve(u, tol=tol)
        return np.asarray(u).reshape(shape)

    def dense_matrix(self) -> np.ndarray:
        """The ``n^2 x n^2`` matrix of ``A`` built column by column from :meth:`apply`."""
        n = self.cfg.n
        eye = np.eye(n * n).reshape(n * n, n, n)
        return self.apply(eye).reshape(n * n, n * n).T

    def spectrum(self, k: int | None = None, *, method: str = "auto", seed: int = 0) -> np.ndarray:
        """Top-``k`` eigenvalues of ``A`` in descending order.

        ``method`` is ``"modal"`` (closed-form sine-mode eigenvalues, exact to
        relative rounding even in the far tail), ``"dense"`` (eigendecomposition
        of :meth:`dense_matrix`, absolute accuracy only) or ``"subspace"``
        (orthogonal iteration with Rayleigh-Ritz).  ``"auto"`` means modal.
        Degenerate modes appear once per multiplicity.
        """
        n2 = self.cfg.n**2
        k = n2 if k is None else int(k)
        if not 1 <= k <= n2:
            raise ValueError(f"k must lie in [1, {n2}], got {k}")
        if method in ("auto", "modal"):
            return np.sort(self.gain, axis=None)[::-1][:k].copy()
        if method == "dense":
            m = self.dense_matrix()
            w = np.linalg.eigvalsh(0.5 * (m + m.T))
            return w[::-1][:k].copy()
        if method == "subspace":
            return self._subspace_eigs(k, seed)
        raise ValueError(f"unknown spectrum method {method!r}")

    def _subspace_eigs(self, k: int, seed: int, maxiter: int = 2000, tol: float = 1e-13) -> np.ndarray:
        n, n2 = self.cfg.n, self.cfg.n**2
        p = min(n2, k + 8)
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((n2, p)))
        prev = None
        for _ in range(maxiter):
            z = self.apply(q.T.reshape(p, n, n)).reshape(p, n2).T
            q, _ = np.linalg.qr(z)
            t = q.T @ self.apply(q.T.reshape(p, n, n)).reshape(p, n2).T
            w = np.linalg.eigvalsh(0.5 * (t + t.T))[::-1][:k]
            if prev is not None and np.all(np.abs(w - prev) <= tol * np.abs(w)):
                return w
            prev = w
        raise SolverError("orthogonal iteration did not converge")


def assemble_operator(cfg: HeatOpConfig | None = None) -> ForwardOperator:
    return ForwardOperator(cfg or HeatOpConfig())


_FIELD_MAGIC = b"GPF1"


def write_field(path, values: np.ndarray) -> None:
    """Write a square field as ``GPF1``: magic, u32 n, u32 n, n*n little-endian f64."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        n = math.isqrt(v.size)
        if n * n != v.size:
            raise ValueError("flat field length is not a perfect square")
        v = v.reshape(n, n)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValueError(f"field must be square, got shape {v.shape}")
    n = v.shape[0]
    with open(path, "wb") as f:
        f.write(_FIELD_MAGIC + struct.pack("<II", n, n))
        f.write(v.astype("<f8").tobytes())


def read_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _FIELD_MAGIC:
        raise FieldFormatError(f"{path}: not a GPF1 field file")
    n1, n2 = struct.unpack_from("<II", data, 4)
    if n1 != n2:
        raise FieldFormatError(f"{path}: non-square header {n1}x{n2}")
    expected = 12 + 8 * n1 * n2
    if len(data) != expected:
        raise FieldFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=12).astype(np.float64).reshape(n1, n2)


def write_spectrum_csv(path, eigenvalues: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(["mode_index", "eigenvalue"])
        for i, lam in enumerate(eigenvalues, start=1):
            w.writerow([i, repr(float(lam))])
