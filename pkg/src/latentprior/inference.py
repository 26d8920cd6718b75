"""Probing the posterior over the generator's latent space.

With a standard-normal latent prior and iid Gaussian noise of standard
deviation ``sigma``, the latent posterior is proportional to ``exp(-r(z)/2)``
where::

    r(z) = ||y_obs - f(g(z))||^2 / sigma^2 + ||z||^2

Three probes are provided: self-normalised Monte-Carlo with prior samples
(:func:`mc_estimate`), random-walk Metropolis-Hastings (:func:`mh_chain`,
:func:`summarize_chain`) and multi-restart BFGS for the MAP point
(:func:`latent_map`).  :func:`classical_map` solves the Gaussian-prior
problem directly in field space for comparison.

Fields are handled as flat vectors.  A *generator* is any object with
``latent_dim``, ``__call__(z)``, ``sample_fields(Z)`` and ``vjp(z, v)``; an
*operator* needs ``apply`` and ``apply_adjoint`` acting on the trailing axis.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .heat import conjugate_gradient, neg_laplacian
from .optim import bfgs_minimize

__all__ = [
    "IdentityOperator",
    "MatrixOperator",
    "IdentityGenerator",
    "LinearGenerator",
    "LatentPosteriorProblem",
    "PosteriorError",
    "ChainConfig",
    "ChainResult",
    "PosteriorSummary",
    "RestartRecord",
    "MapResult",
    "log_unnorm_posterior",
    "objective_r",
    "gradient_r",
    "latent_map",
    "mc_estimate",
    "mh_chain",
    "summarize_chain",
    "batch_means_se",
    "classical_map",
]

log = logging.getLogger(__name__)


class PosteriorError(RuntimeError):
    pass


# -- simple operators and generators for toy problems ---------------------------


class IdentityOperator:
    def apply(self, x):
        return np.array(x, dtype=np.float64)

    apply_adjoint = apply


class MatrixOperator:
    """Dense linear map acting on the trailing axis."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def apply_adjoint(self, y):
        return np.asarray(y, dtype=np.float64) @ self.matrix


class IdentityGenerator:
    def __init__(self, dim: int):
        self.latent_dim = dim

    def __call__(self, z):
        return np.array(z, dtype=np.float64)

    def sample_fields(self, z):
        return np.array(np.atleast_2d(z), dtype=np.float64)

    def vjp(self, z, v):
        return np.array(v, dtype=np.float64).ravel()


class LinearGenerator:
    """``g(z) = W z + shift``."""

    def __init__(self, weight, shift=0.0):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.shift = shift
        self.latent_dim = self.weight.shape[1]

    def __call__(self, z):
        return self.weight @ np.asarray(z, dtype=np.float64) + self.shift

    def sample_fields(self, z):
        return np.atleast_2d(z) @ self.weight.T + self.shift

    def vjp(self, z, v):
        return self.weight.T @ np.asarray(v, dtype=np.float64).ravel()


# -- the latent posterior --------------------------------------------------------


@dataclass(frozen=True)
class LatentPosteriorProblem:
    operator: object
    generator: object
    observed: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=np.float64).ravel()
        object.__setattr__(self, "observed", obs)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive (use inf for a flat likelihood)")

    @property
    def latent_dim(self) -> int:
        return self.generator.latent_dim

    @property
    def inv_var(self) -> float:
        return 0.0 if math.isinf(self.sigma) else 1.0 / self.sigma**2

    def field(self, z) -> np.ndarray:
        return np.asarray(self.generator(self._check(z)), dtype=np.float64).ravel()

    def residual(self, z) -> np.ndarray:
        """``f(g(z)) - y_obs``."""
        return np.asarray(self.operator.apply(self.field(z))).ravel() - self.observed

    def _check(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent vector must have shape ({self.latent_dim},), got {z.shape}")
        return z

    def log_post_batch(self, zs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unnormalised log posterior for rows of ``zs``; also returns the fields ``g(z)``."""
        xs = np.asarray(self.generator.sample_fields(zs), dtype=np.float64).reshape(len(zs), -1)
        if self.inv_var == 0.0:
            misfit = np.zeros(len(zs))
        else:
            res = np.asarray(self.operator.apply(xs)).reshape(len(zs), -1) - self.observed
            misfit = self.inv_var * np.einsum("ij,ij->i", res, res)
        return -0.5 * (misfit + np.einsum("ij,ij->i", zs, zs)), xs


def objective_r(problem: LatentPosteriorProblem, z) -> float:
    z = problem._check(z)
    misfit = 0.0
    if problem.inv_var:
        res = problem.residual(z)
        misfit = problem.inv_var * float(res @ res)
    value = misfit + float(z @ z)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite posterior objective")
    return value


def log_unnorm_posterior(problem: LatentPosteriorProblem, z) -> float:
    """``-r(z) / 2``."""
    return -0.5 * objective_r(problem, z)


def gradient_r(problem: LatentPosteriorProblem, z) -> np.ndarray:
    """Gradient of ``r(z)/2``: ``H^T (f(g(z)) - y_obs) / sigma^2 + z`` with ``H = (df/dx)(dg/dz)``."""
    z = problem._check(z)
    if problem.inv_var == 0.0:
        return z.copy()
    res = problem.residual(z)
    back = np.asarray(problem.operator.apply_adjoint(res)).ravel()
    grad = problem.inv_var * np.asarray(problem.generator.vjp(z, back)) + z
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return grad


# -- MAP -----------------------------------------------------------------------


@dataclass
class RestartRecord:
    initial_z: np.ndarray
    final_z: np.ndarray
    final_r: float
    grad_norm: float
    iterations: int
    converged: bool


@dataclass
class MapResult:
    z_map: np.ndarray
    r: float
    field: np.ndarray
    restarts: list[RestartRecord]
    warning: str | None = None

    def write_restarts_csv(self, path) -> None:
        m = len(self.z_map)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\r\n")
            w.writerow(
                ["restart", "final_r", "grad_norm", "iterations", "converged"]
                + [f"z0_{i}" for i in range(m)]
                + [f"z_{i}" for i in range(m)]
            )
            for k, rec in enumerate(self.restarts):
                w.writerow(
                    [k, repr(rec.final_r), repr(rec.grad_norm), rec.iterations, int(rec.converged)]
                    + [repr(float(v)) for v in rec.initial_z]
                    + [repr(float(v)) for v in rec.final_z]
                )


def latent_map(
    problem: LatentPosteriorProblem,
    restarts: int = 32,
    rng: np.random.Generator | int = 0,
    *,
    gtol: float = 1e-8,
    maxiter: int = 500,
    fallback_tol: float = 1e-4,
    initial: np.ndarray | None = None,
) -> MapResult:
    """Minimise ``r`` by BFGS from ``restarts`` prior-sampled starting points and keep the best.

    ``initial`` overrides the starting points (shape ``(restarts, M)``).
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(rng)
    starts = rng.standard_normal((restarts, problem.latent_dim)) if initial is None else np.asarray(initial)
    fun = lambda z: 0.5 * objective_r(problem, z)
    jac = lambda z: gradient_r(problem, z)
    records = []
    for z0 in starts:
        res = bfgs_minimize(fun, jac, z0, gtol=gtol, maxiter=maxiter)
        records.append(RestartRecord(z0.copy(), res.x, 2.0 * res.fun, res.grad_norm, res.iterations, res.converged))
    best = min(range(len(records)), key=lambda k: records[k].final_r)
    win = records[best]
    warning = None
    if all(rec.grad_norm > fallback_tol for rec in records):
        warning = f"no restart reached gradient norm {fallback_tol:g}; best has {win.grad_norm:.3e}"
        log.warning(warning)
    return MapResult(win.final_z.copy(), win.final_r, problem.field(win.final_z), records, warning)


# -- sampling --------------------------------------------------------------------


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    std: np.ndarray
    map_field: np.ndarray
    estimator: str
    sample_count: int
    map_z: np.ndarray | None = None
    statistic: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def mc_estimate(
    problem: LatentPosteriorProblem,
    n_samp: int,
    rng: np.random.Generator | int = 0,
    statistic: Callable[[np.ndarray], np.ndarray] | None = None,
    chunk: int = 4096,
) -> PosteriorSummary:
    """Self-normalised importance estimate with prior samples and likelihood weights.

    Weights are accumulated in the log domain with a running maximum.  The
    pointwise standard error of the mean uses the delta-method variance
    ``sum w^2 (x - mean)^2 / (sum w)^2``.  ``statistic`` maps a batch of
    fields ``(B, N)`` to per-sample values whose weighted mean is returned in
    ``summary.statistic``.
    """
    if n_samp < 1:
        raise ValueError("n_samp must be >= 1")
    rng = np.random.default_rng(rng)
    m = problem.latent_dim
    shift = -np.inf
    s0 = s00 = 0.0
    s1 = s2 = t1 = t2 = ss = None
    best_lp, best_z, best_x = -np.inf, None, None
    done = 0
    while done < n_samp:
        k = min(chunk, n_samp - done)
        zs = rng.standard_normal((k, m))
        lp, xs = problem.log_post_batch(zs)
        # the likelihood part of the log posterior is the weight; the prior is the sampler
        logw = lp + 0.5 * np.einsum("ij,ij->i", zs, zs)
        if not np.all(np.isfinite(logw)):
            raise PosteriorError("non-finite log-likelihood among prior samples")
        j = int(np.argmax(lp))
        if lp[j] > best_lp:
            best_lp, best_z, best_x = float(lp[j]), zs[j].copy(), xs[j].copy()
        new_shift = max(shift, float(logw.max()))
        if s1 is not None and new_shift > shift:
            c = math.exp(shift - new_shift)
            s0 *= c
            s00 *= c * c
            s1 *= c
            s2 *= c
            t1 *= c * c
            t2 *= c * c
            if ss is not None:
                ss *= c
        shift = new_shift
        w = np.exp(logw - shift)
        s0 += float(w.sum())
        s00 += float(w @ w)
        w2 = w * w
        if s1 is None:
            s1, s2, t1, t2 = w @ xs, w @ (xs * xs), w2 @ xs, w2 @ (xs * xs)
        else:
            s1 += w @ xs
            s2 += w @ (xs * xs)
            t1 += w2 @ xs
            t2 += w2 @ (xs * xs)
        if statistic is not None:
            vals = np.asarray(statistic(xs), dtype=np.float64)
            contrib = np.tensordot(w, vals, axes=(0, 0))
            ss = contrib if ss is None else ss + contrib
        done += k
    if s0 <= 0.0 or not np.isfinite(s0):
        raise PosteriorError("all importance weights underflowed; use the MCMC sampler instead")
    mean = s1 / s0
    var = np.maximum(s2 / s0 - mean * mean, 0.0)
    se2 = np.maximum(t2 - 2.0 * mean * t1 + mean * mean * s00, 0.0) / (s0 * s0)
    ess = s0 * s0 / s00
    return PosteriorSummary(
        mean=mean,
        std=np.sqrt(var),
        map_field=best_x,
        estimator="mc",
        sample_count=n_samp,
        map_z=best_z,
        statistic=None if ss is None else ss / s0,
        diagnostics={"ess": ess, "mean_se": np.sqrt(se2), "map_log_post": best_lp},
    )


@dataclass
class ChainConfig:
    proposal_std: float = 0.005
    length: int = 200_000
    burn_in: int = 50_000
    thin: int = 10
    initial_z: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.proposal_std >= 0:
            raise ValueError("proposal std must be >= 0")
        if self.length < 1 or not 0 <= self.burn_in < self.length:
            raise ValueError("need 0 <= burn_in < length")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class ChainResult:
    samples: np.ndarray  # (K, M)
    log_post: np.ndarray  # (K,)
    iterations: np.ndarray  # (K,)
    accepted: np.ndarray  # (K,) whether the step producing the sample was accepted
    acceptance_rate: float
    n_steps: int

    def write_csv(self, path) -> None:
        m = self.samples.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\r\n")
            w.writerow(["iter", *(f"z_{i}" for i in range(m)), "log_post", "accepted"])
            for it, z, lp, acc in zip(self.iterations, self.samples, self.log_post, self.accepted):
                w.writerow([int(it), *(repr(float(v)) for v in z), repr(float(lp)), int(acc)])


def mh_chain(problem: LatentPosteriorProblem, cfg: ChainConfig) -> ChainResult:
    """Random-walk Metropolis-Hastings with an isotropic Gaussian proposal.

    Acceptance uses ``log u < log p(z') - log p(z)`` so tiny densities never
    underflow.  Step ``i`` (0-based) is retained when ``i >= burn_in`` and
    ``(i - burn_in) % thin == 0``.
    """
    rng = np.random.default_rng(cfg.seed)
    m = problem.latent_dim
    z = np.zeros(m) if cfg.initial_z is None else np.array(cfg.initial_z, dtype=np.float64)
    lp = log_unnorm_posterior(problem, z)
    n_keep = len(range(cfg.burn_in, cfg.length, cfg.thin))
    samples = np.empty((n_keep, m))
    lps = np.empty(n_keep)
    its = np.empty(n_keep, dtype=np.int64)
    accs = np.zeros(n_keep, dtype=bool)
    n_acc = 0
    k = 0
    std = cfg.proposal_std
    for i in range(cfg.length):
        prop = z + std * rng.standard_normal(m)
        lp_prop = log_unnorm_posterior(problem, prop)
        u = rng.random()
        acc = u == 0.0 or math.log(u) < lp_prop - lp
        if acc:
            z, lp = prop, lp_prop
            n_acc += 1
        if i >= cfg.burn_in and (i - cfg.burn_in) % cfg.thin == 0:
            samples[k], lps[k], its[k], accs[k] = z, lp, i, acc
            k += 1
    rate = n_acc / cfg.length
    if n_acc == 0:
        log.warning("Metropolis-Hastings chain accepted no proposals")
    return ChainResult(samples, lps, its, accs, rate, cfg.length)


def batch_means_se(samples: np.ndarray, n_batches: int = 30) -> np.ndarray:
    """Standard error of the mean of a correlated sequence by non-overlapping batch means."""
    x = np.asarray(samples, dtype=np.float64)
    b = len(x) // n_batches
    if b < 1:
        raise ValueError("too few samples for the requested number of batches")
    means = x[: b * n_batches].reshape(n_batches, b, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


def summarize_chain(problem: LatentPosteriorProblem, chain: ChainResult, chunk: int = 4096) -> PosteriorSummary:
    """Push chain samples through the generator; pointwise mean, std and the highest-density sample."""
    zs = chain.samples
    if len(zs) < 1:
        raise ValueError("chain has no retained samples")
    s1 = s2 = None
    for a in range(0, len(zs), chunk):
        xs = np.asarray(problem.generator.sample_fields(zs[a : a + chunk]), dtype=np.float64).reshape(
            len(zs[a : a + chunk]), -1
        )
        s1 = xs.sum(axis=0) if s1 is None else s1 + xs.sum(axis=0)
        s2 = (xs * xs).sum(axis=0) if s2 is None else s2 + (xs * xs).sum(axis=0)
    mean = s1 / len(zs)
    std = np.sqrt(np.maximum(s2 / len(zs) - mean * mean, 0.0))
    j = int(np.argmax(chain.log_post))
    return PosteriorSummary(
        mean=mean,
        std=std,
        map_field=problem.field(zs[j]),
        estimator="mcmc",
        sample_count=len(zs),
        map_z=zs[j].copy(),
        diagnostics={"acceptance_rate": chain.acceptance_rate, "map_log_post": float(chain.log_post[j])},
    )


# -- classical field-space MAP ------------------------------------------------------


def classical_map(
    op,
    observed: np.ndarray,
    sigma: float = 1.0,
    prior: str = "l2",
    alpha: float = 1.0,
    *,
    tol: float = 1e-10,
) -> np.ndarray:
    """Minimiser of ``||y - A x||^2 / sigma^2 + x^T P x``.

    ``P = alpha I`` for ``"l2"`` and ``P = alpha (-Lap_h) + 1e-8 alpha I`` for
    ``"h1"``; the normal equations are solved by conjugate gradients.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    y = np.asarray(observed, dtype=np.float64)
    shape = y.shape
    inv_var = 1.0 / sigma**2
    if prior == "l2":
        reg = lambda x: alpha * x
        diag = inv_var + alpha
    elif prior == "h1":
        n, h = op.cfg.n, op.cfg.h
        y = y.reshape(n, n)
        reg = lambda x: alpha * neg_laplacian(x, h) + 1e-8 * alpha * x
        diag = inv_var + alpha * (4.0 / h**2 + 1e-8)
    else:
        raise ValueError(f"unknown prior kind {prior!r}")
    matvec = lambda x: inv_var * op.apply_adjoint(op.apply(x)) + reg(x)
    rhs = inv_var * op.apply_adjoint(y)
    x, _ = conjugate_gradient(matvec, rhs, tol=tol, diag=diag)
    return x.reshape(shape)
