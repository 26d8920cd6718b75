"""Wasserstein GAN training with a gradient penalty or weight clipping.

The critic is a dense network with piecewise-linear activations, so its input
gradient ``grad_x d(x) = W0 S0 W1 S1 ... w_L`` is a product of weight
matrices and locally constant slope masks ``S_i``.  The penalty's parameter
gradient is obtained by differentiating that product directly; the masks have
zero derivative almost everywhere.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, leaky_relu, leaky_relu_grad
from .data import Dataset
from .nets import CriticNet, GeneratorNet, MLP, save_weights

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "Adam",
    "critic_input_gradient",
    "gradient_penalty",
    "critic_loss",
    "wgan_train",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (generator iteration {iteration})")
        self.iteration = iteration


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.5
    swap_betas: bool = False
    adam_eps: float = 1e-8
    batch_size: int = 64
    critic_steps: int = 5
    penalty_weight: float = 10.0
    iterations: int = 2000
    penalty_mode: str = "gradient-penalty"
    clip_bound: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.critic_steps < 1:
            raise ValueError("critic steps must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.penalty_mode not in ("gradient-penalty", "weight-clip"):
            raise ValueError(f"unknown penalty mode {self.penalty_mode!r}")

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta2, self.beta1) if self.swap_betas else (self.beta1, self.beta2)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _slopes(critic: MLP, x: np.ndarray) -> list[np.ndarray]:
    """Per-layer activation derivatives at ``x`` (all ones for linear layers)."""
    out, h = [], x
    for layer, w, b in zip(critic.layers, critic.params[::2], critic.params[1::2]):
        a = h @ w + b
        if layer.activation == "leaky_relu":
            out.append(leaky_relu_grad(a, critic.slope))
            h = leaky_relu(a, critic.slope)
        elif layer.activation == "linear":
            out.append(np.ones_like(a))
            h = a
        else:
            raise ValueError("gradient penalty needs a piecewise-linear critic")
    if critic.layers[-1].n_out != 1 or critic.out_scale != 1.0:
        raise ValueError("gradient penalty needs a scalar critic without output scaling")
    return out


def critic_input_gradient(critic: MLP, x: np.ndarray) -> np.ndarray:
    """``grad_x d(x)`` for each row of ``x``."""
    grads, _ = _input_gradient_chain(critic, x)
    return grads[0]


def _input_gradient_chain(critic, x):
    slopes = _slopes(critic, x)
    weights = critic.params[::2]
    deltas = [None] * len(weights)
    gx = [None] * len(weights)
    delta = slopes[-1]
    for i in range(len(weights) - 1, -1, -1):
        deltas[i] = delta
        gx[i] = delta @ weights[i].T
        if i > 0:
            delta = slopes[i - 1] * gx[i]
    return gx, (slopes, deltas)


def gradient_penalty(critic: MLP, x_hat: np.ndarray, weight: float) -> tuple[float, list[np.ndarray], np.ndarray]:
    """``weight * mean((||grad d(x_hat)|| - 1)^2)`` and its gradient wrt the critic parameters.

    Returns ``(penalty, param_grads, gradient_norms)``.
    """
    gx, (slopes, deltas) = _input_gradient_chain(critic, x_hat)
    weights = critic.params[::2]
    norms = np.linalg.norm(gx[0], axis=1)
    penalty = weight * float(np.mean((norms - 1.0) ** 2))
    grads = [np.zeros_like(p) for p in critic.params]
    safe = np.where(norms > 0, norms, 1.0)
    g_top = (weight * 2.0 * (norms - 1.0) / (len(norms) * safe))[:, None] * gx[0]
    for i in range(len(weights)):
        grads[2 * i] = g_top.T @ deltas[i]
        if i + 1 < len(weights):
            g_top = slopes[i] * (g_top @ weights[i])
    return penalty, grads, norms


def critic_loss(
    critic: MLP,
    real: np.ndarray,
    fake: np.ndarray,
    eps: np.ndarray | None = None,
    penalty_weight: float = 10.0,
) -> tuple[float, float, list[np.ndarray]]:
    """Critic objective ``mean d(fake) - mean d(real) + penalty`` and its parameter gradient.

    ``eps`` holds one interpolation weight per row; ``None`` skips the penalty.
    Returns ``(loss, penalty, grads)``.
    """
    batch = len(real)
    both = np.concatenate([real, fake], axis=0)
    cot = np.concatenate([np.full((batch, 1), -1.0 / batch), np.full((len(fake), 1), 1.0 / len(fake))])
    tape = critic.tape(len(both))
    (scores,) = tape.forward(critic._feed(both))
    g = tape.backward(cot)
    grads = [g[name] for name in critic.param_names()]
    loss = float(scores[batch:, 0].mean() - scores[:batch, 0].mean())
    penalty = 0.0
    if eps is not None:
        x_hat = eps.reshape(-1, 1) * real + (1.0 - eps.reshape(-1, 1)) * fake
        penalty, pgrads, _ = gradient_penalty(critic, x_hat, penalty_weight)
        grads = [a + b for a, b in zip(grads, pgrads)]
    return loss + penalty, penalty, grads


@dataclass
class TrainLog:
    iteration: list[int] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    generator_loss: list[float] = field(default_factory=list)

    def append(self, it, c, p, g):
        self.iteration.append(it)
        self.critic_loss.append(c)
        self.penalty.append(p)
        self.generator_loss.append(g)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\r\n")
            w.writerow(["iteration", "critic_loss", "penalty", "generator_loss"])
            for row in zip(self.iteration, self.critic_loss, self.penalty, self.generator_loss):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def wgan_train(
    dataset: Dataset | np.ndarray,
    gen: GeneratorNet,
    critic: CriticNet,
    cfg: TrainConfig,
    checkpoint_dir=None,
) -> tuple[GeneratorNet, CriticNet, TrainLog]:
    """Train ``gen`` against ``critic`` on ``dataset``; both are updated in place and returned."""
    data = dataset.flat() if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)
    data = data.reshape(len(data), -1)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != gen.n_out or critic.n_in != gen.n_out:
        raise ValueError(
            f"network dimensions do not match the data: data {data.shape[1]}, "
            f"generator out {gen.n_out}, critic in {critic.n_in}"
        )
    rng = np.random.default_rng(cfg.seed)
    b = cfg.batch_size
    g_opt = Adam(gen.params, cfg.learning_rate, cfg.betas, cfg.adam_eps)
    c_opt = Adam(critic.params, cfg.learning_rate, cfg.betas, cfg.adam_eps)
    use_gp = cfg.penalty_mode == "gradient-penalty"
    if not use_gp:
        for p in critic.params:
            np.clip(p, -cfg.clip_bound, cfg.clip_bound, out=p)
    history = TrainLog()
    for it in range(1, cfg.iterations + 1):
        try:
            for _ in range(cfg.critic_steps):
                real = data[rng.integers(0, len(data), size=b)]
                fake = gen.forward_batch(rng.standard_normal((b, gen.latent_dim)))
                eps = rng.uniform(size=b) if use_gp else None
                c_loss, pen, grads = critic_loss(critic, real, fake, eps, cfg.penalty_weight)
                if not np.isfinite(c_loss):
                    raise TrainingError("non-finite critic loss", it)
                c_opt.step(critic.params, grads)
                if not use_gp:
                    for p in critic.params:
                        np.clip(p, -cfg.clip_bound, cfg.clip_bound, out=p)
            z = rng.standard_normal((b, gen.latent_dim))
            fake = gen.forward_batch(z)
            scores = critic.score(fake)
            g_loss = -float(scores.mean())
            if not np.isfinite(g_loss):
                raise TrainingError("non-finite generator loss", it)
            gx, _ = critic.vjp_batch(fake, np.full((b, 1), -1.0 / b))
            _, g_grads = gen.vjp_batch(z, gx)
            g_opt.step(gen.params, g_grads)
        except NonFiniteError as exc:
            raise TrainingError(str(exc), it) from exc
        history.append(it, c_loss, pen, g_loss)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d critic %.4f penalty %.4f generator %.4f", it, c_loss, pen, g_loss)
        if checkpoint_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            d = Path(checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_weights(gen, d / f"generator_{it:06d}.gpw")
            save_weights(critic, d / f"critic_{it:06d}.gpw")
    return gen, critic, history

