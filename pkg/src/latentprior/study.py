"""Desk-scale end-to-end experiment: train a GAN prior, then compare estimators per noise seed.

For each measurement seed the study computes the GAN-prior MAP, L2- and
H1-prior MAP baselines with their regularisation weight tuned against the
truth, and an MCMC chain whose pointwise standard deviation is compared on and
off a band around the true patch edge.  Every artifact goes to ``out_dir``
and is listed in its manifest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import NoiseModel, build_dataset, make_measurement, write_dataset
from .heat import assemble_operator, write_field
from .inference import LatentPosteriorProblem, classical_map, latent_map, mh_chain, summarize_chain
from .nets import CriticNet, GeneratorNet, save_weights
from .report import Manifest, boundary_band, error_metrics, export_pgm, write_csv
from .wgan import wgan_train

__all__ = ["SeedOutcome", "StudyResult", "train_prior", "tune_baseline", "run_seed", "run_study"]

log = logging.getLogger(__name__)


@dataclass
class SeedOutcome:
    seed: int
    noise_to_signal: float
    gan_error: float
    l2_error: float
    h1_error: float
    l2_alpha: float
    h1_alpha: float
    band_std: float
    other_std: float
    map_r: float
    acceptance_rate: float

    @property
    def gan_beats_baselines(self) -> bool:
        return self.gan_error < min(self.l2_error, self.h1_error)

    @property
    def edges_most_uncertain(self) -> bool:
        return self.band_std > self.other_std


@dataclass
class StudyResult:
    outcomes: list[SeedOutcome] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(o, attr) for o in self.outcomes]))


def train_prior(cfg: RunConfig, out_dir=None, manifest: Manifest | None = None):
    """Build the training set and train generator and critic as configured."""
    g, t, d = cfg["grid"], cfg["train"], cfg["data"]
    dataset = build_dataset(d["count"], d["seed"], g["n"], g["L"])
    rng = np.random.default_rng(t["init_seed"])
    gen = GeneratorNet.build(t["latent_dim"], g["n"], t["generator_hidden"], rng=rng)
    critic = CriticNet.build(g["n"], t["critic_hidden"], rng=rng)
    gen, critic, history = wgan_train(dataset, gen, critic, cfg.train_config(), checkpoint_dir=out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        paths = {
            "dataset.gpd": lambda p: write_dataset(dataset, p),
            "generator.gpw": lambda p: save_weights(gen, p),
            "critic.gpw": lambda p: save_weights(critic, p),
            "train_log.csv": history.write_csv,
        }
        for name, write in paths.items():
            write(out / name)
            if manifest is not None:
                manifest.add(out / name, command="train", config_hash=cfg.hash, seed=t["seed"])
    return dataset, gen, critic, history


def tune_baseline(op, observed, truth, sigma, prior, alphas):
    """Best ``(alpha, field, rel_error)`` over the grid, judged against the truth."""
    best = None
    for a in alphas:
        x = classical_map(op, observed, sigma, prior, a)
        e = error_metrics(x, truth)["rel_l2"]
        if best is None or e < best[2]:
            best = (float(a), x, e)
    return best


def run_seed(cfg: RunConfig, gen, seed: int, out_dir=None, manifest: Manifest | None = None) -> SeedOutcome:
    g, d, inf = cfg["grid"], cfg["data"], cfg["inference"]
    op = assemble_operator(cfg.heat_config())
    mp = make_measurement(op, np.random.default_rng(seed), NoiseModel(d["noise_sigma"]), d["target"])
    problem = LatentPosteriorProblem(op, gen, mp.observed, inf["sigma"])
    res = latent_map(problem, inf["restarts"], seed, gtol=inf["gtol"], maxiter=inf["maxiter"])
    gan_field = res.field.reshape(g["n"], g["n"])
    a_l2, x_l2, e_l2 = tune_baseline(op, mp.observed, mp.target, inf["sigma"], "l2", inf["alpha_grid"])
    a_h1, x_h1, e_h1 = tune_baseline(op, mp.observed, mp.target, inf["sigma"], "h1", inf["alpha_grid"])
    chain = mh_chain(problem, cfg.chain_config(initial_z=res.z_map, seed=seed))
    summary = summarize_chain(problem, chain)
    std = summary.std.reshape(g["n"], g["n"])
    band = boundary_band(mp.target != 0, 2)
    outcome = SeedOutcome(
        seed=seed,
        noise_to_signal=mp.noise_to_signal,
        gan_error=error_metrics(gan_field, mp.target)["rel_l2"],
        l2_error=e_l2,
        h1_error=e_h1,
        l2_alpha=a_l2,
        h1_alpha=a_h1,
        band_std=float(std[band].mean()),
        other_std=float(std[~band].mean()),
        map_r=res.r,
        acceptance_rate=chain.acceptance_rate,
    )
    if out_dir is not None:
        out = Path(out_dir) / f"seed_{seed}"
        out.mkdir(parents=True, exist_ok=True)
        fields_out = {
            "target": mp.target,
            "clean": mp.clean,
            "observed": mp.observed,
            "gan_map": gan_field,
            "l2_map": x_l2,
            "h1_map": x_h1,
            "mcmc_mean": summary.mean.reshape(g["n"], g["n"]),
            "mcmc_std": std,
            "mcmc_map": summary.map_field.reshape(g["n"], g["n"]),
        }
        written = []
        for name, arr in fields_out.items():
            write_field(out / f"{name}.gpf", arr)
            norm = "per-image" if name in ("mcmc_std", "clean", "observed") else "fixed-range"
            export_pgm(arr, out / f"{name}.pgm", norm)
            written += [out / f"{name}.gpf", out / f"{name}.pgm"]
        res.write_restarts_csv(out / "map_restarts.csv")
        chain.write_csv(out / "chain.csv")
        written += [out / "map_restarts.csv", out / "chain.csv"]
        if manifest is not None:
            for p in written:
                manifest.add(p, command="study", config_hash=cfg.hash, seed=seed)
    return outcome


def run_study(cfg: RunConfig, seeds, out_dir=None, gen: GeneratorNet | None = None) -> StudyResult:
    """Train (unless ``gen`` is given) and evaluate every measurement seed."""
    manifest = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        manifest = Manifest(out_dir)
    if gen is None:
        _, gen, _, _ = train_prior(cfg, out_dir, manifest)
    result = StudyResult()
    for s in seeds:
        o = run_seed(cfg, gen, s, out_dir, manifest)
        log.info("seed %d: gan %.3f l2 %.3f h1 %.3f", s, o.gan_error, o.l2_error, o.h1_error)
        result.outcomes.append(o)
    if out_dir is not None:
        cols = [f for f in SeedOutcome.__dataclass_fields__]
        path = Path(out_dir) / "study_summary.csv"
        write_csv(path, cols, [[getattr(o, c) for c in cols] for o in result.outcomes])
        manifest.add(path, command="study", config_hash=cfg.hash)
        manifest.save()
        result.files = sorted(Path(out_dir).rglob("*"))
    return result
