"""Command-line driver: ``lpb <command> [--config FILE] [--seed N] [--out DIR]``.

Commands and the artifacts they read/write inside the output directory:

    config --print-defaults      print the default configuration
    gen-data                     dataset.gpd, target.gpf, clean.gpf, observed.gpf, measurement.csv
    train                        dataset.gpd -> generator.gpw, critic.gpw, train_log.csv
    sample --count K             generator.gpw -> samples/sample_XXX.{gpf,pgm}
    eigen [--k K] [--n N]        spectrum.csv
    infer map|mc|mcmc            generator.gpw, observed.gpf -> estimate fields and CSVs
    baseline l2|h1               observed.gpf -> baseline_<kind>.gpf
    report                       manifest.json -> PGM images, error_metrics.csv
    study --seeds S [S ...]      the whole desk-scale experiment

The environment variable ``LPB_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import DatasetFormatError, NoiseModel, build_dataset, make_measurement, read_dataset, write_dataset
from .heat import FieldFormatError, SolverError, assemble_operator, read_field, write_field, write_spectrum_csv
from .inference import (
    LatentPosteriorProblem,
    PosteriorError,
    classical_map,
    latent_map,
    mc_estimate,
    mh_chain,
    summarize_chain,
)
from .nets import ArchitectureMismatch, CriticNet, GeneratorNet, WeightsFormatError, load_weights, save_weights
from .report import Manifest, ManifestError, OutputLock, error_metrics, export_pgm, write_csv
from .study import run_study, tune_baseline
from .wgan import TrainingError, wgan_train

log = logging.getLogger("latentprior")


class MissingArtifact(FileNotFoundError):
    pass


EXIT_CODES = [
    (ConfigError, 2, "config"),
    (MissingArtifact, 3, "missing-artifact"),
    ((DatasetFormatError, FieldFormatError, WeightsFormatError, ArchitectureMismatch), 4, "format"),
    ((SolverError, PosteriorError, TrainingError, FloatingPointError), 5, "numerical"),
    (ManifestError, 6, "manifest"),
]
# 7: io failure, 8: any other invalid input


class Context:
    def __init__(self, args):
        self.args = args
        self.cfg: RunConfig = load_config(args.config)
        self.out = Path(args.out or self.cfg["output"]["dir"])
        self.manifest: Manifest | None = None

    def seed(self, default: int) -> int:
        return default if self.args.seed is None else self.args.seed

    def need(self, name: str) -> Path:
        p = self.out / name
        if not p.exists():
            raise MissingArtifact(f"required artifact {p} not found; run the upstream command first")
        return p

    def record(self, path, command: str, seed=None, **extra):
        self.manifest.add(path, command=command, config_hash=self.cfg.hash, seed=seed, **extra)

    def generator(self) -> GeneratorNet:
        gen = load_weights(self.need("generator.gpw"), latent_dim=self.cfg["train"]["latent_dim"])
        if gen.n_out != self.cfg["grid"]["n"] ** 2:
            raise ArchitectureMismatch("generator output size does not match the configured grid")
        return gen

    def problem(self) -> LatentPosteriorProblem:
        op = assemble_operator(self.cfg.heat_config())
        y = read_field(self.need("observed.gpf"))
        return LatentPosteriorProblem(op, self.generator(), y, self.cfg["inference"]["sigma"])


def _save_field(ctx: Context, name: str, arr, command: str, seed=None, normalization="fixed-range"):
    n = ctx.cfg["grid"]["n"]
    arr = np.asarray(arr).reshape(n, n)
    write_field(ctx.out / f"{name}.gpf", arr)
    export_pgm(arr, ctx.out / f"{name}.pgm", normalization)
    ctx.record(ctx.out / f"{name}.gpf", command, seed)
    ctx.record(ctx.out / f"{name}.pgm", command, seed)


def cmd_gen_data(ctx: Context):
    g, d = ctx.cfg["grid"], ctx.cfg["data"]
    seed = ctx.seed(d["seed"])
    mseed = d["measurement_seed"] if ctx.args.measurement_seed is None else ctx.args.measurement_seed
    ds = build_dataset(d["count"], seed, g["n"], g["L"])
    write_dataset(ds, ctx.out / "dataset.gpd")
    ctx.record(ctx.out / "dataset.gpd", "gen-data", seed)
    op = assemble_operator(ctx.cfg.heat_config())
    mp = make_measurement(op, np.random.default_rng(mseed), NoiseModel(d["noise_sigma"]), d["target"])
    for name, arr in (("target", mp.target), ("clean", mp.clean), ("observed", mp.observed)):
        write_field(ctx.out / f"{name}.gpf", arr)
        ctx.record(ctx.out / f"{name}.gpf", "gen-data", mseed)
    write_csv(
        ctx.out / "measurement.csv",
        ["noise_to_signal", "top_left_u", "top_left_v", "bottom_right_u", "bottom_right_v", "amplitude"],
        [[mp.noise_to_signal, *mp.target_params.as_array()]],
    )
    ctx.record(ctx.out / "measurement.csv", "gen-data", mseed)
    print(f"wrote {len(ds)} training fields; measurement noise-to-signal {mp.noise_to_signal:.3f}")


def cmd_train(ctx: Context):
    ds = read_dataset(ctx.need("dataset.gpd"))
    g, t = ctx.cfg["grid"], ctx.cfg["train"]
    if ds.n != g["n"]:
        raise ConfigError(f"dataset grid {ds.n} does not match configured grid {g['n']}")
    tcfg = ctx.cfg.train_config(seed=ctx.seed(t["seed"]))
    if ctx.args.iterations is not None:
        tcfg = replace(tcfg, iterations=ctx.args.iterations)
    rng = np.random.default_rng(t["init_seed"])
    gen = GeneratorNet.build(t["latent_dim"], g["n"], t["generator_hidden"], rng=rng)
    critic = CriticNet.build(g["n"], t["critic_hidden"], rng=rng)
    ckpt = ctx.out / "checkpoints" if tcfg.checkpoint_every else None
    gen, critic, history = wgan_train(ds, gen, critic, tcfg, checkpoint_dir=ckpt)
    save_weights(gen, ctx.out / "generator.gpw")
    save_weights(critic, ctx.out / "critic.gpw")
    history.write_csv(ctx.out / "train_log.csv")
    for name in ("generator.gpw", "critic.gpw", "train_log.csv"):
        ctx.record(ctx.out / name, "train", tcfg.seed, iterations=tcfg.iterations)
    print(f"trained {tcfg.iterations} generator iterations; final critic loss {history.critic_loss[-1]:.4f}"
          if history.critic_loss else "no training iterations run")


def cmd_sample(ctx: Context):
    gen = ctx.generator()
    seed = ctx.seed(0)
    zs = np.random.default_rng(seed).standard_normal((ctx.args.count, gen.latent_dim))
    (ctx.out / "samples").mkdir(exist_ok=True)
    for k, x in enumerate(gen.sample_fields(zs)):
        _save_field(ctx, f"samples/sample_{k:03d}", x, "sample", seed)
    print(f"wrote {ctx.args.count} generator samples to {ctx.out / 'samples'}")


def cmd_eigen(ctx: Context):
    hc = ctx.cfg.heat_config()
    if ctx.args.n is not None:
        hc = replace(hc, n=ctx.args.n)
    op = assemble_operator(hc)
    w = op.spectrum(ctx.args.k)
    write_spectrum_csv(ctx.out / "spectrum.csv", w)
    ctx.record(ctx.out / "spectrum.csv", "eigen", n=hc.n)
    print(f"largest eigenvalue {w[0]:.6f}, smallest listed {w[-1]:.3e}")


def _chain_start(ctx: Context, problem, seed):
    mode = ctx.cfg["inference"]["chain_start"]
    if mode == "zero":
        return np.zeros(problem.latent_dim)
    if mode == "prior":
        return np.random.default_rng(seed).standard_normal(problem.latent_dim)
    zfile = ctx.out / "map_z.csv"
    if zfile.exists():
        rows = zfile.read_text().splitlines()
        return np.array([float(v) for v in rows[1].split(",")])
    return _map(ctx, problem, ctx.cfg["inference"]["map_seed"]).z_map


def _map(ctx, problem, seed):
    inf = ctx.cfg["inference"]
    return latent_map(problem, inf["restarts"], seed, gtol=inf["gtol"], maxiter=inf["maxiter"])


def cmd_infer(ctx: Context):
    problem = ctx.problem()
    inf = ctx.cfg["inference"]
    method = ctx.args.method
    if method == "map":
        seed = ctx.seed(inf["map_seed"])
        res = _map(ctx, problem, seed)
        _save_field(ctx, "map_field", res.field, "infer map", seed)
        res.write_restarts_csv(ctx.out / "map_restarts.csv")
        write_csv(ctx.out / "map_z.csv", [f"z_{i}" for i in range(len(res.z_map))], [list(res.z_map)])
        for name in ("map_restarts.csv", "map_z.csv"):
            ctx.record(ctx.out / name, "infer map", seed)
        print(f"MAP r = {res.r:.6f}" + (f" (warning: {res.warning})" if res.warning else ""))
        return
    if method == "mc":
        seed = ctx.seed(inf["mc_seed"])
        summary = mc_estimate(problem, inf["n_samp"], seed)
        extra = [("ess", summary.diagnostics["ess"])]
    else:
        seed = ctx.seed(inf["chain_seed"])
        chain = mh_chain(problem, ctx.cfg.chain_config(_chain_start(ctx, problem, seed), seed))
        chain.write_csv(ctx.out / "chain.csv")
        ctx.record(ctx.out / "chain.csv", "infer mcmc", seed)
        summary = summarize_chain(problem, chain)
        extra = [("acceptance_rate", chain.acceptance_rate)]
    est = summary.estimator
    rows = []
    for kind, arr, norm in (("mean", summary.mean, "fixed-range"), ("std", summary.std, "per-image"),
                            ("map", summary.map_field, "fixed-range")):
        _save_field(ctx, f"{est}_{kind}", arr, f"infer {method}", seed, norm)
        rows.append([f"{est}_{kind}.gpf", kind, est, summary.sample_count] + [v for _, v in extra])
    write_csv(ctx.out / f"{est}_summary.csv", ["file", "kind", "estimator", "sample_count"] + [k for k, _ in extra], rows)
    ctx.record(ctx.out / f"{est}_summary.csv", f"infer {method}", seed)
    print(f"{est}: {summary.sample_count} samples; " + ", ".join(f"{k} {v:.4g}" for k, v in extra))


def cmd_baseline(ctx: Context):
    op = assemble_operator(ctx.cfg.heat_config())
    y = read_field(ctx.need("observed.gpf"))
    inf = ctx.cfg["inference"]
    kind = ctx.args.kind
    if ctx.args.tune:
        truth = read_field(ctx.need("target.gpf"))
        alpha, x, err = tune_baseline(op, y, truth, inf["sigma"], kind, inf["alpha_grid"])
    else:
        alpha = ctx.args.alpha if ctx.args.alpha is not None else inf[f"alpha_{kind}"]
        x = classical_map(op, y, inf["sigma"], kind, alpha)
    n = ctx.cfg["grid"]["n"]
    write_field(ctx.out / f"baseline_{kind}.gpf", x.reshape(n, n))
    ctx.record(ctx.out / f"baseline_{kind}.gpf", f"baseline {kind}", alpha=alpha)
    print(f"{kind} baseline with alpha {alpha:g}")


ESTIMATES = ("map_field", "mc_mean", "mc_map", "mcmc_mean", "mcmc_map", "baseline_l2", "baseline_h1")


def cmd_report(ctx: Context):
    ctx.manifest.check()
    listed = ctx.manifest.files()
    for rel in sorted(listed):
        if rel.endswith(".gpf"):
            pgm = ctx.out / (rel[:-4] + ".pgm")
            norm = "per-image" if rel.endswith(("_std.gpf", "clean.gpf", "observed.gpf")) else "fixed-range"
            export_pgm(read_field(ctx.out / rel), pgm, norm)
            ctx.record(pgm, "report")
    rows = []
    if "target.gpf" in listed:
        truth = read_field(ctx.out / "target.gpf")
        for name in ESTIMATES:
            if f"{name}.gpf" in listed:
                m = error_metrics(read_field(ctx.out / f"{name}.gpf"), truth)
                rows.append([name, m["rel_l2"], m["max_abs"], m["band_rms"]])
    write_csv(ctx.out / "error_metrics.csv", ["estimate", "rel_l2", "max_abs", "band_rms"], rows)
    ctx.record(ctx.out / "error_metrics.csv", "report")
    for r in rows:
        print(f"{r[0]:>12s}  rel L2 {r[1]:.4f}  max {r[2]:.3f}  band rms {r[3]:.3f}")


def cmd_study(ctx: Context):
    res = run_study(ctx.cfg, ctx.args.seeds, ctx.out)
    for o in res.outcomes:
        print(
            f"seed {o.seed}: GAN {o.gan_error:.3f}  L2 {o.l2_error:.3f}  H1 {o.h1_error:.3f}  "
            f"std band/other {o.band_std:.3f}/{o.other_std:.3f}"
        )


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (sectioned key = value)")
    common.add_argument("--seed", type=_u64, help="override the command's rng seed")
    common.add_argument("--out", help="output directory (default: [output] dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lpb", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lpb v{__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", parents=[common], help="show configuration")
    c.add_argument("--print-defaults", action="store_true")

    c = sub.add_parser("gen-data", parents=[common], help="training set and measurement")
    c.add_argument("--measurement-seed", type=_u64)

    c = sub.add_parser("train", parents=[common], help="train the WGAN prior")
    c.add_argument("--iterations", type=int, help="override train.iterations")

    c = sub.add_parser("sample", parents=[common], help="draw generator samples")
    c.add_argument("--count", type=int, default=4)

    c = sub.add_parser("eigen", parents=[common], help="forward-operator spectrum")
    c.add_argument("--k", type=int, help="number of eigenvalues (default: all)")
    c.add_argument("--n", type=int, help="override grid size")

    c = sub.add_parser("infer", parents=[common], help="posterior probes")
    c.add_argument("method", choices=("map", "mc", "mcmc"))

    c = sub.add_parser("baseline", parents=[common], help="classical Gaussian-prior MAP")
    c.add_argument("kind", choices=("l2", "h1"))
    c.add_argument("--alpha", type=float)
    c.add_argument("--tune", action="store_true", help="pick alpha from inference.alpha_grid against target.gpf")

    sub.add_parser("report", parents=[common], help="images and error metrics from the manifest")

    c = sub.add_parser("study", parents=[common], help="desk-scale end-to-end experiment")
    c.add_argument("--seeds", type=_u64, nargs="+", default=[100, 101, 102, 103, 104])
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eigen": cmd_eigen,
    "infer": cmd_infer,
    "baseline": cmd_baseline,
    "report": cmd_report,
    "study": cmd_study,
}


def _thread_limit():
    n = os.environ.get("LPB_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "config":
            cfg = load_config(args.config)
            print(RunConfig().to_text() if args.print_defaults else cfg.to_text(), end="")
            return 0
        ctx = Context(args)
        with _thread_limit(), OutputLock(ctx.out):
            ctx.manifest = Manifest(ctx.out)
            COMMANDS[args.command](ctx)
            if args.command != "study":
                ctx.manifest.save()
        return 0
    except Exception as exc:
        for types, code, kind in EXIT_CODES:
            if isinstance(exc, types):
                print(f"error: {kind}: {exc}", file=sys.stderr)
                return code
        if isinstance(exc, OSError):
            print(f"error: io: {exc}", file=sys.stderr)
            return 7
        if isinstance(exc, ValueError):
            print(f"error: invalid-input: {exc}", file=sys.stderr)
            return 8
        raise


if __name__ == "__main__":
    sys.exit(main())
