"""Desk-scale alignment benchmark: TA-CLEAN versus no alignment.

Every stage is cached under ``root`` and skipped when its outputs exist, so an
interrupted run picks up where it stopped::

    python -m trajdiff.benchmark --root runs/bench
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import TaConfig
from .dataset import Dataset, build_dataset, generate_configs, load_batch
from .denoiser import DenoiserSpec, init_state, load_checkpoint
from .diffusion import make_schedule
from .metrics import evaluate_batch
from .simp import SimpSettings, refine
from .trainer import load_corpus, train, generate

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    grid: int = 32
    n_train: int = 2000
    n_heldout: int = 200
    train_seed: int = 1
    heldout_seed: int = 2
    iters: int = 20000
    batch_size: int = 16
    probe_every: int = 1000
    base_width: int = 32
    sample_steps: int = 2
    sample_seed: int = 0
    refine_steps: int = 10
    model_seed: int = 0
    modes: tuple = ("none", "clean")


def _dataset(path: Path, n: int, seed: int, grid: int) -> Dataset:
    if not (path / "manifest.json").exists():
        log.info("building %d samples into %s", n, path)
        build_dataset(generate_configs(n, seed, (grid, grid)), SimpSettings(), path, seed=seed)
    return Dataset.open(path)


def _train(cfg: BenchmarkConfig, mode: str, ds: Dataset, out: Path):
    schedule = make_schedule()
    ta = TaConfig(mode)
    last = out / "last.pt"
    if last.exists():
        state, schedule, _ = load_checkpoint(last)
        if state.iteration >= cfg.iters:
            return state, schedule
        log.info("resuming %s from iteration %d", mode, state.iteration)
    else:
        state = init_state(DenoiserSpec(base_width=cfg.base_width), cfg.model_seed, with_perf=(mode == "perf"))
    corpus = load_corpus(ds)
    train(
        state, corpus, schedule, ta, cfg.iters, out, ds.hash,
        batch_size=cfg.batch_size, checkpoint_every=cfg.probe_every, probe_every=cfg.probe_every,
        extra={"ta": asdict(ta)},
    )
    return state, schedule


def probe_summary(path: Path, last_points: int = 5) -> dict:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    iters = np.unique(rows[:, 0])
    means = {int(i): float(rows[rows[:, 0] == i, 2].mean()) for i in iters}
    tail = [means[int(i)] for i in iters[-last_points:]]
    return {"per_iteration": means, "tail_mean": float(np.mean(tail))}


def run(cfg: BenchmarkConfig, root) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    train_ds = _dataset(root / "train", cfg.n_train, cfg.train_seed, cfg.grid)
    held_ds = _dataset(root / "heldout", cfg.n_heldout, cfg.heldout_seed, cfg.grid)
    held = load_batch(held_ds, range(len(held_ds)))
    cond = torch.from_numpy(held["conditioning"])
    refs = list(held["final_compliance"])

    results = {"config": asdict(cfg), "train_samples": len(train_ds), "heldout_samples": len(held_ds)}
    for mode in cfg.modes:
        out = root / f"model_{mode}"
        state, schedule = _train(cfg, mode, train_ds, out)
        samples, times, calls = generate(state.model, cond, cfg.sample_steps, cfg.sample_seed, schedule)
        report = evaluate_batch(list(samples), held["configs"], refs, times)
        report.write(out / f"eval_steps{cfg.sample_steps}")
        entry = {
            "probe": probe_summary(out / "probe.csv"),
            "sampled": report.aggregate,
            "denoiser_calls": sorted(set(calls)),
        }
        if cfg.refine_steps:
            refined = [refine(x, c, cfg.refine_steps)[0] for x, c in zip(samples, held["configs"])]
            rep = evaluate_batch(refined, held["configs"], refs, times)
            rep.write(out / f"eval_steps{cfg.sample_steps}_refine{cfg.refine_steps}")
            entry["refined"] = rep.aggregate
        results[mode] = entry
        with open(root / "results.json", "w") as fh:
            json.dump(results, fh, indent=2)
    return results


def step_sweep(cfg: BenchmarkConfig, root, steps=(2, 5, 10, 25, 100)) -> dict:
    """Sampler step count versus quality for each trained model (no refinement).

    Also reports the mean volume bias of the samples, mean(x) - vf, which is
    where the 2-step sampler differs most between modes.
    """
    root = Path(root)
    held = load_batch(Dataset.open(root / "heldout"), range(cfg.n_heldout))
    cond = torch.from_numpy(held["conditioning"])
    refs = list(held["final_compliance"])
    vf = np.array([c.volume_fraction for c in held["configs"]])
    out = {}
    for mode in cfg.modes:
        state, schedule, _ = load_checkpoint(root / f"model_{mode}" / "last.pt")
        rows = {}
        for n in steps:
            samples, _, _ = generate(state.model, cond, n, cfg.sample_seed, schedule)
            agg = evaluate_batch(list(samples), held["configs"], refs).aggregate
            rows[str(n)] = {**agg, "volume_bias": float(np.mean(samples.mean(axis=(1, 2)) - vf))}
        out[mode] = rows
    with open(root / "step_sweep.json", "w") as fh:
        json.dump(out, fh, indent=2)
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", required=True)
    for field, default in asdict(BenchmarkConfig()).items():
        if isinstance(default, int):
            p.add_argument(f"--{field.replace('_', '-')}", type=int, default=default)
    p.add_argument("--modes", default="none,clean")
    p.add_argument("--sweep", action="store_true", help="after the run, sample trained models at several step counts")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    kwargs = {k: getattr(args, k) for k in asdict(BenchmarkConfig()) if k != "modes"}
    cfg = BenchmarkConfig(**kwargs, modes=tuple(args.modes.split(",")))
    res = run(cfg, args.root)
    print(json.dumps({m: res[m] for m in cfg.modes}, indent=2, default=str))
    if args.sweep:
        print(json.dumps(step_sweep(cfg, args.root), indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
