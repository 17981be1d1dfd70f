"""Training loop, probing and sampling on top of a :class:`Dataset`."""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .alignment import TaConfig, trajectory_distance_probe
from .dataset import Dataset, load_batch
from .denoiser import Batch, TrainState, save_checkpoint, training_step
from .diffusion import DiffusionSchedule, respaced_sampler

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "eps_loss", "ta_loss", "perf_loss", "grad_norm")


def load_corpus(dataset: Dataset, indices=None) -> Batch:
    """Load records into one in-memory float32 :class:`Batch`."""
    indices = range(len(dataset)) if indices is None else indices
    raw = load_batch(dataset, indices)
    return Batch(
        torch.from_numpy(raw["x0"]).unsqueeze(1),
        torch.from_numpy(raw["conditioning"]),
        torch.from_numpy(raw["trajectory"]),
        torch.from_numpy(raw["compliances"]).float(),
    )


class CountingDenoiser:
    """Wraps a model and counts forward evaluations."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, x_t, conditioning, t):
        self.calls += 1
        return self.model(x_t, conditioning, t)


def _append_csv(path: Path, columns, rows) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)
        for row in rows:
            writer.writerow(row)


def run_probe(state: TrainState, probe: Batch, schedule: DiffusionSchedule, ta: TaConfig, n_points: int = 10):
    state.model.eval()
    return trajectory_distance_probe(
        state.model, probe.x0, probe.conditioning, probe.trajectory, schedule, n_points, seed=0, variant=ta.step_map
    )


def train(
    state: TrainState,
    corpus: Batch,
    schedule: DiffusionSchedule,
    ta: TaConfig,
    iters: int,
    out_dir,
    manifest_hash: str,
    batch_size: int = 16,
    checkpoint_every: int = 1000,
    probe_every: int = 1000,
    probe_size: int = 32,
    extra: dict | None = None,
) -> TrainState:
    """Run until ``state.iteration == iters``.

    Writes ``loss.csv`` (every step), ``probe.csv`` (every ``probe_every``
    steps) and ``ckpt_XXXXXX.pt`` plus ``last.pt`` checkpoints.  Starting from
    a resumed state continues the same random stream, so losses match an
    uninterrupted run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = corpus.permuted(np.arange(min(probe_size, len(corpus))))
    n = len(corpus)

    def checkpoint():
        name = out / f"ckpt_{state.iteration:06d}.pt"
        save_checkpoint(name, state, schedule, manifest_hash, extra)
        save_checkpoint(out / "last.pt", state, schedule, manifest_hash, extra)

    if state.iteration == 0:
        checkpoint()
    pending = []
    start = time.perf_counter()
    while state.iteration < iters:
        idx = torch.randint(0, n, (batch_size,), generator=state.generator)
        report = training_step(state, corpus.permuted(idx), schedule, ta)
        pending.append([report[k] for k in LOSS_COLUMNS])
        it = state.iteration
        if probe_every and it % probe_every == 0:
            points = run_probe(state, probe, schedule, ta)
            _append_csv(out / "probe.csv", ("iteration", "t", "distance"), [(it, t, d) for t, d in points])
            log.info(
                "iter %d eps %.4f ta %.4f probe %.4f (%.2f s/iter)",
                it, report["eps_loss"], report["ta_loss"], np.mean([d for _, d in points]),
                (time.perf_counter() - start) / len(pending) if pending else 0.0,
            )
        if (checkpoint_every and it % checkpoint_every == 0) or it == iters:
            _append_csv(out / "loss.csv", LOSS_COLUMNS, pending)
            pending = []
            start = time.perf_counter()
            checkpoint()
    if pending:
        _append_csv(out / "loss.csv", LOSS_COLUMNS, pending)
    return state


def generate(model, conditioning: torch.Tensor, n_steps: int, seed: int, schedule: DiffusionSchedule):
    """One sample per conditioning row; sample ``i`` uses seed ``seed + i``.

    Returns ``(samples (N, H, W) numpy, seconds per sample, denoiser calls per sample)``.
    """
    model.eval()
    counter = CountingDenoiser(model)
    out, times, calls = [], [], []
    for i in range(conditioning.shape[0]):
        before = counter.calls
        t0 = time.perf_counter()
        x = respaced_sampler(counter, conditioning[i : i + 1], n_steps, seed + i, schedule)
        times.append(time.perf_counter() - t0)
        calls.append(counter.calls - before)
        out.append(x[0, 0].numpy())
    return np.stack(out), times, calls
