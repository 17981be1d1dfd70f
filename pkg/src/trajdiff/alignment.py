"""Trajectory alignment between diffusion steps and stored optimizer iterates.

Snapshot indices are 1-based (``s = 1`` is the earliest stored iterate), as
in the step map; tensors holding a trajectory are ``(B, n_s, H, W)`` and are
indexed with ``s - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import DiffusionSchedule, forward_marginal, reconstruct_clean
from .errors import MissingPerformance, NotSupported

MODES = ("none", "clean", "noisy", "perf")


@dataclass
class TaConfig:
    mode: str = "none"
    weight_clean: float = 1.0
    weight_noisy: float = 1.0
    weight_perf: float = 1.0
    step_map: str = "block"  # "block" staircase or "mod" ablation

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode == "multi":
            raise NotSupported("multi-fidelity alignment needs a high-resolution corpus")
        if self.mode not in MODES:
            raise ValueError(f"unknown alignment mode {self.mode!r}")
        if min(self.weight_clean, self.weight_noisy, self.weight_perf) < 0:
            raise ValueError("alignment weights must be non-negative")
        if self.step_map not in ("block", "mod"):
            raise ValueError(f"unknown step map {self.step_map!r}")


def step_to_snapshot(t, T: int, n_s: int, variant: str = "block"):
    """Map diffusion step(s) ``t`` to 1-based snapshot index(es).

    ``block``: ``s = n_s - floor((t - 1) n_s / T)`` clipped to ``[1, n_s]``, so
    the noisiest steps map to the earliest iterate.  ``mod``:
    ``s = (t - 1) mod n_s + 1``.
    """
    t_arr = np.asarray(t, dtype=np.int64)
    if variant == "block":
        s = n_s - np.floor_divide((t_arr - 1) * n_s, T)
    elif variant == "mod":
        s = np.mod(t_arr - 1, n_s) + 1
    else:
        raise ValueError(f"unknown step map {variant!r}")
    s = np.clip(s, 1, n_s)
    return int(s) if np.ndim(s) == 0 else s


def _as_index(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy().astype(np.int64)
    return np.atleast_1d(np.asarray(t, dtype=np.int64))


def select_snapshots(trajectory: torch.Tensor, s) -> torch.Tensor:
    """Pick ``trajectory[b, s_b - 1]`` per batch item; returns ``(B, 1, H, W)``."""
    idx = torch.as_tensor(np.asarray(s) - 1, dtype=torch.long, device=trajectory.device)
    rows = torch.arange(trajectory.shape[0], device=trajectory.device)
    return trajectory[rows, idx].unsqueeze(1)


def _per_item_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).pow(2).flatten(1).mean(dim=1)


def ta_loss_clean(x_tilde, trajectory, t, T: int, weight: float = 1.0, variant: str = "block"):
    """``weight * mean_cells (x_tilde - x_opt[s(t-1)])^2`` averaged over the batch."""
    n_s = trajectory.shape[1]
    s = step_to_snapshot(_as_index(t) - 1, T, n_s, variant)
    target = select_snapshots(trajectory, s)
    return weight * _per_item_mse(x_tilde, target).mean()


def noisy_target(trajectory, t, schedule: DiffusionSchedule, epsilon, variant: str = "block"):
    """Snapshot ``s(t-1)`` pushed through the forward marginal to step ``t-1``."""
    t_idx = _as_index(t)
    s = step_to_snapshot(t_idx - 1, schedule.T, trajectory.shape[1], variant)
    snap = select_snapshots(trajectory, s)
    return forward_marginal(snap, t_idx - 1, epsilon, schedule)


def ta_loss_noisy(x_pred_prev, trajectory, t, schedule: DiffusionSchedule, epsilon, weight: float = 1.0, variant="block"):
    """Match ``x_{t-1}`` predictions against the noised snapshot, sharing ``epsilon``."""
    target = noisy_target(trajectory, t, schedule, epsilon, variant)
    return weight * _per_item_mse(x_pred_prev, target).mean()


def ta_loss_perf(
    x_pred,
    perf_model,
    performance,
    t,
    T: int,
    conditioning=None,
    weight: float = 1.0,
    variant: str = "block",
):
    """Squared error between ``perf_model`` and the recorded log-compliance of snapshot ``s(t-1)``."""
    if performance is None:
        raise MissingPerformance("trajectory carries no compliance records")
    if weight == 0:
        return x_pred.sum() * 0.0
    n_s = performance.shape[1]
    s = step_to_snapshot(_as_index(t) - 1, T, n_s, variant)
    idx = torch.as_tensor(np.asarray(s) - 1, dtype=torch.long)
    target = torch.log(performance[torch.arange(performance.shape[0]), idx])
    pred = perf_model(x_pred, conditioning)
    return weight * (pred - target).pow(2).mean()


@torch.no_grad()
def trajectory_distance_probe(
    denoiser,
    x0: torch.Tensor,
    conditioning: torch.Tensor,
    trajectory: torch.Tensor,
    schedule: DiffusionSchedule,
    n_probe_steps: int = 10,
    seed: int = 0,
    variant: str = "block",
) -> list[tuple[int, float]]:
    """``||x_tilde(x_t, eps_hat) - x_opt[s(t)]||_2`` at evenly spaced steps.

    Returns one ``(t, distance)`` pair per probe step, the distance averaged
    over the batch.  Noise is drawn from ``seed`` so repeated probes compare
    like with like.
    """
    gen = torch.Generator().manual_seed(seed)
    steps = np.unique(np.round(np.linspace(1, schedule.T, n_probe_steps)).astype(np.int64))
    out = []
    n_s = trajectory.shape[1]
    B = x0.shape[0]
    for t in steps:
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        t_vec = torch.full((B,), int(t), dtype=torch.long)
        x_t = forward_marginal(x0, int(t), eps, schedule)
        eps_hat = denoiser(x_t, conditioning, t_vec)
        x_tilde = reconstruct_clean(x_t, eps_hat, int(t), schedule)
        target = select_snapshots(trajectory, np.full(B, step_to_snapshot(int(t), schedule.T, n_s, variant)))
        dist = (x_tilde - target).flatten(1).norm(dim=1)
        out.append((int(t), float(dist.mean())))
    return out
