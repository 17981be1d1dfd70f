"""Conditional noise-prediction U-Net, auxiliary performance regressor and training."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import TaConfig, noisy_target, step_to_snapshot, ta_loss_clean, ta_loss_noisy, ta_loss_perf
from .diffusion import DiffusionSchedule, forward_marginal, posterior_mean, reconstruct_clean
from .errors import NonFiniteLoss, ShapeMismatch

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserSpec:
    cond_channels: int = 4
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    groups: int = 8

    @property
    def in_channels(self) -> int:
        return 1 + self.cond_channels

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channel_mults) - 1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb.to(torch.get_default_dtype())


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Three-level encoder/decoder; conditioning is concatenated to the noisy input."""

    def __init__(self, spec: DenoiserSpec = DenoiserSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        emb_dim = 4 * w
        self.time_mlp = nn.Sequential(nn.Linear(w, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inp = nn.Conv2d(spec.in_channels, w, 3, padding=1)
        widths = [w * m for m in spec.channel_mults]
        self.down = nn.ModuleList()
        prev = w
        for c in widths:
            self.down.append(ResBlock(prev, c, emb_dim, spec.groups))
            prev = c
        self.mid = ResBlock(prev, prev, emb_dim, spec.groups)
        self.up = nn.ModuleList()
        for c in reversed(widths):
            self.up.append(ResBlock(prev + c, c, emb_dim, spec.groups))
            prev = c
        self.out_norm = nn.GroupNorm(spec.groups, prev)
        self.out = nn.Conv2d(prev, 1, 3, padding=1)

    def forward(self, x_t, conditioning, t):
        if x_t.dim() != 4 or x_t.shape[1] != 1:
            raise ShapeMismatch(f"x_t must be (B, 1, H, W), got {tuple(x_t.shape)}")
        if conditioning.shape[1] != self.spec.cond_channels or conditioning.shape[-2:] != x_t.shape[-2:]:
            raise ShapeMismatch(
                f"conditioning {tuple(conditioning.shape)} incompatible with x_t {tuple(x_t.shape)}"
            )
        H, W = x_t.shape[-2:]
        if H % self.spec.stride or W % self.spec.stride:
            raise ShapeMismatch(f"grid {H}x{W} not divisible by {self.spec.stride}")
        emb = self.time_mlp(timestep_embedding(t, self.spec.base_width).to(x_t.dtype))
        h = self.inp(torch.cat([x_t, conditioning], dim=1))
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.down) - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        for block in self.up:
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


class PerfRegressor(nn.Module):
    """Small CNN estimating log-compliance of a design under its conditioning."""

    def __init__(self, cond_channels: int = 4, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1 + cond_channels, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(2 * width, 1)

    def forward(self, x, conditioning):
        h = self.net(torch.cat([x, conditioning], dim=1)).mean(dim=(2, 3))
        return self.head(h).squeeze(1)


def parameter_count(spec: DenoiserSpec) -> int:
    return sum(p.numel() for p in Denoiser(spec).parameters())


@dataclass
class Batch:
    x0: torch.Tensor  # (B, 1, H, W)
    conditioning: torch.Tensor  # (B, C, H, W)
    trajectory: torch.Tensor  # (B, n_s, H, W)
    compliances: torch.Tensor | None = None  # (B, n_s)

    def __len__(self):
        return self.x0.shape[0]

    def permuted(self, order) -> "Batch":
        order = torch.as_tensor(order, dtype=torch.long)
        return Batch(
            self.x0[order],
            self.conditioning[order],
            self.trajectory[order],
            None if self.compliances is None else self.compliances[order],
        )


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    perf_lr: float = 1e-3


@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    config: TrainConfig = field(default_factory=TrainConfig)
    perf_model: PerfRegressor | None = None
    perf_optimizer: torch.optim.Optimizer | None = None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(spec: DenoiserSpec, seed: int, config: TrainConfig | None = None, with_perf: bool = False) -> TrainState:
    config = config or TrainConfig()
    torch.manual_seed(seed)
    model = Denoiser(spec)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    perf = perf_opt = None
    if with_perf:
        perf = PerfRegressor(spec.cond_channels)
        perf_opt = torch.optim.Adam(perf.parameters(), lr=config.perf_lr)
    gen = torch.Generator().manual_seed(seed + 1)
    return TrainState(model, opt, gen, config, perf, perf_opt)


def predict_noise(state_or_model, x_t, conditioning, t):
    model = state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model
    if not isinstance(t, torch.Tensor):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    return model(x_t, conditioning, t)


def compute_losses(
    model: nn.Module,
    batch: Batch,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: DiffusionSchedule,
    ta: TaConfig,
    perf_model: nn.Module | None = None,
    eps_weights: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise-prediction loss and the selected alignment term for fixed ``t``, ``eps``."""
    x_t = forward_marginal(batch.x0, t, eps, schedule)
    eps_hat = model(x_t, batch.conditioning, t)
    per_item = (eps_hat - eps).pow(2).flatten(1).mean(dim=1)
    if eps_weights is not None:
        per_item = per_item * eps_weights
    eps_loss = per_item.mean()

    if ta.mode == "none":
        return eps_loss, torch.zeros((), dtype=eps_loss.dtype)

    x_tilde = reconstruct_clean(x_t, eps_hat, t, schedule)
    if ta.mode == "clean":
        ta_loss = ta_loss_clean(x_tilde, batch.trajectory, t, schedule.T, ta.weight_clean, ta.step_map)
    elif ta.mode == "noisy":
        x_prev = forward_marginal(x_tilde, t - 1, eps, schedule)
        ta_loss = ta_loss_noisy(x_prev, batch.trajectory, t, schedule, eps, ta.weight_noisy, ta.step_map)
    else:
        x_prev = posterior_mean(x_t, x_tilde, t, schedule)
        ta_loss = ta_loss_perf(
            x_prev, perf_model, batch.compliances, t, schedule.T, batch.conditioning, ta.weight_perf, ta.step_map
        )
    return eps_loss, ta_loss


def _perf_update(state: TrainState, batch: Batch, t, eps, schedule: DiffusionSchedule, ta: TaConfig) -> float:
    target_x = noisy_target(batch.trajectory, t, schedule, eps, ta.step_map)
    s = step_to_snapshot(t.numpy() - 1, schedule.T, batch.trajectory.shape[1], ta.step_map)
    target = torch.log(batch.compliances[torch.arange(len(batch)), torch.as_tensor(s - 1)])
    pred = state.perf_model(target_x, batch.conditioning)
    loss = (pred - target).pow(2).mean()
    state.perf_optimizer.zero_grad()
    loss.backward()
    state.perf_optimizer.step()
    return loss.item()


def training_step(state: TrainState, batch: Batch, schedule: DiffusionSchedule, ta: TaConfig) -> dict:
    """Sample ``t`` and ``eps`` per item, take one Adam step on eps-loss + alignment loss."""
    B = len(batch)
    t = torch.randint(1, schedule.T + 1, (B,), generator=state.generator)
    eps = torch.randn(batch.x0.shape, generator=state.generator, dtype=batch.x0.dtype)
    model = state.model
    model.train()

    perf_loss = 0.0
    if ta.mode == "perf":
        if state.perf_model is None:
            raise ValueError("perf alignment needs a TrainState with a perf model")
        perf_loss = _perf_update(state, batch, t, eps, schedule, ta)
        for p in state.perf_model.parameters():
            p.requires_grad_(False)
    try:
        eps_loss, ta_loss = compute_losses(model, batch, t, eps, schedule, ta, state.perf_model)
    finally:
        if state.perf_model is not None:
            for p in state.perf_model.parameters():
                p.requires_grad_(True)
    total = eps_loss + ta_loss
    if not torch.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite loss at iteration {state.iteration}: "
            f"eps={eps_loss.item()} ta={ta_loss.item()} t={t.tolist()}"
        )
    state.optimizer.zero_grad()
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), state.config.grad_clip)
    state.optimizer.step()

    state.iteration += 1
    report = {
        "iteration": state.iteration,
        "eps_loss": eps_loss.item(),
        "ta_loss": ta_loss.item(),
        "perf_loss": perf_loss,
        "grad_norm": float(grad_norm),
    }
    state.history.append(report)
    return report


def save_checkpoint(path, state: TrainState, schedule: DiffusionSchedule, manifest_hash: str, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "byteorder": "little",
        "spec": asdict(state.model.spec),
        "schedule": schedule.describe(),
        "manifest_hash": manifest_hash,
        "train_config": asdict(state.config),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "perf_model": None if state.perf_model is None else state.perf_model.state_dict(),
        "perf_optimizer": None if state.perf_optimizer is None else state.perf_optimizer.state_dict(),
        "generator": state.generator.get_state(),
        "iteration": state.iteration,
        "history": state.history,
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[TrainState, DiffusionSchedule, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    spec_d = dict(payload["spec"])
    spec_d["channel_mults"] = tuple(spec_d["channel_mults"])
    spec = DenoiserSpec(**spec_d)
    cfg_d = dict(payload["train_config"])
    cfg_d["betas"] = tuple(cfg_d["betas"])
    config = TrainConfig(**cfg_d)
    state = init_state(spec, 0, config, with_perf=payload["perf_model"] is not None)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.perf_model is not None:
        state.perf_model.load_state_dict(payload["perf_model"])
        state.perf_optimizer.load_state_dict(payload["perf_optimizer"])
    state.generator.set_state(payload["generator"])
    state.iteration = payload["iteration"]
    state.history = list(payload["history"])
    schedule = DiffusionSchedule.from_description(payload["schedule"])
    return state, schedule, payload
