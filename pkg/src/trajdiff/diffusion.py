"""DDPM schedule, forward marginal, posterior and (respaced) ancestral sampling.

Arrays in a :class:`DiffusionSchedule` are indexed by the step ``t`` directly;
index 0 is the clean data (``alpha_bar[0] = 1``).  The functions below accept
numpy arrays or torch tensors; ``t`` may be an int or a 1-D batch of ints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "cosine"
    # original step for each index; identity for a full schedule
    timesteps: np.ndarray | None = None
    max_beta: float = 0.02

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abar = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.shape != abar.shape or betas[0] != 0.0 or abar[0] != 1.0:
            raise ValueError("schedule arrays must have length T+1 with index 0 = clean data")
        ts = np.arange(len(betas)) if self.timesteps is None else np.asarray(self.timesteps)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abar)
        object.__setattr__(self, "timesteps", ts)
        alphas = 1.0 - betas
        abar_prev = np.concatenate([[1.0], abar[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            post_var = np.where(np.arange(len(betas)) > 0, betas * (1.0 - abar_prev) / (1.0 - abar), 0.0)
            coef_x0 = np.where(np.arange(len(betas)) > 0, betas * np.sqrt(abar_prev) / (1.0 - abar), 0.0)
            coef_xt = np.where(
                np.arange(len(betas)) > 0, (1.0 - abar_prev) * np.sqrt(alphas) / (1.0 - abar), 0.0
            )
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars_prev", abar_prev)
        object.__setattr__(self, "posterior_variance", post_var)
        object.__setattr__(self, "posterior_coef_x0", coef_x0)
        object.__setattr__(self, "posterior_coef_xt", coef_xt)

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def describe(self) -> dict:
        return {"kind": self.kind, "T": self.T, "max_beta": self.max_beta}

    @classmethod
    def from_description(cls, d: dict) -> "DiffusionSchedule":
        return make_schedule(int(d["T"]), d.get("kind", "cosine"), float(d.get("max_beta", 0.02)))


def make_schedule(T: int = 1000, kind: str = "cosine", max_beta: float = 0.02) -> DiffusionSchedule:
    """Cosine (s=0.008, betas capped at ``max_beta``) or linear schedule.

    The cap keeps ``alpha_bar_T`` near 3e-3 at T=1000 instead of ~1e-9, so the
    clean reconstruction at large ``t`` amplifies noise-prediction errors by
    ~18x rather than ~2e4x.  ``max_beta=0.999`` gives the uncapped variant.
    """
    if T < 1:
        raise ValueError("T must be positive")
    if kind == "cosine":
        s = 0.008
        f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f(i / T) / f((i - 1) / T), max_beta) for i in range(1, T + 1)])
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas[1:])])
    return DiffusionSchedule(betas, alpha_bars, kind, max_beta=max_beta)


def respace(schedule: DiffusionSchedule, n_steps: int) -> DiffusionSchedule:
    """Keep ``n_steps`` steps chosen by uniform stride over ``[1, T]``.

    The alpha_bar values are an exact subsequence of the original; betas are
    rebuilt from consecutive ratios, reusing the original beta wherever the
    kept steps are adjacent.
    """
    T = schedule.T
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}]")
    if n_steps == 1:
        kept = np.array([T])
    else:
        kept = np.unique(np.round(np.linspace(1, T, n_steps)).astype(np.int64))
    abar = np.concatenate([[1.0], schedule.alpha_bars[kept]])
    prev_steps = np.concatenate([[0], kept[:-1]])
    betas = np.where(
        kept - prev_steps == 1,
        schedule.betas[kept],
        1.0 - abar[1:] / abar[:-1],
    )
    return DiffusionSchedule(
        np.concatenate([[0.0], betas]),
        abar,
        schedule.kind,
        timesteps=np.concatenate([[0], kept]),
        max_beta=schedule.max_beta,
    )


def _coef(values: np.ndarray, t, like):
    if isinstance(t, (int, np.integer)):
        return float(values[int(t)])
    if isinstance(like, torch.Tensor):
        idx = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        c = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
        return c.view(-1, *([1] * (like.dim() - 1)))
    c = values[np.asarray(t)]
    return c.reshape(-1, *([1] * (np.ndim(like) - 1)))


def forward_marginal(x0, t, epsilon, schedule: DiffusionSchedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t = 0`` returns ``x0``."""
    a = _coef(np.sqrt(schedule.alpha_bars), t, x0)
    b = _coef(np.sqrt(1.0 - schedule.alpha_bars), t, x0)
    return a * x0 + b * epsilon


def reconstruct_clean(x_t, epsilon_hat, t, schedule: DiffusionSchedule):
    """Clean estimate ``(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``."""
    a = _coef(np.sqrt(schedule.alpha_bars), t, x_t)
    b = _coef(np.sqrt(1.0 - schedule.alpha_bars), t, x_t)
    return (x_t - b * epsilon_hat) / a


def posterior_mean(x_t, x0, t, schedule: DiffusionSchedule):
    """Mean of ``q(x_{t-1} | x_t, x0)``."""
    return _coef(schedule.posterior_coef_x0, t, x_t) * x0 + _coef(schedule.posterior_coef_xt, t, x_t) * x_t


def ancestral_step(x_t, epsilon_hat, t, schedule: DiffusionSchedule, noise=None, clip=None):
    """One reverse step with fixed variance ``beta_tilde_t``.

    ``clip`` optionally bounds the clean estimate, e.g. ``(0.0, 1.0)``.
    No noise is added at ``t = 1``.
    """
    x0 = reconstruct_clean(x_t, epsilon_hat, t, schedule)
    if clip is not None:
        x0 = x0.clip(*clip)
    mean = posterior_mean(x_t, x0, t, schedule)
    if noise is None or (isinstance(t, (int, np.integer)) and t == 1):
        return mean
    std = _coef(np.sqrt(schedule.posterior_variance), t, x_t)
    return mean + std * noise


def loss_weight(t, schedule: DiffusionSchedule, kind: str = "simple"):
    """Per-step weight of the noise-prediction loss.

    ``"simple"`` is 1; ``"elbo"`` is ``beta^2 / (2 sigma^2 alpha (1 - abar))``
    with ``sigma^2 = beta_tilde`` (undefined at ``t = 1``, where it is clamped
    to the ``t = 2`` variance).
    """
    t = np.asarray(t)
    if kind == "simple":
        return np.ones(t.shape)
    if kind != "elbo":
        raise ValueError(f"unknown loss weighting {kind!r}")
    var = schedule.posterior_variance.copy()
    if len(var) > 2:
        var[1] = var[2]
    b = schedule.betas
    return b[t] ** 2 / (2 * var[t] * schedule.alphas[t] * (1 - schedule.alpha_bars[t]))


@torch.no_grad()
def sample(
    denoiser,
    conditioning: torch.Tensor,
    schedule: DiffusionSchedule,
    generator: torch.Generator,
    clip: tuple[float, float] | None = (0.0, 1.0),
) -> torch.Tensor:
    """Ancestral sampling over every step of ``schedule``.

    ``denoiser(x_t, conditioning, t)`` receives the original diffusion step of
    each kept index.  ``conditioning`` is ``(B, C, H, W)``; returns
    ``(B, 1, H, W)`` clamped to ``[0, 1]``.
    """
    B, _, H, W = conditioning.shape
    dtype = conditioning.dtype
    x = torch.randn((B, 1, H, W), generator=generator, dtype=dtype)
    for k in range(schedule.T, 0, -1):
        t_model = torch.full((B,), int(schedule.timesteps[k]), dtype=torch.long)
        eps = denoiser(x, conditioning, t_model)
        noise = torch.randn((B, 1, H, W), generator=generator, dtype=dtype) if k > 1 else None
        x = ancestral_step(x, eps, k, schedule, noise=noise, clip=clip)
    return x.clamp(0.0, 1.0)


def respaced_sampler(
    denoiser,
    conditioning: torch.Tensor,
    n_steps: int,
    seed: int,
    schedule: DiffusionSchedule,
    clip: tuple[float, float] | None = (0.0, 1.0),
) -> torch.Tensor:
    """Few-step sampling on a strided subsequence of ``schedule``."""
    gen = torch.Generator().manual_seed(int(seed))
    return sample(denoiser, conditioning, respace(schedule, n_steps), gen, clip=clip)
