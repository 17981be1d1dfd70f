"""Conditioning channels: closed-form load/support kernels and FEM baseline fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNormalization
from .fem import ConstraintConfig, MaterialModel, assemble_and_solve

KERNEL_CHANNELS = ("kernel_load_x", "kernel_load_y", "kernel_bc", "volume_fraction")
FIELD_CHANNELS = ("strain_energy", "von_mises", "volume_fraction")


@dataclass
class ConditioningTensor:
    channels: np.ndarray  # (C, H, W)
    mode: str  # "kernel" or "field"

    @property
    def names(self) -> tuple[str, ...]:
        return KERNEL_CHANNELS if self.mode == "kernel" else FIELD_CHANNELS


def _sq_dist(positions: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows = np.arange(shape[0], dtype=float)[None, :, None]
    cols = np.arange(shape[1], dtype=float)[None, None, :]
    pr = positions[:, 0, None, None]
    pc = positions[:, 1, None, None]
    return (rows - pr) ** 2 + (cols - pc) ** 2


def load_kernel(loads, alpha: float = 1.0, shape: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Two ``(H, W)`` channels of ``sum_l (1 - exp(-alpha / r^2)) p_l`` per axis.

    ``loads`` is a sequence of ``((row, col), px, py)``.  At ``r = 0`` the
    term equals ``p`` exactly.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    out = np.zeros((2, *shape))
    if len(loads) == 0:
        return out
    pos = np.array([p for p, _, _ in loads], dtype=float).reshape(-1, 2)
    mags = np.array([[px, py] for _, px, py in loads], dtype=float)
    r2 = _sq_dist(pos, shape)
    with np.errstate(divide="ignore"):
        k = np.where(r2 > 0, -np.expm1(-alpha / r2), 1.0)
    out[0] = np.tensordot(mags[:, 0], k, axes=1)
    out[1] = np.tensordot(mags[:, 1], k, axes=1)
    return out


def boundary_kernel(fixed_cells, alpha: float = 1.0, shape: tuple[int, int] = (64, 64)) -> np.ndarray:
    """``sum_b exp(-alpha / r^2)`` normalised by its grid maximum; zero on supports."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(fixed_cells) == 0:
        raise ValueError("boundary kernel needs at least one fixed cell")
    pos = np.array(fixed_cells, dtype=float).reshape(-1, 2)
    r2 = _sq_dist(pos, shape)
    with np.errstate(divide="ignore"):
        raw = np.where(r2 > 0, np.exp(-alpha / r2), 0.0).sum(axis=0)
    peak = raw.max()
    if peak <= 0:
        raise DegenerateNormalization("boundary kernel is identically zero")
    return raw / peak


def snap_node(config: ConstraintConfig, node: int) -> tuple[int, int]:
    """Nearest cell ``(row, col)`` to a node; ties resolve to the lower-right cell, clipped to the grid."""
    ix, iy = (int(v) for v in config.mesh.node_coords(node))
    return min(iy, config.ny - 1), min(ix, config.nx - 1)


def fixed_cells(config: ConstraintConfig) -> list[tuple[int, int]]:
    nodes = sorted({d // 2 for d in config.fixed_dofs})
    return sorted({snap_node(config, n) for n in nodes})


def kernel_conditioning(config: ConstraintConfig, alpha: float = 1.0) -> ConditioningTensor:
    """KERNEL-mode channels; no linear solve involved."""
    shape = config.shape
    loads = [(snap_node(config, n), fx, fy) for n, fx, fy in config.loads]
    channels = np.empty((4, *shape))
    channels[:2] = load_kernel(loads, alpha, shape)
    channels[2] = boundary_kernel(fixed_cells(config), alpha, shape)
    channels[3] = config.volume_fraction
    return ConditioningTensor(channels, "kernel")


def field_conditioning(
    config: ConstraintConfig, material: MaterialModel = MaterialModel(), solver: str = "direct"
) -> ConditioningTensor:
    """FIELD-mode channels from an FEM solve of the uniform design ``x = v``."""
    x = np.full(config.shape, config.volume_fraction)
    sol = assemble_and_solve(config, x, material, solver=solver)
    channels = np.stack(
        [sol.strain_energy, sol.von_mises, np.full(config.shape, config.volume_fraction)]
    )
    return ConditioningTensor(channels, "field")
