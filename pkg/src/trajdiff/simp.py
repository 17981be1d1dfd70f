"""SIMP minimum-compliance optimizer with sensitivity filtering and OC updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NoProgress
from .fem import ConstraintConfig, MaterialModel, assemble_and_solve, compliance_sensitivity

log = logging.getLogger(__name__)

DEFAULT_RECORDED = (10, 20, 30, 50, 70)
# lower bound used inside the OC update so void cells can regrow during refinement
DENSITY_FLOOR = 1e-3


@dataclass
class SimpSettings:
    max_iters: int = 100
    filter_radius: float = 1.5
    move: float = 0.2
    tol: float = 0.01
    recorded_iterations: tuple[int, ...] = DEFAULT_RECORDED
    solver: str = "direct"
    material: MaterialModel = field(default_factory=MaterialModel)

    def __post_init__(self):
        self.recorded_iterations = tuple(int(i) for i in self.recorded_iterations)
        if list(self.recorded_iterations) != sorted(set(self.recorded_iterations)):
            raise ValueError("recorded_iterations must be strictly increasing")
        if self.recorded_iterations and self.max_iters < max(self.recorded_iterations):
            raise ValueError("max_iters must cover every recorded iteration")
        if self.filter_radius < 1:
            raise ValueError("filter_radius must be at least one element")
        if not 0 < self.move <= 1:
            raise ValueError("move limit must lie in (0, 1]")

    def to_dict(self) -> dict:
        m = self.material
        return {
            "max_iters": self.max_iters,
            "filter_radius": self.filter_radius,
            "move": self.move,
            "tol": self.tol,
            "recorded_iterations": list(self.recorded_iterations),
            "solver": self.solver,
            "material": {"E0": m.E0, "Emin": m.Emin, "nu": m.nu, "penal": m.penal},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimpSettings":
        d = dict(d)
        mat = MaterialModel(**d.pop("material", {}))
        return cls(material=mat, **d)


@dataclass
class Snapshot:
    iteration: int
    density: np.ndarray
    compliance: float


@dataclass
class OptimizationTrajectory:
    snapshots: list[Snapshot]
    final: np.ndarray
    final_compliance: float
    initial_compliance: float
    iterations: int
    compliance_history: list[float]
    volume_history: list[float]

    @property
    def recorded_iterations(self) -> list[int]:
        return [s.iteration for s in self.snapshots]

    def stacked(self) -> np.ndarray:
        """Snapshot densities as an ``(n_s, ny, nx)`` array."""
        return np.stack([s.density for s in self.snapshots])

    def compliances(self) -> np.ndarray:
        return np.array([s.compliance for s in self.snapshots])


def _filter_kernel(radius: float) -> np.ndarray:
    reach = max(int(np.ceil(radius)) - 1, 0)
    offs = np.arange(-reach, reach + 1)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    return np.maximum(0.0, radius - np.hypot(dy, dx))


def filter_sensitivities(gradient: np.ndarray, density: np.ndarray, radius: float) -> np.ndarray:
    """Density-weighted sensitivity filter with cone weights ``max(0, r - dist)``."""
    gradient = np.asarray(gradient, dtype=float)
    if radius <= 1.0:
        return gradient.copy()
    x = np.asarray(density, dtype=float)
    w = _filter_kernel(radius)
    num = ndimage.correlate(x * gradient, w, mode="constant", cval=0.0)
    den = ndimage.correlate(np.ones_like(x), w, mode="constant", cval=0.0)
    return num / (den * np.maximum(DENSITY_FLOOR, x))


def oc_update(x: np.ndarray, dc: np.ndarray, volume_fraction: float, move: float) -> np.ndarray:
    """Optimality-criteria step with bisection on the volume multiplier."""
    ratio = np.sqrt(np.maximum(-dc, 0.0))
    target = volume_fraction * x.size
    lo, hi = 0.0, 1e9
    lower = np.maximum(DENSITY_FLOOR, x - move)
    upper = np.minimum(1.0, x + move)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        xnew = np.clip(x * ratio / np.sqrt(mid), lower, upper)
        if xnew.sum() > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * (hi + lo):
            break
    return np.clip(x * ratio / np.sqrt(hi), lower, upper)


def _step(x, config, settings):
    sol = assemble_and_solve(config, x, settings.material, solver=settings.solver)
    dc = compliance_sensitivity(sol, x, settings.material)
    dc = filter_sensitivities(dc, x, settings.filter_radius)
    return sol.compliance, oc_update(x, dc, config.volume_fraction, settings.move)


def optimize(config: ConstraintConfig, settings: SimpSettings | None = None) -> OptimizationTrajectory:
    """Run SIMP from the uniform design ``x = v`` and record intermediate densities.

    A snapshot at iteration ``k`` is the density after ``k`` OC updates, paired
    with its own compliance.  If the run converges before a recorded
    iteration, the converged design fills the remaining slots.
    """
    settings = settings or SimpSettings()
    config.validate()
    x = np.full(config.shape, config.volume_fraction)
    recorded = set(settings.recorded_iterations)
    snapshots: list[Snapshot] = []
    history: list[float] = []
    volumes: list[float] = [float(x.mean())]

    it = 0
    while True:
        c, xnew = _step(x, config, settings)
        history.append(c)
        if it in recorded:
            snapshots.append(Snapshot(it, x.copy(), c))
        if it == 20 and min(history[1:21]) >= history[0]:
            raise NoProgress("compliance did not decrease during the first 20 iterations")
        if it >= settings.max_iters:
            break
        change = float(np.abs(xnew - x).max())
        x = xnew
        it += 1
        volumes.append(float(x.mean()))
        if change < settings.tol:
            log.debug("converged at iteration %d", it)
            c = assemble_and_solve(config, x, settings.material, solver=settings.solver).compliance
            history.append(c)
            if it in recorded:
                snapshots.append(Snapshot(it, x.copy(), c))
            break

    for k in settings.recorded_iterations:
        if k > it:
            snapshots.append(Snapshot(k, x.copy(), history[-1]))

    return OptimizationTrajectory(
        snapshots=snapshots,
        final=x,
        final_compliance=history[-1],
        initial_compliance=history[0],
        iterations=it,
        compliance_history=history,
        volume_history=volumes,
    )


def refine(
    initial: np.ndarray,
    config: ConstraintConfig,
    n_steps: int,
    settings: SimpSettings | None = None,
) -> tuple[np.ndarray, float]:
    """A few OC iterations seeded from an existing (e.g. generated) design."""
    settings = settings or SimpSettings()
    if not 0 <= n_steps <= 50:
        raise ValueError("n_steps must lie in [0, 50]")
    x = np.asarray(initial, dtype=float)
    if n_steps == 0:
        return x, assemble_and_solve(config, x, settings.material, solver=settings.solver).compliance
    x = np.clip(x, 0.0, 1.0)
    for _ in range(n_steps):
        _, x = _step(x, config, settings)
    c = assemble_and_solve(config, x, settings.material, solver=settings.solver).compliance
    return x, c
