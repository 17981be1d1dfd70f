"""Physics-grounded evaluation of generated designs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import LengthMismatch, Unsolvable
from .fem import ConstraintConfig, MaterialModel, assemble_and_solve

REPORT_SCHEMA_VERSION = 1
AGGREGATE_COLUMNS = ("AVG_CE", "MDN_CE", "VFE", "FM", "LD", "UNS", "INF_S")
# generated compliance above this multiple of the reference counts as unsolvable
UNS_RATIO = 100.0

_EIGHT = np.ones((3, 3), dtype=int)
_FOUR = ndimage.generate_binary_structure(2, 1)


def compliance_error(
    generated: np.ndarray,
    reference_compliance: float,
    config: ConstraintConfig,
    material: MaterialModel = MaterialModel(),
) -> float:
    """Percent compliance error of a continuous design against its reference.

    Raises :class:`Unsolvable` when FEM fails or the generated compliance
    exceeds ``UNS_RATIO`` times the reference.
    """
    if reference_compliance <= 0:
        raise ValueError("reference compliance must be positive")
    c = assemble_and_solve(config, np.clip(generated, 0.0, 1.0), material).compliance
    if not np.isfinite(c) or c > UNS_RATIO * reference_compliance:
        raise Unsolvable(f"generated compliance {c:.4g} vs reference {reference_compliance:.4g}")
    return 100.0 * (c - reference_compliance) / reference_compliance


def volume_fraction_error(generated: np.ndarray, target_vf: float) -> float:
    if not 0 < target_vf < 1:
        raise ValueError("target volume fraction must lie in (0, 1)")
    return 100.0 * abs(float(np.mean(generated)) - target_vf) / target_vf


def supported_cells(config: ConstraintConfig) -> np.ndarray:
    """Boolean mask of cells incident to a node with at least one fixed DOF."""
    mask = np.zeros(config.shape, dtype=bool)
    for node in sorted({d // 2 for d in config.fixed_dofs}):
        for r, c in config.mesh.node_cells(node):
            mask[r, c] = True
    return mask


def floating_material(
    generated: np.ndarray, config: ConstraintConfig, threshold: float = 0.5, connectivity: int = 8
) -> bool:
    """True iff some solid component contains no cell touching a support."""
    solid = np.asarray(generated) >= threshold
    labels, n = ndimage.label(solid, structure=_EIGHT if connectivity == 8 else _FOUR)
    if n == 0:
        return False
    anchored = np.unique(labels[supported_cells(config) & solid])
    return len(set(range(1, n + 1)) - set(anchored.tolist())) > 0


def load_disrespect(generated: np.ndarray, config: ConstraintConfig, threshold: float = 0.5) -> bool:
    """True iff some load acts on a node whose incident cells are all void."""
    generated = np.asarray(generated)
    for node, fx, fy in config.loads:
        if fx == 0 and fy == 0:
            continue
        cells = config.mesh.node_cells(node)
        if all(generated[r, c] < threshold for r, c in cells):
            return True
    return False


@dataclass
class SampleRecord:
    index: int
    ce: float | None
    vfe: float
    fm: bool
    ld: bool
    uns: bool
    inference_s: float


@dataclass
class EvalReport:
    records: list[SampleRecord]
    aggregate: dict
    threshold: float = 0.5
    uns_ratio: float = UNS_RATIO

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "threshold": self.threshold,
            "uns_ratio": self.uns_ratio,
            "aggregate": self.aggregate,
            "records": [asdict(r) for r in self.records],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(AGGREGATE_COLUMNS)
            writer.writerow([self.aggregate[k] for k in AGGREGATE_COLUMNS])


def evaluate_sample(index, generated, config, reference_compliance, inference_s=0.0, threshold=0.5, material=MaterialModel()):
    generated = np.asarray(generated, dtype=float)
    try:
        ce = compliance_error(generated, reference_compliance, config, material)
        uns = False
    except Unsolvable:
        ce, uns = None, True
    return SampleRecord(
        index=index,
        ce=ce,
        vfe=volume_fraction_error(generated, config.volume_fraction),
        fm=floating_material(generated, config, threshold),
        ld=load_disrespect(generated, config, threshold),
        uns=uns,
        inference_s=float(inference_s),
    )


def aggregate(records: list[SampleRecord]) -> dict:
    n = len(records)
    ces = np.array([r.ce for r in records if not r.uns], dtype=float)
    return {
        "AVG_CE": float(np.mean(ces)) if ces.size else float("nan"),
        "MDN_CE": float(np.median(ces)) if ces.size else float("nan"),
        "VFE": float(np.mean([r.vfe for r in records])),
        "FM": 100.0 * sum(r.fm for r in records) / n,
        "LD": 100.0 * sum(r.ld for r in records) / n,
        "UNS": 100.0 * sum(r.uns for r in records) / n,
        "INF_S": float(np.mean([r.inference_s for r in records])),
    }


def evaluate_batch(samples, configs, references, timing=None, threshold: float = 0.5) -> EvalReport:
    """Evaluate aligned lists of designs, configs and reference compliances."""
    n = len(samples)
    if n == 0:
        raise LengthMismatch("empty batch")
    timing = [0.0] * n if timing is None else list(timing)
    if not (len(configs) == len(references) == len(timing) == n):
        raise LengthMismatch(
            f"samples={n} configs={len(configs)} references={len(references)} timing={len(timing)}"
        )
    records = [
        evaluate_sample(i, samples[i], configs[i], references[i], timing[i], threshold) for i in range(n)
    ]
    return EvalReport(records, aggregate(records), threshold)
