"""Corpus generation, the DOMT tensor format, and manifest-verified loading.

Layout of a dataset directory (flat, zero-padded sample ids)::

    manifest.json
    00000_config.json      constraint config
    00000_meta.json        snapshot iterations and compliances
    00000_topology.domt    (H, W) float32 final design
    00000_snapshots.domt   (n_s, H, W) float32 intermediate designs
    00000_kernel.domt      (4, H, W) float32 KERNEL conditioning
    00000_field.domt       (3, H, W) float32 FIELD conditioning (optional)
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptRecord, ExhaustedAttempts, NoProgress, Unsolvable
from .fem import ConstraintConfig, is_solvable, mesh_for
from .kernels import FIELD_CHANNELS, KERNEL_CHANNELS, field_conditioning, kernel_conditioning
from .simp import SimpSettings, optimize

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAGIC = b"DOMT"
TENSOR_VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("u1"): 2}

SUPPORT_PATTERNS = ("full_edge", "half_edge", "two_corners")


# -- tensor files ---------------------------------------------------------


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        dt = np.dtype("u1")
    else:
        dt = np.dtype("<f4")
    code = DTYPE_CODES[dt]
    header = MAGIC + struct.pack("<III", TENSOR_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dt).tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise CorruptRecord("bad magic bytes")
    version, code, ndim = struct.unpack_from("<III", data, 4)
    if version != TENSOR_VERSION:
        raise CorruptRecord(f"unsupported tensor version {version}")
    if code not in DTYPES:
        raise CorruptRecord(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}Q", data, 16)
    offset = 16 + 8 * ndim
    dt = DTYPES[code]
    expected = math.prod(dims) * dt.itemsize
    if len(data) - offset != expected:
        raise CorruptRecord(f"payload is {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dt, offset=offset).reshape(dims).copy()


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- config generation ------------------------------------------------------


def _edge_nodes(nx: int, ny: int, edge: str) -> list[int]:
    mesh = mesh_for(nx, ny)
    if edge == "left":
        return [int(mesh.node(0, iy)) for iy in range(ny + 1)]
    if edge == "right":
        return [int(mesh.node(nx, iy)) for iy in range(ny + 1)]
    if edge == "top":
        return [int(mesh.node(ix, 0)) for ix in range(nx + 1)]
    return [int(mesh.node(ix, ny)) for ix in range(nx + 1)]


def _boundary_nodes(nx: int, ny: int) -> list[int]:
    nodes = set()
    for edge in ("left", "right", "top", "bottom"):
        nodes.update(_edge_nodes(nx, ny, edge))
    return sorted(nodes)


def _support_nodes(rng: np.random.Generator, nx: int, ny: int) -> list[int]:
    mesh = mesh_for(nx, ny)
    pattern = SUPPORT_PATTERNS[rng.integers(len(SUPPORT_PATTERNS))]
    edge = ("left", "right", "top", "bottom")[rng.integers(4)]
    if pattern == "full_edge":
        return _edge_nodes(nx, ny, edge)
    if pattern == "half_edge":
        nodes = _edge_nodes(nx, ny, edge)
        half = len(nodes) // 2 + 1
        return nodes[:half] if rng.integers(2) == 0 else nodes[-half:]
    corners = [int(mesh.node(0, 0)), int(mesh.node(nx, 0)), int(mesh.node(nx, ny)), int(mesh.node(0, ny))]
    i, j = rng.choice(4, size=2, replace=False)
    return sorted([corners[i], corners[j]])


def random_config(rng: np.random.Generator, nx: int, ny: int) -> ConstraintConfig:
    support = _support_nodes(rng, nx, ny)
    fixed = [d for n in support for d in (2 * n, 2 * n + 1)]
    candidates = [n for n in _boundary_nodes(nx, ny) if n not in set(support)]
    n_loads = int(rng.integers(1, 3))
    nodes = rng.choice(candidates, size=n_loads, replace=False)
    loads = []
    for node in nodes:
        angle = np.deg2rad(45.0 * rng.integers(8))
        loads.append((int(node), round(float(np.cos(angle)), 12), round(float(np.sin(angle)), 12)))
    vf = float(rng.uniform(0.25, 0.6))
    return ConstraintConfig(nx, ny, fixed, loads, vf)


def generate_configs(n: int, seed: int, grid: tuple[int, int] = (64, 64), max_attempts: int = 100) -> list[ConstraintConfig]:
    """Reproducible rejection sampler of solvable constraint configurations.

    ``grid`` is ``(ny, nx)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    ny, nx = grid
    rng = np.random.default_rng(seed)
    configs = []
    for slot in range(n):
        for _ in range(max_attempts):
            cfg = random_config(rng, nx, ny)
            try:
                cfg.validate()
            except (ValueError, Unsolvable):
                continue
            if is_solvable(cfg):
                configs.append(cfg)
                break
        else:
            raise ExhaustedAttempts(f"no solvable config for slot {slot} in {max_attempts} tries")
    return configs


# -- dataset build ----------------------------------------------------------


def _prefix(i: int) -> str:
    return f"{i:05d}"


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _build_one(args):
    index, config_dict, settings_dict, out_dir, kernel_alpha, with_field = args
    config = ConstraintConfig.from_dict(config_dict)
    settings = SimpSettings.from_dict(settings_dict)
    out = Path(out_dir)
    try:
        traj = optimize(config, settings)
    except (Unsolvable, NoProgress) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"
    p = _prefix(index)
    files = {
        "config": f"{p}_config.json",
        "meta": f"{p}_meta.json",
        "topology": f"{p}_topology.domt",
        "snapshots": f"{p}_snapshots.domt",
        "kernel": f"{p}_kernel.domt",
    }
    _write_json(out / files["config"], config.to_dict())
    _write_json(
        out / files["meta"],
        {
            "snapshot_iterations": traj.recorded_iterations,
            "snapshot_compliances": [float(c) for c in traj.compliances()],
            "final_compliance": float(traj.final_compliance),
            "initial_compliance": float(traj.initial_compliance),
            "iterations": traj.iterations,
        },
    )
    write_tensor(out / files["topology"], traj.final.astype(np.float32))
    write_tensor(out / files["snapshots"], traj.stacked().astype(np.float32))
    write_tensor(out / files["kernel"], kernel_conditioning(config, kernel_alpha).channels.astype(np.float32))
    if with_field:
        files["field"] = f"{p}_field.domt"
        write_tensor(out / files["field"], field_conditioning(config, settings.material).channels.astype(np.float32))
    hashes = {role: sha256_file(out / name) for role, name in files.items()}
    return index, {"id": p, "files": files, "sha256": hashes}, None


def build_dataset(
    configs: list[ConstraintConfig],
    simp_settings: SimpSettings,
    out_dir,
    seed: int | None = None,
    kernel_alpha: float = 1.0,
    with_field: bool = False,
    workers: int = 1,
) -> dict:
    """Optimize every config, write its records, then write ``manifest.json`` last."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not configs:
        raise ValueError("no configs to build")
    jobs = [
        (i, cfg.to_dict(), simp_settings.to_dict(), str(out), kernel_alpha, with_field)
        for i, cfg in enumerate(configs)
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_build_one, jobs, chunksize=4))
    else:
        results = [_build_one(j) for j in jobs]

    records, skipped = [], []
    for index, record, err in sorted(results, key=lambda r: r[0]):
        if record is None:
            log.warning("skipping config %d: %s", index, err)
            skipped.append({"index": index, "reason": err})
        else:
            records.append(record)

    ny, nx = configs[0].shape
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "grid": [ny, nx],
        "sample_count": len(records),
        "requested_count": len(configs),
        "skipped": skipped,
        "recorded_iterations": list(simp_settings.recorded_iterations),
        "simp_settings": simp_settings.to_dict(),
        "kernel_alpha": kernel_alpha,
        "channel_layout": {"kernel": list(KERNEL_CHANNELS), "field": list(FIELD_CHANNELS) if with_field else None},
        "config_distribution": {
            "supports": list(SUPPORT_PATTERNS),
            "loads_per_config": [1, 2],
            "load_angles_deg": list(range(0, 360, 45)),
            "volume_fraction_range": [0.25, 0.6],
        },
        "seed": seed,
        "records": records,
    }
    tmp = out / "manifest.json.tmp"
    _write_json(tmp, manifest)
    os.replace(tmp, out / "manifest.json")
    return manifest


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


# -- loading ----------------------------------------------------------------


@dataclass
class Dataset:
    """A manifest plus its directory."""

    root: Path
    manifest: dict

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise CorruptRecord(f"unsupported schema version {manifest.get('schema_version')}")
        if manifest["channel_layout"]["kernel"] != list(KERNEL_CHANNELS):
            raise CorruptRecord("channel layout does not match this package")
        return cls(root, manifest)

    def __len__(self) -> int:
        return self.manifest["sample_count"]

    @property
    def hash(self) -> str:
        return manifest_hash(self.manifest)

    def _read(self, record: dict, role: str) -> bytes:
        path = self.root / record["files"][role]
        try:
            data = path.read_bytes()
        except FileNotFoundError as exc:
            raise CorruptRecord(f"missing file {path}") from exc
        if hashlib.sha256(data).hexdigest() != record["sha256"][role]:
            raise CorruptRecord(f"hash mismatch for {path}")
        return data

    def verify(self) -> None:
        for record in self.manifest["records"]:
            for role in record["files"]:
                self._read(record, role)

    def record(self, index: int) -> dict:
        if not 0 <= index < len(self):
            raise IndexError(f"sample index {index} out of range [0, {len(self)})")
        return self.manifest["records"][index]

    def config(self, index: int) -> ConstraintConfig:
        return ConstraintConfig.from_dict(json.loads(self._read(self.record(index), "config")))

    def meta(self, index: int) -> dict:
        return json.loads(self._read(self.record(index), "meta"))

    def tensor(self, index: int, role: str) -> np.ndarray:
        return decode_tensor(self._read(self.record(index), role))


def load_batch(dataset: Dataset, indices) -> dict:
    """Decode and shape-check a batch of samples.

    Returns numpy arrays: ``x0 (B, H, W)``, ``conditioning (B, 4, H, W)``,
    ``trajectory (B, n_s, H, W)``, ``compliances (B, n_s)``,
    ``final_compliance (B,)`` plus the decoded ``configs``.
    """
    ny, nx = dataset.manifest["grid"]
    n_s = len(dataset.manifest["recorded_iterations"])
    x0, cond, traj, comp, final, configs = [], [], [], [], [], []
    for i in indices:
        i = int(i)
        topo = dataset.tensor(i, "topology")
        snaps = dataset.tensor(i, "snapshots")
        kern = dataset.tensor(i, "kernel")
        if topo.shape != (ny, nx) or snaps.shape != (n_s, ny, nx) or kern.shape != (len(KERNEL_CHANNELS), ny, nx):
            raise CorruptRecord(f"sample {i} has unexpected tensor shapes")
        if topo.min() < 0 or topo.max() > 1 or snaps.min() < 0 or snaps.max() > 1:
            raise CorruptRecord(f"sample {i} has densities outside [0, 1]")
        meta = dataset.meta(i)
        x0.append(topo)
        traj.append(snaps)
        cond.append(kern)
        comp.append(meta["snapshot_compliances"])
        final.append(meta["final_compliance"])
        configs.append(dataset.config(i))
    return {
        "x0": np.stack(x0),
        "conditioning": np.stack(cond),
        "trajectory": np.stack(traj),
        "compliances": np.asarray(comp, dtype=np.float64),
        "final_compliance": np.asarray(final, dtype=np.float64),
        "configs": configs,
    }
