import json
import shutil
import struct

import numpy as np
import pytest

from trajdiff.dataset import (
    Dataset,
    build_dataset,
    decode_tensor,
    encode_tensor,
    generate_configs,
    load_batch,
    read_tensor,
)
from trajdiff.errors import CorruptRecord, ExhaustedAttempts
from trajdiff.fem import assemble_and_solve, is_solvable
from trajdiff.metrics import load_disrespect
from trajdiff.simp import SimpSettings


def test_tensor_header_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = encode_tensor(arr)
    assert blob[:4] == b"DOMT"
    assert struct.unpack_from("<III", blob, 4) == (1, 1, 2)
    assert struct.unpack_from("<2Q", blob, 16) == (2, 3)
    assert blob[32:] == arr.astype("<f4").tobytes()
    u8 = encode_tensor(np.array([1, 2, 3], dtype=np.uint8))
    assert struct.unpack_from("<I", u8, 8) == (2,)
    assert np.array_equal(decode_tensor(u8), [1, 2, 3])


def test_tensor_rejects_bad_payloads():
    blob = encode_tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(CorruptRecord):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(CorruptRecord):
        decode_tensor(blob[:-1])
    with pytest.raises(CorruptRecord):
        decode_tensor(blob[:8] + struct.pack("<I", 9) + blob[12:])


def test_generate_configs_deterministic_and_solvable():
    a = generate_configs(50, 11, (16, 16))
    b = generate_configs(50, 11, (16, 16))
    assert a == b
    assert all(is_solvable(c) for c in a)
    for c in a:
        c.validate()
        assert 1 <= len(c.loads) <= 2
        assert all(abs(np.hypot(fx, fy) - 1) < 1e-9 for _, fx, fy in c.loads)
        assert 0.25 <= c.volume_fraction <= 0.6


def test_volume_fraction_law_of_large_numbers():
    vfs = [c.volume_fraction for c in generate_configs(1000, 7, (64, 64))]
    assert 0.40 <= np.mean(vfs) <= 0.45


def test_exhausted_attempts(monkeypatch):
    import trajdiff.dataset as ds

    monkeypatch.setattr(ds, "is_solvable", lambda cfg: False)
    with pytest.raises(ExhaustedAttempts):
        ds.generate_configs(1, 0, (8, 8))


def test_manifest_contents(small_dataset):
    m = small_dataset.manifest
    assert m["sample_count"] + len(m["skipped"]) == m["requested_count"] == 24
    assert m["grid"] == [16, 16]
    assert m["recorded_iterations"] == [10, 20, 30, 50, 70]
    assert m["channel_layout"]["kernel"] == ["kernel_load_x", "kernel_load_y", "kernel_bc", "volume_fraction"]
    small_dataset.verify()
    cfg_json = json.loads((small_dataset.root / m["records"][0]["files"]["config"]).read_text())
    assert {"fixed_dofs", "loads", "volume_fraction"} <= set(cfg_json)


def test_load_batch_shapes_and_determinism(small_dataset):
    a = load_batch(small_dataset, [0, 3])
    b = load_batch(small_dataset, [0, 3])
    assert a["x0"].shape == (2, 16, 16)
    assert a["conditioning"].shape == (2, 4, 16, 16)
    assert a["trajectory"].shape == (2, 5, 16, 16)
    assert a["compliances"].shape == (2, 5)
    for k in ("x0", "conditioning", "trajectory", "compliances"):
        assert a[k].tobytes() == b[k].tobytes()
    assert a["x0"].min() >= 0 and a["x0"].max() <= 1
    with pytest.raises(IndexError):
        load_batch(small_dataset, [len(small_dataset)])


def test_recorded_compliance_rechecked_by_fem(small_dataset):
    rng = np.random.default_rng(0)
    for i in rng.choice(len(small_dataset), 10, replace=False):
        snaps = small_dataset.tensor(int(i), "snapshots")
        comps = small_dataset.meta(int(i))["snapshot_compliances"]
        cfg = small_dataset.config(int(i))
        k = int(rng.integers(len(comps)))
        c = assemble_and_solve(cfg, snaps[k].astype(np.float64)).compliance
        assert c == pytest.approx(comps[k], rel=1e-6)


def test_simp_designs_respect_loads(small_dataset):
    batch = load_batch(small_dataset, range(len(small_dataset)))
    assert not any(load_disrespect(x, c) for x, c in zip(batch["x0"], batch["configs"]))


def test_flipped_byte_is_detected(small_dataset, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(small_dataset.root, root)
    ds = Dataset.open(root)
    path = root / ds.record(2)["files"]["snapshots"]
    data = bytearray(path.read_bytes())
    data[100] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptRecord):
        load_batch(ds, [2])
    with pytest.raises(CorruptRecord):
        ds.verify()
    load_batch(ds, [1])


def test_round_trip_bitwise(tmp_path):
    configs = generate_configs(3, 5, (16, 16))
    build_dataset(configs, SimpSettings(), tmp_path, seed=5)
    ds = Dataset.open(tmp_path)
    from trajdiff.simp import optimize

    traj = optimize(configs[0])
    assert np.array_equal(ds.tensor(0, "topology"), traj.final.astype(np.float32))
    assert np.array_equal(read_tensor(tmp_path / ds.record(0)["files"]["snapshots"]), traj.stacked().astype(np.float32))


def test_build_is_reproducible_and_worker_independent(tmp_path):
    configs = generate_configs(6, 9, (16, 16))
    a = build_dataset(configs, SimpSettings(), tmp_path / "a", seed=9)
    b = build_dataset(configs, SimpSettings(), tmp_path / "b", seed=9, workers=2)
    assert a == b


def test_field_channels_optional(tmp_path):
    build_dataset(generate_configs(2, 1, (16, 16)), SimpSettings(), tmp_path, with_field=True)
    ds = Dataset.open(tmp_path)
    assert ds.tensor(0, "field").shape == (3, 16, 16)


def test_manifest_written_last(tmp_path, monkeypatch):
    import trajdiff.dataset as ds

    def fail(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(ds, "write_tensor", fail)
    with pytest.raises(OSError):
        ds.build_dataset(generate_configs(1, 1, (8, 8)), SimpSettings(), tmp_path)
    assert not (tmp_path / "manifest.json").exists()
