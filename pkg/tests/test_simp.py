import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajdiff.dataset import generate_configs
from trajdiff.fem import assemble_and_solve
from trajdiff.metrics import floating_material
from trajdiff.simp import SimpSettings, _filter_kernel, filter_sensitivities, oc_update, optimize, refine

from oracles import cantilever, mbb_symmetric


def test_filter_below_unit_radius_is_identity():
    g = np.random.default_rng(0).normal(size=(6, 7))
    assert np.array_equal(filter_sensitivities(g, np.full((6, 7), 0.5), 0.9), g)


@given(st.floats(-5, -0.01), st.floats(1.0, 4.0))
@settings(max_examples=30, deadline=None)
def test_filter_preserves_constant_field(value, radius):
    g = np.full((9, 11), value)
    out = filter_sensitivities(g, np.ones((9, 11)), radius)
    np.testing.assert_allclose(out, g, atol=1e-12 * abs(value))


def test_filter_delta_radius_1_5_hand_weights():
    # weights max(0, 1.5 - d): 1.5 at the centre, 0.5 at d=1, 1.5-sqrt(2) at d=sqrt(2)
    w = _filter_kernel(1.5)
    diag = 1.5 - np.sqrt(2.0)
    np.testing.assert_allclose(w, [[diag, 0.5, diag], [0.5, 1.5, 0.5], [diag, 0.5, diag]], rtol=1e-15)
    g = np.zeros((7, 7))
    g[3, 3] = -1.0
    out = filter_sensitivities(g, np.ones((7, 7)), 1.5)
    support = np.argwhere(out != 0)
    assert np.abs(support - 3).max() == 1  # confined to the 3x3 neighbourhood
    den = 1.5 + 4 * 0.5 + 4 * diag
    assert out[3, 3] == pytest.approx(-1.5 / den, rel=1e-14)
    assert out[3, 4] == pytest.approx(-0.5 / den, rel=1e-14)
    assert out[2, 2] == pytest.approx(-diag / den, rel=1e-14)


def test_filter_delta_radius_1_4_is_plus_shaped():
    g = np.zeros((7, 7))
    g[3, 3] = -1.0
    out = filter_sensitivities(g, np.ones((7, 7)), 1.4)
    nz = {tuple(p) for p in np.argwhere(out != 0)}
    assert nz == {(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)}


def test_filter_preserves_sign():
    rng = np.random.default_rng(1)
    out = filter_sensitivities(-rng.uniform(0, 1, (10, 10)), rng.uniform(0, 1, (10, 10)), 1.5)
    assert out.max() <= 0


def test_oc_update_enforces_volume_and_bounds():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 0.9, (16, 16))
    x *= 0.4 / x.mean()
    dc = -rng.uniform(0.01, 10, (16, 16))
    new = oc_update(x, dc, 0.4, 0.2)
    assert abs(new.mean() - 0.4) < 1e-3
    assert new.min() >= 0 and new.max() <= 1
    assert np.abs(new - x).max() <= 0.2 + 1e-12


def test_cantilever_64():
    mesh_cfg = cantilever(64, 64, vf=0.35)
    # load at the right-mid node
    mid = int(mesh_cfg.mesh.node(64, 32))
    cfg = type(mesh_cfg)(64, 64, mesh_cfg.fixed_dofs, [(mid, 0.0, -1.0)], 0.35)
    traj = optimize(cfg)
    assert traj.final_compliance < 0.8 * traj.initial_compliance
    assert abs(traj.final.mean() - 0.35) < 1e-3
    assert traj.recorded_iterations == [10, 20, 30, 50, 70]
    for snap in traj.snapshots:
        assert abs(snap.density.mean() - 0.35) < 1e-3


def test_near_full_volume_gives_solid_design():
    cfg = cantilever(12, 6, vf=0.999)
    traj = optimize(cfg, SimpSettings(max_iters=100, recorded_iterations=(10, 20)))
    solid = assemble_and_solve(cfg, np.ones((6, 12))).compliance
    assert traj.final.min() > 0.9
    assert traj.final_compliance == pytest.approx(solid, rel=1e-2)


def test_mirror_symmetric_config_gives_symmetric_design():
    traj = optimize(mbb_symmetric(32, 16, 0.4))
    np.testing.assert_allclose(traj.final, traj.final[:, ::-1], atol=1e-6)


def test_optimize_is_bitwise_deterministic():
    cfg = generate_configs(1, 11, (24, 24))[0]
    a, b = optimize(cfg), optimize(cfg)
    assert np.array_equal(a.final, b.final)
    assert a.compliance_history == b.compliance_history
    assert np.array_equal(a.stacked(), b.stacked())


def test_snapshot_iterations_strictly_increase():
    for cfg in generate_configs(5, 5, (24, 24)):
        iters = optimize(cfg).recorded_iterations
        assert all(a < b for a, b in zip(iters, iters[1:]))


@pytest.mark.xfail(strict=True, reason="filtered OC plateaus by iteration ~10 and then drifts up by 0.1-0.3%")
def test_quasi_monotone_descent_rate():
    configs = generate_configs(100, 5, (32, 32))
    runs_ok = pairs = pairs_ok = 0
    for cfg in configs:
        c = optimize(cfg).compliances()
        runs_ok += c[-1] <= c[0]
        d = np.diff(c)
        pairs += d.size
        pairs_ok += int((d <= 0).sum())
    assert runs_ok >= 95
    assert pairs_ok >= 0.95 * pairs


def test_settings_validation():
    with pytest.raises(ValueError):
        SimpSettings(max_iters=40)
    with pytest.raises(ValueError):
        SimpSettings(filter_radius=0.5)
    s = SimpSettings()
    assert SimpSettings.from_dict(s.to_dict()) == s


def test_refine_zero_steps_is_identity():
    cfg = cantilever(8, 8)
    x = np.random.default_rng(3).uniform(0, 1, (8, 8))
    out, c = refine(x, cfg, 0)
    assert np.array_equal(out, x)
    with pytest.raises(ValueError):
        refine(x, cfg, 51)


def test_refine_converged_design_is_near_fixed_point():
    cfg = generate_configs(1, 3, (32, 32))[0]
    traj = optimize(cfg)
    _, c = refine(traj.final, cfg, 5)
    assert abs(c - traj.final_compliance) / traj.final_compliance < 0.02


def _place_island(x, rng):
    ny, nx = x.shape
    for _ in range(1000):
        r, c = rng.integers(2, ny - 4), rng.integers(2, nx - 4)
        if x[r - 2 : r + 4, c - 2 : c + 4].max() < 0.5:
            y = x.copy()
            y[r : r + 2, c : c + 2] = 1.0
            return y
    return None


@pytest.mark.slow
def test_refine_removes_islands():
    rng = np.random.default_rng(0)
    configs = generate_configs(40, 21, (32, 32))
    fixed = tried = 0
    for cfg in configs:
        final = optimize(cfg).final
        if floating_material(final, cfg):
            continue
        with_island = _place_island(final, rng)
        if with_island is None:
            continue
        assert floating_material(with_island, cfg)
        refined, _ = refine(with_island, cfg, 10)
        fixed += not floating_material(refined, cfg)
        tried += 1
        if tried == 20:
            break
    assert tried == 20
    assert fixed >= 16
