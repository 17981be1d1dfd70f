import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from trajdiff.alignment import (
    TaConfig,
    noisy_target,
    step_to_snapshot,
    ta_loss_clean,
    ta_loss_noisy,
    ta_loss_perf,
    trajectory_distance_probe,
)
from trajdiff.denoiser import Denoiser, DenoiserSpec
from trajdiff.diffusion import forward_marginal, make_schedule
from trajdiff.errors import MissingPerformance, NotSupported


def test_footnote_step_map():
    assert step_to_snapshot(1000, 1000, 5) == 1
    assert step_to_snapshot(1, 1000, 5) == 5
    assert step_to_snapshot(201, 1000, 5) == 4
    s = step_to_snapshot(np.arange(1, 1001), 1000, 5)
    for k, block_end in enumerate((200, 400, 600, 800, 1000)):
        block = s[block_end - 200 : block_end]
        assert np.all(block == 5 - k)


@given(st.integers(1, 2000), st.integers(1, 12))
@settings(max_examples=100, deadline=None)
def test_step_map_partitions_into_contiguous_blocks(T, n_s):
    s = step_to_snapshot(np.arange(1, T + 1), T, n_s)
    assert s[0] == n_s
    assert np.all(np.diff(s) <= 0)
    if T >= n_s:
        assert s[-1] == 1
        sizes = np.bincount(s, minlength=n_s + 1)[1:]
        assert set(sizes) <= {T // n_s, -(-T // n_s)}


def test_single_snapshot_and_mod_variant():
    assert np.all(step_to_snapshot(np.arange(1, 101), 100, 1) == 1)
    assert step_to_snapshot(1, 1000, 5, "mod") == 1
    assert step_to_snapshot(7, 1000, 5, "mod") == 2


def test_config_validation():
    with pytest.raises(NotSupported):
        TaConfig("multi")
    with pytest.raises(ValueError):
        TaConfig("clean", weight_clean=-1)
    assert TaConfig("CLEAN").mode == "clean"


def _traj(B=2, n_s=5, H=6, W=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((B, n_s, H, W), generator=g, dtype=torch.float64)


def test_clean_loss_values():
    traj = _traj()
    T = 1000
    t = torch.tensor([1000, 2])  # targets: s(999)=1 and s(1)=5
    target = torch.stack([traj[0, 0], traj[1, 4]])[:, None]
    assert ta_loss_clean(target, traj, t, T).item() == 0.0
    assert ta_loss_clean(target + 0.1, traj, t, T).item() == pytest.approx(0.01, rel=1e-12)
    a = ta_loss_clean(target + 0.3, traj, t, T, weight=1.0).item()
    assert ta_loss_clean(target + 0.3, traj, t, T, weight=2.0).item() == 2 * a


def test_noisy_loss_reduces_to_clean_without_noise():
    s = make_schedule(1000)
    traj = _traj()
    x = torch.rand((2, 1, 6, 6), dtype=torch.float64)
    eps = torch.randn((2, 1, 6, 6), dtype=torch.float64)
    # t = 1 gives t - 1 = 0 where alpha_bar is exactly one
    t = torch.tensor([1, 1])
    clean = ta_loss_clean(x, traj, t, 1000).item()
    noisy = ta_loss_noisy(forward_marginal(x, t - 1, eps, s), traj, t, s, eps).item()
    assert abs(noisy - clean) < 1e-6
    # one step later alpha_bar is 1 - beta_1 and the loss scales by it
    t = torch.tensor([2, 2])
    zero = torch.zeros_like(eps)
    noisy = ta_loss_noisy(forward_marginal(x, t - 1, zero, s), traj, t, s, zero).item()
    assert noisy == pytest.approx(s.alpha_bars[1] * ta_loss_clean(x, traj, t, 1000).item(), rel=1e-12)


def test_noisy_identical_prediction_is_zero():
    s = make_schedule(100)
    traj = _traj()
    t = torch.tensor([50, 80])
    eps = torch.randn((2, 1, 6, 6), dtype=torch.float64)
    target = noisy_target(traj, t, s, eps)
    assert ta_loss_noisy(target, traj, t, s, eps).item() == 0.0


def test_noisy_expectation_matches_scaled_clean_distance():
    s = make_schedule(1000)
    traj = _traj(B=1)
    t = 600
    x_tilde = torch.rand((1, 1, 6, 6), dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    clean = ta_loss_clean(x_tilde, traj, torch.tensor([t]), 1000).item()
    g = torch.Generator().manual_seed(0)
    vals = []
    for _ in range(10_000):
        eps = torch.randn((1, 1, 6, 6), generator=g, dtype=torch.float64)
        pred = forward_marginal(x_tilde, t - 1, eps, s)
        vals.append(ta_loss_noisy(pred, traj, torch.tensor([t]), s, eps).item())
    assert np.mean(vals) == pytest.approx(s.alpha_bars[t - 1] * clean, rel=0.03)


class _ConstPerf(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x, cond):
        return torch.full((x.shape[0],), self.value, dtype=x.dtype) + 0 * x.sum()


def test_perf_loss():
    perf = torch.full((2, 5), 3.0, dtype=torch.float64)
    x = torch.rand((2, 1, 6, 6), dtype=torch.float64)
    t = torch.tensor([10, 900])
    assert ta_loss_perf(x, _ConstPerf(np.log(3.0)), perf, t, 1000).item() == pytest.approx(0.0, abs=1e-15)
    assert ta_loss_perf(x, _ConstPerf(99.0), perf, t, 1000, weight=0.0).item() == 0.0
    assert ta_loss_perf(x, _ConstPerf(np.log(3.0) + 0.5), perf, t, 1000).item() == pytest.approx(0.25)
    with pytest.raises(MissingPerformance):
        ta_loss_perf(x, _ConstPerf(0.0), None, t, 1000)


def test_probe_is_nonnegative_and_read_only():
    torch.manual_seed(0)
    model = Denoiser(DenoiserSpec(base_width=16))
    before = [p.detach().clone() for p in model.parameters()]
    traj = _traj(H=8, W=8).float()
    out = trajectory_distance_probe(model, traj[:, -1:], torch.rand((2, 4, 8, 8)), traj, make_schedule(1000), 10)
    assert len(out) == 10 and out[0][0] == 1 and out[-1][0] == 1000
    assert all(d >= 0 for _, d in out)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
