import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import dft2_loops
from uhdpromer.losses import LossConfig, loss_terms, phi_loss, total_loss


def test_identical_is_zero():
    t = torch.rand(1, 3, 4, 4)
    assert phi_loss(t, t).item() == 0.0
    assert total_loss(t, t, t).item() == 0.0


def test_uniform_offset_spatial_only():
    t = torch.zeros(1, 1, 4, 4)
    assert abs(phi_loss(t + 0.5, t, lambda_freq=0).item() - 0.5) < 1e-7


def test_delta_image_dft():
    p = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    p[0, 0, 1, 2] = 1.0
    freq = dft2_loops(p[0, 0].numpy())
    assert np.allclose(np.abs(freq), 1.0)
    assert np.allclose(torch.fft.fft2(p)[0, 0].numpy(), freq)
    assert abs(phi_loss(p, torch.zeros_like(p)).item() - (1 / 16 + 0.1)) < 1e-12


def test_total_weighting():
    # phi(main)=1, phi(sr)=2 via uniform offsets with no frequency term
    t = torch.zeros(1, 3, 4, 4)
    cfg = LossConfig(alpha_sr=0.5, lambda_freq=0.0)
    assert abs(total_loss(t + 1, t + 2, t, cfg).item() - 2.0) < 1e-6
    total, main, sr = loss_terms(t + 1, t + 2, t, LossConfig(alpha_sr=0.0, lambda_freq=0.0))
    assert total.item() == main.item() == 1.0


def test_no_sr_branch_and_cascaded():
    t = torch.zeros(1, 3, 4, 4)
    cfg = LossConfig(lambda_freq=0.0)
    assert total_loss(t + 1, t + 2, t, cfg, variant="no_sr_branch").item() == 1.0
    total, main, sr = loss_terms(t + 1, None, t, cfg, variant="cascaded")
    assert total.item() == 1.0 and sr.item() == 0.0


def test_sr_gradient_scaled_by_alpha_fd():
    g = torch.Generator().manual_seed(0)
    target = torch.rand(1, 1, 2, 2, generator=g, dtype=torch.float64)
    main = torch.rand(1, 1, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    sr = torch.rand(1, 1, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    cfg = LossConfig(alpha_sr=0.5)
    total_loss(main, sr, target, cfg).backward()
    eps = 1e-7
    for tensor in (main, sr):
        for idx in np.ndindex(2, 2):
            base = tensor.detach().clone()
            hi, lo = base.clone(), base.clone()
            hi[0, 0][idx] += eps
            lo[0, 0][idx] -= eps
            args = lambda v: (v, sr.detach(), target) if tensor is main else (main.detach(), v, target)
            fd = (total_loss(*args(hi), cfg) - total_loss(*args(lo), cfg)).item() / (2 * eps)
            an = tensor.grad[0, 0][idx].item()
            assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-12)
    # same residual pattern gives exactly alpha-scaled gradients
    x = torch.rand(1, 1, 2, 2, dtype=torch.float64)
    a, b = x.clone().requires_grad_(), x.clone().requires_grad_()
    total_loss(a, b, target, cfg).backward()
    assert torch.allclose(b.grad, 0.5 * a.grad)


@given(seed=st.integers(0, 10_000), c=st.floats(-3, 3, allow_nan=False))
def test_phi_symmetry_nonneg_scale(seed, c):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    b = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    assert phi_loss(a, b).item() >= 0
    assert abs(phi_loss(a, b).item() - phi_loss(b, a).item()) < 1e-12
    lhs = phi_loss(c * a, c * b, lambda_freq=0).item()
    assert abs(lhs - abs(c) * phi_loss(a, b, lambda_freq=0).item()) < 1e-12
    assert total_loss(a, b, b).item() > 0


def test_shape_and_config_errors():
    with pytest.raises(ValueError):
        phi_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))
    with pytest.raises(ValueError):
        LossConfig(alpha_sr=-1)
