import math

import numpy as np
import pytest
import torch

from flowharm.data import ImageBatch
from flowharm.errors import InvalidArgumentError, NumericFailureError
from flowharm.flow import (
    FlowArchitecture,
    FlowModel,
    SqueezeOp,
    bits_per_dim_from_nll,
    build_flow,
    checkerboard_mask,
    flow_forward,
)

from conftest import make_coupling, make_tiny_flow, numerical_jacobian_logdet


def test_empty_model_is_identity_with_zero_logdet():
    model = FlowModel([])
    x = torch.randn(2, 1, 4, 4)
    z, ldj = model.forward_flow(x, discrete=False)
    assert torch.equal(z, x)
    assert torch.equal(ldj, torch.zeros(2))


def test_empty_model_gaussian_at_origin():
    # flattened zero vector of D=4 has log p = -2 ln(2 pi)
    model = FlowModel([])
    x = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    lp = model.log_likelihood_tensor(x, discrete=False)
    assert lp.item() == pytest.approx(-2.0 * math.log(2 * math.pi), rel=1e-12)


def test_empty_model_matches_closed_form_gaussian():
    model = FlowModel([])
    x = torch.randn(4, 1, 2, 2, dtype=torch.float64)
    lp = model.log_likelihood_tensor(x, discrete=False)
    flat = x.reshape(4, -1)
    expected = (-0.5 * flat**2 - 0.5 * math.log(2 * math.pi)).sum(dim=1)
    assert torch.allclose(lp, expected, rtol=1e-12)


def test_single_squeeze_rearranges_with_zero_logdet():
    model = FlowModel([SqueezeOp()])
    x = torch.randn(2, 1, 4, 4)
    z, ldj = model.forward_flow(x, discrete=False)
    assert z.shape == (2, 4, 2, 2)
    assert torch.equal(ldj, torch.zeros(2))


def test_full_model_roundtrip_and_latent_size():
    model = make_tiny_flow(h=4, w=4, n_checker=2, squeeze=True, n_channel=2).double()
    x = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    z, ldj_f = model.forward_flow(x, discrete=False)
    assert z[0].numel() == 16  # dimensionality conserved
    back, ldj_b = model.inverse_flow(z)
    assert (back - x).abs().max() < 1e-5
    assert (ldj_f + ldj_b).abs().max() < 1e-5


def test_full_model_logdet_matches_jacobian_oracle():
    model = make_tiny_flow(h=4, w=4, seed=5, n_checker=2, squeeze=True, n_channel=1).double()
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    _, ldj = model.forward_flow(x, discrete=False)
    oracle = numerical_jacobian_logdet(
        lambda t: model.forward_flow(t, discrete=False)[0], x
    )
    assert abs(ldj.item() - oracle) <= 1e-4 * max(1.0, abs(oracle))


def test_standard_architecture_latent_conserves_dims():
    arch = FlowArchitecture(
        height=16, width=16, vardeq_couplings=1,
        couplings_per_block=(1, 1, 1), subnet_width=4, subnet_levels=2,
    )
    model = build_flow(arch, seed=0)
    x = ImageBatch(torch.randint(0, 256, (2, 1, 16, 16)).float(), discrete=True)
    z, _ = flow_forward(x, model, noise_seed=0)
    assert z[0].numel() == 256
    assert z.shape == (2, 16, 4, 4)


def test_density_normalizes_by_quadrature():
    # 2-element "images" through one coupling layer: grid quadrature of
    # exp(log p) over the plane must come back as probability mass 1.
    layer = make_coupling(checkerboard_mask(1, 1, 2), seed=2, width=4).double()
    model = FlowModel([layer])
    lo, hi, n = -9.0, 9.0, 451
    grid = torch.linspace(lo, hi, n, dtype=torch.float64)
    g1, g2 = torch.meshgrid(grid, grid, indexing="ij")
    pts = torch.stack([g1.reshape(-1), g2.reshape(-1)], dim=1).reshape(-1, 1, 1, 2)
    with torch.no_grad():
        lp = model.log_likelihood_tensor(pts, discrete=False)
    cell = ((hi - lo) / (n - 1)) ** 2
    mass = lp.exp().sum().item() * cell
    assert mass == pytest.approx(1.0, abs=0.02)


def test_loglik_gradient_matches_finite_differences():
    model = make_tiny_flow(h=4, w=4, seed=9, n_checker=1, squeeze=False).double()
    x = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    loss = model.log_likelihood_tensor(x, discrete=False).sum()
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)
    # probe a sampled subset of parameters against central differences
    rng = np.random.default_rng(0)
    eps = 1e-6
    checked = 0
    for p, g in zip(params, grads):
        flat_idx = rng.choice(p.numel(), size=min(3, p.numel()), replace=False)
        for j in flat_idx:
            with torch.no_grad():
                orig = p.reshape(-1)[j].item()
                p.reshape(-1)[j] = orig + eps
                lp_plus = model.log_likelihood_tensor(x, discrete=False).sum().item()
                p.reshape(-1)[j] = orig - eps
                lp_minus = model.log_likelihood_tensor(x, discrete=False).sum().item()
                p.reshape(-1)[j] = orig
            num = (lp_plus - lp_minus) / (2 * eps)
            ana = g.reshape(-1)[j].item()
            assert abs(num - ana) <= 1e-3 * max(1.0, abs(num)), (num, ana)
            checked += 1
    assert checked >= 10


def test_bpd_definition_exact():
    assert bits_per_dim_from_nll(torch.tensor(16 * math.log(2.0)), 16).item() == 1.0
    assert bits_per_dim_from_nll(torch.tensor(0.0), 77).item() == 0.0


def test_non_divisible_dims_rejected():
    model = make_tiny_flow(h=4, w=4)
    with pytest.raises(InvalidArgumentError):
        model.forward_flow(torch.randn(1, 1, 6, 6), discrete=False)


def test_numeric_failure_carries_transform_index():
    layer = make_coupling(checkerboard_mask(1, 4, 4), seed=0)
    model = FlowModel([layer])
    x = torch.full((1, 1, 4, 4), float("nan"))
    with pytest.raises(NumericFailureError) as err:
        model.forward_flow(x, discrete=False)
    assert err.value.transform_index == 0


def test_image_batch_validation():
    with pytest.raises(InvalidArgumentError):
        ImageBatch(torch.randn(2, 1, 5, 4))  # not divisible by 4
    with pytest.raises(InvalidArgumentError):
        ImageBatch(torch.full((1, 1, 4, 4), 0.5), discrete=True)  # non-integer
    with pytest.raises(InvalidArgumentError):
        ImageBatch(torch.full((1, 1, 4, 4), 300.0), discrete=True)  # out of range
    with pytest.raises(InvalidArgumentError):
        ImageBatch(torch.full((1, 1, 4, 4), float("inf")))
