import numpy as np
import pytest
import torch

from flowharm.flow import (
    CouplingLayer,
    FlowModel,
    SqueezeOp,
    channel_mask,
    checkerboard_mask,
)
from flowharm.seeding import seeded_torch


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    # keep unseeded torch draws in tests reproducible
    torch.manual_seed(1234)
    yield


def make_coupling(mask, seed=0, width=8, levels=1, cond_channels=0):
    with seeded_torch(seed):
        layer = CouplingLayer(
            mask, base_width=width, levels=levels, cond_channels=cond_channels
        )
        # oracle tests need non-identity behavior: perturb the zero-initialized head
        gen = torch.Generator().manual_seed(seed + 1)
        head = layer.subnet.head[1]
        with torch.no_grad():
            head.weight.copy_(0.3 * torch.randn(head.weight.shape, generator=gen))
            head.bias.copy_(0.1 * torch.randn(head.bias.shape, generator=gen))
    return layer


def make_tiny_flow(h=4, w=4, seed=0, n_checker=2, squeeze=True, n_channel=1):
    """Small random non-identity flow on 1-channel h x w inputs."""
    transforms = [
        make_coupling(checkerboard_mask(1, h, w, parity=i % 2), seed=seed + i)
        for i in range(n_checker)
    ]
    if squeeze:
        transforms.append(SqueezeOp())
        transforms += [
            make_coupling(channel_mask(4, h // 2, w // 2, parity=i % 2), seed=seed + 10 + i)
            for i in range(n_channel)
        ]
    return FlowModel(transforms)


def numerical_jacobian_logdet(fn, x0, eps=1e-5):
    """Brute-force log|det J| of a flattened map via central differences.

    fn maps a (1, C, H, W) tensor to a (1, C, H, W) tensor; x0 is one sample.
    """
    x0 = x0.detach().double()
    d = x0.numel()
    jac = np.zeros((d, d))
    flat = x0.reshape(-1)
    for j in range(d):
        xp = flat.clone()
        xm = flat.clone()
        xp[j] += eps
        xm[j] -= eps
        yp = fn(xp.reshape(x0.shape)).reshape(-1)
        ym = fn(xm.reshape(x0.shape)).reshape(-1)
        jac[:, j] = ((yp - ym) / (2 * eps)).detach().numpy()
    sign, logdet = np.linalg.slogdet(jac)
    assert sign > 0, "Jacobian determinant should be positive for these flows"
    return logdet
