import math

import numpy as np
import pytest
import torch

from flowharm.data import ImageBatch
from flowharm.errors import InvalidArgumentError
from flowharm.flow import FlowArchitecture, FlowModel
from flowharm.flow_train import (
    FlowTrainConfig,
    guided_loss,
    heldout_bpd_gap,
    nf_loss,
    source_reference_bpd,
    train_flow,
)
from flowharm.synth import build_sites

from conftest import make_tiny_flow

TINY_ARCH = FlowArchitecture(
    height=32,
    width=32,
    vardeq_couplings=1,
    couplings_per_block=(1, 1, 1),
    subnet_width=6,
    subnet_levels=2,
)


def small_sites(n_images=8, seed=0):
    return build_sites(seed=seed, n_sites=1, n_images=n_images, height=32, width=32)


def test_nf_loss_equals_mean_bpd_exactly():
    model = make_tiny_flow(h=4, w=4, seed=0, n_checker=1, squeeze=False)
    x = ImageBatch(torch.rand(4, 1, 4, 4))
    assert nf_loss(x, model, noise_seed=7).item() == model.bits_per_dim(
        x, noise_seed=7
    ).mean().item()


def test_nf_loss_gaussian_inputs_closed_form():
    # empty model, standard-Gaussian inputs: expected loss is the Gaussian
    # differential entropy per dimension in bits: (1 + ln 2pi) / (2 ln 2)
    model = FlowModel([])
    gen = torch.Generator().manual_seed(0)
    x = ImageBatch(torch.randn(256, 1, 4, 4, generator=gen))
    expected = (1 + math.log(2 * math.pi)) / (2 * math.log(2))
    assert nf_loss(x, model).item() == pytest.approx(expected, rel=0.02)


def test_nf_loss_singleton_batch_equals_its_bpd():
    model = make_tiny_flow(h=4, w=4, seed=1, n_checker=1, squeeze=False)
    x = ImageBatch(torch.rand(1, 1, 4, 4))
    assert nf_loss(x, model, noise_seed=0).item() == pytest.approx(
        model.bits_per_dim(x, noise_seed=0)[0].item(), rel=1e-6
    )


def test_guided_loss_clamp_saturation_zero_gradient():
    model = make_tiny_flow(h=4, w=4, seed=2, n_checker=1, squeeze=False)
    src = ImageBatch(torch.rand(2, 1, 4, 4))
    aug = ImageBatch(torch.rand(2, 1, 4, 4))
    with torch.no_grad():
        aug_bpd = model.bits_per_dim(aug, noise_seed=None)
    c = float(aug_bpd.min()) - 1.0  # clamp saturated for every augmented sample
    loss = guided_loss(src, aug, model, c=c, noise_seed=None)
    src_only = nf_loss(src, model, noise_seed=None)
    assert loss.item() == pytest.approx(src_only.item() - c, rel=1e-6)

    # gradient contribution of the guiding term is exactly zero
    g_full = torch.autograd.grad(
        guided_loss(src, aug, model, c=c, noise_seed=None),
        list(model.parameters()),
        allow_unused=True,
    )
    g_src = torch.autograd.grad(
        nf_loss(src, model, noise_seed=None), list(model.parameters()), allow_unused=True
    )
    for a, b in zip(g_full, g_src):
        if a is None and b is None:
            continue
        assert torch.allclose(a, b, atol=1e-7)


def test_guided_loss_degenerate_margin():
    # c -> 0+: the clamped term is <= 0, and exactly 0 when every nll >= 0
    model = make_tiny_flow(h=4, w=4, seed=3, n_checker=1, squeeze=False)
    src = ImageBatch(torch.rand(2, 1, 4, 4))
    aug = ImageBatch(torch.rand(2, 1, 4, 4))
    c = 1e-9
    loss = guided_loss(src, aug, model, c=c, noise_seed=None)
    src_term = nf_loss(src, model, noise_seed=None)
    guiding_contribution = (loss - src_term).item()
    aug_bpd = model.bits_per_dim(aug, noise_seed=None)
    if (aug_bpd >= 0).all():
        assert guiding_contribution == pytest.approx(-c, abs=1e-7)
    else:
        assert guiding_contribution >= -c - 1e-7


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        FlowTrainConfig(margin_c=0.0)
    with pytest.raises(InvalidArgumentError):
        FlowTrainConfig(aug_fraction=0.0)
    with pytest.raises(InvalidArgumentError):
        FlowTrainConfig(lr=-1.0)


def test_zero_epochs_returns_initialized_model_unchanged():
    ds = small_sites()[0]
    cfg = FlowTrainConfig(epochs=0, seed=5, arch=TINY_ARCH)
    res = train_flow(ds, cfg)
    assert res.log == []
    res2 = train_flow(ds, cfg)
    for a, b in zip(res.model.parameters(), res2.model.parameters()):
        assert torch.equal(a, b)
    assert math.isfinite(res.source_bpd_ref)


def test_training_is_deterministic_given_seed():
    ds = small_sites()[0]
    cfg = FlowTrainConfig(
        epochs=2, batch_size=4, seed=9, arch=TINY_ARCH, decay_period=1
    )
    res_a = train_flow(ds, cfg)
    res_b = train_flow(ds, cfg)
    assert res_a.log == res_b.log  # bitwise-identical loss curves
    for a, b in zip(res_a.model.parameters(), res_b.model.parameters()):
        assert torch.equal(a, b)


def test_lr_schedule_halves_exactly():
    ds = small_sites()[0]
    cfg = FlowTrainConfig(epochs=4, batch_size=8, seed=0, arch=TINY_ARCH, decay_period=2, lr=1e-3)
    res = train_flow(ds, cfg)
    lrs = [r["lr"] for r in res.log]
    # log records lr after the scheduler step at each epoch end
    assert lrs == [1e-3, 1e-3 * 0.5, 1e-3 * 0.5, 1e-3 * 0.25]


def test_empty_training_split_rejected():
    ds = small_sites()[0]
    ds.split = ["test"] * len(ds)
    with pytest.raises(InvalidArgumentError):
        train_flow(ds, FlowTrainConfig(epochs=1, arch=TINY_ARCH))


def test_arch_size_mismatch_rejected():
    ds = small_sites()[0]
    bad = FlowArchitecture(height=64, width=64, vardeq_couplings=1, couplings_per_block=(1, 1, 1))
    with pytest.raises(InvalidArgumentError):
        train_flow(ds, FlowTrainConfig(epochs=1, arch=bad))


def test_training_reduces_loss_on_toy_data():
    ds = small_sites(n_images=8, seed=3)[0]
    cfg = FlowTrainConfig(
        epochs=40, batch_size=8, seed=1, arch=TINY_ARCH, decay_period=30,
        guided=False, lr=2e-3,
    )
    res = train_flow(ds, cfg)
    first = np.mean([r["train_loss"] for r in res.log[:5]])
    last = np.mean([r["train_loss"] for r in res.log[-5:]])
    assert last < first - 1.0  # at least 1 bit/dim of improvement
    # smoothed curve decreases over the early phase
    smooth = np.convolve([r["train_loss"] for r in res.log], np.ones(10) / 10, mode="valid")
    assert smooth[-1] <= smooth[0]
    assert math.isfinite(res.source_bpd_ref)
    # the reference evaluator agrees with a direct call
    assert res.source_bpd_ref == pytest.approx(
        source_reference_bpd(res.model, ds.image_batch("val")), rel=1e-6
    )


def test_heldout_gap_helper_symmetric_continuous_eval():
    model = make_tiny_flow(h=4, w=4, seed=4, n_checker=1, squeeze=False)
    batch = ImageBatch(torch.randint(0, 256, (3, 1, 4, 4)).float(), discrete=True)
    gap = heldout_bpd_gap(model, batch, aug_seed=0)
    assert math.isfinite(gap)


def test_trained_flow_scores_source_below_augmented():
    # held-out source bpd strictly lower than margin-guided augmented bpd
    ds = small_sites(n_images=12, seed=5)[0]
    cfg = FlowTrainConfig(
        epochs=40, batch_size=8, seed=2, arch=TINY_ARCH, decay_period=30, margin_c=16.0
    )
    res = train_flow(ds, cfg)
    gap = heldout_bpd_gap(res.model, ds.image_batch("test"), aug_seed=7)
    assert gap > 0.0
