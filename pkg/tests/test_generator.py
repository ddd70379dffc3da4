import pytest
import torch

from ctxdehaze.generator import (
    OWNERS,
    Generator,
    build_generator,
    dehaze_tensor,
    pad_to_multiple,
)
from ctxdehaze.imaging import InvalidInput
from ctxdehaze.losses import mad_loss, mse_loss
from oracles import grad_check


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@pytest.fixture(scope="module")
def full_gen():
    return build_generator(1.0, seed=0)


@pytest.fixture(scope="module")
def tiny_gen():
    return build_generator(0.125, seed=0)


def test_encoder_shapes_full_width(full_gen):
    with torch.no_grad():
        enc = full_gen.encoder(rand(1, 3, 256, 256))
    shapes = [tuple(s.shape[1:]) for s in enc.shallow]
    assert shapes == [(64, 256, 256), (128, 128, 128), (256, 64, 64)]
    assert tuple(enc.deep.shape[1:]) == (256, 32, 32)


def test_context_shapes_full_width(full_gen):
    with torch.no_grad():
        enc = full_gen.encoder(rand(1, 3, 256, 256))
        ctx = full_gen.context(enc.deep)
        fine = full_gen.fusion(enc, ctx.guides)
    assert tuple(ctx.coarse.shape) == (1, 3, 256, 256)
    assert [tuple(g.shape[2:]) for g in ctx.guides] == [(64, 64), (128, 128), (256, 256)]
    assert [g.shape[1] for g in ctx.guides] == [128, 64, 32]
    assert ctx.coarse.min() >= 0 and ctx.coarse.max() <= 1
    assert tuple(fine.shape) == (1, 3, 256, 256)
    assert fine.min() >= 0 and fine.max() <= 1


def test_deep_shape_64(full_gen):
    with torch.no_grad():
        assert tuple(full_gen.encoder(rand(1, 3, 64, 64)).deep.shape[1:]) == (256, 8, 8)


def test_indivisible_input_rejected(tiny_gen):
    with pytest.raises(InvalidInput):
        tiny_gen(rand(1, 3, 65, 65))


@pytest.mark.parametrize("h,w", [(128, 128), (64, 96), (8, 8), (24, 40)])
def test_size_preservation(tiny_gen, h, w):
    with torch.no_grad():
        out = tiny_gen(rand(1, 3, h, w))
    assert out.coarse.shape == out.fine.shape == (1, 3, h, w)


def test_deterministic_forward(tiny_gen):
    x = rand(1, 3, 32, 32)
    with torch.no_grad():
        a, b = tiny_gen(x), tiny_gen(x)
    assert torch.equal(a.fine, b.fine) and torch.equal(a.coarse, b.coarse)


def test_init_deterministic_and_owned():
    a, b = build_generator(0.125, seed=5), build_generator(0.125, seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = build_generator(0.125, seed=6)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
    groups = a.owner_groups()
    names = [n for n, _ in a.named_parameters()]
    flat = [n for o in OWNERS for n in groups[o]]
    assert sorted(flat) == sorted(names) and len(set(flat)) == len(flat)
    assert all(groups[o] for o in OWNERS)


def test_init_statistics():
    g = build_generator(1.0, seed=0)
    w = torch.cat([p.detach().flatten() for n, p in g.named_parameters() if n.endswith("weight")])
    b = torch.cat([p.detach().flatten() for n, p in g.named_parameters() if n.endswith("bias")])
    assert abs(float(w.mean())) < 1e-3
    assert float(w.std()) == pytest.approx(0.02, rel=0.02)
    assert torch.all(b == 0)


def test_outputs_bounded_after_init(tiny_gen):
    with torch.no_grad():
        out = tiny_gen(rand(2, 3, 32, 32, seed=3))
    for t in (out.coarse, out.fine):
        assert torch.isfinite(t).all() and t.min() >= 0 and t.max() <= 1


def test_guide_scale_mismatch(tiny_gen):
    x = rand(1, 3, 32, 32)
    with torch.no_grad():
        enc = tiny_gen.encoder(x)
        guides = tiny_gen.context(enc.deep).guides
        with pytest.raises(InvalidInput):
            tiny_gen.fusion(enc, guides[::-1])
        with pytest.raises(InvalidInput):
            tiny_gen.fusion(enc, guides[:2])


def _grads(gen, loss):
    gen.zero_grad(set_to_none=True)
    loss.backward()
    return {n: (p.grad.abs().max().item() if p.grad is not None else 0.0) for n, p in gen.named_parameters()}


def test_gradient_stop_fusion_losses():
    gen = build_generator(0.125, seed=1).double()
    x, target = rand(1, 3, 32, 32, seed=1, dtype=torch.float64), rand(1, 3, 32, 32, seed=2, dtype=torch.float64)
    grads = _grads(gen, mad_loss(gen(x).fine, target) + mse_loss(gen(x).fine, target))
    groups = gen.owner_groups()
    assert max(grads[n] for n in groups["context"]) <= 1e-12
    assert max(grads[n] for n in groups["encoder"]) > 0
    assert max(grads[n] for n in groups["fusion"]) > 0


def test_context_losses_reach_context_and_encoder():
    gen = build_generator(0.125, seed=1).double()
    x, target = rand(1, 3, 32, 32, seed=1, dtype=torch.float64), rand(1, 3, 32, 32, seed=2, dtype=torch.float64)
    grads = _grads(gen, mse_loss(gen(x).coarse, target))
    groups = gen.owner_groups()
    assert max(grads[n] for n in groups["context"]) > 1e-8
    assert max(grads[n] for n in groups["encoder"]) > 1e-8
    assert max(grads[n] for n in groups["fusion"]) == 0.0


def test_input_gradient_finite(tiny_gen):
    x = rand(1, 3, 32, 32, seed=4).requires_grad_(True)
    (g,) = torch.autograd.grad(tiny_gen(x).fine.sum(), x)
    assert torch.isfinite(g).all() and g.abs().sum() > 0


@pytest.mark.parametrize("size", [8, 16])
def test_coarse_input_gradient_vs_fd(size):
    gen = build_generator(0.0625, seed=0).double()
    x = rand(1, 3, size, size, dtype=torch.float64).requires_grad_(True)
    err, _, _ = grad_check(lambda: gen(x).coarse.sum(), x, k=60)
    assert err <= 1e-3


@pytest.mark.parametrize("size", [8, 16])
def test_fine_input_gradient_vs_fd(size):
    # the guides are a stop-gradient input, so the oracle holds them at the base point
    gen = build_generator(0.0625, seed=0).double()
    x = rand(1, 3, size, size, dtype=torch.float64).requires_grad_(True)
    with torch.no_grad():
        guides = [g.clone() for g in gen.context(gen.encoder(x).deep).guides]
    err, _, _ = grad_check(lambda: gen.fusion(gen.encoder(x), guides).sum(), x, k=60)
    assert err <= 1e-3
    (auto,) = torch.autograd.grad(gen(x).fine.sum(), x)
    (frozen,) = torch.autograd.grad(gen.fusion(gen.encoder(x), guides).sum(), x)
    assert torch.allclose(auto, frozen, atol=1e-14)


def test_pad_to_multiple():
    x = rand(1, 3, 61, 50)
    xp, (h, w) = pad_to_multiple(x)
    assert xp.shape[-2:] == (64, 56) and (h, w) == (61, 50)
    assert torch.equal(xp[..., :61, :50], x)
    same, _ = pad_to_multiple(rand(1, 3, 16, 16))
    assert same.shape[-2:] == (16, 16)


def test_dehaze_arbitrary_size(tiny_gen):
    coarse, fine = dehaze_tensor(tiny_gen, rand(1, 3, 480, 640))
    assert coarse.shape == fine.shape == (1, 3, 480, 640)


def test_width_multiplier_scales_channels():
    g = Generator(0.125)
    assert g.encoder.channels == (8, 16, 32, 32)
    assert g.context.level_ch == [16, 8, 4]
    n_full = sum(p.numel() for p in Generator(1.0).parameters())
    n_tiny = sum(p.numel() for p in g.parameters())
    assert n_tiny < n_full / 30
