"""Patch-style Wasserstein critic and the gradient penalty."""
from __future__ import annotations

import torch
import torch.nn as nn

from .generator import LEAK, scaled
from .imaging import InvalidInput
from .rng import torch_gen


class Critic(nn.Module):
    """Four 4x4 stride-2 convs, a 1-channel conv, then the spatial mean.

    No normalization layers: the gradient penalty is defined per sample.
    Input sides must be multiples of 16.
    """

    def __init__(self, width_mult=1.0, image_size=None, conditional=False):
        super().__init__()
        self.image_size = image_size
        self.conditional = conditional
        cin = 6 if conditional else 3
        layers = []
        for c in (64, 128, 256, 512):
            c = scaled(c, width_mult)
            layers += [nn.Conv2d(cin, c, 4, stride=2, padding=1), nn.LeakyReLU(LEAK)]
            cin = c
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x, cond=None):
        h, w = x.shape[-2:]
        if self.image_size is not None and (h, w) != (self.image_size, self.image_size):
            raise InvalidInput(f"critic configured for {self.image_size}px, got {h}x{w}")
        if h % 16 or w % 16:
            raise InvalidInput(f"critic input {h}x{w} must be a multiple of 16")
        if self.conditional:
            if cond is None:
                raise InvalidInput("conditional critic needs the hazy input")
            x = torch.cat([x, cond], dim=1)
        return self.net(x).mean(dim=(1, 2, 3))


def build_critic(width_mult=1.0, seed=0, **kw):
    critic = Critic(width_mult, **kw)
    g = torch_gen(seed, "critic-init")
    with torch.no_grad():
        for name, p in critic.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * 0.02)
    return critic


def interpolate(real, fake, eps):
    e = eps.view(-1, *([1] * (real.dim() - 1))).to(real.dtype)
    return e * real + (1.0 - e) * fake


def gradient_penalty(critic, real, fake, generator=None, eps=None, create_graph=True):
    """Batch mean of (||grad_x D(x_hat)||_2 - 1)^2 at random interpolates.

    ``critic`` is any callable mapping an NCHW batch to per-sample scores.
    ``eps`` (one value per sample in [0, 1]) is drawn from ``generator`` when
    not given.  With ``create_graph`` the result is differentiable w.r.t. the
    critic's parameters (double backprop).
    """
    if real.shape != fake.shape:
        raise InvalidInput(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=torch.float64)
    x_hat = interpolate(real, fake.detach(), eps).detach().requires_grad_(True)
    with torch.enable_grad():
        score = critic(x_hat)
        grad = None
        if score.requires_grad:
            (grad,) = torch.autograd.grad(
                score.sum(), x_hat, create_graph=create_graph, allow_unused=True
            )
        if grad is None:
            grad = torch.zeros_like(x_hat)
        norm = grad.flatten(1).norm(2, dim=1)
        return ((norm - 1.0) ** 2).mean()
