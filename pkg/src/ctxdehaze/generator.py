"""One-encoder / two-decoder dehazing generator.

Encoder -> shallow skips (scales 0, 1, 2) and a deep map at 1/8 resolution.
ContextNet decodes the deep map through a two-path pyramid into a coarse image
and three guide features.  FusionNet decodes the same encoder features back to
full resolution, taking the guides through a gradient barrier, and emits the
fine image.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import InvalidInput
from .rng import torch_gen

OWNERS = ("encoder", "context", "fusion")
LEAK = 0.2


def scaled(ch, mult):
    return max(1, int(round(ch * mult)))


class ChannelNorm(nn.Module):
    """Per-sample, per-channel normalization; a single-pixel map passes through."""

    def __init__(self, ch):
        super().__init__()
        self.ch = ch

    def forward(self, x):
        if x.shape[-1] * x.shape[-2] == 1:
            return x
        return F.instance_norm(x, eps=1e-5)


def conv_block(cin, cout, k=3, stride=1, norm=True):
    layers = [nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)]
    if norm:
        layers.append(ChannelNorm(cout))
    layers.append(nn.LeakyReLU(LEAK))
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            ChannelNorm(ch),
            nn.LeakyReLU(LEAK),
            nn.Conv2d(ch, ch, 3, padding=1),
            ChannelNorm(ch),
        )

    def forward(self, x):
        return F.leaky_relu(x + self.body(x), LEAK)


class ImageHead(nn.Module):
    """3x3 conv to RGB followed by a sigmoid, so outputs stay in [0, 1]."""

    def __init__(self, cin):
        super().__init__()
        self.conv = nn.Conv2d(cin, 3, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


@dataclass
class EncoderOutput:
    shallow: list  # scales 0, 1, 2
    deep: torch.Tensor  # scale 3


@dataclass
class ContextOutput:
    coarse: torch.Tensor
    guides: list  # scales 2, 1, 0


@dataclass
class GeneratorOutput:
    coarse: torch.Tensor
    fine: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, mult=1.0, n_deep=3):
        super().__init__()
        c0, c1, c2 = scaled(64, mult), scaled(128, mult), scaled(256, mult)
        self.stem = conv_block(3, c0, k=7, norm=False)
        self.down1 = conv_block(c0, c1, stride=2)
        self.down2 = conv_block(c1, c2, stride=2)
        self.down3 = conv_block(c2, c2, stride=2)
        self.deep = nn.Sequential(*[ResBlock(c2) for _ in range(n_deep)])
        self.channels = (c0, c1, c2, c2)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise InvalidInput(f"input {h}x{w} not divisible by 8; pad it first")
        s0 = self.stem(x)
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        deep = self.deep(self.down3(s2))
        return EncoderOutput([s0, s1, s2], deep)


class ContextNet(nn.Module):
    """Two-path pyramid decoder.

    Path 1 cascades size-preserving blocks at 1/8 resolution.  Path 2 upsamples
    1/8 -> 1/4 -> 1/2 -> 1 and at each level fuses a 1x1 projection of the
    matching cascade stage.  Returns the coarse image and the per-level fusion
    products as guides.
    """

    def __init__(self, mult=1.0, n_casc=3):
        super().__init__()
        cd = scaled(256, mult)
        self.level_ch = [scaled(c, mult) for c in (128, 64, 32)]
        if n_casc != len(self.level_ch):
            raise ValueError("one cascade stage per pyramid level is required")
        self.cascade = nn.ModuleList([conv_block(cd, cd) for _ in range(n_casc)])
        self.project = nn.ModuleList()
        self.fuse = nn.ModuleList()
        prev = cd
        for ch in self.level_ch:
            self.project.append(nn.Conv2d(cd, ch, 1))
            self.fuse.append(conv_block(prev + ch, ch))
            prev = ch
        self.head = ImageHead(prev)

    def forward(self, deep):
        stages = []
        x = deep
        for block in self.cascade:
            x = block(x)
            stages.append(x)
        y = deep
        guides = []
        for casc, proj, fuse in zip(stages, self.project, self.fuse):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            p = F.interpolate(proj(casc), size=y.shape[-2:], mode="nearest")
            y = fuse(torch.cat([y, p], dim=1))
            guides.append(y)
        return ContextOutput(self.head(y), guides)


class FusionNet(nn.Module):
    def __init__(self, mult=1.0):
        super().__init__()
        c0, c1, c2 = scaled(64, mult), scaled(128, mult), scaled(256, mult)
        g2, g1, g0 = (scaled(c, mult) for c in (128, 64, 32))
        ups = [(c2, c2), (c2, c1), (c1, c0)]
        skips = [c2, c1, c0]
        guides = [g2, g1, g0]
        self.up = nn.ModuleList()
        self.rectify = nn.ModuleList()
        self.guide = nn.ModuleList()
        for (cin, cout), cs, cg in zip(ups, skips, guides):
            self.up.append(
                nn.Sequential(
                    nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
                    ChannelNorm(cout),
                    nn.LeakyReLU(LEAK),
                )
            )
            self.rectify.append(conv_block(cout + cs, cout))
            self.guide.append(conv_block(cout + cg, cout))
        self.head = ImageHead(c0)

    def forward(self, enc, guides):
        skips = enc.shallow[::-1]
        if len(guides) != len(skips):
            raise InvalidInput(f"expected {len(skips)} guides, got {len(guides)}")
        x = enc.deep
        for up, rect, gconv, skip, g in zip(self.up, self.rectify, self.guide, skips, guides):
            x = up(x)
            if g.shape[-2:] != x.shape[-2:] or skip.shape[-2:] != x.shape[-2:]:
                raise InvalidInput(
                    f"scale mismatch: stage {tuple(x.shape[-2:])}, guide {tuple(g.shape[-2:])}"
                )
            x = rect(torch.cat([x, skip], dim=1))
            # guides inform the fine decoder but never train the context path
            x = gconv(torch.cat([x, g.detach()], dim=1))
        return self.head(x)


class Generator(nn.Module):
    def __init__(self, width_mult=1.0, n_deep=3, n_casc=3):
        super().__init__()
        self.width_mult = width_mult
        self.encoder = Encoder(width_mult, n_deep)
        self.context = ContextNet(width_mult, n_casc)
        self.fusion = FusionNet(width_mult)

    def forward(self, x):
        enc = self.encoder(x)
        ctx = self.context(enc.deep)
        fine = self.fusion(enc, ctx.guides)
        return GeneratorOutput(ctx.coarse, fine)

    def owner_groups(self):
        """Parameter names grouped by owning sub-network."""
        groups = {o: [] for o in OWNERS}
        for name, _ in self.named_parameters():
            groups[name.split(".", 1)[0]].append(name)
        return groups


def init_parameters(module, seed):
    """Conv weights ~ N(0, 0.02), biases zero; deterministic in ``seed``."""
    g = torch_gen(seed, "init")
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * 0.02)
    return module


def build_generator(width_mult=1.0, seed=0):
    return init_parameters(Generator(width_mult), seed)


def pad_to_multiple(x, m=8):
    """Reflect-pad an NCHW tensor so H and W are multiples of ``m``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def dehaze_tensor(gen, x):
    """Inference on an arbitrary-size NCHW input: pad, run, crop back."""
    xp, (h, w) = pad_to_multiple(x)
    with torch.no_grad():
        out = gen(xp)
    return out.coarse[..., :h, :w], out.fine[..., :h, :w]
