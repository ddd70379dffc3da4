"""Reconstruction, structural, adversarial and perceptual losses and their combination."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .critic import gradient_penalty
from .haze import ConfigError
from .imaging import InvalidInput, ssim_map
from .rng import torch_gen

log = logging.getLogger(__name__)

# Which generator output each term is evaluated on.
ROUTING = {
    "B": {"mse": "coarse", "ssim": "coarse", "adv": "fine", "mad": "fine", "perceptual": "fine"},
    "A": {"mse": "fine", "ssim": "fine", "adv": "coarse", "mad": "coarse", "perceptual": "coarse"},
}
TERMS = ("adv", "mse", "ssim", "mad", "perceptual")


@dataclass
class LossWeights:
    mse: float = 10.0
    ssim: float = 10.0
    mad: float = 100.0
    perceptual: float = 0.001
    gp: float = 10.0
    plan: str = "B"

    def __post_init__(self):
        if self.plan not in ROUTING:
            raise InvalidInput(f"plan must be 'A' or 'B', got {self.plan!r}")
        for name in ("mse", "ssim", "mad", "perceptual", "gp"):
            if getattr(self, name) < 0:
                raise InvalidInput(f"loss weight {name} must be non-negative")

    @property
    def routing(self):
        return dict(ROUTING[self.plan])


def _check(pred, target):
    if pred.shape != target.shape:
        raise InvalidInput(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def mse_loss(pred, target):
    _check(pred, target)
    return ((pred - target) ** 2).mean()


def mad_loss(pred, target):
    _check(pred, target)
    return (pred - target).abs().mean()


def ssim_loss(pred, target):
    """1 - SSIM, SSIM averaged over channels and windows."""
    _check(pred, target)
    return 1.0 - ssim_map(pred, target).mean()


# -- perceptual ---------------------------------------------------------------

class RandomFeatureExtractor(nn.Module):
    """Three fixed random conv+ReLU layers; an offline stand-in for VGG features."""

    def __init__(self, seed=1234, channels=(8, 16, 32)):
        super().__init__()
        g = torch_gen(seed, "perceptual-extractor")
        layers = []
        cin = 3
        for i, c in enumerate(channels):
            conv = nn.Conv2d(cin, c, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                std = (2.0 / (cin * 9)) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g, dtype=torch.float64) * std)
                conv.bias.copy_(torch.randn(c, generator=g, dtype=torch.float64) * 0.01)
            layers.append(nn.Sequential(conv, nn.ReLU()))
            cin = c
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


VGG_LAYERS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_4": 26, "relu5_4": 35}


class VGGFeatureExtractor(nn.Module):
    """VGG-19 activations at named ReLU layers, weights from a local state-dict file."""

    def __init__(self, weights_path, layers=("relu1_2", "relu2_2", "relu3_3")):
        super().__init__()
        try:
            from torchvision.models import vgg19
        except ImportError as exc:
            raise ConfigError("VGG perceptual loss needs torchvision: pip install torchvision") from exc
        vgg = vgg19(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        vgg.load_state_dict(state)
        idx = sorted(VGG_LAYERS[name] for name in layers)
        self.features = vgg.features[: idx[-1] + 1]
        self.taps = set(idx)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def load_extractor(weights_path=None, seed=1234):
    """VGG-19 when a weights file is given, else the bundled random extractor."""
    if weights_path is None:
        log.info("no perceptual weights configured; using the bundled random-feature extractor")
        return RandomFeatureExtractor(seed)
    path = Path(weights_path)
    if not path.exists():
        raise ConfigError(
            f"perceptual weights {path} not found; download VGG-19 weights "
            "(torchvision vgg19 state dict) to that path or omit it to use the bundled extractor"
        )
    return VGGFeatureExtractor(path)


def perceptual_loss(pred, target, extractor):
    """Sum over feature layers of the per-element mean squared feature difference."""
    _check(pred, target)
    fp = extractor(pred)
    with torch.no_grad():
        ft = extractor(target)
    total = pred.new_zeros(())
    for a, b in zip(fp, ft):
        total = total + ((a - b) ** 2).mean()
    return total


# -- adversarial --------------------------------------------------------------

@dataclass
class AdversarialTerms:
    generator: torch.Tensor
    critic: torch.Tensor
    gp: torch.Tensor


def adversarial_losses(fake, real, critic, lambda_gp, generator=None, eps=None):
    """Critic objective E[D(fake)] - E[D(real)] + lambda_gp * GP and the generator's -E[D(fake)].

    Minimizing ``critic`` trains the critic; minimizing ``generator`` trains the
    generator.
    """
    _check(fake, real)
    d_fake = critic(fake).mean()
    d_real = critic(real).mean()
    gp = gradient_penalty(critic, real, fake, generator=generator, eps=eps)
    return AdversarialTerms(-d_fake, d_fake - d_real + lambda_gp * gp, gp)


def generator_adversarial(fake, critic):
    return -critic(fake).mean()


# -- combination --------------------------------------------------------------

@dataclass
class LossBundle:
    mse: float = 0.0
    ssim_loss: float = 0.0
    adv_generator: float = 0.0
    adv_critic: float = 0.0
    gp: float = 0.0
    mad: float = 0.0
    perceptual: float = 0.0
    total_generator: float = 0.0
    total_critic: float = 0.0
    routing: dict = field(default_factory=dict)

    FIELDS = (
        "total_generator", "total_critic", "adv_generator", "adv_critic",
        "gp", "mse", "ssim_loss", "mad", "perceptual",
    )

    def values(self):
        return {k: getattr(self, k) for k in self.FIELDS}


def combine(components, weights):
    """total = adv + l1*MSE + l2*SSIM_loss + l3*MAD + l4*perceptual (tensors or floats)."""
    missing = [t for t in TERMS if t not in components]
    if missing:
        raise InvalidInput(f"missing loss components: {missing}")
    return (
        components["adv"]
        + weights.mse * components["mse"]
        + weights.ssim * components["ssim"]
        + weights.mad * components["mad"]
        + weights.perceptual * components["perceptual"]
    )


def route_and_combine(components, weights, routing=None, critic_terms=None):
    """Fold scalar components into a LossBundle under the active plan.

    ``routing`` is the map the components were actually computed under; it
    must agree with ``weights.plan``.
    """
    if routing is not None and dict(routing) != ROUTING[weights.plan]:
        raise InvalidInput(f"components were routed as {routing}, plan {weights.plan} expects otherwise")
    vals = {k: float(v) for k, v in components.items()}
    total = combine(vals, weights)
    adv_c, gp = critic_terms if critic_terms is not None else (0.0, 0.0)
    return LossBundle(
        mse=vals["mse"],
        ssim_loss=vals["ssim"],
        adv_generator=vals["adv"],
        adv_critic=float(adv_c),
        gp=float(gp),
        mad=vals["mad"],
        perceptual=vals["perceptual"],
        total_generator=total,
        total_critic=float(adv_c),
        routing=weights.routing,
    )


def generator_components(out, target, critic, extractor, weights, cond=None):
    """Evaluate each term against the output the plan routes it to (tensors)."""
    route = weights.routing
    pick = {"coarse": out.coarse, "fine": out.fine}
    adv_in = pick[route["adv"]]
    if cond is not None:
        adv = -critic(adv_in, cond).mean()
    else:
        adv = generator_adversarial(adv_in, critic)
    return {
        "adv": adv,
        "mse": mse_loss(pick[route["mse"]], target),
        "ssim": ssim_loss(pick[route["ssim"]], target),
        "mad": mad_loss(pick[route["mad"]], target),
        "perceptual": perceptual_loss(pick[route["perceptual"]], target, extractor),
    }
