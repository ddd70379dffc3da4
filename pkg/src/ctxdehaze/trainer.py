"""Alternating critic/generator optimization, LR schedule and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .critic import build_critic
from .generator import build_generator
from .haze import read_manifest
from .imaging import InvalidInput, load_image, to_tensor
from .losses import (
    LossWeights,
    adversarial_losses,
    combine,
    generator_components,
    load_extractor,
    route_and_combine,
)
from .rng import derive_seed, numpy_rng, torch_gen

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_iterations: int = 600000
    base_lr: float = 2e-4
    adam_betas: tuple = (0.6, 0.999)
    batch_size: int = 1
    critic_steps_per_gen_step: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 10000
    image_size: int = 256
    width_mult: float = 1.0
    critic_width_mult: float | None = None
    conditional_critic: bool = False
    perceptual_weights: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise InvalidInput(f"Adam betas {self.adam_betas} must lie in [0, 1)")
        for name in ("total_iterations", "batch_size", "critic_steps_per_gen_step", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be a positive integer")
        if self.base_lr <= 0:
            raise InvalidInput("base_lr must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_schedule(step, cfg):
    """Constant base rate for the first half, then linear decay to exactly 0 at T."""
    T = cfg.total_iterations
    if not 0 <= step <= T:
        raise InvalidInput(f"step {step} outside [0, {T}]")
    half = T / 2.0
    if step <= half:
        return cfg.base_lr
    return cfg.base_lr * (1.0 - (step - half) / half)


def make_optimizer(params, cfg):
    return torch.optim.Adam(params, lr=cfg.base_lr, betas=cfg.adam_betas)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    generator: torch.nn.Module
    critic: torch.nn.Module
    g_opt: torch.optim.Optimizer
    c_opt: torch.optim.Optimizer
    step: int = 0
    extractor: torch.nn.Module | None = None


def new_state(cfg):
    gen = build_generator(cfg.width_mult, derive_seed(cfg.seed, "generator"))
    cw = cfg.critic_width_mult if cfg.critic_width_mult is not None else cfg.width_mult
    critic = build_critic(
        cw, derive_seed(cfg.seed, "critic"), image_size=cfg.image_size,
        conditional=cfg.conditional_critic,
    )
    return TrainState(
        cfg, gen, critic,
        make_optimizer(gen.parameters(), cfg),
        make_optimizer(critic.parameters(), cfg),
        step=0,
        extractor=load_extractor(cfg.perceptual_weights),
    )


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _require_finite(named):
    for name, v in named.items():
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLoss(f"non-finite loss term {name!r} = {v}")


def _critic_fn(state, hazy):
    if state.config.conditional_critic:
        return lambda x: state.critic(x, hazy)
    return state.critic


def critic_phase(state, hazy, clear):
    """``critic_steps_per_gen_step`` critic updates with the generator frozen.

    Returns the last (critic objective, gradient penalty) pair.
    """
    cfg = state.config
    w = cfg.weights
    lr = lr_schedule(state.step, cfg)
    critic_fn = _critic_fn(state, hazy)
    for k in range(cfg.critic_steps_per_gen_step):
        with torch.no_grad():
            fake = getattr(state.generator(hazy), w.routing["adv"])
        terms = adversarial_losses(
            fake, clear, critic_fn, w.gp, generator=torch_gen(cfg.seed, "gp-eps", state.step, k)
        )
        _require_finite({"adv_critic": terms.critic, "gp": terms.gp})
        state.c_opt.zero_grad(set_to_none=True)
        terms.critic.backward()
        _set_lr(state.c_opt, lr)
        state.c_opt.step()
    return float(terms.critic.detach()), float(terms.gp.detach())


def generator_loss(state, hazy, clear):
    """Routed loss components and their weighted total for the current generator."""
    cfg = state.config
    out = state.generator(hazy)
    comps = generator_components(
        out, clear, state.critic, state.extractor, cfg.weights,
        cond=hazy if cfg.conditional_critic else None,
    )
    return combine(comps, cfg.weights), comps


def generator_phase(state, hazy, clear):
    """One generator update on the combined objective with the critic frozen."""
    lr = lr_schedule(state.step, state.config)
    critic = state.critic
    for p in critic.parameters():
        p.requires_grad_(False)
    try:
        total, comps = generator_loss(state, hazy, clear)
        _require_finite({**comps, "total_generator": total})
        state.g_opt.zero_grad(set_to_none=True)
        total.backward()
        _set_lr(state.g_opt, lr)
        state.g_opt.step()
    finally:
        for p in critic.parameters():
            p.requires_grad_(True)
    return {k: v.detach() for k, v in comps.items()}


def train_step(state, hazy, clear):
    """Critic phase then one generator update. Returns (state, LossBundle)."""
    critic_vals = critic_phase(state, hazy, clear)
    comps = generator_phase(state, hazy, clear)
    state.step += 1
    w = state.config.weights
    bundle = route_and_combine(comps, w, routing=w.routing, critic_terms=critic_vals)
    return state, bundle


# -- data ---------------------------------------------------------------------

def load_pairs(manifest_path, split="train"):
    """Decode (hazy, clear) records of ``split``; paths resolve against the manifest's dir."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    pairs = []
    for r in read_manifest(manifest_path).split(split):
        pairs.append((r.hazy_path, load_image(root / r.hazy_path), load_image(root / r.clear_path)))
    return pairs


def batch_for_step(pairs, step, cfg, dtype=torch.float32):
    """Deterministic batch: reshuffled order per pass over the data, keyed by the run seed."""
    n = len(pairs)
    hz, cl = [], []
    for j in range(cfg.batch_size):
        g = step * cfg.batch_size + j
        epoch, pos = divmod(g, n)
        perm = numpy_rng(cfg.seed, "data-order", epoch).permutation(n)
        _, hazy, clear = pairs[perm[pos]]
        h, w = hazy.shape[:2]
        s = cfg.image_size
        if h < s or w < s:
            raise InvalidInput(f"training image {h}x{w} smaller than image_size {s}")
        if (h, w) != (s, s):
            rng = numpy_rng(cfg.seed, "train-crop", step, j)
            top, left = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            hazy, clear = hazy[top : top + s, left : left + s], clear[top : top + s, left : left + s]
        hz.append(to_tensor(hazy, dtype))
        cl.append(to_tensor(clear, dtype))
    return torch.cat(hz), torch.cat(cl)


LOG_HEADER = "step\tlr\t" + "\t".join(
    ("total_generator", "total_critic", "adv_generator", "adv_critic", "gp", "mse", "ssim_loss", "mad", "perceptual")
)


def _log_line(step, lr, bundle):
    vals = bundle.values()
    return f"{step}\t{lr!r}\t" + "\t".join(repr(float(vals[k])) for k in LOG_HEADER.split("\t")[2:])


def read_loss_log(path):
    rows = []
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split("\t")
    for line in lines[1:]:
        parts = line.split("\t")
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in zip(keys, parts)})
    return rows


def checkpoint_path(out_dir, step):
    return Path(out_dir) / f"ckpt_{step:07d}.ckpt"


def train(cfg, manifest_path, out_dir, resume_from=None, stop_at=None, on_step=None):
    """Run (or resume) training; returns the path of the last checkpoint written.

    ``stop_at`` ends the run early at that step (checkpointing there), which is
    how interruption is simulated in tests.
    """
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = load_pairs(manifest_path, "train")
    if not pairs:
        raise InvalidInput(f"{manifest_path} has no training records")

    log_path = out_dir / "loss_log.tsv"
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config.hash() != cfg.hash():
            log.warning("resuming with a different config than the checkpoint's; using the checkpoint's")
        cfg = state.config
        kept = []
        if log_path.exists():
            kept = [l for l in log_path.read_text().splitlines()[1:] if int(l.split("\t")[0]) < state.step]
        log_path.write_text("\n".join([LOG_HEADER] + kept) + "\n")
    else:
        state = new_state(cfg)
        log_path.write_text(LOG_HEADER + "\n")
        save_checkpoint(state, checkpoint_path(out_dir, 0))

    T = cfg.total_iterations
    end = T if stop_at is None else min(T, stop_at)
    last = None
    with open(log_path, "a") as logf:
        while state.step < end:
            hazy, clear = batch_for_step(pairs, state.step, cfg)
            lr = lr_schedule(state.step, cfg)
            state, bundle = train_step(state, hazy, clear)
            logf.write(_log_line(state.step - 1, lr, bundle) + "\n")
            if on_step is not None:
                on_step(state.step, bundle)
            if state.step % cfg.checkpoint_every == 0 or state.step == end:
                logf.flush()
                last = checkpoint_path(out_dir, state.step)
                save_checkpoint(state, last)
    return last or checkpoint_path(out_dir, state.step)


# -- checkpoint container -------------------------------------------------------

MAGIC = b"CTXDHZCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _optimizer_arrays(prefix, module, opt):
    arrays = {}
    for name, p in module.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            arrays[f"{prefix}/{name}/{key}"] = st[key].detach().cpu().numpy()
    return arrays


def state_arrays(state):
    arrays = {}
    for name, p in state.generator.named_parameters():
        arrays[f"generator/{name}"] = p.detach().cpu().numpy()
    for name, p in state.critic.named_parameters():
        arrays[f"critic/{name}"] = p.detach().cpu().numpy()
    arrays.update(_optimizer_arrays("g_opt", state.generator, state.g_opt))
    arrays.update(_optimizer_arrays("c_opt", state.critic, state.c_opt))
    return arrays


def save_checkpoint(state, path):
    """Versioned container: magic, version, JSON header, raw arrays, SHA-256 trailer."""
    arrays = state_arrays(state)
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.astype(a.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "seed": state.config.seed,
        "rng": {"scheme": "labeled-sha256", "seed": state.config.seed, "step": state.step},
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    data = body + hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def _read_container(path):
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint or truncated")
    body, digest = data[:-32], data[-32:]
    version, hlen = struct.unpack("<IQ", body[len(MAGIC) : len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen])
    payload = body[start + hlen :]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<" + e["dtype"]).reshape(e["shape"]).copy()
    return header, arrays


def _load_module(module, prefix, arrays):
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks {key}")
            p.copy_(torch.from_numpy(arrays[key]))


def _load_optimizer(opt, module, prefix, arrays):
    for name, p in module.named_parameters():
        key = f"{prefix}/{name}/exp_avg"
        if key not in arrays:
            continue
        opt.state[p] = {
            k: torch.from_numpy(arrays[f"{prefix}/{name}/{k}"]) for k in ("step", "exp_avg", "exp_avg_sq")
        }


def load_checkpoint(path):
    header, arrays = _read_container(path)
    cfg = TrainConfig.from_dict(header["config"])
    state = new_state(cfg)
    _load_module(state.generator, "generator", arrays)
    _load_module(state.critic, "critic", arrays)
    _load_optimizer(state.g_opt, state.generator, "g_opt", arrays)
    _load_optimizer(state.c_opt, state.critic, "c_opt", arrays)
    state.step = int(header["step"])
    return state


def load_generator(path):
    """Generator only, in eval mode, from a checkpoint."""
    header, arrays = _read_container(path)
    cfg = TrainConfig.from_dict(header["config"])
    gen = build_generator(cfg.width_mult, 0)
    _load_module(gen, "generator", arrays)
    return gen.eval()
