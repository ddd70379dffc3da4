"""Acceptance criteria 1-10; each test records one PASS/FAIL line in the terminal summary."""
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from ctxdehaze import cli
from ctxdehaze.critic import build_critic, gradient_penalty
from ctxdehaze.evaluation import parse_table
from ctxdehaze.generator import build_generator
from ctxdehaze.haze import (
    SynthesisConfig,
    apply_haze,
    build_dataset,
    make_procedural_scene,
    remove_haze,
    transmission_from_depth,
    write_procedural_sources,
)
from ctxdehaze.imaging import PSNR_CAP_DB, from_tensor, psnr, ssim, to_tensor
from ctxdehaze.losses import (
    LossWeights,
    RandomFeatureExtractor,
    adversarial_losses,
    combine,
    generator_components,
    mad_loss,
    mse_loss,
    perceptual_loss,
    ssim_loss,
)
from ctxdehaze.trainer import (
    TrainConfig,
    load_generator,
    load_pairs,
    lr_schedule,
    make_optimizer,
    read_loss_log,
    train,
)
from oracles import brute_force_ssim, grad_check

README = Path(__file__).resolve().parents[1] / "README.md"

# Overfit pilot (4 procedural 64x64 pairs, width 0.125, seed 0, 600 steps):
# hazy 16.05 dB, fine 23.31 dB, coarse 21.22 dB.  The run below uses 1000 steps.
OVERFIT_STEPS = 1000
OVERFIT_GAIN_DB = 5.0
OVERFIT_FINE_VS_COARSE_DB = -0.5


def record(n, name, checks):
    """``checks``: list of (description, ok).  Records one line, then asserts."""
    failed = [d for d, ok in checks if not ok]
    status = "PASS" if not failed else "FAIL"
    detail = "; ".join(failed) if failed else f"{len(checks)} checks"
    ACCEPTANCE_LINES.append(f"[{status}] criterion {n:2d}: {name} ({detail})")
    assert not failed, f"criterion {n}: " + "; ".join(failed)


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_01_metric_oracles():
    rng = np.random.default_rng(2025)
    checks = []
    for k in range(10):
        a = rng.random((64, 64, 1))
        b = np.clip(a + rng.normal(0, 0.1 + 0.05 * k, a.shape), 0, 1)
        d = abs(ssim(a, b) - brute_force_ssim(a[..., 0], b[..., 0]))
        checks.append((f"pair {k} |diff|={d:.2e}", d <= 1e-6))
    x = rng.random((64, 64, 3))
    checks.append(("ssim(x,x)=1", abs(ssim(x, x) - 1.0) <= 1e-9))
    c = ssim(np.full((32, 32, 1), 0.2), np.full((32, 32, 1), 0.4))
    checks.append(("constant pair", abs(c - 0.1601 / 0.2001) <= 1e-6))
    z, o, t = np.zeros((16, 16, 3)), np.ones((16, 16, 3)), np.full((16, 16, 3), 0.1)
    checks.append(("psnr 0 dB", abs(psnr(z, o) - 0.0) <= 1e-9))
    checks.append(("psnr 20 dB", abs(psnr(z, t) - 20.0) <= 1e-9))
    checks.append(("psnr cap", psnr(t, t) == PSNR_CAP_DB))
    record(1, "metric oracle equivalence", checks)


def test_02_gradient_suite():
    tol = 1e-3
    checks = []

    def add(name, result):
        err = result[0]
        checks.append((f"{name} rel_err={err:.2e}", err <= tol))

    t = rand(1, 3, 16, 16, seed=2)
    p = rand(1, 3, 16, 16, seed=1).requires_grad_(True)
    add("mse", grad_check(lambda: mse_loss(p, t), p))
    add("ssim", grad_check(lambda: ssim_loss(p, t), p, k=60))
    q = (t + 0.05 * torch.sign(rand(1, 3, 16, 16, seed=3) - 0.5)).requires_grad_(True)
    add("mad off ties", grad_check(lambda: mad_loss(q, t), q))
    ex = RandomFeatureExtractor().double()
    add("perceptual", grad_check(lambda: perceptual_loss(p, t, ex), p, k=60))

    gen = build_generator(0.125, seed=0).double()
    for size in (8, 16):
        x = rand(1, 3, size, size, seed=size).requires_grad_(True)
        add(f"coarse sum {size}px", grad_check(lambda: gen(x).coarse.sum(), x, k=40))
        with torch.no_grad():
            guides = [g.clone() for g in gen.context(gen.encoder(x).deep).guides]
        # guides are a stop-gradient input: the oracle holds them at the base point
        add(f"fine sum {size}px", grad_check(lambda: gen.fusion(gen.encoder(x), guides).sum(), x, k=40))

    critic = build_critic(0.125, seed=0).double()
    xc = rand(1, 3, 16, 16, seed=7).requires_grad_(True)
    add("critic score", grad_check(lambda: critic(xc).sum(), xc, k=40))
    real, fake = rand(1, 3, 16, 16, seed=8), rand(1, 3, 16, 16, seed=9)
    eps = torch.tensor([0.37], dtype=torch.float64)
    params = dict(critic.named_parameters())
    # gradients of the deepest taps are ~1e-6, so h=1e-6 would be dominated by cancellation
    for name in ("net.0.weight", "net.2.weight", "net.6.weight", "net.8.weight"):
        add(f"critic objective d/d{name}",
            grad_check(lambda: adversarial_losses(fake, real, critic, 10.0, eps=eps).critic, params[name], k=12, h=1e-5))
    record(2, "loss gradient suite vs central differences", checks)


def unit_critic(x):
    return x.flatten(1).sum(1) / math.sqrt(x[0].numel())


def test_03_gradient_penalty_constructions():
    real, fake = rand(3, 3, 16, 16, seed=1), rand(3, 3, 16, 16, seed=2)
    g = torch.Generator().manual_seed(0)
    cases = {
        "unit-norm -> 0": (unit_critic, 0.0),
        "constant -> 1": (lambda x: torch.full((x.shape[0],), 2.0, dtype=x.dtype), 1.0),
        "double-norm -> 1": (lambda x: 2.0 * unit_critic(x), 1.0),
    }
    checks = []
    for name, (fn, want) in cases.items():
        got = float(gradient_penalty(fn, real, fake, generator=g))
        checks.append((f"{name} got {got!r}", abs(got - want) <= 1e-9))
    record(3, "gradient-penalty constructions", checks)


def test_04_gradient_stop():
    gen = build_generator(0.125, seed=3).double()
    critic = build_critic(0.125, seed=3).double()
    ex = RandomFeatureExtractor().double()
    x, target = rand(1, 3, 32, 32, seed=1), rand(1, 3, 32, 32, seed=2)
    w = LossWeights(plan="B")
    comps = generator_components(gen(x), target, critic, ex, w)
    fusion_total = w.mad * comps["mad"] + w.perceptual * comps["perceptual"] + comps["adv"]
    gen.zero_grad(set_to_none=True)
    fusion_total.backward()
    ctx = list(gen.context.named_parameters())
    worst = max((p.grad.abs().max().item() if p.grad is not None else 0.0) for _, p in ctx)

    gen.zero_grad(set_to_none=True)
    combine(generator_components(gen(x), target, critic, ex, w), w).backward()
    best = max(p.grad.abs().max().item() for _, p in ctx)
    record(4, "gradient-stop invariant", [
        (f"fusion-routed max |grad| on context = {worst:.1e}", worst <= 1e-12),
        (f"full objective max |grad| on context = {best:.1e}", best > 1e-8),
    ])


def test_05_haze_identities():
    rng = np.random.default_rng(5)
    J = rng.random((32, 32, 3))
    depth = rng.random((32, 32)) * 3
    checks = [
        ("beta=0 gives clear", np.array_equal(apply_haze(J, transmission_from_depth(depth, 0.0), 0.8), J)),
        ("t=0 gives A", np.all(apply_haze(J, np.zeros((32, 32)), 0.7) == 0.7)),
    ]
    t = rng.uniform(0.05, 1.0, (32, 32))
    for A in (0.6, 0.85, 1.0):
        err = np.max(np.abs(remove_haze(apply_haze(J, t, A), t, A) - J))
        checks.append((f"round trip A={A} err={err:.1e}", err <= 1e-6))
    img, d = make_procedural_scene("radial", 64)
    scene = img * 0.5
    prev, mono = None, True
    for beta in np.linspace(0, 2, 11):
        cur = apply_haze(scene, transmission_from_depth(d, beta), 0.9)
        if prev is not None:
            mono &= bool(np.all(cur >= prev - 1e-15))
        prev = cur
    checks.append(("monotone in beta", mono))
    record(5, "haze-model identities", checks)


def test_06_schedule_and_optimizer():
    cfg = TrainConfig()
    checks = [
        ("lr(0)=0.0002", lr_schedule(0, cfg) == 0.0002),
        ("lr(T)=0", lr_schedule(cfg.total_iterations, cfg) == 0.0),
        ("lr(T/2)=0.0002", lr_schedule(cfg.total_iterations // 2, cfg) == 0.0002),
        ("lr(3T/4)=0.0001", lr_schedule(450000, cfg) == 0.0001),
    ]
    x = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([x], TrainConfig(base_lr=0.1))
    # hand trace of Adam(lr 0.1, betas 0.6/0.999, eps 1e-8) on f(x) = (x - 3)^2 from 0
    xv, m, v = 0.0, 0.0, 0.0
    for k in range(1, 4):
        g = 2 * (xv - 3)
        m = 0.6 * m + 0.4 * g
        v = 0.999 * v + 0.001 * g * g
        xv -= 0.1 * (m / (1 - 0.6**k)) / (math.sqrt(v / (1 - 0.999**k)) + 1e-8)
        opt.zero_grad()
        ((x - 3) ** 2).sum().backward()
        opt.step()
        got = float(x.detach())
        checks.append((f"adam step {k} {got!r} vs {xv!r}", abs(got - xv) <= 1e-9))
    record(6, "schedule and optimizer", checks)


def _max_diff(rows_a, rows_b):
    worst = 0.0
    for a, b in zip(rows_a, rows_b):
        for k in a:
            worst = max(worst, abs(a[k] - b[k]) / max(1.0, abs(a[k])))
    return worst


def test_07_determinism_and_resume(desk_data, tmp_path):
    manifest = desk_data[0]
    tiny = dict(image_size=64, width_mult=0.125, seed=11)
    cfg50 = TrainConfig(total_iterations=50, checkpoint_every=50, **tiny)
    train(cfg50, manifest, tmp_path / "a")
    train(cfg50, manifest, tmp_path / "b")
    a = read_loss_log(tmp_path / "a" / "loss_log.tsv")
    b = read_loss_log(tmp_path / "b" / "loss_log.tsv")
    same_seed = _max_diff(a, b)

    cfg100 = TrainConfig(total_iterations=100, checkpoint_every=50, **tiny)
    train(cfg100, manifest, tmp_path / "full")
    mid = train(cfg100, manifest, tmp_path / "cut", stop_at=50)
    train(cfg100, manifest, tmp_path / "cut", resume_from=mid)
    full = read_loss_log(tmp_path / "full" / "loss_log.tsv")
    cut = read_loss_log(tmp_path / "cut" / "loss_log.tsv")
    resumed = _max_diff(full[50:], cut[50:])
    record(7, "determinism and resumability", [
        ("two 50-step runs logged 50 rows", len(a) == len(b) == 50),
        (f"same-seed max rel diff {same_seed:.1e}", same_seed <= 1e-6),
        ("resumed run has 100 rows", [r["step"] for r in cut] == list(range(100))),
        (f"resume max rel diff {resumed:.1e}", resumed <= 1e-6),
    ])


@pytest.mark.slow
def test_08_overfit_smoke(tmp_path):
    write_procedural_sources(tmp_path / "src", 5, size=64)
    build_dataset(SynthesisConfig(str(tmp_path / "src"), str(tmp_path / "data"), train_count=4,
                                  test_count=1, crop_size=64, test_fraction=0.2, seed=0))
    manifest = tmp_path / "data" / "manifest.tsv"
    cfg = TrainConfig(total_iterations=OVERFIT_STEPS, checkpoint_every=OVERFIT_STEPS,
                      image_size=64, width_mult=0.125, seed=0)
    t0 = time.time()
    gen = load_generator(train(cfg, manifest, tmp_path / "run"))
    minutes = (time.time() - t0) / 60
    pairs = load_pairs(manifest, "train")
    hazy_db, fine_db, coarse_db = [], [], []
    for _, hz, cl in pairs:
        with torch.no_grad():
            out = gen(to_tensor(hz))
        hazy_db.append(psnr(hz, cl))
        fine_db.append(psnr(from_tensor(out.fine), cl))
        coarse_db.append(psnr(from_tensor(out.coarse), cl))
    h, f, c = np.mean(hazy_db), np.mean(fine_db), np.mean(coarse_db)
    record(8, f"overfit smoke test (hazy {h:.2f}, fine {f:.2f}, coarse {c:.2f} dB, {minutes:.1f} min)", [
        ("4 training pairs", len(pairs) == 4),
        (f"fine - hazy = {f - h:.2f} dB >= {OVERFIT_GAIN_DB}", f - h >= OVERFIT_GAIN_DB),
        (f"fine - coarse = {f - c:.2f} dB >= {OVERFIT_FINE_VS_COARSE_DB}", f - c >= OVERFIT_FINE_VS_COARSE_DB),
        (f"runtime {minutes:.1f} min <= 20", minutes <= 20),
    ])


def test_09_reference_values_documented():
    text = README.read_text() if README.exists() else ""
    flat = " ".join(text.split())
    wanted = ["25.17", "0.8706", "26.42", "0.8897", "25.35", "0.8865", "25.98", "0.8932"]
    checks = [(f"README lists {v}", v in flat) for v in wanted]
    checks.append(("README states the values are not asserted",
                   re.search(r"not (asserted|reproduced)", flat, re.I) is not None))
    record(9, "reference values recorded as context only", checks)


def test_10_cli_end_to_end(tmp_path, capsys):
    data, run, ev, dh = (tmp_path / n for n in ("data", "run", "eval", "dehazed"))
    rcs = [cli.main(["synthesize", "--out", str(data), "--train-count", "4", "--test-count", "2",
                     "--crop-size", "64", "--procedural-count", "6", "--procedural-size", "80",
                     "--test-fraction", "0.34"])]
    rcs.append(cli.main(["train", "--manifest", str(data / "manifest.tsv"), "--iterations", "10",
                         "--checkpoint-every", "5", "--width-mult", "0.125", "--image-size", "64",
                         "--out", str(run)]))
    ckpt = run / "ckpt_0000010.ckpt"
    rcs.append(cli.main(["evaluate", "--checkpoint", str(ckpt), "--manifest", str(data / "manifest.tsv"),
                         "--out", str(ev)]))
    hazy = sorted((data / "test").glob("*_hazy.png"))
    rcs.append(cli.main(["dehaze", "--checkpoint", str(ckpt), "--out", str(dh), *map(str, hazy)]))
    table = parse_table(ev / "comparison.tsv") if (ev / "comparison.tsv").exists() else {}
    psnr_row = table.get(("test", "PSNR"), {})
    record(10, "end-to-end CLI", [
        (f"exit codes {rcs}", rcs == [0, 0, 0, 0]),
        ("comparison table parses with both columns", set(psnr_row) == {"context-net", "fusion-net"}),
        ("dehazed files written", len(list(dh.glob("*_dehazed.png"))) == len(hazy) > 0),
    ])
