"""Overfit a tiny generator on a few procedural pairs and report training-pair PSNR.

    python3 scripts/run_overfit.py --steps 1000 --out runs/overfit
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from ctxdehaze.haze import SynthesisConfig, build_dataset, write_procedural_sources
from ctxdehaze.imaging import from_tensor, psnr, ssim, to_tensor
from ctxdehaze.losses import LossWeights
from ctxdehaze.trainer import TrainConfig, load_generator, load_pairs, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--pairs", type=int, default=4)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--width-mult", type=float, default=0.125)
    ap.add_argument("--plan", choices=("A", "B"), default="B")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()

    out = Path(args.out)
    write_procedural_sources(out / "sources", args.pairs + 1, size=args.size)
    build_dataset(SynthesisConfig(
        str(out / "sources"), str(out / "data"), train_count=args.pairs, test_count=1,
        crop_size=args.size, test_fraction=1 / (args.pairs + 1), seed=args.seed,
    ))
    manifest = out / "data" / "manifest.tsv"
    cfg = TrainConfig(total_iterations=args.steps, checkpoint_every=args.steps, image_size=args.size,
                      width_mult=args.width_mult, seed=args.seed, weights=LossWeights(plan=args.plan))

    def progress(step, b):
        if step % 100 == 0:
            print(f"step {step:5d}  G {b.total_generator:8.4f}  mad {b.mad:.4f}  gp {b.gp:.4f}", flush=True)

    gen = load_generator(train(cfg, manifest, out / "run", on_step=progress))
    rows = []
    for rid, hz, cl in load_pairs(manifest, "train"):
        with torch.no_grad():
            o = gen(to_tensor(hz))
        fine, coarse = from_tensor(o.fine), from_tensor(o.coarse)
        rows.append((psnr(hz, cl), psnr(coarse, cl), psnr(fine, cl), ssim(fine, cl)))
        print(f"{rid:24s} hazy {rows[-1][0]:6.2f}  coarse {rows[-1][1]:6.2f}  fine {rows[-1][2]:6.2f} dB")
    h, c, f, s = np.mean(rows, axis=0)
    print(f"mean: hazy {h:.2f}  coarse {c:.2f}  fine {f:.2f} dB  (gain {f - h:+.2f} dB, fine SSIM {s:.4f})")


if __name__ == "__main__":
    main()
