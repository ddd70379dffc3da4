"""Desk-scale loss-allocation ablation: plan A vs plan B on procedural data, same seed and data order.

    python3 scripts/run_desk_ablation.py --steps 500 --out runs/ablation
"""
import argparse
from pathlib import Path

from ctxdehaze import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--sources", type=int, default=12)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--width-mult", type=float, default=0.125)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    out = Path(args.out)
    rc = cli.main([
        "synthesize", "--out", str(out / "data"), "--train-count", str(4 * args.sources),
        "--test-count", "8", "--crop-size", str(args.size), "--procedural-count", str(args.sources),
        "--procedural-size", str(args.size + 16), "--test-fraction", "0.25", "--seed", str(args.seed),
    ])
    if rc:
        raise SystemExit(rc)
    raise SystemExit(cli.main([
        "ablate", "--manifest", str(out / "data" / "manifest.tsv"), "--iterations", str(args.steps),
        "--checkpoint-every", str(args.steps), "--width-mult", str(args.width_mult),
        "--image-size", str(args.size), "--seed", str(args.seed), "--log-every", "100", "--out", str(out),
    ]))


if __name__ == "__main__":
    main()
