"""Command-line entry point: synthesize | train | dehaze | evaluate | ablate.

Every subcommand accepts ``--config FILE``, a flat ``key = value`` file whose
keys are flag names (``train-count`` or ``train_count``); explicit flags win.
``CTXDEHAZE_OUTPUT_ROOT`` sets where default output directories are created.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path


from . import evaluation
from .generator import dehaze_tensor
from .haze import ConfigError, SynthesisConfig, build_dataset, write_procedural_sources
from .imaging import from_tensor, load_image, save_image, to_tensor
from .losses import LossWeights
from .trainer import TrainConfig, load_generator, train

log = logging.getLogger("ctxdehaze")

OUTPUT_ROOT_ENV = "CTXDEHAZE_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def default_out(name):
    return str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name)


def read_config_file(path):
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k.replace("-", "_")] = v
    return values


def write_effective_config(out_dir, args):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config", "command"}
    lines = [f"{k.replace('_', '-')} = {v}" for k, v in sorted(vars(args).items()) if k not in skip]
    (out_dir / "effective_config.txt").write_text("\n".join(lines) + "\n")


# -- synthesize ---------------------------------------------------------------

def add_synthesize(sub):
    p = sub.add_parser("synthesize", help="generate hazy/clear pairs and a manifest",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--source-dir", help="directory of <id>.png + <id>_depth.png pairs; "
                   "omitted -> procedural scenes are generated")
    p.add_argument("--out", default=default_out("data"), help="output dataset directory")
    p.add_argument("--train-count", type=int, default=10000, help="training pairs (indoor protocol)")
    p.add_argument("--test-count", type=int, default=200, help="test pairs")
    p.add_argument("--crop-size", type=int, default=256, help="square crop side in px")
    p.add_argument("--a-min", type=float, default=0.6, help="atmospheric light lower bound")
    p.add_argument("--a-max", type=float, default=1.0, help="atmospheric light upper bound")
    p.add_argument("--beta-min", type=float, default=0.8, help="train scattering coefficient lower bound")
    p.add_argument("--beta-max", type=float, default=1.6, help="train scattering coefficient upper bound")
    p.add_argument("--test-beta-min", type=float, default=1.0, help="test scattering coefficient lower bound")
    p.add_argument("--test-beta-max", type=float, default=1.6, help="test scattering coefficient upper bound")
    p.add_argument("--test-fraction", type=float, default=0.1, help="share of sources reserved for test")
    p.add_argument("--channelwise-a", action="store_true", help="draw A per color channel")
    p.add_argument("--procedural-count", type=int, default=10, help="procedural scenes when no --source-dir")
    p.add_argument("--procedural-size", type=int, default=96, help="procedural scene side in px")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.set_defaults(func=cmd_synthesize)


def cmd_synthesize(args):
    for lo, hi, name in ((args.a_min, args.a_max, "A"), (args.beta_min, args.beta_max, "beta"),
                         (args.test_beta_min, args.test_beta_max, "test beta")):
        if lo > hi:
            raise UsageError(f"{name} range min {lo} > max {hi}")
    if not (0.0 <= args.a_min and args.a_max <= 1.0):
        raise UsageError("A range must lie within [0, 1]")
    if args.beta_min < 0 or args.test_beta_min < 0:
        raise UsageError("beta must be non-negative")
    out = Path(args.out)
    source_dir = args.source_dir
    if source_dir is None:
        source_dir = out / "sources"
        write_procedural_sources(source_dir, args.procedural_count, max(args.procedural_size, args.crop_size))
    cfg = SynthesisConfig(
        str(source_dir), str(out), train_count=args.train_count, test_count=args.test_count,
        crop_size=args.crop_size, a_range=(args.a_min, args.a_max),
        beta_train=(args.beta_min, args.beta_max), beta_test=(args.test_beta_min, args.test_beta_max),
        test_fraction=args.test_fraction, channelwise_a=args.channelwise_a, seed=args.seed,
    )
    try:
        manifest = build_dataset(cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    write_effective_config(out, args)
    path = out / "manifest.tsv"
    print(f"wrote {len(manifest.records)} records ({len(manifest.failures)} source failures) to {path}")
    return path


# -- train ----------------------------------------------------------------------

def add_train_flags(p):
    p.add_argument("--manifest", help="dataset manifest written by synthesize")
    p.add_argument("--iterations", type=int, default=600000, help="total optimizer steps T")
    p.add_argument("--lr", type=float, default=2e-4, help="base learning rate (linear decay after T/2)")
    p.add_argument("--beta1", type=float, default=0.6, help="Adam beta1")
    p.add_argument("--beta2", type=float, default=0.999, help="Adam beta2")
    p.add_argument("--batch-size", type=int, default=1, help="pairs per step")
    p.add_argument("--critic-steps", type=int, default=1, help="critic updates per generator update")
    p.add_argument("--plan", choices=("A", "B"), default="B",
                   help="B: MSE+SSIM on coarse, adversarial+MAD+perceptual on fine; A: swapped")
    p.add_argument("--lambda-mse", type=float, default=10.0, help="MSE weight")
    p.add_argument("--lambda-ssim", type=float, default=10.0, help="SSIM-loss weight")
    p.add_argument("--lambda-mad", type=float, default=100.0, help="mean-absolute-difference weight")
    p.add_argument("--lambda-perceptual", type=float, default=0.001, help="perceptual-loss weight")
    p.add_argument("--lambda-gp", type=float, default=10.0, help="gradient-penalty weight")
    p.add_argument("--width-mult", type=float, default=1.0, help="channel width multiplier")
    p.add_argument("--image-size", type=int, default=256, help="training crop side in px")
    p.add_argument("--checkpoint-every", type=int, default=10000, help="steps between checkpoints")
    p.add_argument("--perceptual-weights", help="local VGG-19 state dict; omitted -> bundled random extractor")
    p.add_argument("--conditional-critic", action="store_true", help="critic also sees the hazy input")
    p.add_argument("--log-every", type=int, default=100, help="print a loss line every N steps")
    p.add_argument("--seed", type=int, default=0, help="run seed")


def add_train(sub):
    p = sub.add_parser("train", help="train generator and critic",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_train_flags(p)
    p.add_argument("--out", default=default_out("train"), help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)


def train_config_from_args(args, plan=None):
    weights = LossWeights(
        mse=args.lambda_mse, ssim=args.lambda_ssim, mad=args.lambda_mad,
        perceptual=args.lambda_perceptual, gp=args.lambda_gp, plan=plan or args.plan,
    )
    return TrainConfig(
        total_iterations=args.iterations, base_lr=args.lr, adam_betas=(args.beta1, args.beta2),
        batch_size=args.batch_size, critic_steps_per_gen_step=args.critic_steps, weights=weights,
        seed=args.seed, checkpoint_every=args.checkpoint_every, image_size=args.image_size,
        width_mult=args.width_mult, conditional_critic=args.conditional_critic,
        perceptual_weights=args.perceptual_weights,
    )


def _run_training(args, out, plan=None):
    if not args.manifest or not Path(args.manifest).exists():
        raise UsageError(f"manifest not found: {args.manifest!r}")
    try:
        cfg = train_config_from_args(args, plan)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    def report(step, b):
        if step % args.log_every == 0 or step == cfg.total_iterations:
            print(f"step {step}  G {b.total_generator:.4f}  D {b.total_critic:.4f}  "
                  f"mse {b.mse:.4f}  ssim {b.ssim_loss:.4f}  mad {b.mad:.4f}  "
                  f"vgg {b.perceptual:.4f}  gp {b.gp:.4f}", flush=True)

    write_effective_config(out, args)
    resume = getattr(args, "resume", None)
    return train(cfg, args.manifest, out, resume_from=resume, on_step=report)


def cmd_train(args):
    ckpt = _run_training(args, Path(args.out))
    print(f"final checkpoint {ckpt}")
    return ckpt


# -- dehaze ---------------------------------------------------------------------

def add_dehaze(sub):
    p = sub.add_parser("dehaze", help="dehaze image files of any size",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", help="checkpoint file from train")
    p.add_argument("inputs", nargs="+", help="input image files")
    p.add_argument("--out", default=default_out("dehazed"), help="output directory")
    p.add_argument("--coarse", action="store_true", help="also write the coarse output")
    p.set_defaults(func=cmd_dehaze)


def cmd_dehaze(args):
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint!r}")
    gen = load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, failed = [], []
    for f in args.inputs:
        try:
            img = load_image(f)
        except (OSError, ValueError) as exc:
            failed.append(f)
            print(f"error: {f}: {exc}", file=sys.stderr)
            continue
        coarse, fine = dehaze_tensor(gen, to_tensor(img))
        stem = Path(f).stem
        save_image(out / f"{stem}_dehazed.png", from_tensor(fine))
        written.append(out / f"{stem}_dehazed.png")
        if args.coarse:
            save_image(out / f"{stem}_coarse.png", from_tensor(coarse))
            written.append(out / f"{stem}_coarse.png")
    print(f"{len(args.inputs) - len(failed)} processed, {len(failed)} failed, {len(written)} files written")
    if failed:
        return 1
    return written


# -- evaluate -------------------------------------------------------------------

def add_evaluate(sub):
    p = sub.add_parser("evaluate", help="PSNR/SSIM of a checkpoint over a manifest split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", help="checkpoint file from train")
    p.add_argument("--manifest", help="dataset manifest")
    p.add_argument("--which", choices=("coarse", "fine", "both"), default="both", help="outputs to score")
    p.add_argument("--split", choices=("train", "test"), default="test", help="manifest split")
    p.add_argument("--out", default=default_out("eval"), help="report directory")
    p.add_argument("--rgb", action="store_true", help="average metrics over RGB instead of luminance")
    p.add_argument("--dump-images", action="store_true", help="write I / coarse / fine / J panels")
    p.add_argument("--identity-model", action="store_true",
                   help="test hook: score ground truth against itself; no checkpoint needed")
    p.set_defaults(func=cmd_evaluate)


def cmd_evaluate(args):
    predictor = evaluation.identity_predictor if args.identity_model else None
    if predictor is None and (not args.checkpoint or not Path(args.checkpoint).exists()):
        raise UsageError(f"checkpoint not found: {args.checkpoint!r}")
    if not args.manifest or not Path(args.manifest).exists():
        raise UsageError(f"manifest not found: {args.manifest!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = evaluation.evaluate(
        args.checkpoint, args.manifest, which=args.which, split=args.split, predictor=predictor,
        rgb=args.rgb, dump_dir=out / "images" if args.dump_images else None,
    )
    for name, rep in reports.items():
        evaluation.write_report(rep, out / f"report_{name}.txt")
    text, tsv = evaluation.compare_report(reports.values(), out / "comparison.txt")
    write_effective_config(out, args)
    print(text.read_text(), end="")
    return tsv


# -- ablate ---------------------------------------------------------------------

def add_ablate(sub):
    p = sub.add_parser("ablate", help="train plan A and plan B with one seed and compare",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_train_flags(p)
    p.add_argument("--out", default=default_out("ablate"), help="ablation directory")
    p.add_argument("--split", choices=("train", "test"), default="test", help="manifest split")
    p.set_defaults(func=cmd_ablate)


def cmd_ablate(args):
    out = Path(args.out)
    reports = []
    paths = []
    for plan in ("A", "B"):
        run = out / f"plan{plan}"
        ckpt = _run_training(args, run, plan=plan)
        rep = evaluation.evaluate(ckpt, args.manifest, which="fine", split=args.split)["fine"]
        rep.label = f"Plan{plan}"
        paths.append(evaluation.write_report(rep, run / "report_fine.txt"))
        reports.append(rep)
    text, tsv = evaluation.compare_report(reports, out / "comparison.txt")
    write_effective_config(out, args)
    print(text.read_text(), end="")
    return paths


# -- main -----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ctxdehaze", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (add_synthesize, add_train, add_dehaze, add_evaluate, add_ablate):
        add(sub)
    for p in sub.choices.values():
        p.add_argument("--config", help="flat key = value file; flags override it")
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        values = read_config_file(args.config)
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in values.items():
            if k not in known or k in ("help", "config"):
                raise UsageError(f"unknown config key {k!r}")
            action = known[k]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                defaults[k] = action.type(v)
            else:
                defaults[k] = v
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
    except UsageError as exc:
        print(f"ctxdehaze: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a nonzero exit
        print(f"ctxdehaze: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
