"""Single entry point: phantom generation, training, translation, evaluation.

Exit codes: 0 success, 1 validation error (bad flags/config), 2 runtime
failure (missing files, corrupt checkpoints, aborted training). Each
subcommand echoes its fully resolved configuration as one JSON line before
doing any work, so a run can be reproduced from its log alone.
"""

import argparse
import json
import os
import sys

from ucdmt import data as D
from ucdmt import inference, metrics, training
from ucdmt.errors import (ConfigError, IndivisibleBatch, InvalidCode,
                          UcdmtError)

VALIDATION_ERRORS = (ConfigError, InvalidCode, IndivisibleBatch, ValueError)


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def build_parser():
    parser = _Parser(
        prog="ucdmt",
        description="Unified conditional multimodal MR image translation.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--subjects", type=int, default=14, help="number of subjects")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--slices", type=int, default=8, help="slices per subject")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--lesion-prob", type=float, default=0.5,
                   help="per-subject lesion probability")
    p.add_argument("--noise-sigma", type=float, default=0.02,
                   help="additive Gaussian noise level")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train translator on a dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", default=None,
                   help="JSON training config (defaults used when omitted)")
    p.add_argument("--data", required=True, help="dataset root with manifest.json")
    p.add_argument("--out", required=True, help="run directory for logs/checkpoints")
    p.add_argument("--disen-off", action="store_true", default=False,
                   help="ablate the latent disentanglement term")
    p.add_argument("--gan-mode", choices=["nonsaturating", "minimax"], default=None,
                   help="override generator adversarial mode")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("translate", help="translate one subject's volume",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--input", required=True, help="dataset root with manifest.json")
    p.add_argument("--subject", required=True, help="subject id")
    p.add_argument("--from", dest="from_mod", required=True,
                   choices=list(D.MODALITY_NAMES), help="input modality")
    p.add_argument("--to", dest="to_mod", required=True,
                   choices=list(D.MODALITY_NAMES) + ["all"],
                   help="target modality, or 'all' for every other one")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="compute the metrics report",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset root with manifest.json")
    p.add_argument("--split", default="test",
                   choices=list(D.SPLITS), help="manifest split to evaluate")
    p.add_argument("--report", default="report.json", help="output report path")
    p.add_argument("--cross-only", action="store_true", default=False,
                   help="skip the 4 self-translation directions")
    p.add_argument("--is-splits", type=int, default=4,
                   help="inception-score split count")
    p.add_argument("--classifier-steps", type=int, default=300,
                   help="training steps for the IS modality classifier")
    p.add_argument("--workers", type=int, default=1,
                   help="threads for direction sharding (1 = fully deterministic)")
    p.add_argument("--samples-out", default=None,
                   help="directory for (input, output, ground-truth) PNG grids")
    return parser


def _echo(payload):
    print(json.dumps(payload, sort_keys=True))


def cmd_phantom(args):
    spec = D.PhantomSpec(n_subjects=args.subjects, image_size=args.size,
                         slices_per_subject=args.slices,
                         lesion_probability=args.lesion_prob,
                         noise_sigma=args.noise_sigma, seed=args.seed)
    _echo({"subcommand": "phantom", "spec": vars(spec), "out": args.out})
    manifest = D.generate_phantom_dataset(spec, args.out)
    n_train = len(manifest.subjects_in("train_translator"))
    print(f"wrote {len(manifest.subjects)} subjects "
          f"({n_train} train_translator) to {manifest.root_path}")
    return 0


def cmd_train(args):
    config = training.load_config(args.config) if args.config else training.TrainConfig()
    if args.disen_off:
        config.disen_off = True
    if args.gan_mode:
        config.gan_mode = args.gan_mode
    env_seed = os.environ.get("UCDMT_SEED")
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"UCDMT_SEED must be an integer, got {env_seed!r}")
    config.validate()
    _echo({"subcommand": "train", "config": config.to_dict(),
           "data": args.data, "out": args.out, "resume": args.resume})
    manifest = D.DatasetManifest.load(args.data)

    def progress(step, total, breakdown):
        if step % max(1, config.log_every) == 0 or step == total:
            print(f"step {step}/{total}  l1={breakdown.l1_translation:.4f} "
                  f"cycle={breakdown.l1_cycle:.4f} total={breakdown.total:.4f}",
                  flush=True)

    state = training.run_training(config, manifest, args.out,
                                  resume_from=args.resume, progress=progress)
    print(f"finished at step {state.step}; checkpoint: "
          f"{os.path.join(args.out, 'final.ckpt')}")
    return 0


def cmd_translate(args):
    _echo({"subcommand": "translate", "checkpoint": args.checkpoint,
           "input": args.input, "subject": args.subject,
           "from": args.from_mod, "to": args.to_mod, "out": args.out})
    bundle = training.load_bundle(args.checkpoint)
    manifest = D.DatasetManifest.load(args.input)
    ckpt_hash = inference.checkpoint_hash(args.checkpoint)
    targets = ([n for n in D.MODALITY_NAMES if n != args.from_mod]
               if args.to_mod == "all" else [args.to_mod])
    for target in targets:
        path = inference.translate_volume(bundle, manifest, args.subject,
                                          args.from_mod, target, args.out,
                                          ckpt_hash=ckpt_hash)
        print(f"wrote {path}")
    return 0


def cmd_evaluate(args):
    _echo({"subcommand": "evaluate", "checkpoint": args.checkpoint,
           "data": args.data, "split": args.split, "report": args.report,
           "include_self": not args.cross_only, "is_splits": args.is_splits,
           "workers": args.workers})
    bundle = training.load_bundle(args.checkpoint)
    manifest = D.DatasetManifest.load(args.data)
    report = metrics.evaluate_dataset(
        bundle, manifest, args.split, report_path=args.report,
        include_self=not args.cross_only, is_splits=args.is_splits,
        classifier_steps=args.classifier_steps, workers=args.workers,
        ckpt_hash=inference.checkpoint_hash(args.checkpoint),
        progress=lambda key: print(f"evaluated {key}", flush=True))
    if args.samples_out:
        _write_samples(bundle, manifest, args.split, args.samples_out)
    agg = report.aggregate
    print(f"cross-modality aggregate: L1 {agg['l1']['mean']:.2f}  "
          f"SSIM {agg['ssim']['mean']:.4f}  PSNR {agg['psnr']['mean']:.2f}  "
          f"IS {agg['is']['mean']:.3f}")
    print(f"report written to {args.report}")
    return 0


def _write_samples(bundle, manifest, split, out_dir, per_direction=4):
    os.makedirs(out_dir, exist_ok=True)
    index = D.build_paired_index(manifest, split)
    m = manifest.m
    for a in range(m):
        for b in range(m):
            if a == b:
                continue
            take = index[:per_direction]
            inputs = [s.images[a] for s in take]
            gts = [s.images[b] for s in take]
            outs = [inference.translate_batch(
                bundle, s.images[a][None, None], b)[0, 0] for s in take]
            name = f"{D.MODALITY_NAMES[a]}_to_{D.MODALITY_NAMES[b]}.png"
            metrics.write_sample_grid(os.path.join(out_dir, name), inputs, outs, gts)


def dispatch(args) -> int:
    handlers = {"phantom": cmd_phantom, "train": cmd_train,
                "translate": cmd_translate, "evaluate": cmd_evaluate}
    return handlers[args.subcommand](args)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else int(e.code)
    try:
        return dispatch(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (UcdmtError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
