import argparse
import os
import sys

from llmdiff.adapter import scale_report, summarize_scales, write_scale_report
from llmdiff.checkpoint import print_checkpoint
from llmdiff.config import load_config, write_resolved_config
from llmdiff.corpus import build_vocab, generate_items, prepare_dataset_dir, write_dataset
from llmdiff.evaluate import run_eval, sample_prompt
from llmdiff.numerics import RandomStream
from llmdiff.train import load_generator, require_checkpoint, train_adapter, train_base, train_clf, train_lm, train_metric
from llmdiff.verify import print_summary, run_suite

SPLIT_STREAMS = {"train": 0, "test": 1}


def resolve_config(config_path, ckpt=None):
    """
    Explicit --config wins; otherwise use the config.resolved.json stored next to the
    checkpoint, falling back to the defaults.
    """
    if config_path is None and ckpt is not None:
        candidate = os.path.join(os.path.dirname(os.path.abspath(ckpt)), "config.resolved.json")
        if os.path.exists(candidate):
            config_path = candidate
    return load_config(config_path)


def cmd_gen_data(args):
    config = resolve_config(args.config)
    prepare_dataset_dir(args.out, force=args.force)
    n_items = config.data.n_items if args.n is None else args.n
    stream = RandomStream(config.seeds.data, SPLIT_STREAMS[args.split])
    print(f"Generating {n_items} {args.split} scenes at {config.data.image_size}x{config.data.image_size}...")
    items = generate_items(n_items, stream, config.data.image_size, workers=args.workers or config.data.workers)
    write_dataset(args.out, items)
    write_resolved_config(config, args.out)


def cmd_train_lm(args):
    train_lm(resolve_config(args.config), args.data, args.out, force=args.force, resume=args.resume)


def cmd_train_base(args):
    train_base(resolve_config(args.config), args.data, args.out, force=args.force, resume=args.resume)


def cmd_train_adapter(args):
    train_adapter(resolve_config(args.config), args.data, args.lm_ckpt, args.base_ckpt, args.out, force=args.force, resume=args.resume)


def cmd_train_metric(args):
    train_metric(resolve_config(args.config), args.data, args.out, force=args.force, resume=args.resume)


def cmd_train_clf(args):
    train_clf(resolve_config(args.config), args.data, args.out, force=args.force, resume=args.resume)


def cmd_sample(args):
    config = resolve_config(args.config, args.ckpt)
    guidance = config.diffusion.guidance_weight if args.guidance is None else args.guidance
    sample_prompt(config, args.ckpt, args.prompt, args.seed, args.out, mode=args.mode, guidance_weight=guidance)


def cmd_eval(args):
    config = resolve_config(args.config, args.ckpt)
    run_eval(
        config, args.ckpt, args.testset, args.metric_ckpt, args.clf_ckpt, args.out, mode=args.mode, seed=args.seed, images_dir=args.images_dir
    )


def cmd_report_scales(args):
    config = resolve_config(args.config, args.ckpt)
    generator = load_generator(config, require_checkpoint(args.ckpt, "adapter"), len(build_vocab()), "adapter")
    report = scale_report(generator["adapter"])
    write_scale_report(report, args.out)
    print(report.to_string(index=False))
    print(summarize_scales(report).to_string())
    print(f"Scale report saved to {args.out}")


def cmd_verify(args):
    table = run_suite(args.suite)
    print_summary(table)
    return 0 if bool(table["passed"].all()) else 1


def cmd_inspect(args):
    print_checkpoint(args.ckpt)


def _add_config(parser):
    parser.add_argument("--config", type=str, default=None, help="Path to a JSON run config (defaults apply to missing keys).")


def _add_training(parser, needs_data=True):
    _add_config(parser)
    if needs_data:
        parser.add_argument("--data", required=True, type=str, help="Dataset directory written by gen-data.")
    parser.add_argument("--out", required=True, type=str, help="Run directory for checkpoint.llmd and metrics.jsonl.")
    parser.add_argument("--force", action="store_true", help="Overwrite an existing run directory.")
    parser.add_argument("--resume", action="store_true", help="Continue from the checkpoint in the run directory.")


def parse_arguments(argv=None):
    """
    Parses command line arguments for every subcommand.

    Returns:
    - Parsed arguments; `handler` holds the function to run.
    """
    parser = argparse.ArgumentParser(description="Decoder-only LM text encodings as diffusion conditioning, at desk scale.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", help="Generate synthetic scenes, captions and renders.")
    _add_config(gen)
    gen.add_argument("--out", required=True, type=str, help="Directory to write data.jsonl and the PPM images to.")
    gen.add_argument("--n", type=int, default=None, help="Number of items (default: data.n_items).")
    gen.add_argument("--split", choices=sorted(SPLIT_STREAMS), default="train", help="Split name; each split draws from its own stream.")
    gen.add_argument("--workers", type=int, default=None, help="Worker processes (default: data.workers).")
    gen.add_argument("--force", action="store_true", help="Overwrite an existing dataset directory.")
    gen.set_defaults(handler=cmd_gen_data)

    lm = subparsers.add_parser("train-lm", help="Pretrain the decoder-only language model on captions.")
    _add_training(lm)
    lm.set_defaults(handler=cmd_train_lm)

    base = subparsers.add_parser("train-base", help="Pretrain the baseline diffusion backbone.")
    _add_training(base)
    base.set_defaults(handler=cmd_train_base)

    adapter = subparsers.add_parser("train-adapter", help="Train the adapter with the LM and backbone frozen.")
    _add_training(adapter)
    adapter.add_argument("--lm-ckpt", required=True, type=str, help="Checkpoint written by train-lm.")
    adapter.add_argument("--base-ckpt", required=True, type=str, help="Checkpoint written by train-base.")
    adapter.set_defaults(handler=cmd_train_adapter)

    metric = subparsers.add_parser("train-metric", help="Train the contrastive image-text metric on renders.")
    _add_training(metric)
    metric.set_defaults(handler=cmd_train_metric)

    clf = subparsers.add_parser("train-clf", help="Train the attribute classifier on renders.")
    _add_training(clf)
    clf.set_defaults(handler=cmd_train_clf)

    sample = subparsers.add_parser("sample", help="Sample one image for a prompt.")
    _add_config(sample)
    sample.add_argument("--ckpt", required=True, type=str, help="Generator checkpoint (train-adapter output for both modes).")
    sample.add_argument("--prompt", required=True, type=str, help="Caption to condition on.")
    sample.add_argument("--seed", type=int, default=0, help="Sampling seed.")
    sample.add_argument("--out", required=True, type=str, help="Output PPM path.")
    sample.add_argument("--mode", choices=["baseline", "adapter"], default="adapter", help="Conditioning path.")
    sample.add_argument("--guidance", type=float, default=None, help="Classifier-free guidance weight (default: off).")
    sample.set_defaults(handler=cmd_sample)

    evaluate = subparsers.add_parser("eval", help="Sample test captions and write the evaluation report.")
    _add_config(evaluate)
    evaluate.add_argument("--ckpt", required=True, type=str, help="Generator checkpoint.")
    evaluate.add_argument("--testset", required=True, type=str, help="Test dataset directory.")
    evaluate.add_argument("--metric-ckpt", required=True, type=str, help="Checkpoint written by train-metric.")
    evaluate.add_argument("--clf-ckpt", required=True, type=str, help="Checkpoint written by train-clf.")
    evaluate.add_argument("--out", required=True, type=str, help="Report JSON path.")
    evaluate.add_argument("--mode", choices=["baseline", "adapter"], default="adapter", help="Conditioning path.")
    evaluate.add_argument("--seed", type=int, default=None, help="First sampling seed (default: seeds.eval).")
    evaluate.add_argument("--images-dir", type=str, default=None, help="Optionally save every sampled image here.")
    evaluate.set_defaults(handler=cmd_eval)

    scales = subparsers.add_parser("report-scales", help="Write the per-site adapter scale report as CSV.")
    _add_config(scales)
    scales.add_argument("--ckpt", required=True, type=str, help="Checkpoint written by train-adapter.")
    scales.add_argument("--out", required=True, type=str, help="Output CSV path.")
    scales.set_defaults(handler=cmd_report_scales)

    verify = subparsers.add_parser("verify", help="Run the oracle, gradient and invariant checks.")
    verify.add_argument("--suite", choices=["oracle", "grad", "invariants", "all"], default="all", help="Which checks to run.")
    verify.set_defaults(handler=cmd_verify)

    inspect = subparsers.add_parser("inspect", help="Print tensor names, dtypes and shapes of a checkpoint.")
    inspect.add_argument("--ckpt", required=True, type=str, help="Checkpoint file to inspect.")
    inspect.set_defaults(handler=cmd_inspect)

    return parser.parse_args(argv)


def main(argv=None):
    args = parse_arguments(argv)
    try:
        code = args.handler(args)
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
