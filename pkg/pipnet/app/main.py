"""
Command-line entry point.

    python -m app.main <command> [--config run.json] [--seed N] [--out DIR] [options]

Commands: synth, train, eval, stc, bench, prior-exp, sweep.
Exit codes: 0 success, 1 invalid configuration or usage, 2 runtime failure.
"""
import argparse
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from . import benchmark, config, evaluation, storage
from .data import Sample, generate_domain, load_template
from .exceptions import ConfigurationError, UsageError
from .schemas import (
    BackboneConfig,
    DomainStyle,
    HeadKind,
    Paradigm,
    PriorMode,
    RunConfig,
    StcReport,
    SweepKind,
    SweepReport,
    SweepRow,
)
from .stc import run_stc
from .training import build_network, train_supervised

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2

UNLABELED_STYLE = {Paradigm.UDA: DomainStyle.B, Paradigm.GSSL: DomainStyle.C}
TRAIN_SPLIT, TEST_SPLIT, UNLABELED_SPLIT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig JSON document")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory")

    parser = _Parser(prog="pipnet", description="Pixel-in-pixel landmark detection at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate synthetic datasets")
    sub.add_parser("train", parents=[common], help="supervised training, then test-set evaluation")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, help="checkpoint prefix (default <out>/model)")
    sub.add_parser("stc", parents=[common], help="curriculum self-training")
    sub.add_parser("bench", parents=[common], help="FLOP counts and latency per head kind")
    prior = sub.add_parser("prior-exp", parents=[common], help="implicit-prior experiment")
    prior.add_argument("--mode", choices=[m.value for m in PriorMode])
    sweep = sub.add_parser("sweep", parents=[common], help="stride or neighbor-count sweep")
    sweep.add_argument("--kind", choices=[k.value for k in SweepKind])
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.model_validate_json(args.config.read_text()) if args.config else RunConfig()
    updates = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {args.seed}")
        updates["seed"] = args.seed
        updates["schedule"] = cfg.schedule.model_copy(update={"seed": args.seed})
    if args.out is not None:
        updates["output_dir"] = str(args.out)
    if getattr(args, "checkpoint", None) is not None:
        updates["checkpoint"] = str(args.checkpoint)
    if getattr(args, "mode", None):
        updates["prior"] = cfg.prior.model_copy(update={"mode": PriorMode(args.mode)})
    if getattr(args, "kind", None):
        updates["sweep"] = cfg.sweep.model_copy(update={"kind": SweepKind(args.kind)})
    # re-validate so overrides obey the same rules as the file
    return RunConfig.model_validate(cfg.model_copy(update=updates).model_dump())


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.output_dir) if cfg.output_dir else config.output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- data ---

def _domain(cfg: RunConfig, style: DomainStyle, count: int, split: int, is_labeled: bool = True) -> list[Sample]:
    d = cfg.data
    return generate_domain(cfg.synth, style, count, cfg.seed, split=split, crop_size=d.crop_size,
                           enlarge_pct=d.enlarge_pct, top_reduce_pct=d.top_reduce_pct, is_labeled=is_labeled)


def _train_set(cfg: RunConfig) -> list[Sample]:
    if cfg.data.train_manifest:
        return storage.load_manifest(cfg.data.train_manifest)
    return _domain(cfg, cfg.data.train_style, cfg.data.train_count, TRAIN_SPLIT)


def _test_set(cfg: RunConfig) -> list[Sample]:
    if cfg.data.test_manifest:
        return storage.load_manifest(cfg.data.test_manifest)
    return _domain(cfg, cfg.data.test_style, cfg.data.test_count, TEST_SPLIT)


def _unlabeled_set(cfg: RunConfig) -> list[Sample]:
    if cfg.paradigm == Paradigm.GSL:
        return []
    if cfg.data.unlabeled_manifest:
        return [replace(s, is_labeled=False) for s in storage.load_manifest(cfg.data.unlabeled_manifest)]
    return _domain(cfg, UNLABELED_STYLE[cfg.paradigm], cfg.data.unlabeled_count, UNLABELED_SPLIT, is_labeled=False)


def _write_eval(net, samples: Sequence[Sample], cfg: RunConfig, out: Path, prefix: str = "eval"):
    report, preds = evaluation.evaluate(net, samples, cfg.eval)
    storage.write_json(report, out / f"{prefix}.json")
    names = load_template(cfg.synth.template_file).names if samples[0].landmarks.N == cfg.synth.num_landmarks else None
    storage.write_per_landmark_csv(report.per_landmark, out / f"{prefix}_per_landmark.csv", names)
    for i in range(min(cfg.eval.overlays, len(samples))):
        storage.save_overlay(samples[i].image, out / "overlays" / f"{prefix}_{i:04d}.png",
                             gt=samples[i].landmarks, pred=preds[i])
    return report


# --- commands ---

def cmd_synth(cfg: RunConfig, out: Path) -> None:
    storage.write_dataset(_domain(cfg, cfg.data.train_style, cfg.data.train_count, TRAIN_SPLIT), out / "train")
    storage.write_dataset(_domain(cfg, cfg.data.test_style, cfg.data.test_count, TEST_SPLIT), out / "test")
    unlabeled = _unlabeled_set(cfg)
    if unlabeled:
        storage.write_dataset(unlabeled, out / "unlabeled")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    train = _train_set(cfg)
    test = _test_set(cfg)
    kind = cfg.head.kind
    net = build_network(cfg, kind, train)
    net, report = train_supervised(net, kind, train, cfg.schedule, cfg.augment, val_set=test, eval_settings=cfg.eval)
    storage.save_checkpoint(net, out / "model")
    storage.write_train_csv([report], out / "train.csv")
    storage.write_json(report, out / "train_report.json")
    _write_eval(net, test, cfg, out)


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    prefix = Path(cfg.checkpoint) if cfg.checkpoint else out / "model"
    net = storage.load_checkpoint(prefix)
    _write_eval(net, _test_set(cfg), cfg, out)


def cmd_stc(cfg: RunConfig, out: Path) -> None:
    train = _train_set(cfg)
    test = _test_set(cfg)
    unlabeled = _unlabeled_set(cfg)
    net = build_network(cfg, cfg.head.kind, train, with_aux=True)
    net, reports, rounds = run_stc(net, train, unlabeled, cfg.curriculum, cfg.schedule, cfg.augment,
                                   val_set=test, eval_settings=cfg.eval,
                                   on_pseudo_labels=lambda p: storage.write_pseudo_labels(
                                       p.samples, out / "pseudo" / f"round_{p.round_index}"))
    storage.save_checkpoint(net, out / "model")
    storage.write_train_csv(reports, out / "train.csv")
    test_report = _write_eval(net, test, cfg, out)
    storage.write_json(StcReport(paradigm=cfg.paradigm, rounds=rounds, test=test_report), out / "stc.json")


def cmd_bench(cfg: RunConfig, out: Path) -> None:
    samples = _domain(cfg, cfg.data.train_style, min(cfg.data.train_count, 32), TRAIN_SPLIT)
    for kind in cfg.bench.head_kinds:
        net = build_network(cfg, kind, samples, with_aux=False)
        flops = benchmark.count_flops(net)
        latency = benchmark.time_inference(net, n_warmup=cfg.bench.n_warmup, n_runs=cfg.bench.n_runs, seed=cfg.seed)
        storage.write_json(flops, out / f"flops_{kind.value.lower()}.json")
        storage.write_json(latency, out / f"latency_{kind.value.lower()}.json")
        logger.info(f"{kind.value}: {flops.total_macs} MACs ({benchmark.head_macs(flops)} in the head), "
                    f"median {latency.median_ms:.3f} ms")


def cmd_prior(cfg: RunConfig, out: Path) -> None:
    train = _train_set(cfg)
    report = evaluation.implicit_prior_experiment(cfg.prior.mode, cfg, train, out_dir=out / "overlays")
    storage.write_json(report, out / "prior.json")


def backbone_for_stride(base: BackboneConfig, stride: int) -> BackboneConfig:
    """Add extend or reduce layers until the backbone reaches `stride`."""
    steps = math.log2(stride / base.stride)
    if not steps.is_integer():
        raise ConfigurationError(f"stride {stride} is not a power-of-two multiple of {base.stride}")
    steps = int(steps)
    if steps >= 0:
        return base.model_copy(update={"extend_layers": base.extend_layers + steps})
    return base.model_copy(update={"reduce_layers": base.reduce_layers - steps})


def _sweep_run(cfg: RunConfig, kind: SweepKind, value: int, train, test) -> SweepRow:
    if kind == SweepKind.STRIDE:
        backbone = BackboneConfig.model_validate(backbone_for_stride(cfg.backbone, value).model_dump())
        run = cfg.model_copy(update={"backbone": backbone})
        head_kind = cfg.head.kind
    else:
        head_kind = HeadKind.PIP if value == 0 else HeadKind.PIP_NRM
        run = cfg.model_copy(update={"head": cfg.head.model_copy(update={"num_neighbors": value})})
    net = build_network(run, head_kind, train)
    train_supervised(net, head_kind, train, run.schedule, run.augment)
    report, _ = evaluation.evaluate(net, test, run.eval)
    return SweepRow(kind=kind, value=value, nme=report.nme, point_var=report.point_var,
                    grid_accuracy=report.grid_accuracy)


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    kind = cfg.sweep.kind
    values = cfg.sweep.strides if kind == SweepKind.STRIDE else cfg.sweep.neighbor_counts
    train = _train_set(cfg)
    test = _test_set(cfg)
    with ThreadPoolExecutor(max_workers=config.workers()) as pool:
        rows = list(pool.map(lambda v: _sweep_run(cfg, kind, v, train, test), values))
    storage.write_json(SweepReport(kind=kind, rows=rows), out / f"sweep_{kind.value}.json")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "stc": cmd_stc,
    "bench": cmd_bench,
    "prior-exp": cmd_prior,
    "sweep": cmd_sweep,
}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=config.log_level(), format="%(asctime)s - %(levelname)s - %(name)s - %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = load_run_config(args)
    except (UsageError, ConfigurationError, ValidationError, OSError) as e:
        logger.error(f"Invalid invocation: {e}")
        return EXIT_INVALID

    out = _out_dir(cfg, args.command)
    storage.write_run_manifest(out, args.command, cfg)
    logger.info(f"Running '{args.command}' (seed {cfg.seed}) -> {out}")
    try:
        COMMANDS[args.command](cfg, out)
    except (ConfigurationError, ValidationError) as e:
        logger.error(f"'{args.command}' rejected its configuration: {e}", exc_info=True)
        return EXIT_INVALID
    except Exception as e:
        logger.error(f"'{args.command}' failed: {e}", exc_info=True)
        return EXIT_FAILURE
    logger.info(f"'{args.command}' finished.")
    return EXIT_OK


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
