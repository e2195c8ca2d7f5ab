"""Command-line experiment runner: train, eval, bench-flops, demo-prune."""

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, TextIO

import numpy as np

from vtprune import __version__
from vtprune.core.learnable import save_bank
from vtprune.core.numeric import Rng
from vtprune.metrics.flops import (
    BASELINE_VISUAL_TOKENS,
    DEFAULT_TEXT_TOKENS,
    FORMULA,
    LLAMA2_7B,
    REFERENCE_BASELINE_TFLOPS,
    PRUNED_VISUAL_TOKENS,
    ArchSpec,
    calibrate_overheads,
    pipeline_cost,
)
from vtprune.metrics.reports import emit_report, format_cost_table
from vtprune.testbed.data import default_task, generate_sample
from vtprune.testbed.model import ToyModel
from vtprune.testbed.training import (
    BANK_FILE,
    MANIPULATION_EPISODES,
    TrainReport,
    compare_noise_modes,
    evaluate_manipulation,
    evaluate_recovery,
    informative_recall,
    kept_set,
    train,
)
from vtprune.utils.config import (
    NOISE_MODES,
    VARIANTS,
    RunConfig,
    load_config,
)
from vtprune.utils.exceptions import ConfigError, VtPruneError
from vtprune.utils.fileutils import format_float, write_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2

FLOPS_FILE = "flops.csv"
EVAL_FILE = "eval.csv"

# Grid marks: kept/pruned x informative/background
MARK_KEPT_INFORMATIVE = "#"
MARK_PRUNED_INFORMATIVE = "x"
MARK_KEPT = "o"
MARK_PRUNED = "."


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _run_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file")
    common.add_argument("--seed", type=int, help="64-bit run seed")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--noise-mode", choices=NOISE_MODES)
    common.add_argument("--steps", type=int, help="training steps")
    common.add_argument("--jobs", type=int, help="evaluation threads")
    common.add_argument("--out", help="output directory")
    common.add_argument(
        "--progress", action="store_true", help="show a progress bar"
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtprune",
        description="Differentiable visual token pruning experiments",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    run = _run_options()

    commands.add_parser(
        "train", parents=[run], help="train and write the trace"
    )

    evaluate = commands.add_parser(
        "eval", parents=[run], help="train, then measure token recovery"
    )
    evaluate.add_argument(
        "--episodes",
        type=int,
        default=MANIPULATION_EPISODES,
        help="manipulation episodes (0 skips the harness)",
    )
    evaluate.add_argument(
        "--noise-ablation",
        action="store_true",
        help="also compare linear-decay and constant noise",
    )

    bench = commands.add_parser(
        "bench-flops", parents=[run], help="FLOPs of baseline vs pruned"
    )
    bench.add_argument(
        "--visual-baseline", type=int, default=BASELINE_VISUAL_TOKENS
    )
    bench.add_argument(
        "--visual-pruned", type=int, default=PRUNED_VISUAL_TOKENS
    )
    bench.add_argument("--text-tokens", type=int, default=DEFAULT_TEXT_TOKENS)
    bench.add_argument(
        "--overhead",
        type=float,
        help="fixed encoder+head FLOPs (calibrated when omitted)",
    )
    bench.add_argument(
        "--target-tflops", type=float, default=REFERENCE_BASELINE_TFLOPS
    )
    bench.add_argument("--layers", type=int, default=LLAMA2_7B.layers)
    bench.add_argument("--hidden", type=int, default=LLAMA2_7B.hidden)
    bench.add_argument("--ffn", type=int, default=LLAMA2_7B.ffn)
    bench.add_argument("--heads", type=int, default=LLAMA2_7B.heads)
    bench.add_argument("--kv-heads", type=int, help="grouped-query heads")
    bench.add_argument(
        "--plain-mlp", action="store_true", help="two-matrix MLP"
    )

    demo = commands.add_parser(
        "demo-prune", parents=[run], help="print a kept/pruned token grid"
    )
    demo.add_argument(
        "--demo-seeds",
        type=int,
        default=0,
        help="also report mean recall over this many samples",
    )
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "seed": args.seed,
        "variant": args.variant,
        "noise_mode": args.noise_mode,
        "steps": args.steps,
        "jobs": args.jobs,
        "out": args.out,
    }


class CLIApp:
    """
    Parses arguments, runs one subcommand and maps errors to exit codes.

    Args:
        stdout: Stream for tables and summaries (defaults to sys.stdout)
    """

    def __init__(self, stdout: Optional[TextIO] = None):
        self.stdout = stdout or sys.stdout
        self.parser = build_parser()

    def echo(self, text: str = "") -> None:
        print(text, file=self.stdout)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return e.code if isinstance(e.code, int) else EXIT_CONFIG
        configure_logging(args.verbose)

        handlers = {
            "train": self.run_train,
            "eval": self.run_eval,
            "bench-flops": self.run_bench_flops,
            "demo-prune": self.run_demo_prune,
        }
        try:
            overrides = _overrides(args)
            if args.command == "demo-prune" and args.steps is None:
                overrides["steps"] = 0
            cfg = load_config(args.config, overrides)
            return handlers[args.command](cfg, args)
        except ConfigError as e:
            print(f"vtprune: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except VtPruneError as e:
            print(f"vtprune: {e}", file=sys.stderr)
            return EXIT_ERROR

    def _train(self, cfg: RunConfig, args) -> TrainReport:
        report = train(cfg, progress=args.progress)
        trace, summary = report.write(cfg.out)
        if report.model is not None and report.model.bank is not None:
            zeta = report.model.zeta
            save_bank(
                report.model.bank,
                Path(cfg.out) / BANK_FILE,
                zeta.item() if zeta is not None else 1.0,
            )
        logger.info("wrote %s and %s", trace, summary)
        return report

    def run_train(self, cfg: RunConfig, args) -> int:
        report = self._train(cfg, args)
        self.echo(report.summary_text().rstrip())
        return EXIT_OK

    def run_eval(self, cfg: RunConfig, args) -> int:
        report = self._train(cfg, args)
        recovery = report.recovery
        rows = [
            ["recall", format_float(recovery.recall)],
            ["retained_mean", format_float(recovery.retained_mean)],
            ["retained_std", format_float(recovery.retained_std)],
            ["retained_fraction", format_float(recovery.retained_fraction)],
            ["accuracy", format_float(recovery.accuracy)],
            ["mse", format_float(recovery.mse)],
        ]
        self.echo(recovery.describe())

        if args.episodes > 0:
            harness = evaluate_manipulation(
                report.model,
                args.episodes,
                Rng(cfg.seed).split("manipulation"),
                jobs=cfg.jobs,
            )
            for name, delta in (
                ("added_success_delta", harness.added_success),
                ("removed_success_delta", harness.removed_success),
                ("added_mse_delta", harness.added_mse),
                ("removed_mse_delta", harness.removed_mse),
            ):
                rows.append([name, format_float(delta.mean)])
                rows.append([f"{name}_stderr", format_float(delta.stderr)])
            self.echo(
                f"manipulation over {harness.episodes} episodes: "
                f"kept {harness.kept_accuracy:.3f}, "
                f"+tokens {harness.added_accuracy:.3f}, "
                f"-10% {harness.removed_accuracy:.3f}"
            )

        if args.noise_ablation:
            retained = compare_noise_modes(cfg, NOISE_MODES, args.progress)
            for mode, mean in retained.items():
                rows.append([f"retained_{mode}", format_float(mean)])
                self.echo(f"noise {mode}: {mean:.2f} tokens retained")

        write_csv(Path(cfg.out) / EVAL_FILE, ("metric", "value"), rows)
        return EXIT_OK

    def _arch(self, args) -> ArchSpec:
        arch = ArchSpec(
            layers=args.layers,
            hidden=args.hidden,
            ffn=args.ffn,
            heads=args.heads,
            kv_equivalent=args.kv_heads is None,
            kv_heads=args.kv_heads,
            gated_mlp=not args.plain_mlp,
        )
        if args.overhead is not None:
            return replace(arch, encoder_flops=args.overhead)
        return calibrate_overheads(
            arch,
            args.visual_baseline,
            args.text_tokens,
            args.target_tflops * 1e12,
        )

    def run_bench_flops(self, cfg: RunConfig, args) -> int:
        arch = self._arch(args)
        baseline = pipeline_cost(
            args.visual_baseline, args.text_tokens, arch, variant="baseline"
        )
        pruned = pipeline_cost(
            args.visual_pruned,
            args.text_tokens,
            arch,
            baseline=baseline,
            variant="pruned",
        )
        self.echo(format_cost_table([baseline, pruned]))
        self.echo(f"formula: {FORMULA}")
        self.echo(
            f"overheads: encoder {arch.encoder_flops:.6e} FLOPs, "
            f"head {arch.head_flops:.6e} FLOPs"
        )
        path = emit_report([baseline, pruned], Path(cfg.out) / FLOPS_FILE)
        logger.info("wrote %s", path)
        return EXIT_OK

    def run_demo_prune(self, cfg: RunConfig, args) -> int:
        if cfg.steps > 0:
            model = self._train(cfg, args).model
        else:
            model = ToyModel(cfg, Rng(cfg.seed).split("init"))
        task = default_task(cfg)
        demo_rng = Rng(cfg.seed).split("demo")
        sample = generate_sample(cfg, demo_rng.split("episode-0"), task)
        kept = kept_set(model, sample)

        for line in render_grid(
            sample.n_visual, kept, sample.informative_set, cfg.with_cls
        ):
            self.echo(line)
        recall = informative_recall(sample.informative_set, kept)
        self.echo(
            f"kept {len(kept)} of {sample.n_visual} visual tokens, "
            f"informative recall {recall:.3f}"
        )

        if args.demo_seeds > 0:
            metrics = evaluate_recovery(
                model, args.demo_seeds, demo_rng, cfg.jobs, task
            )
            self.echo(
                f"mean recall over {args.demo_seeds} samples: "
                f"{metrics.recall:.4f}"
            )
        return EXIT_OK


def render_grid(
    n_visual: int,
    kept: Sequence[int],
    informative: Sequence[int],
    with_cls: bool = True,
) -> List[str]:
    """
    Text mask of the visual tokens, patches laid out row-major.

    ``#`` kept informative, ``x`` pruned informative, ``o`` kept
    background, ``.`` pruned background. CLS gets its own line.
    """
    kept = set(int(i) for i in kept)
    informative = set(int(i) for i in informative)

    def mark(index: int) -> str:
        if index in informative:
            return (
                MARK_KEPT_INFORMATIVE
                if index in kept
                else MARK_PRUNED_INFORMATIVE
            )
        return MARK_KEPT if index in kept else MARK_PRUNED

    lines = []
    first = 0
    if with_cls:
        lines.append(f"CLS {mark(0)}")
        first = 1
    patches = np.arange(first, n_visual)
    width = max(1, math.ceil(math.sqrt(len(patches))))
    for start in range(0, len(patches), width):
        lines.append(
            " ".join(mark(int(i)) for i in patches[start : start + width])
        )
    return lines
