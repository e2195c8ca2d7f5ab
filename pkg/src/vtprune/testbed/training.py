"""Training loop, recovery evaluation and token-manipulation harness."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from tqdm import trange

from vtprune.core.numeric import (
    GradientContext,
    Matrix,
    Rng,
    concat_rows,
    mean_all,
    square,
    sub,
)
from vtprune.core.pruner import (
    NoiseMode,
    NoiseSchedule,
    PruneMode,
    alpha_at,
)
from vtprune.metrics.reports import count_stats, format_retention
from vtprune.testbed.data import (
    SyntheticSample,
    SyntheticTask,
    build_task,
    default_task,
    generate_sample,
)
from vtprune.testbed.model import ToyModel
from vtprune.utils.config import NOISE_MODES, RunConfig
from vtprune.utils.exceptions import (
    ArgumentError,
    NumericError,
    TrainingError,
)
from vtprune.utils.fileutils import (
    ensure_output_dir,
    format_float,
    write_csv,
    write_text,
)

logger = logging.getLogger(__name__)

TRACE_HEADER = ("step", "loss", "retained_mean", "retained_std", "alpha")
TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.txt"
BANK_FILE = "bank.bin"

# Global gradient-norm ceiling applied before every update
CLIP_NORM = 5.0

MANIPULATION_EPISODES = 500
DEFAULT_DROP_FRACTION = 0.1

T = TypeVar("T")


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    retained_mean: float
    retained_std: float
    alpha: float

    def row(self) -> List[str]:
        return [
            str(self.step),
            format_float(self.loss),
            format_float(self.retained_mean),
            format_float(self.retained_std),
            format_float(self.alpha),
        ]


@dataclass(frozen=True)
class RecoveryMetrics:
    """Episode-averaged recall, retained count and task quality."""

    recall: float
    retained_mean: float
    retained_std: float
    accuracy: float
    mse: float
    episodes: int
    visual_tokens: int

    @property
    def retained_fraction(self) -> float:
        return self.retained_mean / self.visual_tokens

    def describe(self) -> str:
        return (
            f"recall {self.recall:.3f}, retained "
            f"{format_retention(self.retained_mean, self.retained_std)} "
            f"of {self.visual_tokens}, accuracy {self.accuracy:.3f}, "
            f"mse {self.mse:.5f} over {self.episodes} episodes"
        )


@dataclass
class TrainReport:
    """Per-step trace, final recovery metrics and the config that made them."""

    config: RunConfig
    steps: List[StepRecord]
    recovery: RecoveryMetrics
    model: Optional[ToyModel] = field(default=None, repr=False, compare=False)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.steps]

    @property
    def final_retained_mean(self) -> float:
        """Retained count of the last step, or of evaluation if none ran."""
        if self.steps:
            return self.steps[-1].retained_mean
        return self.recovery.retained_mean

    def write_trace(self, path) -> Path:
        return write_csv(
            path, TRACE_HEADER, (record.row() for record in self.steps)
        )

    def summary_text(self) -> str:
        """Metrics as ``#`` comments followed by the config echo.

        The text parses back with ``load_config_text``.
        """
        r = self.recovery
        lines = [
            "# vtprune training summary",
            f"# steps_run = {len(self.steps)}",
            f"# recall = {format_float(r.recall)}",
            "# retained = "
            + format_retention(r.retained_mean, r.retained_std),
            f"# retained_mean = {format_float(r.retained_mean)}",
            f"# retained_std = {format_float(r.retained_std)}",
            f"# accuracy = {format_float(r.accuracy)}",
            f"# mse = {format_float(r.mse)}",
            f"# episodes = {r.episodes}",
        ]
        if self.steps:
            final = format_float(self.steps[-1].loss)
            lines.append(f"# final_loss = {final}")
        return "\n".join(lines) + "\n" + self.config.to_text()

    def write(self, out_dir) -> Tuple[Path, Path]:
        """Write the trace CSV and summary under ``out_dir``."""
        out = ensure_output_dir(out_dir)
        trace = self.write_trace(out / TRACE_FILE)
        summary = write_text(out / SUMMARY_FILE, self.summary_text())
        return trace, summary


class SGDMomentum:
    """
    Stochastic gradient descent with heavy-ball momentum and one step decay.

    Args:
        params: Matrices updated in place (their ``data`` is replaced)
        lr: Initial learning rate
        momentum: Velocity decay
        decay_step: Step from which the rate is multiplied by ``decay_factor``
        decay_factor: Learning-rate multiplier after ``decay_step``
    """

    def __init__(
        self,
        params: Sequence[Matrix],
        lr: float,
        momentum: float = 0.9,
        decay_step: Optional[int] = None,
        decay_factor: float = 0.1,
    ):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.decay_step = decay_step
        self.decay_factor = decay_factor
        self._velocity = [np.zeros(p.shape) for p in self.params]

    def learning_rate(self, step: int) -> float:
        if self.decay_step is not None and step >= self.decay_step:
            return self.lr * self.decay_factor
        return self.lr

    def step(self, grads: Dict[Matrix, np.ndarray], step: int) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = math.sqrt(
            sum(float(np.sum(grads[p] ** 2)) for p in self.params)
        )
        factor = min(1.0, CLIP_NORM / norm) if norm > 0 else 1.0
        lr = self.learning_rate(step)
        for param, velocity in zip(self.params, self._velocity):
            velocity *= self.momentum
            velocity += grads[param] * factor
            param.data = param.data - lr * velocity
        return norm


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule.for_training(
        cfg.steps,
        cfg.decay_fraction,
        cfg.alpha_start,
        cfg.alpha_end,
        NoiseMode(cfg.noise_mode),
    )


def _train_step(
    model: ToyModel,
    cfg: RunConfig,
    task: SyntheticTask,
    data_rng: Rng,
    noise_rng: Rng,
    alpha: float,
) -> Tuple[Matrix, List[int], Dict[Matrix, np.ndarray]]:
    ctx = GradientContext()
    ctx.watch(*model.parameters())
    losses, counts = [], []
    with ctx:
        for _ in range(cfg.batch_size):
            sample = generate_sample(cfg, data_rng, task)
            result = model.forward(sample, PruneMode.TRAIN, alpha, noise_rng)
            error = sub(result.prediction, Matrix(sample.target))
            losses.append(mean_all(square(error)))
            counts.append(result.kept_count)
        loss = mean_all(concat_rows(*losses))
    return loss, counts, ctx.backward(loss)


def train(cfg: RunConfig, progress: bool = False) -> TrainReport:
    """
    Train the toy model and pruner end to end.

    Args:
        cfg: Run configuration
        progress: Show a tqdm progress bar over steps

    Returns:
        TrainReport: Trace, recovery metrics and the trained model

    Raises:
        TrainingError: If the loss or any gradient stops being finite
    """
    root = Rng(cfg.seed)
    task = build_task(cfg, root.split("task"))
    model = ToyModel(cfg, root.split("init"))
    data_rng = root.split("train-data")
    noise_rng = root.split("selection-noise")
    schedule = _schedule(cfg)
    optimizer = SGDMomentum(
        model.parameters(),
        cfg.learning_rate,
        cfg.momentum,
        int(cfg.lr_decay_fraction * cfg.steps),
        cfg.lr_decay_factor,
    )
    logger.info(
        "training %s for %d steps (seed %d, noise %s)",
        cfg.variant,
        cfg.steps,
        cfg.seed,
        cfg.noise_mode,
    )

    records: List[StepRecord] = []
    for step in trange(
        cfg.steps, desc=cfg.variant, unit="step", disable=not progress
    ):
        alpha = alpha_at(step, schedule)
        try:
            loss, counts, grads = _train_step(
                model, cfg, task, data_rng, noise_rng, alpha
            )
        except NumericError as e:
            raise TrainingError(step, str(e)) from e
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(step, "non-finite gradient")
        optimizer.step(grads, step)

        mean, std = count_stats(counts)
        records.append(StepRecord(step, loss.item(), mean, std, alpha))
        if (step + 1) % cfg.log_every == 0:
            logger.info(
                "step %d loss %.5f retained %s alpha %.3f",
                step + 1,
                loss.item(),
                format_retention(mean, std),
                alpha,
            )

    recovery = evaluate_recovery(
        model, cfg.eval_episodes, root.split("eval"), cfg.jobs, task
    )
    logger.info("recovery: %s", recovery.describe())
    return TrainReport(cfg, records, recovery, model)


def _fan_out(
    func: Callable[[Rng], T], streams: Sequence[Rng], jobs: int
) -> List[T]:
    if jobs <= 1:
        return [func(stream) for stream in streams]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, streams))


def _episode_streams(rng: Rng, n_episodes: int) -> List[Rng]:
    return [rng.split(f"episode-{i}") for i in range(n_episodes)]


def kept_set(model: ToyModel, sample: SyntheticSample) -> np.ndarray:
    """Visual indices the model keeps for ``sample`` at inference."""
    result = model.forward(sample, PruneMode.INFER)
    if result.selection is None:
        return np.arange(sample.n_visual)
    return result.selection.kept_indices


def informative_recall(
    informative: Sequence[int], kept: Sequence[int]
) -> float:
    informative = np.asarray(informative)
    return float(np.isin(informative, kept).mean())


def _succeeded(model: ToyModel, error: np.ndarray) -> bool:
    return bool(np.max(np.abs(error)) <= model.cfg.success_tolerance)


def evaluate_recovery(
    model: ToyModel,
    n_episodes: int,
    rng: Rng,
    jobs: int = 1,
    task: Optional[SyntheticTask] = None,
) -> RecoveryMetrics:
    """
    Measure how well the pruner keeps the planted tokens.

    Episodes are independent and may run on ``jobs`` worker threads;
    each draws from its own stream so the result does not depend on
    ``jobs``.

    Args:
        model: Model to evaluate (inference mode)
        n_episodes: Number of fresh samples
        rng: Parent stream for the episodes
        jobs: Worker threads
        task: Shared vocabulary; derived from the model config when omitted

    Returns:
        RecoveryMetrics: Recall, retained count, accuracy and MSE
    """
    cfg = model.cfg
    if n_episodes < 1:
        raise ArgumentError(f"n_episodes must be >= 1, got {n_episodes}")
    task = task or default_task(cfg)

    def episode(stream: Rng):
        sample = generate_sample(cfg, stream, task)
        result = model.forward(sample, PruneMode.INFER)
        if result.selection is None:
            kept = np.arange(sample.n_visual)
        else:
            kept = result.selection.kept_indices
        error = result.prediction.data[0] - sample.target
        return (
            informative_recall(sample.informative_set, kept),
            result.kept_count,
            _succeeded(model, error),
            float(np.mean(error**2)),
        )

    outcomes = _fan_out(episode, _episode_streams(rng, n_episodes), jobs)
    recalls, counts, successes, errors = zip(*outcomes)
    mean, std = count_stats(counts)
    return RecoveryMetrics(
        recall=float(np.mean(recalls)),
        retained_mean=mean,
        retained_std=std,
        accuracy=float(np.mean(successes)),
        mse=float(np.mean(errors)),
        episodes=n_episodes,
        visual_tokens=model.n_visual,
    )


@dataclass(frozen=True)
class PairedDelta:
    """Mean of per-episode differences (manipulated minus kept)."""

    mean: float
    stderr: float

    @property
    def noise_band(self) -> float:
        return 2.0 * self.stderr

    @property
    def improves_beyond_noise(self) -> bool:
        return self.mean > self.noise_band


@dataclass(frozen=True)
class ManipulationReport:
    episodes: int
    kept_accuracy: float
    added_accuracy: float
    removed_accuracy: float
    added_success: PairedDelta
    removed_success: PairedDelta
    added_mse: PairedDelta
    removed_mse: PairedDelta


def _paired(values: np.ndarray) -> PairedDelta:
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return PairedDelta(float(values.mean()), std / math.sqrt(len(values)))


def _manipulated_sets(
    kept: np.ndarray,
    n_visual: int,
    cls_index: Optional[int],
    stream: Rng,
    extra_tokens: Optional[int],
    drop_fraction: float,
) -> Tuple[np.ndarray, np.ndarray]:
    droppable = kept[kept != cls_index] if cls_index is not None else kept
    pruned = np.setdiff1d(np.arange(n_visual), kept)
    if extra_tokens is None:
        extra_tokens = len(droppable)
    n_extra = min(extra_tokens, len(pruned))
    extra = pruned[stream.choice(len(pruned), n_extra)] if n_extra else []
    added = np.union1d(kept, extra).astype(np.int64)

    n_drop = min(
        math.ceil(drop_fraction * len(droppable)), len(droppable) - 1
    )
    removed = kept
    if n_drop > 0:
        dropped = droppable[stream.choice(len(droppable), n_drop)]
        removed = np.setdiff1d(kept, dropped)
    return added, removed


def evaluate_manipulation(
    model: ToyModel,
    n_episodes: int = MANIPULATION_EPISODES,
    rng: Optional[Rng] = None,
    extra_tokens: Optional[int] = None,
    drop_fraction: float = DEFAULT_DROP_FRACTION,
    task: Optional[SyntheticTask] = None,
    jobs: int = 1,
) -> ManipulationReport:
    """
    Compare the pruner's kept set against perturbed versions of it.

    For every episode the model runs three times on the same sample: with
    the kept set, with random pruned tokens added back, and with
    ``drop_fraction`` of the kept patch tokens removed. Differences are
    paired per episode.

    Unless ``extra_tokens`` is given, as many tokens are added as the
    pruner kept patch tokens (capped by the pruned count), doubling the
    set the decoder sees.
    """
    cfg = model.cfg
    task = task or default_task(cfg)
    rng = rng or Rng(cfg.seed).split("manipulation")
    cls_index = 0 if cfg.with_cls else None

    def episode(stream: Rng):
        sample = generate_sample(cfg, stream, task)
        kept = kept_set(model, sample)
        added, removed = _manipulated_sets(
            kept,
            sample.n_visual,
            cls_index,
            stream,
            extra_tokens,
            drop_fraction,
        )
        outcome = []
        for indices in (kept, added, removed):
            prediction = model.forward_kept(sample, indices).data[0]
            error = prediction - sample.target
            outcome.append(
                (float(_succeeded(model, error)), float(np.mean(error**2)))
            )
        return outcome

    outcomes = np.asarray(
        _fan_out(episode, _episode_streams(rng, n_episodes), jobs)
    )
    success, mse = outcomes[..., 0], outcomes[..., 1]
    report = ManipulationReport(
        episodes=n_episodes,
        kept_accuracy=float(success[:, 0].mean()),
        added_accuracy=float(success[:, 1].mean()),
        removed_accuracy=float(success[:, 2].mean()),
        added_success=_paired(success[:, 1] - success[:, 0]),
        removed_success=_paired(success[:, 2] - success[:, 0]),
        added_mse=_paired(mse[:, 1] - mse[:, 0]),
        removed_mse=_paired(mse[:, 2] - mse[:, 0]),
    )
    logger.info(
        "manipulation: kept %.3f, added %.3f, removed %.3f",
        report.kept_accuracy,
        report.added_accuracy,
        report.removed_accuracy,
    )
    return report


def compare_noise_modes(
    cfg: RunConfig,
    modes: Sequence[str] = NOISE_MODES,
    progress: bool = False,
) -> Dict[str, float]:
    """Retained count of the last training step per noise mode.

    Every mode trains from the same seed and config; only ``noise_mode``
    changes.
    """
    retained = {}
    for mode in modes:
        report = train(cfg.with_overrides({"noise_mode": mode}), progress)
        retained[mode] = report.final_retained_mean
        logger.info("noise %s retains %.2f tokens", mode, retained[mode])
    return retained
