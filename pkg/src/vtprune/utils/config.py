"""Configuration utilities for vtprune runs."""

import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from vtprune.utils.exceptions import ConfigError

logger = logging.getLogger(__name__)

VARIANTS = ("parameter-free", "vision-learnable", "llm-learnable", "none")
NOISE_MODES = ("linear-decay", "constant", "off")
NOISE_DISTRIBUTIONS = ("uniform", "gumbel")
ATTENTION_REDUCTIONS = ("mean", "max")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run, with its documented default."""

    # pruner
    variant: str = "parameter-free"
    noise_mode: str = "linear-decay"
    noise_dist: str = "uniform"
    alpha_start: float = 1.0
    alpha_end: float = 0.0
    decay_fraction: float = 0.75
    n_queries: int = 16
    prune_layer: int = 1
    attn_reduce: str = "mean"
    # synthetic task
    visual_tokens: int = 64
    language_tokens: int = 8
    dim: int = 32
    informative_tokens: int = 8
    noise_scale: float = 0.5
    signal_scale: float = 4.0
    vocab_size: int = 16
    action_dim: int = 2
    with_cls: bool = True
    # model and optimizer
    decoder_layers: int = 2
    batch_size: int = 32
    steps: int = 5000
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_decay_fraction: float = 0.75
    lr_decay_factor: float = 0.1
    # evaluation and output
    eval_episodes: int = 200
    success_tolerance: float = 0.15
    seed: int = 0
    jobs: int = 1
    log_every: int = 250
    out: str = "runs/vtprune"

    def __post_init__(self):
        _check_choice("variant", self.variant, VARIANTS)
        _check_choice("noise_mode", self.noise_mode, NOISE_MODES)
        _check_choice("noise_dist", self.noise_dist, NOISE_DISTRIBUTIONS)
        _check_choice("attn_reduce", self.attn_reduce, ATTENTION_REDUCTIONS)
        for name in (
            "visual_tokens",
            "language_tokens",
            "dim",
            "n_queries",
            "action_dim",
            "vocab_size",
            "batch_size",
            "decoder_layers",
            "eval_episodes",
            "jobs",
            "log_every",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must fit in 64 unsigned bits")
        if not 1 <= self.informative_tokens < self.visual_tokens:
            raise ConfigError(
                "informative_tokens", "must be in [1, visual_tokens)"
            )
        if self.vocab_size < self.informative_tokens:
            raise ConfigError("vocab_size", "must be >= informative_tokens")
        if self.vocab_size + self.action_dim > self.dim:
            raise ConfigError("vocab_size", "vocab_size + action_dim > dim")
        if self.n_queries > self.visual_tokens:
            raise ConfigError("n_queries", "must not exceed visual_tokens")
        if not 1 <= self.prune_layer <= self.decoder_layers:
            raise ConfigError("prune_layer", "must be in [1, decoder_layers]")
        if (
            self.variant == "llm-learnable"
            and self.prune_layer >= self.decoder_layers
        ):
            raise ConfigError(
                "prune_layer",
                "llm-learnable needs a layer after the pruning site",
            )

    def to_text(self) -> str:
        """Echo as key = value lines that ``load_config_text`` re-parses."""
        return "".join(
            f"{key} = {_format(value)}\n"
            for key, value in asdict(self).items()
        )

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with the given (already typed or textual) values applied."""
        return replace(self, **_coerce_all(overrides))


def _check_choice(key: str, value: str, choices) -> None:
    if value not in choices:
        raise ConfigError(key, f"'{value}' is not one of {', '.join(choices)}")


# Default configuration
DEFAULT_CONFIG: Dict[str, Any] = asdict(RunConfig())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def _coerce(key: str, value: Any) -> Any:
    if key not in DEFAULT_CONFIG:
        raise ConfigError(key, "unknown key")
    kind = type(DEFAULT_CONFIG[key])
    if not isinstance(value, str):
        if kind is float and isinstance(value, int):
            return float(value)
        if isinstance(value, kind):
            return value
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}")
    text = value.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(
            key, f"cannot read '{text}' as {kind.__name__}"
        ) from None
    return text


def _coerce_all(values: Mapping[str, Any]) -> Dict[str, Any]:
    coerced = {}
    for raw_key, value in values.items():
        key = _normalize_key(raw_key)
        coerced[key] = _coerce(key, value)
    return coerced


def parse_config_text(text: str) -> Dict[str, Any]:
    """
    Parse flat ``key = value`` lines into typed values.

    Args:
        text: Config text; ``#`` starts a comment, blank lines are ignored

    Returns:
        Dict[str, Any]: Typed values keyed by field name

    Raises:
        ConfigError: On unknown keys, malformed lines or bad values
    """
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {number} is not key = value")
        key, value = line.split("=", 1)
        values[_normalize_key(key)] = value
    return _coerce_all(values)


def load_config_text(text: str) -> RunConfig:
    return RunConfig(**parse_config_text(text))


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional file and overrides.

    Args:
        path: Optional key = value config file
        overrides: Values that win over the file (e.g. command-line flags)

    Returns:
        RunConfig: The effective configuration

    Raises:
        ConfigError: If the file is unreadable or contains bad keys/values
    """
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from e
        values.update(parse_config_text(text))
    if overrides:
        values.update(
            _coerce_all({k: v for k, v in overrides.items() if v is not None})
        )
    config = RunConfig(**values)
    logger.debug("effective config: %s", values)
    return config


def get_setting(config: RunConfig, key: str) -> Any:
    """Look up a field by (hyphen or underscore) name."""
    key = _normalize_key(key)
    if key not in DEFAULT_CONFIG:
        raise ConfigError(key, "unknown key")
    return getattr(config, key)


def field_names():
    return [f.name for f in fields(RunConfig)]
