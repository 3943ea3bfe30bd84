"""Run configuration: flat key=value text with sectioned keys.

The format is deliberately diff-friendly: one ``section.key = value`` per
line, ``#`` comments, no nesting. Unknown keys are rejected before any
training starts, and every run artifact echoes the full canonical
configuration so a run is reconstructible from its summary file alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import DEFAULT_SPLIT_PAIRS
from .harness import BASELINE_MODES, TrainConfig

SCENARIOS = ("split_mnist", "permuted_mnist", "synthetic")

# bare aliases accepted by --set for the most common overrides
SET_ALIASES = {
    "epochs": "train.epochs",
    "mode": "train.mode",
    "lr": "train.lr",
    "seed": "seeds",
}


class ConfigError(ValueError):
    """Malformed configuration text, unknown key, or invalid value."""


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parse_pairs(text: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    for chunk in text.split(","):
        bits = chunk.strip().split("-")
        if len(bits) != 2:
            raise ConfigError(f"expected pairs like 0-1,2-3, got {text!r}")
        pairs.append((int(bits[0]), int(bits[1])))
    return tuple(pairs)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


@dataclass
class RunConfig:
    """Everything a run needs: scenario, architecture, training, paths."""

    scenario: str = "synthetic"
    seeds: tuple[int, ...] = (0,)
    data_dir: str = "data/mnist"
    out_dir: str = "runs/latest"
    hidden: tuple[int, ...] = (256, 256)
    n_experts: int = 2
    k: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    permuted_tasks: int = 10
    split_pairs: tuple[tuple[int, int], ...] = DEFAULT_SPLIT_PAIRS
    synthetic_tasks: int = 2
    synthetic_per_task: int = 500
    synthetic_separation: float = 8.0
    render_figures: bool = True

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}, "
                              f"expected one of {SCENARIOS}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.n_experts < 1 or self.k < 1 or self.k > self.n_experts:
            raise ConfigError(f"bad expert counts: experts={self.n_experts} k={self.k}")
        if not self.hidden:
            raise ConfigError("need at least one hidden layer size")
        if self.permuted_tasks < 1 or self.synthetic_tasks < 1:
            raise ConfigError("task counts must be >= 1")

    def input_dim(self) -> int:
        return 2 if self.scenario == "synthetic" else 784

    def n_outputs(self) -> int:
        return 10 if self.scenario == "permuted_mnist" else 2

    def layer_sizes(self) -> list[int]:
        return [self.input_dim(), *self.hidden, self.n_outputs()]


# key -> (setter taking (draft dict, raw string), canonical formatter)
_KEYS = {
    "scenario": (lambda d, v: d.__setitem__("scenario", v.strip()),
                 lambda rc: rc.scenario),
    "seeds": (lambda d, v: d.__setitem__("seeds", _parse_int_list(v)),
              lambda rc: ",".join(str(s) for s in rc.seeds)),
    "data.dir": (lambda d, v: d.__setitem__("data_dir", v.strip()),
                 lambda rc: rc.data_dir),
    "out.dir": (lambda d, v: d.__setitem__("out_dir", v.strip()),
                lambda rc: rc.out_dir),
    "model.hidden": (lambda d, v: d.__setitem__("hidden", _parse_int_list(v)),
                     lambda rc: ",".join(str(h) for h in rc.hidden)),
    "model.experts": (lambda d, v: d.__setitem__("n_experts", int(v)),
                      lambda rc: str(rc.n_experts)),
    "model.k": (lambda d, v: d.__setitem__("k", int(v)),
                lambda rc: str(rc.k)),
    "train.mode": (lambda d, v: d["train"].__setitem__("mode", v.strip()),
                   lambda rc: rc.train.mode),
    "train.epochs": (lambda d, v: d["train"].__setitem__("epochs", int(v)),
                     lambda rc: str(rc.train.epochs)),
    "train.batch_size": (lambda d, v: d["train"].__setitem__("batch_size", int(v)),
                         lambda rc: str(rc.train.batch_size)),
    "train.lr": (lambda d, v: d["train"].__setitem__("learning_rate", float(v)),
                 lambda rc: repr(rc.train.learning_rate)),
    "train.gating_kl_weight": (
        lambda d, v: d["train"].__setitem__("gating_kl_weight", float(v)),
        lambda rc: repr(rc.train.gating_kl_weight)),
    "train.weight_kl_weight": (
        lambda d, v: d["train"].__setitem__("weight_kl_weight", float(v)),
        lambda rc: repr(rc.train.weight_kl_weight)),
    "train.entropy_weight": (
        lambda d, v: d["train"].__setitem__("entropy_weight", float(v)),
        lambda rc: repr(rc.train.entropy_weight)),
    "train.diversity_weight": (
        lambda d, v: d["train"].__setitem__("diversity_weight", float(v)),
        lambda rc: repr(rc.train.diversity_weight)),
    "train.kernel_width": (
        lambda d, v: d["train"].__setitem__("kernel_width", float(v)),
        lambda rc: repr(rc.train.kernel_width)),
    "train.entropy_sign": (
        lambda d, v: d["train"].__setitem__("entropy_sign", int(v)),
        lambda rc: str(rc.train.entropy_sign)),
    "permuted.n_tasks": (lambda d, v: d.__setitem__("permuted_tasks", int(v)),
                         lambda rc: str(rc.permuted_tasks)),
    "split.pairs": (lambda d, v: d.__setitem__("split_pairs", _parse_pairs(v)),
                    lambda rc: ",".join(f"{a}-{b}" for a, b in rc.split_pairs)),
    "synthetic.n_tasks": (lambda d, v: d.__setitem__("synthetic_tasks", int(v)),
                          lambda rc: str(rc.synthetic_tasks)),
    "synthetic.n_per_task": (
        lambda d, v: d.__setitem__("synthetic_per_task", int(v)),
        lambda rc: str(rc.synthetic_per_task)),
    "synthetic.separation": (
        lambda d, v: d.__setitem__("synthetic_separation", float(v)),
        lambda rc: repr(rc.synthetic_separation)),
    "report.figures": (lambda d, v: d.__setitem__("render_figures", _parse_bool(v)),
                       lambda rc: "true" if rc.render_figures else "false"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key=value pairs from config text; unknown keys rejected later."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = value
    return pairs


def build_run_config(pairs: dict[str, str]) -> RunConfig:
    """Validate raw pairs against the key table and construct a RunConfig."""
    draft: dict = {"train": {}}
    for key, value in pairs.items():
        canonical = SET_ALIASES.get(key, key)
        if canonical not in _KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            _KEYS[canonical][0](draft, value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {canonical}: {exc}") from None
    train_fields = draft.pop("train")
    try:
        train = TrainConfig(**train_fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        return RunConfig(train=train, **draft)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(config_path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read an optional config file, then apply ``key=value`` overrides."""
    pairs: dict[str, str] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        pairs.update(parse_config_text(path.read_text(), source=str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        pairs[key] = value
    return build_run_config(pairs)


def config_echo(rc: RunConfig) -> dict[str, str]:
    """Canonical string form of every key; parses back to an equal config."""
    return {key: fmt(rc) for key, (_, fmt) in _KEYS.items()}


def describe_modes() -> str:
    return ", ".join(BASELINE_MODES)
