"""Run configuration files and named presets.

A run config is one JSON object::

    {"model": {...}, "train": {...}, "strategy": {"strategy": "ilr", "map": [2,1,1,1]},
     "data": {"paths": ["corpus.txt"], "test_fraction": 0.1},
     "output_dir": "runs/demo", "seed": 0,
     "sweep": {"strategies": [...], "seeds": [0, 1, 2], "pos_modes": ["rope"]}}

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ilr.model import DESK_SMALL, PAPER_LARGE, PAPER_SMALL, TINY, ModelConfig, PosMode
from ilr.recurrence import Baseline, Block, IntraLayer, Strategy, strategy_from_dict, strategy_to_dict, validate
from ilr.train import DESK_SMALL_TRAIN, PAPER_LARGE_TRAIN, PAPER_SMALL_TRAIN, TrainConfig


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    paths: tuple[str, ...] = ()
    test_fraction: float = 0.1
    cache: str | None = None
    # "stdlib" or "synthetic": generated text used when no paths are given
    builtin: str | None = None
    builtin_bytes: int = 1_200_000

    def __post_init__(self):
        if self.builtin not in (None, "stdlib", "synthetic"):
            raise ConfigError(f"data.builtin must be 'stdlib' or 'synthetic', got {self.builtin!r}")

    def to_dict(self) -> dict:
        return {"paths": list(self.paths), "test_fraction": self.test_fraction, "cache": self.cache,
                "builtin": self.builtin, "builtin_bytes": self.builtin_bytes}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _check_keys(d, {f.name for f in fields(cls)}, "data")
        d = dict(d)
        d["paths"] = tuple(d.get("paths", ()))
        return cls(**d)


@dataclass(frozen=True)
class SweepConfig:
    strategies: tuple[Strategy, ...] = ()
    seeds: tuple[int, ...] = (0,)
    pos_modes: tuple[PosMode, ...] = ()

    def to_dict(self) -> dict:
        return {"strategies": [strategy_to_dict(s) for s in self.strategies],
                "seeds": list(self.seeds), "pos_modes": [m.value for m in self.pos_modes]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        _check_keys(d, {"strategies", "seeds", "pos_modes"}, "sweep")
        return cls(
            strategies=tuple(strategy_from_dict(s) for s in d.get("strategies", [])),
            seeds=tuple(int(s) for s in d.get("seeds", [0])),
            pos_modes=tuple(PosMode(m) for m in d.get("pos_modes", [])),
        )


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    strategy: Strategy = field(default_factory=Baseline)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        try:
            validate(self.strategy, self.model)
            for s in self.sweep.strategies:
                validate(s, self.model)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.train.seq_len > self.model.max_seq_len:
            raise ConfigError(f"train.seq_len {self.train.seq_len} exceeds model.max_seq_len {self.model.max_seq_len}")
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "strategy": strategy_to_dict(self.strategy),
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "sweep": self.sweep.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, {"model", "train", "strategy", "data", "output_dir", "seed", "sweep"}, "run config")
        if "model" not in d:
            raise ConfigError("run config needs a 'model' section")
        try:
            return cls(
                model=ModelConfig.from_dict(d["model"]),
                train=TrainConfig.from_dict(d.get("train", {})),
                strategy=strategy_from_dict(d.get("strategy", {"strategy": "baseline"})),
                data=DataConfig.from_dict(d.get("data", {})),
                output_dir=str(d.get("output_dir", "runs/default")),
                seed=int(d.get("seed", 0)),
                sweep=SweepConfig.from_dict(d.get("sweep", {})),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


_SMALL_GRID = (
    Baseline(), Block(2),
    IntraLayer([2, 1, 1, 1]), IntraLayer([1, 2, 1, 1]), IntraLayer([1, 1, 2, 1]), IntraLayer([1, 1, 1, 2]),
    IntraLayer([1, 1, 2, 4]), IntraLayer([1, 2, 2, 3]), IntraLayer([2, 2, 2, 2]), IntraLayer([3, 2, 2, 1]),
    IntraLayer([4, 2, 1, 1]),
)

PRESETS = {
    "paper-small": lambda: RunConfig(
        model=PAPER_SMALL, train=PAPER_SMALL_TRAIN, output_dir="runs/paper-small",
        sweep=SweepConfig(strategies=_SMALL_GRID, seeds=(0,), pos_modes=tuple(PosMode))),
    "paper-large": lambda: RunConfig(
        model=PAPER_LARGE, train=PAPER_LARGE_TRAIN, output_dir="runs/paper-large",
        strategy=IntraLayer([1, 2] + [1] * 6),
        sweep=SweepConfig(strategies=(Baseline(), IntraLayer([1, 2] + [1] * 6)), seeds=(0,))),
    "desk-small": lambda: RunConfig(
        model=DESK_SMALL, train=DESK_SMALL_TRAIN, output_dir="runs/desk-small",
        data=DataConfig(builtin="stdlib", builtin_bytes=1_200_000),
        sweep=SweepConfig(strategies=(Baseline(), IntraLayer([2, 1, 1, 1]), IntraLayer([1, 1, 1, 2])),
                          seeds=(0, 1, 2))),
    "tiny": lambda: RunConfig(
        model=replace(TINY, vocab_size=257, max_seq_len=32),
        train=TrainConfig(total_steps=20, batch_size=4, seq_len=32, dtype="float64"),
        strategy=IntraLayer([2, 1]), output_dir="runs/tiny",
        data=DataConfig(builtin="synthetic", builtin_bytes=20_000),
        sweep=SweepConfig(strategies=(Baseline(), IntraLayer([2, 1])), seeds=(0,))),
}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_run_config(source: str) -> RunConfig:
    """Read a JSON config file, or build a preset when ``source`` names one."""
    path = Path(source)
    if not path.is_file():
        if source in PRESETS:
            return preset(source)
        raise ConfigError(f"config file not found: {source}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw)
