"""Experiment configuration: one YAML file drives generation, training,
evaluation and ablation.

Every training hyperparameter carries the full-scale default; desk_scale: true
switches the schedule to the small profile. Validation is strict: unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import (
    DatasetSplit,
    SyntheticTaskConfig,
    generate_shapeworld_task,
    load_frame_directory,
    validate_benchmark,
)
from .errors import ConfigurationError
from .frame_generator import FrameGeneratorConfig
from .replay import RUN_MODES, TrainSchedule
from .world_model import WorldModelConfig


@dataclass
class AblationFlags:
    """Which parts of the method are active (mirrors the ablation table)."""

    replay: bool = True
    infer_k: bool = True
    random_k: bool = False
    adapt: bool = True

    def __post_init__(self):
        if self.random_k and self.infer_k:
            raise ConfigurationError("random_k excludes infer_k")

    @property
    def k_policy(self) -> str:
        if self.infer_k:
            return "infer"
        if self.random_k:
            return "random"
        return "oracle"

    @property
    def conditioned(self) -> bool:
        return self.infer_k or self.random_k


@dataclass
class FramesTaskSpec:
    train_dir: str
    test_dir: str
    action_filename: Optional[str] = None


@dataclass
class BenchmarkSpec:
    kind: str = "synthetic"
    resolution: int = 64
    channels: int = 1
    context_len: int = 5
    horizon: int = 10
    action_dim: int = 0
    n_train: int = 60
    n_test: int = 16
    synthetic_tasks: list[SyntheticTaskConfig] = field(default_factory=list)
    frames_tasks: list[FramesTaskSpec] = field(default_factory=list)
    task_order: Optional[list[int]] = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "frames"):
            raise ConfigurationError(f"benchmark kind must be synthetic or frames, got {self.kind!r}")
        if self.kind == "synthetic" and not self.synthetic_tasks:
            raise ConfigurationError("synthetic benchmark declares no tasks")
        if self.kind == "frames" and not self.frames_tasks:
            raise ConfigurationError("frames benchmark declares no tasks")
        K = self.num_tasks
        order = self.task_order if self.task_order is not None else list(range(1, K + 1))
        if sorted(order) != list(range(1, K + 1)):
            raise ConfigurationError(
                f"task_order {order} is not a permutation of tasks 1..{K}"
            )
        if self.kind == "synthetic":
            validate_benchmark(self.synthetic_tasks)

    @property
    def num_tasks(self) -> int:
        return len(self.synthetic_tasks) or len(self.frames_tasks)

    @property
    def order(self) -> list[int]:
        if self.task_order is not None:
            return list(self.task_order)
        return list(range(1, self.num_tasks + 1))


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path
    mode: str
    benchmark: BenchmarkSpec
    schedule: TrainSchedule
    flags: AblationFlags
    desk_scale: bool = False
    model: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ConfigurationError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if self.mode == "replay" and not self.flags.replay:
            raise ConfigurationError("mode 'replay' requires flags.replay: true")
        if self.mode in ("sequential", "joint") and self.flags.replay:
            raise ConfigurationError(f"mode {self.mode!r} requires flags.replay: false")
        if self.mode != "replay" and (self.flags.infer_k or self.flags.random_k):
            raise ConfigurationError(
                "task-label policies (infer_k / random_k) apply only to mode 'replay'"
            )

    def world_config(self) -> WorldModelConfig:
        b = self.benchmark
        kwargs = dict(
            num_tasks=b.num_tasks,
            in_channels=b.channels,
            frame_size=b.resolution,
            action_dim=b.action_dim,
            kl_weight=self.schedule.alpha,
        )
        kwargs.update(self.model)
        return WorldModelConfig(**kwargs)

    def generator_config(self) -> FrameGeneratorConfig:
        b = self.benchmark
        kwargs = dict(
            num_tasks=b.num_tasks,
            in_channels=b.channels,
            frame_size=b.resolution,
            action_dim=b.action_dim,
            kl_weight=self.schedule.beta,
        )
        kwargs.update(self.generator)
        return FrameGeneratorConfig(**kwargs)


_TOP_KEYS = {
    "seed",
    "output_dir",
    "mode",
    "desk_scale",
    "benchmark",
    "model",
    "generator",
    "schedule",
    "flags",
}
_BENCH_KEYS = {
    "kind",
    "resolution",
    "channels",
    "context_len",
    "horizon",
    "action_dim",
    "n_train",
    "n_test",
    "tasks",
    "task_order",
}
_SYN_TASK_KEYS = {
    "task_id",
    "appearance",
    "dynamics",
    "speed",
    "radius",
    "gain",
    "size",
    "n_train",
    "n_test",
}
_FRAMES_TASK_KEYS = {"train_dir", "test_dir", "action_filename"}


def _reject_unknown(given: dict, allowed: set, where: str) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    _reject_unknown(raw, _TOP_KEYS, "config")
    for key in ("seed", "output_dir", "mode", "benchmark"):
        if key not in raw:
            raise ConfigurationError(f"config is missing required key {key!r}")

    bench_raw = dict(raw["benchmark"])
    _reject_unknown(bench_raw, _BENCH_KEYS, "benchmark")
    kind = bench_raw.get("kind", "synthetic")
    tasks_raw = bench_raw.pop("tasks", None)
    if not tasks_raw:
        raise ConfigurationError("benchmark.tasks must be a non-empty list")
    common = {
        k: bench_raw[k]
        for k in ("resolution", "channels", "context_len", "horizon", "action_dim", "n_train", "n_test")
        if k in bench_raw
    }
    synthetic_tasks: list[SyntheticTaskConfig] = []
    frames_tasks: list[FramesTaskSpec] = []
    if kind == "synthetic":
        for i, t in enumerate(tasks_raw):
            _reject_unknown(t, _SYN_TASK_KEYS, f"benchmark.tasks[{i}]")
            kwargs = dict(common)
            kwargs.update(t)
            kwargs.setdefault("task_id", i + 1)
            synthetic_tasks.append(SyntheticTaskConfig(**kwargs))
    else:
        for i, t in enumerate(tasks_raw):
            _reject_unknown(t, _FRAMES_TASK_KEYS, f"benchmark.tasks[{i}]")
            frames_tasks.append(FramesTaskSpec(**t))
    bench_kwargs = {k: v for k, v in bench_raw.items() if k != "kind"}
    benchmark = BenchmarkSpec(
        kind=kind,
        synthetic_tasks=synthetic_tasks,
        frames_tasks=frames_tasks,
        **bench_kwargs,
    )

    desk_scale = bool(raw.get("desk_scale", False))
    schedule_raw = dict(raw.get("schedule", {}))
    schedule_fields = {f.name for f in dataclasses.fields(TrainSchedule)}
    _reject_unknown(schedule_raw, schedule_fields, "schedule")
    if "adam_betas" in schedule_raw:
        schedule_raw["adam_betas"] = tuple(schedule_raw["adam_betas"])
    if desk_scale:
        schedule = TrainSchedule.desk_scale(**schedule_raw)
    else:
        schedule = TrainSchedule(**schedule_raw)

    flags_raw = dict(raw.get("flags", {}))
    _reject_unknown(flags_raw, {f.name for f in dataclasses.fields(AblationFlags)}, "flags")
    mode = raw["mode"]
    if "replay" not in flags_raw:
        flags_raw["replay"] = mode == "replay"
    if mode != "replay":
        flags_raw.setdefault("infer_k", False)
        flags_raw.setdefault("adapt", False)
    flags = AblationFlags(**flags_raw)

    model_raw = dict(raw.get("model", {}))
    model_fields = {f.name for f in dataclasses.fields(WorldModelConfig)}
    _reject_unknown(model_raw, model_fields - {"num_tasks", "in_channels", "frame_size", "action_dim"}, "model")
    generator_raw = dict(raw.get("generator", {}))
    gen_fields = {f.name for f in dataclasses.fields(FrameGeneratorConfig)}
    _reject_unknown(
        generator_raw, gen_fields - {"num_tasks", "in_channels", "frame_size", "action_dim"}, "generator"
    )

    return ExperimentConfig(
        seed=int(raw["seed"]),
        output_dir=Path(raw["output_dir"]),
        mode=mode,
        benchmark=benchmark,
        schedule=schedule,
        flags=flags,
        desk_scale=desk_scale,
        model=model_raw,
        generator=generator_raw,
    )


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    with path.open() as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw)


def build_benchmark_data(
    config: ExperimentConfig,
) -> tuple[list[DatasetSplit], list[DatasetSplit]]:
    """Materialise (train_splits, test_splits) in task-id order."""
    b = config.benchmark
    train_splits, test_splits = [], []
    if b.kind == "synthetic":
        for task in b.synthetic_tasks:
            train, test = generate_shapeworld_task(task, config.seed)
            train_splits.append(train)
            test_splits.append(test)
    else:
        for i, task in enumerate(b.frames_tasks):
            action_file = task.action_filename
            train_splits.append(
                load_frame_directory(
                    task.train_dir,
                    b.context_len,
                    b.horizon,
                    action_filename=action_file,
                    task_id=i + 1,
                    role="train",
                    channels=b.channels,
                    resolution=b.resolution,
                )
            )
            test_splits.append(
                load_frame_directory(
                    task.test_dir,
                    b.context_len,
                    b.horizon,
                    action_filename=action_file,
                    task_id=i + 1,
                    role="test",
                    channels=b.channels,
                    resolution=b.resolution,
                )
            )
    return train_splits, test_splits
