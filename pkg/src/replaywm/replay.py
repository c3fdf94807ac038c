"""Predictive experience replay: action buffer, rehearsal synthesis, and the
task-sequence training protocols.

Between tasks the only rehearsal state kept is a small fraction of
low-dimensional action sequences (or bare sequence lengths when there are no
actions). At each new task, frozen snapshots of both models synthesise full
rehearsal sequences from that buffer: the frame generator produces a first
frame of each earlier task and the world model rolls the rest out.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import torch

from .data import Batch, DatasetSplit, VideoSequence, collate, sample_batch
from .errors import ConfigurationError, NumericalError, TrainingDivergedError
from .frame_generator import FrameGenerator, FrameGeneratorConfig
from .metrics import EvalMatrix, TaskScore, derive_seed, evaluate_task
from .world_model import WorldModel, WorldModelConfig

RUN_MODES = ("replay", "sequential", "joint")


@dataclass
class TrainSchedule:
    """Optimisation settings; full-scale defaults with a desk-scale profile."""

    iterations: int = 30_000
    batch_size: int = 16
    learning_rate: float = 5e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    alpha: float = 1e-4
    beta: float = 1e-4
    generator_iterations: Optional[int] = None
    replay_volume_ratio: float = 1.0 / 3.0
    action_retention: float = 0.07
    adapt_steps: int = 5
    grad_clip: Optional[float] = None
    regenerate_replay_each_step: bool = False

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("iterations, batch_size and learning_rate must be positive")
        if not 0.0 < self.replay_volume_ratio <= 1.0:
            raise ConfigurationError("replay_volume_ratio must be in (0, 1]")
        if not 0.0 < self.action_retention <= 1.0:
            raise ConfigurationError("action_retention must be in (0, 1]")

    @property
    def g_iterations(self) -> int:
        if self.generator_iterations is not None:
            return self.generator_iterations
        return self.iterations // 10

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainSchedule":
        kwargs = dict(iterations=2_000, batch_size=16, learning_rate=5e-4)
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class ActionBuffer:
    """Per-task retained action sequences; never any frames.

    Action-free tasks retain only sequence lengths (needed to size rehearsal
    rollouts), so the payload is zero bytes.
    """

    fraction: float = 0.07
    sequences: dict[int, list[torch.Tensor]] = field(default_factory=dict)
    lengths: dict[int, list[int]] = field(default_factory=dict)

    def tasks(self) -> list[int]:
        return sorted(set(self.sequences) | set(self.lengths))

    def count(self, task_id: int) -> int:
        if task_id in self.sequences:
            return len(self.sequences[task_id])
        return len(self.lengths.get(task_id, []))

    def payload_bytes(self) -> int:
        return sum(a.numel() * a.element_size() for seqs in self.sequences.values() for a in seqs)

    def sample(
        self, task_id: int, generator: torch.Generator
    ) -> tuple[Optional[torch.Tensor], int]:
        """One retained (actions, sequence length) entry, uniform with replacement."""
        if self.count(task_id) == 0:
            raise ConfigurationError(f"no retained actions for task {task_id}")
        idx = int(torch.randint(self.count(task_id), (1,), generator=generator))
        if task_id in self.sequences:
            actions = self.sequences[task_id][idx]
            return actions, actions.shape[0] + 1
        return None, self.lengths[task_id][idx]


def store_actions(
    buffer: ActionBuffer,
    task_id: int,
    split: DatasetSplit,
    fraction: Optional[float] = None,
    generator: Optional[torch.Generator] = None,
) -> ActionBuffer:
    """Retain ceil(fraction * n) action sequences of the split, without replacement.

    Returns a new buffer; the input buffer is not modified.
    """
    if split.task_id != task_id:
        raise ConfigurationError(
            f"split belongs to task {split.task_id}, not {task_id}"
        )
    fraction = buffer.fraction if fraction is None else fraction
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError("fraction must be in (0, 1]")
    n = len(split)
    keep = math.ceil(fraction * n)
    perm = torch.randperm(n, generator=generator)[:keep]
    new = ActionBuffer(
        fraction=buffer.fraction,
        sequences={k: list(v) for k, v in buffer.sequences.items()},
        lengths={k: list(v) for k, v in buffer.lengths.items()},
    )
    if split.action_dim > 0:
        new.sequences[task_id] = [
            split.sequences[int(i)].actions.detach().clone() for i in perm
        ]
    else:
        new.lengths[task_id] = [split.sequences[int(i)].n_frames for i in perm]
    return new


@dataclass
class ReplayDataset:
    """Synthesised sequences of one earlier task, detached from both models."""

    sequences: list[VideoSequence]
    task_id: int
    provenance: str = "frozen-snapshot"

    def __len__(self) -> int:
        return len(self.sequences)


def freeze_snapshot(module: torch.nn.Module) -> torch.nn.Module:
    """Deep copy with gradients disabled; later optimiser steps cannot touch it."""
    snapshot = copy.deepcopy(module)
    snapshot.eval()
    for p in snapshot.parameters():
        p.requires_grad_(False)
    return snapshot


def synthesize_replay(
    world_snapshot: WorldModel,
    generator_snapshot: FrameGenerator,
    buffer: ActionBuffer,
    task_id: int,
    count: int,
    generator: torch.Generator,
    world_label: Optional[int] = None,
    provenance: str = "frozen-snapshot",
) -> ReplayDataset:
    """Synthesise `count` rehearsal sequences of an earlier task.

    Each draw samples a buffered action sequence (with replacement), seeds the
    first frame from the frame generator, and rolls the world model out in
    prior-only mode for the remaining steps. Outputs carry no gradients.
    """
    if buffer.count(task_id) == 0:
        raise ConfigurationError(f"no retained actions for task {task_id}; cannot replay")
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    label = world_label if world_label is not None else task_id
    draws = [buffer.sample(task_id, generator) for _ in range(count)]
    sequences: list[VideoSequence] = []
    by_length: dict[int, list[Optional[torch.Tensor]]] = {}
    for actions, length in draws:
        by_length.setdefault(length, []).append(actions)
    with torch.no_grad():
        for length, action_list in sorted(by_length.items()):
            if action_list[0] is not None:
                actions = torch.stack(action_list)
                a1 = actions[:, 0]
            else:
                actions = None
                a1 = None
            first = generator_snapshot.generate_initial_frame(
                task_id, a1=a1, batch_size=len(action_list), generator=generator
            )
            preds = world_snapshot.rollout(
                first.unsqueeze(1),
                actions,
                label,
                horizon=length - 1,
                mode="test_prior",
                generator=generator,
                context_len=1,
            )
            full = torch.cat([first.unsqueeze(1), preds], dim=1).clamp(0.0, 1.0)
            for b in range(len(action_list)):
                sequences.append(
                    VideoSequence(
                        frames=full[b].detach(),
                        actions=None if actions is None else actions[b].detach(),
                        task_id=task_id,
                    )
                )
    return ReplayDataset(sequences=sequences, task_id=task_id, provenance=provenance)


def plan_replay_counts(
    n_current: int, previous_tasks: Sequence[int], ratio: float
) -> dict[int, int]:
    """Split ceil(ratio * n_current) rehearsal sequences evenly across earlier tasks."""
    if not previous_tasks:
        return {}
    total = math.ceil(ratio * n_current)
    n = len(previous_tasks)
    base, rem = divmod(total, n)
    return {
        task: base + (1 if i < rem else 0)
        for i, task in enumerate(sorted(previous_tasks))
    }


def mixed_elbo_loss(
    model: WorldModel,
    batch: Batch,
    generator: torch.Generator,
    *,
    context_len: int,
    label_override: Optional[int] = None,
) -> tuple[torch.Tensor, dict]:
    """Sum of per-task sequence objectives over a batch that may mix tasks.

    Subsets are processed in ascending task order, so the total equals the sum
    of per-task losses computed separately with the same rng stream.
    """
    if label_override is not None:
        groups = [(label_override, torch.arange(len(batch)))]
    else:
        ids = batch.task_ids
        groups = [(int(k), torch.nonzero(ids == k).flatten()) for k in torch.unique(ids)]
    total = None
    recon = 0.0
    kl = 0.0
    for k, idx in groups:
        frames = batch.frames[idx]
        actions = batch.actions[idx] if batch.actions is not None else None
        loss, diag = model.elbo_loss(frames, actions, k, generator, context_len=context_len)
        total = loss if total is None else total + loss
        recon += diag["recon"]
        kl += diag["kl"]
    return total, {"recon": recon, "kl": kl, "n_groups": len(groups)}


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _check_gradients(model: torch.nn.Module, iteration: int) -> None:
    for p in model.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingDivergedError(iteration, "grad")


def _world_steps(
    world: WorldModel,
    pool: list[VideoSequence],
    schedule: TrainSchedule,
    generator: torch.Generator,
    *,
    iterations: int,
    context_len: int,
    task_for_log: int,
    label_override: Optional[int] = None,
    fresh_replay: Optional[Callable[[int, int, torch.Generator], list[VideoSequence]]] = None,
    n_real: Optional[int] = None,
) -> list[dict]:
    """Optimise the world model on uniform batches from a sequence pool."""
    optimizer = torch.optim.Adam(
        world.parameters(), lr=schedule.learning_rate, betas=schedule.adam_betas
    )
    logs = []
    pool_size = len(pool) if fresh_replay is None else n_real
    for it in range(iterations):
        if fresh_replay is None:
            idx = torch.randint(len(pool), (schedule.batch_size,), generator=generator)
            batch = collate([pool[int(i)] for i in idx])
        else:
            batch = fresh_replay(it, schedule.batch_size, generator)
        optimizer.zero_grad()
        try:
            loss, diag = mixed_elbo_loss(
                world, batch, generator, context_len=context_len, label_override=label_override
            )
        except NumericalError as exc:
            raise TrainingDivergedError(it, exc.term) from exc
        loss.backward()
        _check_gradients(world, it)
        if schedule.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(world.parameters(), schedule.grad_clip)
        optimizer.step()
        logs.append(
            {
                "iteration": it,
                "task": task_for_log,
                "loss": float(loss.detach()),
                "recon": diag["recon"],
                "kl": diag["kl"],
            }
        )
    return logs


def _generator_steps(
    frame_generator: FrameGenerator,
    split: DatasetSplit,
    replay_sets: Sequence[ReplayDataset],
    schedule: TrainSchedule,
    generator: torch.Generator,
    *,
    task_label: int,
) -> list[dict]:
    """Optimise the frame generator on first frames: current task plus one
    block per replayed task."""
    optimizer = torch.optim.Adam(
        frame_generator.parameters(), lr=schedule.learning_rate, betas=schedule.adam_betas
    )
    logs = []
    for it in range(schedule.g_iterations):
        batch = sample_batch(split, schedule.batch_size, generator)
        real_first = batch.frames[:, 0]
        real_a1 = batch.actions[:, 0] if batch.actions is not None else None
        replayed = []
        for rset in replay_sets:
            ridx = torch.randint(len(rset), (schedule.batch_size,), generator=generator)
            picked = [rset.sequences[int(i)] for i in ridx]
            r_frames = torch.stack([s.frames[0] for s in picked])
            r_a1 = (
                torch.stack([s.actions[0] for s in picked])
                if picked[0].actions is not None
                else None
            )
            replayed.append((rset.task_id, r_frames, r_a1))
        optimizer.zero_grad()
        try:
            loss, diag = frame_generator.generator_loss(
                real_first, real_a1, task_label, replayed, generator
            )
        except NumericalError as exc:
            raise TrainingDivergedError(it, exc.term) from exc
        loss.backward()
        _check_gradients(frame_generator, it)
        if schedule.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(frame_generator.parameters(), schedule.grad_clip)
        optimizer.step()
        logs.append(
            {
                "iteration": it,
                "task": task_label,
                "loss": float(loss.detach()),
                "recon": float("nan"),
                "kl": float("nan"),
            }
        )
    return logs


def train_first_task(
    world: WorldModel,
    frame_generator: FrameGenerator,
    split: DatasetSplit,
    schedule: TrainSchedule,
    generator: torch.Generator,
    *,
    context_len: int,
    label_override: Optional[int] = None,
    train_generator: bool = True,
) -> tuple[WorldModel, FrameGenerator, dict]:
    """First training period: no rehearsal, plain sequence objective then the
    frame-generator objective on the task's first frames."""
    label = label_override if label_override is not None else split.task_id
    world_logs = _world_steps(
        world,
        split.sequences,
        schedule,
        generator,
        iterations=schedule.iterations,
        context_len=context_len,
        task_for_log=split.task_id,
        label_override=label_override,
    )
    gen_logs: list[dict] = []
    if train_generator:
        gen_logs = _generator_steps(
            frame_generator, split, [], schedule, generator, task_label=split.task_id
        )
    logs = {"world_model": world_logs, "generator": gen_logs, "meta": {"replay_counts": {}}}
    return world, frame_generator, logs


def train_task(
    world: WorldModel,
    frame_generator: FrameGenerator,
    split: DatasetSplit,
    buffer: ActionBuffer,
    schedule: TrainSchedule,
    generator: torch.Generator,
    *,
    context_len: int,
    label_override: Optional[int] = None,
) -> tuple[WorldModel, FrameGenerator, dict]:
    """One later training period with predictive experience replay.

    Snapshots both models, synthesises about replay_volume_ratio * |split|
    rehearsal sequences split evenly across all tasks in the buffer, then
    trains the world model on mixed real/rehearsal batches and the frame
    generator on real plus rehearsal first frames.
    """
    previous = [t for t in buffer.tasks() if t != split.task_id]
    if not previous:
        raise ConfigurationError(
            "train_task needs retained actions for at least one earlier task; "
            "use train_first_task for the first period"
        )
    world_snapshot = freeze_snapshot(world)
    generator_snapshot = freeze_snapshot(frame_generator)
    counts = plan_replay_counts(len(split), previous, schedule.replay_volume_ratio)
    provenance = f"frozen-before-task-{split.task_id}"
    replay_sets = [
        synthesize_replay(
            world_snapshot,
            generator_snapshot,
            buffer,
            task,
            counts[task],
            generator,
            world_label=label_override,
            provenance=provenance,
        )
        for task in sorted(counts)
    ]
    replay_pool = [s for rset in replay_sets for s in rset.sequences]
    pool = list(split.sequences) + replay_pool

    fresh_replay = None
    if schedule.regenerate_replay_each_step:
        n_real = len(split)
        virtual = [(None, 0)] * n_real + [
            (rset.task_id, 0) for rset in replay_sets for _ in rset.sequences
        ]

        def fresh_replay(it, batch_size, gen):
            idx = torch.randint(len(virtual), (batch_size,), generator=gen)
            real_picks = [split.sequences[int(i)] for i in idx if int(i) < n_real]
            needed: dict[int, int] = {}
            for i in idx:
                if int(i) >= n_real:
                    t = virtual[int(i)][0]
                    needed[t] = needed.get(t, 0) + 1
            picks = list(real_picks)
            for t in sorted(needed):
                fresh = synthesize_replay(
                    world_snapshot,
                    generator_snapshot,
                    buffer,
                    t,
                    needed[t],
                    gen,
                    world_label=label_override,
                    provenance=provenance,
                )
                picks.extend(fresh.sequences)
            return collate(picks)

    world_logs = _world_steps(
        world,
        pool,
        schedule,
        generator,
        iterations=schedule.iterations,
        context_len=context_len,
        task_for_log=split.task_id,
        label_override=label_override,
        fresh_replay=fresh_replay,
        n_real=len(split),
    )
    gen_logs = _generator_steps(
        frame_generator, split, replay_sets, schedule, generator, task_label=split.task_id
    )
    logs = {
        "world_model": world_logs,
        "generator": gen_logs,
        "meta": {
            "replay_counts": counts,
            "replay_total": sum(counts.values()),
            "provenance": provenance,
        },
    }
    return world, frame_generator, logs


# ---------------------------------------------------------------------------
# Full task sequences
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    world: WorldModel
    frame_generator: FrameGenerator
    matrix: EvalMatrix
    checkpoints: list[dict]
    logs: list[dict]
    buffer: ActionBuffer


def run_sequence(
    train_splits: Sequence[DatasetSplit],
    test_splits: Sequence[DatasetSplit],
    schedule: TrainSchedule,
    mode: str,
    *,
    world_config: WorldModelConfig,
    generator_config: FrameGeneratorConfig,
    seed: int,
    context_len: int,
    task_order: Optional[Sequence[int]] = None,
    conditioned: bool = True,
    eval_policy: str = "infer",
    eval_adapt: bool = False,
    on_period_end: Optional[Callable[[dict], None]] = None,
    resume: Optional[dict] = None,
) -> RunResult:
    """Train across the task sequence under one of three protocols.

    "replay": one period per task with predictive experience replay; task
    conditioning unless conditioned=False. "sequential": the same model
    trained task by task with no replay and a single shared embedding row.
    "joint": one period over the shuffled union of all tasks (K times the
    per-task iteration budget). After every period all tasks are evaluated
    and a row is appended to the matrix.
    """
    if mode not in RUN_MODES:
        raise ConfigurationError(f"mode must be one of {RUN_MODES}, got {mode!r}")
    by_id = {s.task_id: s for s in train_splits}
    test_by_id = {s.task_id: s for s in test_splits}
    K = len(train_splits)
    if sorted(by_id) != list(range(1, K + 1)) or sorted(test_by_id) != list(range(1, K + 1)):
        raise ConfigurationError("train and test splits must cover task ids 1..K")
    order = list(task_order) if task_order is not None else list(range(1, K + 1))
    if sorted(order) != list(range(1, K + 1)):
        raise ConfigurationError(f"task_order {order} is not a permutation of 1..{K}")
    horizon = by_id[1].seq_len - context_len
    if horizon < 1:
        raise ConfigurationError("context_len leaves no prediction horizon")

    base_model = mode in ("sequential", "joint") or not conditioned
    label_override = 1 if base_model else None

    torch.manual_seed(derive_seed(seed, "init"))
    world = WorldModel(world_config)
    frame_generator = FrameGenerator(generator_config)
    buffer = ActionBuffer(fraction=schedule.action_retention)
    matrix = EvalMatrix(K)
    checkpoints: list[dict] = []
    all_logs: list[dict] = []
    periods = [order] if mode == "joint" else [[t] for t in order]
    start_period = 0

    if resume is not None:
        world.load_state_dict(resume["world_state"])
        frame_generator.load_state_dict(resume["generator_state"])
        buffer = _buffer_from_payload(resume["buffer"], schedule.action_retention)
        matrix = EvalMatrix.from_payload(resume["matrix"])
        start_period = resume["period"] + 1
        if resume["mode"] != mode:
            raise ConfigurationError(
                f"checkpoint was written by mode {resume['mode']!r}, not {mode!r}"
            )

    for p in range(start_period, len(periods)):
        tasks_now = periods[p]
        gen_train = torch.Generator().manual_seed(derive_seed(seed, "train", p))
        if mode == "joint":
            pool = [s for t in order for s in by_id[t].sequences]
            joint_schedule = replace(schedule, iterations=schedule.iterations * K)
            logs = {
                "world_model": _world_steps(
                    world,
                    pool,
                    joint_schedule,
                    gen_train,
                    iterations=joint_schedule.iterations,
                    context_len=context_len,
                    task_for_log=0,
                    label_override=label_override,
                ),
                "generator": [],
                "meta": {"replay_counts": {}},
            }
        else:
            task = tasks_now[0]
            split = by_id[task]
            use_replay = mode == "replay" and p > 0
            if use_replay:
                _, _, logs = train_task(
                    world,
                    frame_generator,
                    split,
                    buffer,
                    schedule,
                    gen_train,
                    context_len=context_len,
                    label_override=label_override,
                )
            else:
                _, _, logs = train_first_task(
                    world,
                    frame_generator,
                    split,
                    schedule,
                    gen_train,
                    context_len=context_len,
                    label_override=label_override,
                    train_generator=(mode == "replay"),
                )
            if mode == "replay":
                gen_buffer = torch.Generator().manual_seed(derive_seed(seed, "buffer", p))
                buffer = store_actions(
                    buffer, task, split, schedule.action_retention, gen_buffer
                )
        all_logs.append(logs)

        gen_eval = torch.Generator().manual_seed(derive_seed(seed, "eval", p))
        row = {}
        for t in range(1, K + 1):
            result = evaluate_task(
                world,
                test_by_id[t],
                eval_policy if not base_model else "oracle",
                eval_adapt and not base_model,
                gen_eval,
                context_len=context_len,
                horizon=horizon,
                label_override=label_override,
                adapt_steps=schedule.adapt_steps,
                adapt_lr=schedule.learning_rate,
            )
            row[t] = TaskScore(result.psnr, result.ssim, result.accuracy)
        matrix.append_row(row)

        payload = {
            "period": p,
            "mode": mode,
            "tasks": tasks_now,
            "world_state": copy.deepcopy(world.state_dict()),
            "generator_state": copy.deepcopy(frame_generator.state_dict()),
            "buffer": _buffer_payload(buffer),
            "matrix": matrix.to_payload(),
        }
        checkpoints.append(payload)
        if on_period_end is not None:
            on_period_end(payload)

    return RunResult(
        world=world,
        frame_generator=frame_generator,
        matrix=matrix,
        checkpoints=checkpoints,
        logs=all_logs,
        buffer=buffer,
    )


def _buffer_payload(buffer: ActionBuffer) -> dict:
    return {
        "fraction": buffer.fraction,
        "sequences": {k: [a.clone() for a in v] for k, v in buffer.sequences.items()},
        "lengths": {k: list(v) for k, v in buffer.lengths.items()},
    }


def _buffer_from_payload(payload: dict, fraction: float) -> ActionBuffer:
    return ActionBuffer(
        fraction=payload.get("fraction", fraction),
        sequences={int(k): list(v) for k, v in payload["sequences"].items()},
        lengths={int(k): list(v) for k, v in payload["lengths"].items()},
    )
