"""ShapeWorld-CL synthetic benchmark and frame-directory ingestion.

A benchmark is a list of tasks, each pairing one shape appearance with one
motion rule, so that consecutive tasks shift the frame distribution, the
future-given-past dynamics, and the future-frame distribution all at once.
Generation is a pure function of (config, seed, sequence index).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, IngestionError

APPEARANCES = ("square", "disc", "triangle", "cross", "ring", "bar")
DYNAMICS = (
    "bounce_horizontal",
    "bounce_vertical",
    "diagonal",
    "circular",
    "expand_contract",
    "action_gain",
)

# Per-appearance RGB tint used when channels=3.
_COLORS = {
    "square": (1.0, 0.35, 0.35),
    "disc": (0.35, 1.0, 0.35),
    "triangle": (0.4, 0.55, 1.0),
    "cross": (1.0, 1.0, 0.4),
    "ring": (1.0, 0.5, 1.0),
    "bar": (0.45, 1.0, 1.0),
}


@dataclass
class VideoSequence:
    """Ordered frames plus an optional aligned action sequence.

    frames:  [L, C, H, W] float tensor with values in [0, 1], L = T + H.
    actions: [L - 1, d_a] float tensor, or None for action-free data.
    task_id: 1-based task identity (training metadata only).
    """

    frames: torch.Tensor
    actions: Optional[torch.Tensor]
    task_id: int

    def __post_init__(self):
        if self.frames.dim() != 4:
            raise ConfigurationError(
                f"frames must be [L, C, H, W], got shape {tuple(self.frames.shape)}"
            )
        if self.frames.shape[0] < 3:
            raise ConfigurationError(
                "a sequence needs at least 3 frames (context >= 2, horizon >= 1)"
            )
        lo = float(self.frames.min())
        hi = float(self.frames.max())
        if not (0.0 <= lo and hi <= 1.0):
            raise ConfigurationError(f"frame values must lie in [0, 1], got [{lo}, {hi}]")
        if self.actions is not None:
            if self.actions.dim() != 2:
                raise ConfigurationError("actions must be [L - 1, d_a]")
            if self.actions.shape[0] != self.frames.shape[0] - 1:
                raise ConfigurationError(
                    f"got {self.actions.shape[0]} actions for {self.frames.shape[0]} frames; "
                    "expected exactly one fewer action than frames"
                )
        if self.task_id < 1:
            raise ConfigurationError("task_id must be >= 1")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def action_dim(self) -> int:
        return 0 if self.actions is None else self.actions.shape[1]


@dataclass
class SyntheticTaskConfig:
    """One synthetic task: an appearance, a motion rule, and split sizes.

    speed is in px/frame, radius in px (orbit radius for circular motion,
    maximum size for expand_contract), gain scales action displacement,
    size is the shape half-extent in px.
    """

    task_id: int
    appearance: str
    dynamics: str
    speed: float = 2.0
    radius: float = 9.0
    gain: float = 2.0
    size: float = 7.0
    action_dim: int = 0
    resolution: int = 64
    channels: int = 1
    context_len: int = 5
    horizon: int = 10
    n_train: int = 60
    n_test: int = 16

    def __post_init__(self):
        if self.appearance not in APPEARANCES:
            raise ConfigurationError(
                f"unknown appearance {self.appearance!r}; choose from {APPEARANCES}"
            )
        if self.dynamics not in DYNAMICS:
            raise ConfigurationError(
                f"unknown dynamics {self.dynamics!r}; choose from {DYNAMICS}"
            )
        if self.dynamics == "action_gain" and self.action_dim < 2:
            raise ConfigurationError("action_gain dynamics requires action_dim >= 2")
        if self.context_len < 2:
            raise ConfigurationError("context_len must be >= 2")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("n_train and n_test must be positive")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 (grayscale) or 3 (RGB)")
        if self.resolution < 16:
            raise ConfigurationError("resolution must be >= 16")
        if self.task_id < 1:
            raise ConfigurationError("task_id must be >= 1")
        if min(self.speed, self.radius, self.gain, self.size) <= 0:
            raise ConfigurationError("speed, radius, gain and size must be positive")

    @property
    def seq_len(self) -> int:
        return self.context_len + self.horizon

    def dynamics_signature(self) -> tuple:
        return (self.dynamics, self.speed, self.radius, self.gain)


def validate_benchmark(tasks: Sequence[SyntheticTaskConfig]) -> None:
    """Check that every task pair differs in both appearance and dynamics."""
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate task ids in benchmark: {ids}")
    for i, a in enumerate(tasks):
        for b in tasks[i + 1 :]:
            if a.appearance == b.appearance:
                raise ConfigurationError(
                    f"tasks {a.task_id} and {b.task_id} share appearance "
                    f"{a.appearance!r}; tasks must differ in both appearance and dynamics"
                )
            if a.dynamics_signature() == b.dynamics_signature():
                raise ConfigurationError(
                    f"tasks {a.task_id} and {b.task_id} share dynamics "
                    f"{a.dynamics_signature()}; tasks must differ in both appearance and dynamics"
                )
            if (a.resolution, a.channels, a.seq_len, a.action_dim) != (
                b.resolution,
                b.channels,
                b.seq_len,
                b.action_dim,
            ):
                raise ConfigurationError(
                    "all tasks in one benchmark must share resolution, channels, "
                    "sequence length and action dimensionality"
                )


def default_benchmark(
    num_tasks: int = 3,
    action_conditioned: bool = False,
    resolution: int = 64,
    n_train: int = 60,
    n_test: int = 16,
    **overrides,
) -> list[SyntheticTaskConfig]:
    """Benchmark defaults: 5+10 frames action-free, 2+10 action-conditioned."""
    if action_conditioned:
        base = dict(
            dynamics="action_gain",
            action_dim=2,
            context_len=2,
            horizon=10,
        )
        per_task = [
            dict(appearance="square", gain=1.5),
            dict(appearance="disc", gain=2.5),
            dict(appearance="triangle", gain=3.5),
            dict(appearance="cross", gain=1.0),
            dict(appearance="ring", gain=3.0),
            dict(appearance="bar", gain=2.0),
        ]
    else:
        base = dict(context_len=5, horizon=10)
        per_task = [
            dict(appearance="square", dynamics="bounce_horizontal", speed=2.0),
            dict(appearance="disc", dynamics="bounce_vertical", speed=3.0),
            dict(appearance="triangle", dynamics="diagonal", speed=2.0),
            dict(appearance="cross", dynamics="circular", speed=3.0),
            dict(appearance="ring", dynamics="expand_contract", speed=1.0),
        ]
    if num_tasks > len(per_task):
        raise ConfigurationError(
            f"default benchmark supports at most {len(per_task)} tasks "
            f"({'action-conditioned' if action_conditioned else 'action-free'})"
        )
    tasks = []
    for i in range(num_tasks):
        kwargs = dict(base)
        kwargs.update(per_task[i])
        kwargs.update(overrides)
        tasks.append(
            SyntheticTaskConfig(
                task_id=i + 1,
                resolution=resolution,
                n_train=n_train,
                n_test=n_test,
                **kwargs,
            )
        )
    validate_benchmark(tasks)
    return tasks


@dataclass
class DatasetSplit:
    """All sequences of one task for one role (train or test)."""

    sequences: list[VideoSequence]
    task_id: int
    role: str

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ConfigurationError(f"role must be 'train' or 'test', got {self.role!r}")
        shapes = {tuple(s.frames.shape) for s in self.sequences}
        dims = {s.action_dim for s in self.sequences}
        tids = {s.task_id for s in self.sequences}
        if len(shapes) > 1 or len(dims) > 1:
            raise ConfigurationError("all sequences in a split must share shape and action dim")
        if tids and tids != {self.task_id}:
            raise ConfigurationError(
                f"split task_id {self.task_id} does not match sequence task ids {tids}"
            )

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def seq_len(self) -> int:
        return self.sequences[0].n_frames

    @property
    def action_dim(self) -> int:
        return self.sequences[0].action_dim


@dataclass
class Batch:
    """Stacked sequences: frames [B, L, C, H, W], actions [B, L-1, d_a] or None."""

    frames: torch.Tensor
    actions: Optional[torch.Tensor]
    task_ids: torch.Tensor

    @property
    def task_id(self) -> int:
        ids = torch.unique(self.task_ids)
        if len(ids) != 1:
            raise ConfigurationError("batch mixes several tasks; use task_ids")
        return int(ids.item())

    def __len__(self) -> int:
        return self.frames.shape[0]


def collate(sequences: Sequence[VideoSequence]) -> Batch:
    """Stack sequences of identical shape into one batch."""
    if not sequences:
        raise ConfigurationError("cannot collate an empty sequence list")
    frames = torch.stack([s.frames for s in sequences])
    if sequences[0].actions is not None:
        actions = torch.stack([s.actions for s in sequences])
    else:
        actions = None
    task_ids = torch.tensor([s.task_id for s in sequences], dtype=torch.long)
    return Batch(frames=frames, actions=actions, task_ids=task_ids)


def sample_batch(split: DatasetSplit, batch_size: int, generator: torch.Generator) -> Batch:
    """Uniform sampling with replacement from one split."""
    if len(split) == 0:
        raise ConfigurationError(f"cannot sample from empty split (task {split.task_id})")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    idx = torch.randint(len(split), (batch_size,), generator=generator)
    return collate([split.sequences[int(i)] for i in idx])


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _pixel_grid(resolution: int):
    coords = np.arange(resolution, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return yy, xx


def render_shape(
    appearance: str, cx: float, cy: float, size: float, resolution: int
) -> np.ndarray:
    """Draw one shape as a [res, res] float image in [0, 1] with a ~1px soft edge."""
    yy, xx = _pixel_grid(resolution)
    dx = xx - cx
    dy = yy - cy
    if appearance == "square":
        d = np.maximum(np.abs(dx), np.abs(dy)) - size
    elif appearance == "disc":
        d = np.hypot(dx, dy) - size
    elif appearance == "triangle":
        # Equilateral triangle pointing up (negative image-y), as max of
        # signed half-plane distances (exact SDF inside a convex polygon).
        verts = np.array(
            [
                (0.0, -size),
                (0.866 * size, 0.5 * size),
                (-0.866 * size, 0.5 * size),
            ]
        )
        d = np.full_like(dx, -np.inf)
        for i in range(3):
            p0 = verts[i]
            p1 = verts[(i + 1) % 3]
            edge = p1 - p0
            normal = np.array([edge[1], -edge[0]])
            normal /= np.hypot(*normal)
            # Flip so the centroid (origin) is inside (negative distance).
            if normal @ (-p0) > 0:
                normal = -normal
            d = np.maximum(d, (dx - p0[0]) * normal[0] + (dy - p0[1]) * normal[1])
    elif appearance == "cross":
        arm = 0.35 * size
        bar_h = np.maximum(np.abs(dx) - size, np.abs(dy) - arm)
        bar_v = np.maximum(np.abs(dx) - arm, np.abs(dy) - size)
        d = np.minimum(bar_h, bar_v)
    elif appearance == "ring":
        r = np.hypot(dx, dy)
        d = np.abs(r - 0.72 * size) - 0.28 * size
    elif appearance == "bar":
        d = np.maximum(np.abs(dx) - size, np.abs(dy) - 0.3 * size)
    else:
        raise ConfigurationError(f"unknown appearance {appearance!r}")
    return np.clip(0.5 - d, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def simulate_dynamics(
    config: SyntheticTaskConfig,
    length: int,
    rng: Optional[np.random.Generator] = None,
    start: Optional[tuple[float, float]] = None,
    actions: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Roll the task's motion rule for `length` frames.

    Returns (positions [length, 2] as (x, y), sizes [length], actions or None).
    With `start` given, the initial position is pinned and free directions
    default to positive, which lets tests compare displacement fields of two
    tasks from identical initial states. The object never leaves the frame:
    bouncing rules reflect, the others clamp or are constructed to fit.
    """
    res = config.resolution
    size = config.size
    margin = size + 1.0
    lo, hi = margin, res - 1.0 - margin
    if hi <= lo:
        raise ConfigurationError(
            f"object of size {size} does not fit a {res}x{res} frame"
        )
    if rng is None and (start is None or config.dynamics == "action_gain" and actions is None):
        raise ConfigurationError("either rng or explicit start/actions must be provided")

    def uniform(a, b):
        return float(rng.uniform(a, b))

    positions = np.zeros((length, 2), dtype=np.float64)
    sizes = np.full(length, size, dtype=np.float64)
    out_actions: Optional[np.ndarray] = None
    dyn = config.dynamics

    if dyn in ("bounce_horizontal", "bounce_vertical", "diagonal"):
        if start is not None:
            x, y = float(start[0]), float(start[1])
            sx = sy = 1.0
        else:
            x, y = uniform(lo, hi), uniform(lo, hi)
            sx = float(rng.choice((-1.0, 1.0)))
            sy = float(rng.choice((-1.0, 1.0)))
        vx = config.speed * sx if dyn != "bounce_vertical" else 0.0
        vy = config.speed * sy if dyn != "bounce_horizontal" else 0.0
        for t in range(length):
            positions[t] = (x, y)
            x, vx = _reflect(x + vx, vx, lo, hi)
            y, vy = _reflect(y + vy, vy, lo, hi)
    elif dyn == "circular":
        orbit = config.radius
        box_lo, box_hi = lo + orbit, hi - orbit
        if box_hi <= box_lo:
            raise ConfigurationError(
                f"orbit radius {orbit} with object size {size} does not fit the frame"
            )
        if start is not None:
            theta = 0.0
            centre = (float(start[0]) - orbit, float(start[1]))
            direction = 1.0
        else:
            centre = (uniform(box_lo, box_hi), uniform(box_lo, box_hi))
            theta = uniform(0.0, 2.0 * math.pi)
            direction = float(rng.choice((-1.0, 1.0)))
        step = config.speed / orbit
        for t in range(length):
            positions[t] = (
                centre[0] + orbit * math.cos(theta),
                centre[1] + orbit * math.sin(theta),
            )
            theta += direction * step
    elif dyn == "expand_contract":
        s_min, s_max = 0.4 * config.radius, config.radius
        big_margin = s_max + 1.0
        if res - 1.0 - big_margin <= big_margin:
            raise ConfigurationError("expand_contract radius does not fit the frame")
        if start is not None:
            centre = (float(start[0]), float(start[1]))
            s = 0.7 * config.radius
            ds = config.speed
        else:
            centre = (
                uniform(big_margin, res - 1.0 - big_margin),
                uniform(big_margin, res - 1.0 - big_margin),
            )
            s = uniform(s_min, s_max)
            ds = config.speed * float(rng.choice((-1.0, 1.0)))
        for t in range(length):
            positions[t] = centre
            sizes[t] = s
            s, ds = _reflect(s + ds, ds, s_min, s_max)
    elif dyn == "action_gain":
        if actions is None:
            actions = np.zeros((length - 1, config.action_dim), dtype=np.float64)
            actions[:, :2] = rng.integers(-1, 2, size=(length - 1, 2))
        else:
            actions = np.asarray(actions, dtype=np.float64)
            if actions.shape != (length - 1, config.action_dim):
                raise ConfigurationError(
                    f"actions must be [{length - 1}, {config.action_dim}], "
                    f"got {actions.shape}"
                )
        if start is not None:
            x, y = float(start[0]), float(start[1])
        else:
            x, y = uniform(lo, hi), uniform(lo, hi)
        for t in range(length):
            positions[t] = (x, y)
            if t < length - 1:
                dx, dy = np.rint(config.gain * actions[t, :2])
                x = min(max(x + dx, lo), hi)
                y = min(max(y + dy, lo), hi)
        out_actions = actions
    else:
        raise ConfigurationError(f"unknown dynamics {dyn!r}")
    return positions, sizes, out_actions


def _reflect(value: float, velocity: float, lo: float, hi: float) -> tuple[float, float]:
    while value < lo or value > hi:
        if value < lo:
            value = 2.0 * lo - value
        else:
            value = 2.0 * hi - value
        velocity = -velocity
    return value, velocity


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _sequence_rng(seed: int, task_id: int, role: str, index: int) -> np.random.Generator:
    role_code = 0 if role == "train" else 1
    return np.random.default_rng([abs(int(seed)), int(task_id), role_code, int(index)])


def _make_sequence(config: SyntheticTaskConfig, seed: int, role: str, index: int) -> VideoSequence:
    rng = _sequence_rng(seed, config.task_id, role, index)
    length = config.seq_len
    positions, sizes, actions = simulate_dynamics(config, length, rng)
    frames = np.empty(
        (length, config.channels, config.resolution, config.resolution), dtype=np.float32
    )
    for t in range(length):
        img = render_shape(
            config.appearance, positions[t, 0], positions[t, 1], sizes[t], config.resolution
        )
        if config.channels == 1:
            frames[t, 0] = img
        else:
            colour = _COLORS[config.appearance]
            for c in range(3):
                frames[t, c] = img * colour[c]
    action_tensor = (
        torch.from_numpy(actions.astype(np.float32)) if actions is not None else None
    )
    return VideoSequence(
        frames=torch.from_numpy(frames), actions=action_tensor, task_id=config.task_id
    )


def generate_shapeworld_task(
    config: SyntheticTaskConfig, seed: int
) -> tuple[DatasetSplit, DatasetSplit]:
    """Generate the (train, test) splits of one synthetic task."""
    train = [_make_sequence(config, seed, "train", i) for i in range(config.n_train)]
    test = [_make_sequence(config, seed, "test", i) for i in range(config.n_test)]
    return (
        DatasetSplit(train, task_id=config.task_id, role="train"),
        DatasetSplit(test, task_id=config.task_id, role="test"),
    )


# ---------------------------------------------------------------------------
# Frame-directory interchange
# ---------------------------------------------------------------------------

_FRAME_RE = re.compile(r"^frame_(\d+)\.(png|jpg|jpeg|bmp)$")


def save_frame_directory(
    split: DatasetSplit, root: Path | str, action_filename: str = "actions.txt"
) -> None:
    """Write a split as one subdirectory of 8-bit PNGs per sequence."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(split.sequences):
        seq_dir = root / f"seq_{i:04d}"
        seq_dir.mkdir(exist_ok=True)
        frames = (seq.frames.numpy() * 255.0).round().astype(np.uint8)
        for t in range(frames.shape[0]):
            if frames.shape[1] == 1:
                img = Image.fromarray(frames[t, 0], mode="L")
            else:
                img = Image.fromarray(frames[t].transpose(1, 2, 0), mode="RGB")
            img.save(seq_dir / f"frame_{t:03d}.png")
        if seq.actions is not None:
            np.savetxt(seq_dir / action_filename, seq.actions.numpy(), fmt="%.9g")


def load_frame_directory(
    root: Path | str,
    context_len: int,
    horizon: int,
    action_filename: Optional[str] = None,
    task_id: int = 1,
    role: str = "test",
    channels: int = 1,
    resolution: int = 64,
) -> DatasetSplit:
    """Load sequences from `root`, one subdirectory of indexed frames each.

    Frames are rescaled to [0, 1] and resized to `resolution`; each sequence
    keeps its first context_len + horizon frames and must have at least that
    many. With `action_filename`, every sequence must carry a text file of
    one whitespace-separated action vector per line, one fewer than frames.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    needed = context_len + horizon
    sequences = []
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not seq_dirs:
        raise IngestionError(f"{root} contains no sequence subdirectories")
    for seq_dir in seq_dirs:
        frame_files = {}
        for p in seq_dir.iterdir():
            m = _FRAME_RE.match(p.name)
            if m:
                frame_files[int(m.group(1))] = p
        n = len(frame_files)
        if n == 0:
            raise IngestionError(f"sequence {seq_dir.name}: no frame files found")
        missing = sorted(set(range(n)) - set(frame_files))
        if missing:
            raise IngestionError(
                f"sequence {seq_dir.name}: missing frame index {missing[0]}"
            )
        if n < needed:
            raise IngestionError(
                f"sequence {seq_dir.name}: has {n} frames, need at least {needed}"
            )
        frames = np.empty((needed, channels, resolution, resolution), dtype=np.float32)
        for t in range(needed):
            img = Image.open(frame_files[t]).convert("L" if channels == 1 else "RGB")
            if img.size != (resolution, resolution):
                img = img.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            frames[t] = arr[None, :, :] if channels == 1 else arr.transpose(2, 0, 1)
        actions = None
        if action_filename is not None:
            action_path = seq_dir / action_filename
            if not action_path.is_file():
                raise IngestionError(f"sequence {seq_dir.name}: missing {action_filename}")
            try:
                rows = np.loadtxt(action_path, dtype=np.float32, ndmin=2)
            except ValueError as exc:
                raise IngestionError(
                    f"sequence {seq_dir.name}: malformed action file ({exc})"
                ) from exc
            if rows.shape[0] != n - 1:
                raise IngestionError(
                    f"sequence {seq_dir.name}: action file has {rows.shape[0]} rows "
                    f"for {n} frames; expected {n - 1}"
                )
            actions = torch.from_numpy(rows[: needed - 1].copy())
        sequences.append(
            VideoSequence(frames=torch.from_numpy(frames), actions=actions, task_id=task_id)
        )
    return DatasetSplit(sequences, task_id=task_id, role=role)
