"""PSNR/SSIM scoring, the per-period evaluation matrix, and the test-set loop."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import task_inference
from .data import DatasetSplit
from .errors import ConfigurationError
from .world_model import WorldModel

PSNR_CAP_DB = 100.0

K_POLICIES = ("infer", "oracle", "random")


def derive_seed(*parts) -> int:
    """Stable non-negative 63-bit seed from arbitrary parts (platform independent)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _flatten_frames(x: torch.Tensor) -> torch.Tensor:
    if x.dim() < 3:
        raise ConfigurationError(f"expected frames [..., C, H, W], got {tuple(x.shape)}")
    return x.reshape(-1, *x.shape[-3:])


def psnr(
    pred: torch.Tensor,
    target: torch.Tensor,
    data_range: float = 1.0,
    cap: float = PSNR_CAP_DB,
) -> float:
    """Peak signal-to-noise ratio in dB, per frame, averaged over all frames.

    Identical frames score the cap so sequence averages stay finite.
    """
    if pred.shape != target.shape:
        raise ConfigurationError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    p = _flatten_frames(pred).double()
    t = _flatten_frames(target).double()
    mse = ((p - t) ** 2).mean(dim=(1, 2, 3))
    vals = torch.full_like(mse, cap)
    nonzero = mse > 0
    vals[nonzero] = torch.clamp(
        10.0 * torch.log10(data_range**2 / mse[nonzero]), max=cap
    )
    return float(vals.mean())


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


def ssim(
    pred: torch.Tensor,
    target: torch.Tensor,
    data_range: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Structural similarity with a Gaussian window, averaged over frames.

    The similarity map is computed where the window fits entirely inside the
    frame and averaged there; channels of one frame are averaged as well.
    """
    if pred.shape != target.shape:
        raise ConfigurationError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    p = _flatten_frames(pred).double()
    t = _flatten_frames(target).double()
    if p.shape[-1] < window_size or p.shape[-2] < window_size:
        raise ConfigurationError(
            f"frames {tuple(p.shape[-2:])} smaller than the {window_size}x{window_size} window"
        )
    channels = p.shape[1]
    kernel = _gaussian_window(window_size, sigma, p.dtype)
    kernel = kernel.expand(channels, 1, window_size, window_size)

    def filt(x):
        return torch.nn.functional.conv2d(x, kernel, groups=channels)

    mu_p = filt(p)
    mu_t = filt(t)
    var_p = filt(p * p) - mu_p**2
    var_t = filt(t * t) - mu_t**2
    cov = filt(p * t) - mu_p * mu_t
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s_map = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    )
    return float(s_map.mean())


@dataclass
class TaskScore:
    psnr: float
    ssim: float
    accuracy: float


class EvalMatrix:
    """Scores of every task's test set after each training period."""

    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self.rows: list[dict[int, TaskScore]] = []

    def append_row(self, scores: dict[int, TaskScore]) -> None:
        if sorted(scores) != list(range(1, self.num_tasks + 1)):
            raise ConfigurationError(
                f"a row must score all tasks 1..{self.num_tasks}, got {sorted(scores)}"
            )
        self.rows.append(dict(scores))

    def __len__(self) -> int:
        return len(self.rows)

    def entry(self, period: int, task: int) -> TaskScore:
        return self.rows[period - 1][task]

    def mean_psnr(self, period: int = -1) -> float:
        row = self.rows[period if period < 0 else period - 1]
        return float(np.mean([s.psnr for s in row.values()]))

    def mean_ssim(self, period: int = -1) -> float:
        row = self.rows[period if period < 0 else period - 1]
        return float(np.mean([s.ssim for s in row.values()]))

    def forgetting_gap(self, task: int) -> float:
        """Task's PSNR right after its own period minus after the final period."""
        if not 1 <= task <= len(self.rows):
            raise ConfigurationError(
                f"no row for task {task}; matrix has {len(self.rows)} rows"
            )
        return self.rows[task - 1][task].psnr - self.rows[-1][task].psnr

    def to_csv(self, path: Path | str) -> None:
        lines = ["period,task,psnr,ssim,inference_accuracy"]
        for j, row in enumerate(self.rows, start=1):
            for task in sorted(row):
                s = row[task]
                lines.append(
                    f"{j},{task},{float(s.psnr)!r},{float(s.ssim)!r},{float(s.accuracy)!r}"
                )
        Path(path).write_text("\n".join(lines) + "\n")

    def to_payload(self) -> dict:
        return {
            "num_tasks": self.num_tasks,
            "rows": [
                [(t, s.psnr, s.ssim, s.accuracy) for t, s in sorted(row.items())]
                for row in self.rows
            ],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "EvalMatrix":
        matrix = cls(payload["num_tasks"])
        for row in payload["rows"]:
            matrix.append_row({t: TaskScore(p, s, a) for t, p, s, a in row})
        return matrix


def forgetting_gap(matrix: EvalMatrix, task: int) -> float:
    return matrix.forgetting_gap(task)


@dataclass
class EvalResult:
    """Mean scores plus per-sequence records (index, labels, scores)."""

    psnr: float
    ssim: float
    accuracy: float
    records: list[dict] = field(default_factory=list)

    def __iter__(self):
        return iter((self.psnr, self.ssim, self.accuracy))


def evaluate_task(
    model: WorldModel,
    split: DatasetSplit,
    k_policy: str,
    adapt: bool,
    generator: torch.Generator,
    *,
    context_len: int,
    horizon: int,
    label_override: Optional[int] = None,
    adapt_steps: int = 5,
    adapt_lr: float = 5e-4,
) -> EvalResult:
    """Score one test split: choose a label per sequence, optionally adapt,
    predict the horizon and compare against ground truth.

    Each sequence gets its own rng stream derived from one draw off
    `generator`, so runs with and without adaptation stay paired.
    """
    if k_policy not in K_POLICIES:
        raise ConfigurationError(f"k_policy must be one of {K_POLICIES}, got {k_policy!r}")
    base = int(torch.randint(2**31, (1,), generator=generator))
    K = model.config.num_tasks
    records = []
    psnrs, ssims, hits = [], [], []
    for i, seq in enumerate(split.sequences):
        total = context_len + horizon
        if seq.n_frames < total:
            raise ConfigurationError(
                f"sequence {i} has {seq.n_frames} frames; evaluation needs {total}"
            )
        frames = seq.frames[:total]
        actions = seq.actions[: total - 1] if seq.actions is not None else None
        gen_seq = torch.Generator().manual_seed(derive_seed(base, split.task_id, i))
        probe_errors = None
        if label_override is not None:
            label = label_override
        elif k_policy == "oracle":
            label = seq.task_id
        elif k_policy == "random":
            label = int(torch.randint(1, K + 1, (1,), generator=gen_seq))
        else:
            report = task_inference.infer_task(
                model, frames[:context_len], actions, generator=gen_seq
            )
            label = report.inferred
            probe_errors = report.probe_errors
        scored_model = model
        if adapt and adapt_steps > 0:
            scored_model = task_inference.adapt(
                model,
                frames[:context_len],
                actions[: context_len - 1] if actions is not None else None,
                label,
                steps=adapt_steps,
                lr=adapt_lr,
                generator=gen_seq,
            )
        with torch.no_grad():
            preds = task_inference.deploy_predict(
                scored_model, frames[:context_len], actions, label, horizon, gen_seq
            )
        target = frames[context_len:total]
        seq_psnr = psnr(preds, target)
        seq_ssim = ssim(preds, target)
        psnrs.append(seq_psnr)
        ssims.append(seq_ssim)
        hits.append(1.0 if label == seq.task_id else 0.0)
        records.append(
            {
                "index": i,
                "true_task": seq.task_id,
                "label": label,
                "probe_errors": probe_errors,
                "psnr": seq_psnr,
                "ssim": seq_ssim,
            }
        )
    return EvalResult(
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        accuracy=float(np.mean(hits)),
        records=records,
    )


def save_matrix_plot(matrix: EvalMatrix, path: Path | str) -> None:
    """Bar chart per task: that task's test PSNR after each training period."""
    from matplotlib.figure import Figure

    K = matrix.num_tasks
    fig = Figure(figsize=(3.2 * K, 3.0))
    axes = fig.subplots(1, K, squeeze=False)[0]
    periods = list(range(1, len(matrix.rows) + 1))
    for task in range(1, K + 1):
        ax = axes[task - 1]
        values = [row[task].psnr for row in matrix.rows]
        ax.bar(periods, values, color="tab:blue")
        ax.set_title(f"task {task}")
        ax.set_xlabel("training period")
        ax.set_xticks(periods)
        if task == 1:
            ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path)


def save_comparison_strip(
    pred: torch.Tensor, target: torch.Tensor, path: Path | str
) -> None:
    """Side-by-side strip image: ground-truth frames on top, predictions below."""
    from PIL import Image

    if pred.shape != target.shape:
        raise ConfigurationError("prediction and target strips must share shape")
    rows = []
    for seq in (target, pred):
        arr = (seq.detach().clamp(0, 1).numpy() * 255).astype(np.uint8)
        frames = [arr[t].transpose(1, 2, 0).squeeze() for t in range(arr.shape[0])]
        rows.append(np.concatenate(frames, axis=1))
    grid = np.concatenate(rows, axis=0)
    Image.fromarray(grid).save(path)
