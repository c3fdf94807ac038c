"""Trial-and-error task inference, test-time adaptation, and deployment prediction.

The task label is never predicted by a separate network: every candidate
label drives a prior-only rollout over the first half of the observed window
and the label whose predictions best match the held-out second half wins.
The same self-supervision optionally fine-tunes a per-sequence clone of the
model before predicting the future.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import ConfigurationError
from .world_model import WorldModel


@dataclass
class InferenceReport:
    """Outcome of probing one sequence: chosen label and all probe errors."""

    inferred: int
    probe_errors: list[float]
    adapted: bool = False
    adapt_steps: int = 0


def deploy_predict(
    model: WorldModel,
    frames: torch.Tensor,
    actions: Optional[torch.Tensor],
    k: int,
    horizon: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Predict the next `horizon` frames from an observed window [T, C, H, W].

    Prior-only rollout; any label in 1..K is accepted, which supports both
    the random-label control and wrong-label probing.
    """
    if frames.dim() != 4:
        raise ConfigurationError("deploy_predict takes a single sequence [T, C, H, W]")
    T = frames.shape[0]
    batch_actions = None
    if actions is not None:
        if actions.dim() != 2 or actions.shape[0] < T + horizon - 1:
            raise ConfigurationError(
                f"need at least {T + horizon - 1} actions, got {tuple(actions.shape)}"
            )
        batch_actions = actions[: T + horizon - 1].unsqueeze(0)
    preds = model.rollout(
        frames.unsqueeze(0),
        batch_actions,
        k,
        horizon,
        mode="test_prior",
        generator=generator,
        context_len=T,
    )
    return preds[0, -horizon:]


def infer_task(
    model: WorldModel,
    frames: torch.Tensor,
    actions: Optional[torch.Tensor] = None,
    num_tasks: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> InferenceReport:
    """Choose the task label by probing every candidate on the observed window.

    The window [T, C, H, W] is split at s = T // 2; each label k rolls the
    model out from the first s frames and is scored by the mean per-frame MSE
    against frames s+1..T. Ties break to the lowest label. Every probe starts
    from the same rng state so the comparison is paired.
    """
    if frames.dim() != 4:
        raise ConfigurationError("infer_task takes a single sequence [T, C, H, W]")
    T = frames.shape[0]
    if T < 2:
        raise ConfigurationError("task inference needs at least 2 observed frames")
    K = num_tasks if num_tasks is not None else model.config.num_tasks
    if not 1 <= K <= model.config.num_tasks:
        raise ConfigurationError(f"num_tasks {K} outside 1..{model.config.num_tasks}")
    s = T // 2
    base_state = generator.get_state() if generator is not None else None
    errors = []
    with torch.no_grad():
        for k in range(1, K + 1):
            if base_state is not None:
                generator.set_state(base_state)
            preds = deploy_predict(
                model,
                frames[:s],
                actions[: T - 1] if actions is not None else None,
                k,
                T - s,
                generator,
            )
            err = ((preds - frames[s:T]) ** 2).mean(dim=(1, 2, 3)).mean()
            errors.append(float(err))
    inferred = min(range(K), key=lambda i: errors[i]) + 1
    return InferenceReport(inferred=inferred, probe_errors=errors)


def adapt(
    model: WorldModel,
    frames: torch.Tensor,
    actions: Optional[torch.Tensor],
    k: int,
    steps: int = 5,
    lr: float = 5e-4,
    generator: Optional[torch.Generator] = None,
    observed: Optional[int] = None,
) -> WorldModel:
    """Fine-tune a clone of the model on the observed window; the input model
    is left untouched.

    Runs `steps` optimizer steps of the sequence objective on frames 1..T
    (targets 2..T), conditioning on the first half as in task inference.
    `observed` limits how many leading frames count as the window when the
    given tensor is longer.
    """
    if frames.dim() != 4:
        raise ConfigurationError("adapt takes a single sequence [T, C, H, W]")
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    T = observed if observed is not None else frames.shape[0]
    if not 2 <= T <= frames.shape[0]:
        raise ConfigurationError(f"observed window {T} outside 2..{frames.shape[0]}")
    clone = copy.deepcopy(model)
    if steps == 0:
        return clone
    window = frames[:T].unsqueeze(0)
    window_actions = actions[: T - 1].unsqueeze(0) if actions is not None else None
    context = max(1, T // 2)
    optimizer = torch.optim.Adam(clone.parameters(), lr=lr)
    for _ in range(steps):
        optimizer.zero_grad()
        loss, _ = clone.elbo_loss(window, window_actions, k, generator, context_len=context)
        loss.backward()
        optimizer.step()
    return clone
