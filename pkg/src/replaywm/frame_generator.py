"""Initial-frame generative model with one learnable Gaussian prior per task.

Seeds rehearsal rollouts: sampling the prior row of a past task and decoding
(together with the task embedding and, when action-conditioned, the first
action) yields a plausible first frame of that task without storing any
frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import ConfigurationError, NumericalError, TaskLabelError
from .world_model import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    FrameDecoder,
    FrameEncoder,
    GaussianParams,
    gaussian_kl,
    reparam_sample,
)


@dataclass
class FrameGeneratorConfig:
    num_tasks: int = 3
    in_channels: int = 1
    frame_size: int = 64
    hidden_channels: int = 32
    latent_dim: int = 16
    task_embed_dim: int = 8
    action_dim: int = 0
    action_embed_dim: int = 8
    mlp_dim: int = 128
    kl_weight: float = 1e-4
    downsamples: int = 3

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigurationError("num_tasks must be >= 1")
        if self.frame_size % (2**self.downsamples) != 0:
            raise ConfigurationError(
                f"frame_size {self.frame_size} not divisible by 2^{self.downsamples}"
            )

    @property
    def map_size(self) -> int:
        return self.frame_size // (2**self.downsamples)


class FrameGenerator(nn.Module):
    """Conditional VAE over single frames with a per-task prior table."""

    def __init__(self, config: FrameGeneratorConfig):
        super().__init__()
        self.config = config
        cfg = config
        s = cfg.map_size
        flat = cfg.hidden_channels * s * s
        self.encoder = FrameEncoder(cfg.in_channels, cfg.hidden_channels, cfg.downsamples)
        self.task_embedding = nn.Embedding(cfg.num_tasks, cfg.task_embed_dim)
        self.posterior_mlp = nn.Sequential(
            nn.Linear(flat + cfg.task_embed_dim, cfg.mlp_dim),
            nn.SiLU(),
            nn.Linear(cfg.mlp_dim, 2 * cfg.latent_dim),
        )
        # One (mean, log_var) row per task; zero-initialised rows start at N(0, I).
        self.prior_table = nn.Parameter(torch.zeros(cfg.num_tasks, 2 * cfg.latent_dim))
        if cfg.action_dim > 0:
            self.action_encoder = nn.Linear(cfg.action_dim, cfg.action_embed_dim)
        else:
            self.action_encoder = None
        dec_in = cfg.latent_dim + cfg.task_embed_dim
        if cfg.action_dim > 0:
            dec_in += cfg.action_embed_dim
        self.decoder_mlp = nn.Sequential(
            nn.Linear(dec_in, cfg.mlp_dim),
            nn.SiLU(),
            nn.Linear(cfg.mlp_dim, flat),
        )
        self.decoder = FrameDecoder(cfg.in_channels, cfg.hidden_channels, cfg.downsamples)

    def _check_task(self, k: int) -> None:
        if not isinstance(k, int) or isinstance(k, bool):
            raise TaskLabelError(f"task label must be an int, got {type(k).__name__}")
        if not 1 <= k <= self.config.num_tasks:
            raise TaskLabelError(f"task label {k} outside 1..{self.config.num_tasks}")

    def _embed(self, k: int, batch_size: int, dtype, device) -> torch.Tensor:
        idx = torch.full((batch_size,), k - 1, dtype=torch.long, device=device)
        return self.task_embedding(idx).to(dtype)

    def prior_params(self, k: int) -> GaussianParams:
        """Learnable prior row of task k."""
        self._check_task(k)
        row = self.prior_table[k - 1]
        mean, log_var = torch.chunk(row, 2, dim=-1)
        return GaussianParams(mean, torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    def posterior_params(self, frames: torch.Tensor, k: int) -> GaussianParams:
        """q(e | frame, task) for a batch of frames [B, C, H, W]."""
        self._check_task(k)
        feat = self.encoder(frames).flatten(1)
        emb = self._embed(k, frames.shape[0], frames.dtype, frames.device)
        raw = self.posterior_mlp(torch.cat([feat, emb], dim=1))
        mean, log_var = torch.chunk(raw, 2, dim=-1)
        return GaussianParams(mean, torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    def decode(self, e: torch.Tensor, k: int, a1: Optional[torch.Tensor] = None) -> torch.Tensor:
        self._check_task(k)
        if (a1 is not None) != (self.action_encoder is not None):
            raise ConfigurationError(
                "first action must be given exactly when the generator is action-conditioned"
            )
        cfg = self.config
        parts = [e, self._embed(k, e.shape[0], e.dtype, e.device)]
        if a1 is not None:
            parts.append(self.action_encoder(a1.to(e.dtype)))
        x = self.decoder_mlp(torch.cat(parts, dim=1))
        x = x.view(e.shape[0], cfg.hidden_channels, cfg.map_size, cfg.map_size)
        return torch.sigmoid(self.decoder(x))

    def generate_initial_frame(
        self,
        k: int,
        a1: Optional[torch.Tensor] = None,
        batch_size: int = 1,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Sample first frames of task k: [B, C, H, W] in [0, 1].

        A pure function of parameters, task label, first action and rng state;
        no dataset access. With a1 given ([B, d_a]), the batch size follows it.
        """
        self._check_task(k)
        if a1 is not None:
            batch_size = a1.shape[0]
        p = next(self.parameters())
        prior = self.prior_params(k)
        params = GaussianParams(
            prior.mean.unsqueeze(0).expand(batch_size, -1).to(p.dtype),
            prior.log_var.unsqueeze(0).expand(batch_size, -1).to(p.dtype),
        )
        e = reparam_sample(params, generator)
        return self.decode(e, k, a1)

    def generator_loss(
        self,
        real_frames: torch.Tensor,
        real_a1: Optional[torch.Tensor],
        k: int,
        replayed: Sequence[tuple[int, torch.Tensor, Optional[torch.Tensor]]] = (),
        generator: Optional[torch.Generator] = None,
    ) -> tuple[torch.Tensor, dict]:
        """Frame-VAE objective over the current task plus one block per replayed task.

        Each block is the per-pixel mean reconstruction error of decoding a
        posterior sample plus beta times the KL between the frame posterior
        and the task's prior row. `replayed` holds (task, frames, first
        actions) triples for every task before k, and must be empty exactly
        when k is the first task.
        """
        self._check_task(k)
        if (k == 1) != (len(replayed) == 0):
            raise ConfigurationError(
                "replayed blocks must be empty exactly when training the first task"
            )
        blocks = [(k, real_frames, real_a1)] + [tuple(r) for r in replayed]
        total = None
        n_blocks = 0
        for label, frames, a1 in blocks:
            self._check_task(label)
            if frames.dim() != 4:
                raise ConfigurationError("generator frames must be [B, C, H, W]")
            if a1 is not None and a1.shape[0] != frames.shape[0]:
                raise ConfigurationError(
                    f"task {label}: {frames.shape[0]} frames but {a1.shape[0]} actions"
                )
            post = self.posterior_params(frames, label)
            e = reparam_sample(post, generator)
            recon = ((self.decode(e, label, a1) - frames) ** 2).mean(dim=(1, 2, 3)).mean()
            prior = self.prior_params(label)
            kl = gaussian_kl(
                post,
                GaussianParams(
                    prior.mean.unsqueeze(0).expand_as(post.mean),
                    prior.log_var.unsqueeze(0).expand_as(post.log_var),
                ),
            ).mean()
            if not torch.isfinite(recon):
                raise NumericalError("recon")
            if not torch.isfinite(kl):
                raise NumericalError("kl")
            block = recon + self.config.kl_weight * kl
            total = block if total is None else total + block
            n_blocks += 1
        diag = {"n_blocks": n_blocks, "loss": float(total.detach())}
        return total, diag
