"""Mixture world model: task-conditioned latent dynamics over stacked ST-LSTM layers.

The model has three parts. A representation path summarises frames up to and
including the current target and emits a per-task Gaussian over the latent
z_t; an encoding path does the same from frames strictly before the target
and acts as the learned prior; a deterministic recurrent predictor consumes
the previous frame, the sampled latent, the task embedding and (optionally)
the previous action, and decodes the next frame. Only the prior path is used
at test time.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigurationError, NumericalError, TaskLabelError

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 6.0

ROLLOUT_MODES = ("train_posterior", "test_prior")


@dataclass
class GaussianParams:
    """Diagonal Gaussian as (mean, log-variance), trailing dim is the event dim."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ConfigurationError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape "
                f"{tuple(self.log_var.shape)}"
            )


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the trailing dimension."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ConfigurationError(
            f"KL dimension mismatch: {q.mean.shape[-1]} vs {p.mean.shape[-1]}"
        )
    var_q = torch.exp(q.log_var)
    var_p = torch.exp(p.log_var)
    term = p.log_var - q.log_var + (var_q + (q.mean - p.mean) ** 2) / var_p - 1.0
    return 0.5 * term.sum(dim=-1)


def reparam_sample(params: GaussianParams, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Differentiable sample mean + exp(log_var / 2) * eps with eps ~ N(0, I)."""
    log_var = torch.clamp(params.log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    eps = torch.randn(
        params.mean.shape,
        generator=generator,
        dtype=params.mean.dtype,
        device=params.mean.device,
    )
    return params.mean + torch.exp(0.5 * log_var) * eps


@dataclass
class RecurrentState:
    """Per-layer hidden/cell maps, the cross-layer memory, and both summary RNN states.

    A fresh state is all zeros. Operations never mutate a state in place;
    they return a new one.
    """

    h: tuple[torch.Tensor, ...]
    c: tuple[torch.Tensor, ...]
    m: torch.Tensor
    posterior_h: torch.Tensor
    posterior_c: torch.Tensor
    prior_h: torch.Tensor
    prior_c: torch.Tensor


@dataclass
class WorldModelConfig:
    num_tasks: int = 3
    in_channels: int = 1
    frame_size: int = 64
    hidden_channels: int = 32
    layers: int = 2
    latent_dim: int = 16
    task_embed_dim: int = 8
    action_dim: int = 0
    action_embed_dim: int = 8
    summary_dim: int = 64
    kl_weight: float = 1e-4
    downsamples: int = 3
    separate_posterior_encoder: bool = False
    full_teacher_forcing: bool = False

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigurationError("num_tasks must be >= 1")
        if self.frame_size % (2**self.downsamples) != 0:
            raise ConfigurationError(
                f"frame_size {self.frame_size} not divisible by 2^{self.downsamples}"
            )
        if self.layers < 1:
            raise ConfigurationError("need at least one recurrent layer")

    @property
    def map_size(self) -> int:
        return self.frame_size // (2**self.downsamples)


class FrameEncoder(nn.Module):
    """Strided conv stack taking a frame down to a hidden_channels feature map."""

    def __init__(self, in_channels: int, hidden: int, downsamples: int):
        super().__init__()
        layers = []
        ch = in_channels
        for i in range(downsamples):
            out = hidden if i == downsamples - 1 else max(hidden // 2, 4)
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.SiLU()]
            ch = out
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class FrameDecoder(nn.Module):
    """Transposed-conv stack from the top hidden map back to frame logits."""

    def __init__(self, out_channels: int, hidden: int, downsamples: int):
        super().__init__()
        layers = []
        ch = hidden
        for i in range(downsamples):
            last = i == downsamples - 1
            out = out_channels if last else max(hidden // 2, 4)
            layers.append(nn.ConvTranspose2d(ch, out, 4, stride=2, padding=1))
            if not last:
                layers.append(nn.SiLU())
            ch = out
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class STLSTMCell(nn.Module):
    """Recurrent cell with a temporal cell c and a spatiotemporal memory m.

    m is written by every layer within a step and handed from the top layer
    back to the bottom layer of the next step; the output gate fuses both
    memories.
    """

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.hidden = hidden
        self.conv_x = nn.Conv2d(in_channels, hidden * 7, kernel, padding=pad)
        self.conv_h = nn.Conv2d(hidden, hidden * 4, kernel, padding=pad)
        self.conv_m = nn.Conv2d(hidden, hidden * 3, kernel, padding=pad)
        self.conv_o = nn.Conv2d(hidden * 2, hidden, kernel, padding=pad)
        self.conv_last = nn.Conv2d(hidden * 2, hidden, 1)

    def forward(self, x, h, c, m):
        i_x, f_x, g_x, i_x2, f_x2, g_x2, o_x = torch.split(self.conv_x(x), self.hidden, dim=1)
        i_h, f_h, g_h, o_h = torch.split(self.conv_h(h), self.hidden, dim=1)
        i_m, f_m, g_m = torch.split(self.conv_m(m), self.hidden, dim=1)

        i_t = torch.sigmoid(i_x + i_h)
        f_t = torch.sigmoid(f_x + f_h)
        g_t = torch.tanh(g_x + g_h)
        c_new = f_t * c + i_t * g_t

        i_t2 = torch.sigmoid(i_x2 + i_m)
        f_t2 = torch.sigmoid(f_x2 + f_m)
        g_t2 = torch.tanh(g_x2 + g_m)
        m_new = f_t2 * m + i_t2 * g_t2

        mem = torch.cat([c_new, m_new], dim=1)
        o_t = torch.sigmoid(o_x + o_h + self.conv_o(mem))
        h_new = o_t * torch.tanh(self.conv_last(mem))
        return h_new, c_new, m_new


class WorldModel(nn.Module):
    """Task-conditioned video predictor with per-task Gaussian latent heads."""

    def __init__(self, config: WorldModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.frame_encoder = FrameEncoder(cfg.in_channels, cfg.hidden_channels, cfg.downsamples)
        if cfg.separate_posterior_encoder:
            self.posterior_encoder = FrameEncoder(
                cfg.in_channels, cfg.hidden_channels, cfg.downsamples
            )
        else:
            self.posterior_encoder = None
        self.task_embedding = nn.Embedding(cfg.num_tasks, cfg.task_embed_dim)
        summary_in = cfg.hidden_channels + cfg.task_embed_dim
        self.posterior_rnn = nn.LSTMCell(summary_in, cfg.summary_dim)
        self.posterior_head = nn.Linear(cfg.summary_dim, 2 * cfg.latent_dim)
        self.prior_rnn = nn.LSTMCell(summary_in, cfg.summary_dim)
        self.prior_head = nn.Linear(cfg.summary_dim, 2 * cfg.latent_dim)
        if cfg.action_dim > 0:
            self.action_encoder = nn.Linear(cfg.action_dim, cfg.action_embed_dim)
        else:
            self.action_encoder = None
        fuse_in = cfg.hidden_channels + cfg.latent_dim + cfg.task_embed_dim
        if cfg.action_dim > 0:
            fuse_in += cfg.action_embed_dim
        self.fuse = nn.Conv2d(fuse_in, cfg.hidden_channels, 1)
        self.cells = nn.ModuleList(
            STLSTMCell(cfg.hidden_channels, cfg.hidden_channels) for _ in range(cfg.layers)
        )
        self.decoder = FrameDecoder(cfg.in_channels, cfg.hidden_channels, cfg.downsamples)

    # -- state ---------------------------------------------------------------

    def init_state(self, batch_size: int = 1, dtype=None, device=None) -> RecurrentState:
        cfg = self.config
        p = next(self.parameters())
        dtype = dtype or p.dtype
        device = device or p.device
        s = cfg.map_size

        def zeros(*shape):
            return torch.zeros(*shape, dtype=dtype, device=device)

        return RecurrentState(
            h=tuple(zeros(batch_size, cfg.hidden_channels, s, s) for _ in range(cfg.layers)),
            c=tuple(zeros(batch_size, cfg.hidden_channels, s, s) for _ in range(cfg.layers)),
            m=zeros(batch_size, cfg.hidden_channels, s, s),
            posterior_h=zeros(batch_size, cfg.summary_dim),
            posterior_c=zeros(batch_size, cfg.summary_dim),
            prior_h=zeros(batch_size, cfg.summary_dim),
            prior_c=zeros(batch_size, cfg.summary_dim),
        )

    # -- task conditioning ---------------------------------------------------

    def _check_task(self, k: int) -> None:
        if not isinstance(k, int) or isinstance(k, bool):
            raise TaskLabelError(f"task label must be an int, got {type(k).__name__}")
        if not 1 <= k <= self.config.num_tasks:
            raise TaskLabelError(
                f"task label {k} outside 1..{self.config.num_tasks}"
            )

    def _embed(self, k: int, batch_size: int, dtype, device) -> torch.Tensor:
        idx = torch.full((batch_size,), k - 1, dtype=torch.long, device=device)
        return self.task_embedding(idx).to(dtype)

    # -- latent summaries ----------------------------------------------------

    def _summary_input(self, frame: torch.Tensor, k: int, posterior: bool) -> torch.Tensor:
        encoder = self.frame_encoder
        if posterior and self.posterior_encoder is not None:
            encoder = self.posterior_encoder
        feat = encoder(frame).mean(dim=(2, 3))
        emb = self._embed(k, frame.shape[0], frame.dtype, frame.device)
        return torch.cat([feat, emb], dim=1)

    def _head_params(self, head: nn.Linear, h: torch.Tensor) -> GaussianParams:
        raw = head(h)
        mean, log_var = torch.chunk(raw, 2, dim=-1)
        return GaussianParams(mean, torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    def _posterior_step(self, frame, k, state) -> tuple[GaussianParams, RecurrentState]:
        inp = self._summary_input(frame, k, posterior=True)
        h, c = self.posterior_rnn(inp, (state.posterior_h, state.posterior_c))
        new_state = dataclasses.replace(state, posterior_h=h, posterior_c=c)
        return self._head_params(self.posterior_head, h), new_state

    def _prior_step(self, frame, k, state) -> tuple[GaussianParams, RecurrentState]:
        inp = self._summary_input(frame, k, posterior=False)
        h, c = self.prior_rnn(inp, (state.prior_h, state.prior_c))
        new_state = dataclasses.replace(state, prior_h=h, prior_c=c)
        return self._head_params(self.prior_head, h), new_state

    def posterior_params(
        self, frames: torch.Tensor, k: int, state: Optional[RecurrentState] = None
    ) -> tuple[GaussianParams, RecurrentState]:
        """Fold frames [B, n, C, H, W] into the representation summary.

        Returns the Gaussian over z after the last given frame (for n = 0,
        the Gaussian at the current state) and the advanced state.
        """
        self._check_task(k)
        if state is None:
            state = self.init_state(frames.shape[0], dtype=frames.dtype, device=frames.device)
        params = self._head_params(self.posterior_head, state.posterior_h)
        for t in range(frames.shape[1]):
            params, state = self._posterior_step(frames[:, t], k, state)
        return params, state

    def prior_params(
        self, frames: torch.Tensor, k: int, state: Optional[RecurrentState] = None
    ) -> tuple[GaussianParams, RecurrentState]:
        """Like posterior_params but over the encoding (prior) path."""
        self._check_task(k)
        if state is None:
            state = self.init_state(frames.shape[0], dtype=frames.dtype, device=frames.device)
        params = self._head_params(self.prior_head, state.prior_h)
        for t in range(frames.shape[1]):
            params, state = self._prior_step(frames[:, t], k, state)
        return params, state

    # -- one prediction step ---------------------------------------------------

    def predict_frame(
        self,
        state: RecurrentState,
        x_prev: torch.Tensor,
        z_t: torch.Tensor,
        k: int,
        a_prev: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, RecurrentState]:
        """Advance the recurrent predictor one step and decode the next frame."""
        self._check_task(k)
        if (a_prev is not None) != (self.action_encoder is not None):
            raise ConfigurationError(
                "action input must be given exactly when the model is action-conditioned"
            )
        B = x_prev.shape[0]
        s = self.config.map_size
        feat = self.frame_encoder(x_prev)
        emb = self._embed(k, B, x_prev.dtype, x_prev.device)
        parts = [
            feat,
            z_t[:, :, None, None].expand(-1, -1, s, s),
            emb[:, :, None, None].expand(-1, -1, s, s),
        ]
        if a_prev is not None:
            act = self.action_encoder(a_prev.to(x_prev.dtype))
            parts.append(act[:, :, None, None].expand(-1, -1, s, s))
        x = self.fuse(torch.cat(parts, dim=1))
        new_h = list(state.h)
        new_c = list(state.c)
        m = state.m
        for l, cell in enumerate(self.cells):
            new_h[l], new_c[l], m = cell(x, state.h[l], state.c[l], m)
            x = new_h[l]
        x_hat = torch.sigmoid(self.decoder(new_h[-1]))
        new_state = dataclasses.replace(state, h=tuple(new_h), c=tuple(new_c), m=m)
        return x_hat, new_state

    # -- sequence-level ops ----------------------------------------------------

    def rollout(
        self,
        frames: torch.Tensor,
        actions: Optional[torch.Tensor],
        k: int,
        horizon: int,
        mode: str,
        generator: Optional[torch.Generator] = None,
        context_len: Optional[int] = None,
    ) -> torch.Tensor:
        """Predict frames for steps 2..T+H; returns [B, T+H-1, C, H, W].

        In train_posterior mode the full target sequence must be given and
        latents come from the representation path; in test_prior mode only
        the first context_len frames are ever read and latents come from the
        prior path. Through step T+1 the predictor consumes ground-truth
        frames, afterwards its own predictions.
        """
        preds, _ = self._run(frames, actions, k, horizon, mode, generator, context_len, False)
        return preds

    def _run(self, frames, actions, k, horizon, mode, generator, context_len, collect_kl):
        self._check_task(k)
        if mode not in ROLLOUT_MODES:
            raise ConfigurationError(f"mode must be one of {ROLLOUT_MODES}, got {mode!r}")
        if horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if frames.dim() != 5:
            raise ConfigurationError("frames must be [B, L, C, H, W]")
        L = frames.shape[1]
        if mode == "train_posterior":
            if context_len is None:
                context_len = L - horizon
            if context_len < 1 or context_len + horizon != L:
                raise ConfigurationError(
                    f"train_posterior needs frames for all of context + horizon; "
                    f"got L={L}, context_len={context_len}, horizon={horizon}"
                )
        else:
            if context_len is None:
                context_len = L
            if context_len < 1 or context_len > L:
                raise ConfigurationError(
                    f"context_len {context_len} out of range for {L} given frames"
                )
        total = context_len + horizon
        if self.action_encoder is not None:
            if actions is None:
                raise ConfigurationError("model is action-conditioned but no actions given")
            if actions.dim() != 3 or actions.shape[1] < total - 1:
                raise ConfigurationError(
                    f"need at least {total - 1} actions, got "
                    f"{tuple(actions.shape)}"
                )
        elif actions is not None:
            raise ConfigurationError("model is action-free but actions were given")

        state = self.init_state(frames.shape[0], dtype=frames.dtype, device=frames.device)
        if mode == "train_posterior":
            _, state = self._posterior_step(frames[:, 0], k, state)
        preds: list[torch.Tensor] = []
        kls: list[torch.Tensor] = []
        for t in range(2, total + 1):
            if t - 1 <= context_len or (
                mode == "train_posterior" and self.config.full_teacher_forcing
            ):
                x_in = frames[:, t - 2]
            else:
                x_in = preds[-1]
            prior_p, state = self._prior_step(x_in, k, state)
            if mode == "train_posterior":
                post_p, state = self._posterior_step(frames[:, t - 1], k, state)
                z_t = reparam_sample(post_p, generator)
                if collect_kl:
                    kls.append(gaussian_kl(post_p, prior_p))
            else:
                z_t = reparam_sample(prior_p, generator)
            a_prev = actions[:, t - 2] if self.action_encoder is not None else None
            x_hat, state = self.predict_frame(state, x_in, z_t, k, a_prev)
            preds.append(x_hat)
        return torch.stack(preds, dim=1), kls

    def elbo_loss(
        self,
        frames: torch.Tensor,
        actions: Optional[torch.Tensor],
        k: int,
        generator: Optional[torch.Generator] = None,
        *,
        context_len: int,
    ) -> tuple[torch.Tensor, dict]:
        """Sequence objective: sum over steps 2..T+H of frame MSE + alpha * KL.

        Reconstruction is the per-pixel mean squared error of each predicted
        frame; the KL between the representation and encoding Gaussians is
        summed over latent dimensions. Both are summed over time and averaged
        over the batch.
        """
        L = frames.shape[1]
        horizon = L - context_len
        if horizon < 1:
            raise ConfigurationError(
                f"context_len {context_len} leaves no target frames in a length-{L} sequence"
            )
        preds, kls = self._run(
            frames, actions, k, horizon, "train_posterior", generator, context_len, True
        )
        targets = frames[:, 1:]
        recon = ((preds - targets) ** 2).mean(dim=(2, 3, 4)).sum(dim=1).mean(dim=0)
        kl = torch.stack(kls, dim=1).sum(dim=1).mean(dim=0)
        if not torch.isfinite(recon):
            raise NumericalError("recon")
        if not torch.isfinite(kl):
            raise NumericalError("kl")
        loss = recon + self.config.kl_weight * kl
        diag = {"recon": float(recon.detach()), "kl": float(kl.detach()), "steps": L - 1}
        return loss, diag
