"""Versioned checkpoint files: model parameters, hyperparameters, rng state.

A checkpoint is one torch-serialised dict with independent sections for the
world model, the frame generator, and trainer bookkeeping, so either model
round-trips exactly on its own.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .errors import ConfigurationError
from .frame_generator import FrameGenerator, FrameGeneratorConfig
from .world_model import WorldModel, WorldModelConfig

FORMAT_VERSION = 1


def save_checkpoint(
    path: Path | str,
    world: Optional[WorldModel] = None,
    frame_generator: Optional[FrameGenerator] = None,
    rng: Optional[torch.Generator] = None,
    extra: Optional[dict] = None,
    world_section: Optional[dict] = None,
    generator_section: Optional[dict] = None,
) -> None:
    """Write a checkpoint from live modules or pre-built (config, state) sections."""
    payload: dict = {"format_version": FORMAT_VERSION}
    if world is not None:
        world_section = {
            "config": dataclasses.asdict(world.config),
            "state": world.state_dict(),
        }
    if frame_generator is not None:
        generator_section = {
            "config": dataclasses.asdict(frame_generator.config),
            "state": frame_generator.state_dict(),
        }
    if world_section is not None:
        payload["world_model"] = world_section
    if generator_section is not None:
        payload["frame_generator"] = generator_section
    if rng is not None:
        payload["rng_state"] = rng.get_state()
    if extra is not None:
        payload["extra"] = extra
    torch.save(payload, Path(path))


def load_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint format version {version} not supported (expected {FORMAT_VERSION})"
        )
    return payload


def restore_world_model(payload: dict) -> WorldModel:
    if "world_model" not in payload:
        raise ConfigurationError("checkpoint has no world_model section")
    section = payload["world_model"]
    model = WorldModel(WorldModelConfig(**section["config"]))
    model.load_state_dict(section["state"])
    return model


def restore_frame_generator(payload: dict) -> FrameGenerator:
    if "frame_generator" not in payload:
        raise ConfigurationError("checkpoint has no frame_generator section")
    section = payload["frame_generator"]
    model = FrameGenerator(FrameGeneratorConfig(**section["config"]))
    model.load_state_dict(section["state"])
    return model


def restore_rng(payload: dict) -> Optional[torch.Generator]:
    if "rng_state" not in payload:
        return None
    generator = torch.Generator()
    generator.set_state(payload["rng_state"])
    return generator
