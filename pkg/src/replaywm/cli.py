"""Command-line entry points: generate, train, eval, ablate.

Every command is driven by one YAML experiment config; CLI flags override the
few fields that vary between runs of the same experiment (seed, mode, output
directory, desk-scale profile).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

import click
import torch

from . import checkpoint as ckpt
from .config import (
    AblationFlags,
    ExperimentConfig,
    build_benchmark_data,
    load_experiment_config,
)
from .data import generate_shapeworld_task, save_frame_directory
from .errors import TrainingDivergedError
from .metrics import derive_seed, evaluate_task, save_comparison_strip, save_matrix_plot
from .replay import RunResult, TrainSchedule, run_sequence
from .task_inference import deploy_predict

MODE_FLAGS = {
    "replay": dict(replay=True),
    "sequential": dict(replay=False, infer_k=False, random_k=False, adapt=False),
    "joint": dict(replay=False, infer_k=False, random_k=False, adapt=False),
}


def _apply_overrides(
    config: ExperimentConfig,
    seed: Optional[int],
    mode: Optional[str],
    desk_scale: Optional[bool],
    output_dir: Optional[str],
) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if output_dir is not None:
        changes["output_dir"] = Path(output_dir)
    if desk_scale is not None and desk_scale != config.desk_scale:
        changes["desk_scale"] = desk_scale
        changes["schedule"] = TrainSchedule.desk_scale() if desk_scale else TrainSchedule()
    if mode is not None and mode != config.mode:
        changes["mode"] = mode
        flag_values = dataclasses.asdict(config.flags)
        flag_values.update(MODE_FLAGS.get(mode, {}))
        changes["flags"] = AblationFlags(**flag_values)
    if changes:
        config = dataclasses.replace(config, **changes)
    return config


def _write_loss_csv(path: Path, period_logs: list[dict], key: str) -> None:
    lines = ["iteration,task,loss,recon,kl"]
    step = 0
    for logs in period_logs:
        for row in logs[key]:
            lines.append(
                f"{step},{row['task']},{float(row['loss'])!r},"
                f"{float(row['recon'])!r},{float(row['kl'])!r}"
            )
            step += 1
    path.write_text("\n".join(lines) + "\n")


def _checkpoint_name(mode: str, period: int, tasks: list[int]) -> str:
    task_part = "all" if len(tasks) != 1 else f"{tasks[0]:02d}"
    return f"checkpoint_{mode}_period_{period:02d}_task_{task_part}.pt"


@click.group()
def main():
    """Continual video-prediction experiments on synthetic or frame-directory data."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def generate(config_path, seed, force):
    """Materialise the synthetic benchmark as frame directories."""
    config = _apply_overrides(load_experiment_config(config_path), seed, None, None, None)
    if config.benchmark.kind != "synthetic":
        raise click.ClickException("generate only applies to synthetic benchmarks")
    out = config.output_dir / "datasets"
    if out.exists() and any(out.iterdir()) and not force:
        raise click.ClickException(
            f"{out} already exists and is not empty; pass --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    for task in config.benchmark.synthetic_tasks:
        train_split, test_split = generate_shapeworld_task(task, config.seed)
        for split in (train_split, test_split):
            split_dir = out / f"task_{task.task_id:02d}" / split.role
            split_dir.mkdir(parents=True, exist_ok=True)
            save_frame_directory(split, split_dir)
        click.echo(
            f"task {task.task_id}: {len(train_split)} train / {len(test_split)} test sequences"
        )
    click.echo(f"wrote {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--mode", type=click.Choice(["replay", "sequential", "joint"]), default=None)
@click.option("--desk-scale/--full-scale", "desk_scale", default=None)
@click.option("--resume", is_flag=True, help="Continue from the last period checkpoint.")
@click.option("--output-dir", type=click.Path(), default=None)
def train(config_path, seed, mode, desk_scale, resume, output_dir):
    """Run the continual training protocol and write checkpoints, CSVs and plots."""
    config = _apply_overrides(
        load_experiment_config(config_path), seed, mode, desk_scale, output_dir
    )
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    train_splits, test_splits = build_benchmark_data(config)
    world_section_config = dataclasses.asdict(config.world_config())
    generator_section_config = dataclasses.asdict(config.generator_config())

    resume_payload = None
    if resume:
        existing = sorted(out.glob(f"checkpoint_{config.mode}_period_*.pt"))
        if existing:
            payload = ckpt.load_checkpoint(existing[-1])
            resume_payload = dict(payload["extra"])
            resume_payload["world_state"] = payload["world_model"]["state"]
            resume_payload["generator_state"] = payload["frame_generator"]["state"]
            click.echo(f"resuming after period {resume_payload['period'] + 1}")

    def on_period_end(payload: dict) -> None:
        name = _checkpoint_name(config.mode, payload["period"] + 1, payload["tasks"])
        extra = {k: payload[k] for k in ("period", "mode", "tasks", "buffer", "matrix")}
        ckpt.save_checkpoint(
            out / name,
            world_section={"config": world_section_config, "state": payload["world_state"]},
            generator_section={
                "config": generator_section_config,
                "state": payload["generator_state"],
            },
            extra=extra,
        )
        click.echo(f"period {payload['period'] + 1} done -> {name}")

    flags = config.flags
    conditioned = flags.conditioned if config.mode == "replay" else False
    try:
        result = run_sequence(
            train_splits,
            test_splits,
            config.schedule,
            config.mode,
            world_config=config.world_config(),
            generator_config=config.generator_config(),
            seed=config.seed,
            context_len=config.benchmark.context_len,
            task_order=config.benchmark.order,
            conditioned=conditioned,
            eval_policy=flags.k_policy,
            eval_adapt=flags.adapt,
            on_period_end=on_period_end,
            resume=resume_payload,
        )
    except TrainingDivergedError as exc:
        ckpt.save_checkpoint(out / f"checkpoint_{config.mode}_diverged.pt", extra={"error": str(exc)})
        raise click.ClickException(str(exc)) from exc

    matrix_path = out / f"eval_matrix_{config.mode}.csv"
    result.matrix.to_csv(matrix_path)
    _write_loss_csv(out / f"losses_world_{config.mode}.csv", result.logs, "world_model")
    _write_loss_csv(out / f"losses_generator_{config.mode}.csv", result.logs, "generator")
    save_matrix_plot(result.matrix, out / f"eval_matrix_{config.mode}.png")
    click.echo(f"final mean PSNR {result.matrix.mean_psnr():.2f} dB -> {matrix_path}")


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--policy", type=click.Choice(["infer", "oracle", "random"]), default=None)
@click.option("--adapt/--no-adapt", "adapt_flag", default=None)
@click.option("--output-dir", type=click.Path(), default=None)
def eval_cmd(config_path, checkpoint_path, policy, adapt_flag, output_dir):
    """Evaluate a checkpoint on every task's test set; write CSVs and frame strips."""
    config = _apply_overrides(load_experiment_config(config_path), None, None, None, output_dir)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    payload = ckpt.load_checkpoint(checkpoint_path)
    world = ckpt.restore_world_model(payload)
    if world.config.num_tasks != config.benchmark.num_tasks:
        raise click.ClickException(
            f"checkpoint was trained for {world.config.num_tasks} tasks but the "
            f"config declares {config.benchmark.num_tasks}"
        )
    _, test_splits = build_benchmark_data(config)
    k_policy = policy if policy is not None else config.flags.k_policy
    adapt = adapt_flag if adapt_flag is not None else config.flags.adapt
    mode = payload.get("extra", {}).get("mode", config.mode)
    label_override = None
    if mode in ("sequential", "joint") or (
        mode == "replay" and not config.flags.conditioned and policy is None
    ):
        label_override = 1

    context_len = config.benchmark.context_len
    horizon = config.benchmark.horizon
    summary = ["task,psnr,ssim,inference_accuracy"]
    detail = ["task,sequence,true_task,label,psnr,ssim,probe_errors"]
    gen_eval = torch.Generator().manual_seed(derive_seed(config.seed, "cmd-eval"))
    for split in test_splits:
        result = evaluate_task(
            world,
            split,
            k_policy,
            adapt,
            gen_eval,
            context_len=context_len,
            horizon=horizon,
            label_override=label_override,
            adapt_steps=config.schedule.adapt_steps,
            adapt_lr=config.schedule.learning_rate,
        )
        summary.append(f"{split.task_id},{result.psnr!r},{result.ssim!r},{result.accuracy!r}")
        for rec in result.records:
            probes = (
                ";".join(repr(float(e)) for e in rec["probe_errors"])
                if rec["probe_errors"]
                else ""
            )
            detail.append(
                f"{split.task_id},{rec['index']},{rec['true_task']},{rec['label']},"
                f"{rec['psnr']!r},{rec['ssim']!r},{probes}"
            )
        seq = split.sequences[0]
        frames = seq.frames[: context_len + horizon]
        actions = seq.actions[: context_len + horizon - 1] if seq.actions is not None else None
        with torch.no_grad():
            preds = deploy_predict(
                world,
                frames[:context_len],
                actions,
                seq.task_id if label_override is None else label_override,
                horizon,
                torch.Generator().manual_seed(derive_seed(config.seed, "strip", split.task_id)),
            )
        save_comparison_strip(
            preds, frames[context_len:], out / f"strip_task_{split.task_id:02d}.png"
        )
        click.echo(
            f"task {split.task_id}: PSNR {result.psnr:.2f} dB, SSIM {result.ssim:.4f}, "
            f"accuracy {result.accuracy:.2f}"
        )
    (out / "eval_results.csv").write_text("\n".join(summary) + "\n")
    (out / "inference_details.csv").write_text("\n".join(detail) + "\n")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
def ablate(config_path, seed):
    """Run the five-row component ablation under one seed and write one table."""
    config = _apply_overrides(load_experiment_config(config_path), seed, None, None, None)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    train_splits, test_splits = build_benchmark_data(config)
    context_len = config.benchmark.context_len
    horizon = config.benchmark.horizon

    def run(mode: str, conditioned: bool, eval_policy: str) -> RunResult:
        return run_sequence(
            train_splits,
            test_splits,
            config.schedule,
            mode,
            world_config=config.world_config(),
            generator_config=config.generator_config(),
            seed=config.seed,
            context_len=context_len,
            task_order=config.benchmark.order,
            conditioned=conditioned,
            eval_policy=eval_policy,
            eval_adapt=False,
        )

    click.echo("row 1/5: no replay, no task labels")
    base = run("sequential", False, "oracle")
    click.echo("row 2/5: replay without task labels")
    replay_plain = run("replay", False, "oracle")
    click.echo("rows 3-5/5: replay with task labels")
    replay_full = run("replay", True, "infer")

    def final_scores(result: RunResult, policy: str, adapt: bool):
        gen_eval = torch.Generator().manual_seed(
            derive_seed(config.seed, "ablate", policy, adapt)
        )
        psnrs, ssims = [], []
        for split in test_splits:
            r = evaluate_task(
                result.world,
                split,
                policy,
                adapt,
                gen_eval,
                context_len=context_len,
                horizon=horizon,
                adapt_steps=config.schedule.adapt_steps,
                adapt_lr=config.schedule.learning_rate,
            )
            psnrs.append(r.psnr)
            ssims.append(r.ssim)
        return sum(psnrs) / len(psnrs), sum(ssims) / len(ssims)

    rows = [
        ("false", "false", "false", "false", base.matrix.mean_psnr(), base.matrix.mean_ssim()),
        (
            "true",
            "false",
            "false",
            "false",
            replay_plain.matrix.mean_psnr(),
            replay_plain.matrix.mean_ssim(),
        ),
        ("true", "true", "false", "false", *final_scores(replay_full, "infer", False)),
        ("true", "false", "true", "false", *final_scores(replay_full, "random", False)),
        ("true", "true", "false", "true", *final_scores(replay_full, "infer", True)),
    ]
    lines = ["replay,infer_k,random_k,adapt,psnr,ssim"]
    for row in rows:
        lines.append(f"{row[0]},{row[1]},{row[2]},{row[3]},{row[4]!r},{row[5]!r}")
    path = out / "ablation.csv"
    path.write_text("\n".join(lines) + "\n")
    for line in lines:
        click.echo(line)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
