"""Command-line entry point: synth / train / eval / cv / serve-export."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .data import (
    AugmentationConfig,
    Fov,
    PromptMode,
    SegTask,
    TaskName,
    load_dataset,
    make_folds,
    save_dataset,
)
from .losses import LossConfig
from .model import LoraConfig, load_checkpoint, model_config, save_adapter
from .prompts import PromptGenConfig, PromptSet
from .service import MANIFEST_NAME, decode_image_bytes, image_to_stack, predict_mask_png
from .training import (
    TrainConfig,
    evaluate,
    run_cv,
    synth_dataset,
    train_fold,
    REPORTED_BASELINE_RESULTS,
)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def _seg_task(task: str, mode: str) -> SegTask:
    return SegTask(TaskName(task.upper()), PromptMode(mode.upper()))


def _train_config(task: SegTask, cfg: dict, seed: int, **overrides) -> TrainConfig:
    model_section = cfg.get("model", {})
    model_cfg = model_config(
        model_section.get("preset", "desk"), **model_section.get("overrides", {})
    )
    lora_section = dict(cfg.get("lora", {}))
    if "target_projections" in lora_section:
        lora_section["target_projections"] = tuple(lora_section["target_projections"])
    lora_cfg = LoraConfig(**{"unfreeze_mask_decoder": True, **lora_section})
    prompt_section = dict(cfg.get("prompts", {}))
    if "band" in prompt_section:
        prompt_section["band"] = tuple(prompt_section["band"])
    prompt_cfg = PromptGenConfig(mode=task.mode, **prompt_section)
    params = dict(
        task=task,
        seed=seed,
        prompt_config=prompt_cfg,
        lora_config=lora_cfg,
        model_config=model_cfg,
        augmentation=AugmentationConfig(**cfg.get("augmentation", {})),
        loss_config=LossConfig(**cfg.get("loss", {})),
        layer_selection=tuple(cfg["layers"]) if cfg.get("layers") else None,
    )
    params.update(cfg.get("training", {}))
    params.update(overrides)
    return TrainConfig(**params)


def _load_samples(data: str | None, synth: int | None, fov: str, side: int, seed: int):
    if (data is None) == (synth is None):
        raise click.UsageError("provide exactly one of --data or --synth")
    if data is not None:
        return load_dataset(data, Fov(fov))
    return synth_dataset(synth, image_side=side, seed=seed)


@click.group()
def main() -> None:
    """Promptable OCTA segmentation toolkit."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", "n_samples", default=200, show_default=True, type=int)
@click.option("--side", default=128, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def synth(out_dir, n_samples, side, seed):
    """Generate a synthetic vessel dataset in the on-disk PNG layout."""
    samples = synth_dataset(n_samples, image_side=side, seed=seed)
    save_dataset(samples, out_dir)
    click.echo(f"wrote {len(samples)} samples to {out_dir}")


@main.command()
@click.option("--data", type=click.Path(exists=True), help="dataset root directory")
@click.option("--synth", "synth_n", type=int, help="use N synthetic samples instead")
@click.option("--task", default="RV", show_default=True,
              type=click.Choice([t.value for t in TaskName], case_sensitive=False))
@click.option("--mode", default="global", show_default=True,
              type=click.Choice(["global", "local"], case_sensitive=False))
@click.option("--fov", default="3M", show_default=True,
              type=click.Choice([f.value for f in Fov]))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--val-fraction", default=0.2, show_default=True, type=float)
@click.option("--side", default=128, show_default=True, type=int,
              help="synthetic image side (with --synth)")
def train(data, synth_n, task, mode, fov, config_path, seed, out_dir, epochs,
          val_fraction, side):
    """Fine-tune adapters on one train/val split and save the checkpoint."""
    seg_task = _seg_task(task, mode)
    cfg_dict = _load_config_file(config_path)
    overrides = {} if epochs is None else {"epochs": epochs}
    config = _train_config(seg_task, cfg_dict, seed, **overrides)
    samples = _load_samples(data, synth_n, fov, side, seed)
    n_val = max(1, int(round(len(samples) * val_fraction)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    val = [samples[i] for i in order[:n_val]]
    tr = [samples[i] for i in order[n_val:]]
    result = train_fold(tr, val, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{seg_task.name.value.lower()}_{seg_task.mode.value.lower()}.pt"
    save_adapter(result.model, ckpt)
    (out / "history.json").write_text(json.dumps(result.history, indent=2) + "\n")
    click.echo(f"best val dice {result.best_val_dice:.4f} (epoch {result.best_epoch}); "
               f"checkpoint: {ckpt}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", type=click.Path(exists=True))
@click.option("--synth", "synth_n", type=int)
@click.option("--task", default="RV", show_default=True,
              type=click.Choice([t.value for t in TaskName], case_sensitive=False))
@click.option("--mode", default="global", show_default=True,
              type=click.Choice(["global", "local"], case_sensitive=False))
@click.option("--prompts", default="on", show_default=True,
              type=click.Choice(["on", "off"]))
@click.option("--fov", default="3M", show_default=True,
              type=click.Choice([f.value for f in Fov]))
@click.option("--seed", default=1234, show_default=True, type=int)
@click.option("--out", "out_dir", type=click.Path())
@click.option("--side", default=128, show_default=True, type=int)
@click.option("--image", "image_path", type=click.Path(exists=True),
              help="single-image mode: predict a mask for this image")
@click.option("--points", "points_path", type=click.Path(exists=True),
              help="single-image mode: prompt points JSON (PromptSet records)")
def eval_cmd(checkpoint, data, synth_n, task, mode, prompts, fov, seed, out_dir,
             side, image_path, points_path):
    """Evaluate a checkpoint on a dataset, or predict one image with points."""
    adapted = load_checkpoint(checkpoint)
    if image_path is not None:
        from .data import standardize_input
        from .model import encode_image
        import torch

        arr = decode_image_bytes(Path(image_path).read_bytes())
        std = standardize_input(image_to_stack(arr), side=adapted.model_config.input_side)
        points = PromptSet.load(points_path).to_records() if points_path else []
        with torch.inference_mode():
            embedding = encode_image(std, adapted)
        png, confidence, all_conf = predict_mask_png(adapted, std, embedding, points)
        out = Path(out_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        mask_path = out / "mask.png"
        mask_path.write_bytes(png)
        click.echo(f"confidence {confidence:.4f} (all: "
                   f"{', '.join(f'{c:.4f}' for c in all_conf)}); mask: {mask_path}")
        return

    seg_task = _seg_task(task, mode)
    samples = _load_samples(data, synth_n, fov, side, seed)
    summary = evaluate(adapted, samples, seg_task, prompts_enabled=(prompts == "on"),
                       seed=seed, prompt_config=PromptGenConfig(mode=seg_task.mode))
    click.echo(f"dice {summary.dice_mean:.4f} +/- {summary.dice_std:.4f}  "
               f"jaccard {summary.jaccard_mean:.4f} +/- {summary.jaccard_std:.4f}  "
               f"(n={summary.n_samples})")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps({
            "task": seg_task.name.value, "mode": seg_task.mode.value,
            "prompts": prompts, "dice_mean": summary.dice_mean,
            "dice_std": summary.dice_std, "jaccard_mean": summary.jaccard_mean,
            "jaccard_std": summary.jaccard_std, "n_samples": summary.n_samples,
            "per_sample": summary.per_sample,
        }, indent=2) + "\n")


@main.command()
@click.option("--data", type=click.Path(exists=True))
@click.option("--synth", "synth_n", type=int)
@click.option("--task", "tasks", multiple=True, default=("RV",), show_default=True,
              type=click.Choice([t.value for t in TaskName], case_sensitive=False))
@click.option("--mode", default="global", show_default=True,
              type=click.Choice(["global", "local"], case_sensitive=False))
@click.option("--prompts", default="both", show_default=True,
              type=click.Choice(["on", "off", "both"]))
@click.option("--fov", default="3M", show_default=True,
              type=click.Choice([f.value for f in Fov]))
@click.option("--k", default=10, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--side", default=128, show_default=True, type=int)
@click.option("--include-reported", is_flag=True,
              help="append published full-scale baselines (reported, not reproduced)")
def cv(data, synth_n, tasks, mode, prompts, fov, k, config_path, seed, out_dir,
       side, include_reported):
    """k-fold cross-validation producing the results table."""
    seg_tasks = [_seg_task(t, mode) for t in tasks]
    cfg_dict = _load_config_file(config_path)
    config = _train_config(seg_tasks[0], cfg_dict, seed)
    samples = _load_samples(data, synth_n, fov, side, seed)
    settings = ("on", "off") if prompts == "both" else (prompts,)
    table = run_cv(samples, config, k=k, tasks=seg_tasks,
                   prompt_settings=settings, out_dir=out_dir)
    click.echo(table.to_tsv())
    if include_reported:
        lines = ["# reported full-scale baselines (not reproduced):"]
        for (method, task_name, fov_name), (dice, jaccard) in sorted(
                REPORTED_BASELINE_RESULTS.items()):
            lines.append(f"#   {method}\t{task_name}\t{fov_name}\t"
                         f"dice={dice:.4f}\tjaccard={jaccard:.4f}")
        report = "\n".join(lines) + "\n"
        click.echo(report)
        with open(Path(out_dir) / "results.tsv", "a") as fh:
            fh.write(report)


@main.command("serve-export")
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--task", "tasks", multiple=True,
              type=click.Choice([t.value for t in TaskName], case_sensitive=False),
              help="task per checkpoint, in order; defaults to checkpoint stem prefix")
@click.option("--out", "out_dir", required=True, type=click.Path())
def serve_export(checkpoints, tasks, out_dir):
    """Bundle checkpoints plus a manifest the inference service can load."""
    import shutil

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if tasks and len(tasks) != len(checkpoints):
        raise click.UsageError("--task count must match --checkpoint count")
    entries = []
    for i, ckpt in enumerate(checkpoints):
        src = Path(ckpt)
        if tasks:
            task = tasks[i].upper()
        else:
            prefix = src.stem.split("_")[0].upper()
            try:
                task = TaskName(prefix).value
            except ValueError:
                raise click.UsageError(
                    f"cannot infer task from {src.name!r}; pass --task"
                )
        dest = out / src.name
        if src.resolve() != dest.resolve():
            shutil.copy2(src, dest)
        entries.append({"task": task, "checkpoint": src.name})
    (out / MANIFEST_NAME).write_text(json.dumps({"tasks": entries}, indent=2) + "\n")
    click.echo(f"bundle with {len(entries)} task(s) at {out}")


if __name__ == "__main__":
    main()
