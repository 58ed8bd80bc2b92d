"""Fine-tuning harness: loss selection, warm-up schedule, k-fold CV,
a synthetic desk-scale dataset, and results aggregation."""

from __future__ import annotations

import json
import math
import copy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import (
    AugmentationConfig,
    Fov,
    OPPOSING_TASK,
    OctaSample,
    PromptMode,
    SegTask,
    TaskName,
    augment,
    make_folds,
    stack_projections,
    standardize_input,
    standardize_mask,
    unstandardize_mask,
)
from .losses import (
    LossConfig,
    binarize,
    cl_dice_loss_batch,
    dice_loss_batch,
    dice_metric,
    jaccard_metric,
)
from .model import AdaptedModel, LoraConfig, ModelConfig, build_model, inject_lora, model_config
from .prompts import PromptGenConfig, PromptSet, generate_global, generate_local, select_local_target
from .seeding import derive_rng, derive_seed


@dataclass(frozen=True)
class TrainConfig:
    task: SegTask
    epochs: int = 20
    batch_size: int = 4
    lr_start: float = 1e-5
    lr_peak: float = 1e-3
    warmup_fraction: float = 0.1
    decay: str = "cosine"  # or "none"
    weight_decay: float = 0.01
    seed: int = 0
    iou_loss_weight: float = 0.05
    prompt_config: PromptGenConfig = field(default_factory=PromptGenConfig)
    lora_config: LoraConfig = field(default_factory=LoraConfig)
    model_config: ModelConfig = field(default_factory=lambda: model_config("desk"))
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss_config: LossConfig = field(default_factory=LossConfig)
    layer_selection: tuple[str, ...] | None = None
    eval_prompt_seed: int = 1234

    def __post_init__(self) -> None:
        if self.lr_start >= self.lr_peak:
            raise ValueError("lr_start must be < lr_peak")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay not in ("none", "cosine"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.prompt_config.mode != self.task.mode:
            raise ValueError(
                f"prompt_config.mode {self.prompt_config.mode.value} does not match "
                f"task mode {self.task.mode.value}"
            )


def desk_train_config(task: SegTask, **overrides) -> TrainConfig:
    """Desk-scale defaults: tiny model, trainable decoder head, 20 epochs.

    Skeleton iterations drop to 5 because desk-scale vessels are at most
    3 px wide; the default 10 only pays off at full resolution.
    """
    params = dict(
        task=task,
        prompt_config=PromptGenConfig(mode=task.mode),
        lora_config=LoraConfig(unfreeze_mask_decoder=True),
        model_config=model_config("desk"),
        loss_config=LossConfig(skeleton_iterations=5),
    )
    params.update(overrides)
    return TrainConfig(**params)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warm-up to lr_peak, then cosine decay back to lr_start."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = max(1, round(config.warmup_fraction * total_steps))
    if step <= warmup_steps:
        return config.lr_start + (config.lr_peak - config.lr_start) * step / warmup_steps
    if config.decay == "none" or total_steps == warmup_steps:
        return config.lr_peak
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return config.lr_start + 0.5 * (config.lr_peak - config.lr_start) * (1.0 + math.cos(math.pi * t))


def pick_loss(task: SegTask) -> str:
    """Dice for area-like targets, clDice for tubular ones."""
    if task.name in (TaskName.FAZ, TaskName.CAPILLARY):
        return "dice"
    return "cldice"


# ---------------------------------------------------------------------------
# per-sample preparation


def _task_mask(sample: OctaSample, task: SegTask) -> np.ndarray:
    mask = sample.labels.get(task.name)
    if mask is None:
        raise ValueError(f"sample {sample.sample_id!r} is missing a {task.name.value} label")
    return mask


def _prompts_for_sample(
    sample: OctaSample, task: SegTask, base_config: PromptGenConfig, seed: int
) -> tuple[PromptSet, np.ndarray]:
    """Generate prompts from a (possibly augmented) sample; returns supervision mask."""
    mask = _task_mask(sample, task)
    pcfg = replace(base_config, seed=seed)
    if task.mode == PromptMode.LOCAL:
        opposing_name = OPPOSING_TASK.get(task.name)
        opposing = sample.labels.get(opposing_name) if opposing_name else None
        return generate_local(mask, opposing, pcfg)
    return generate_global(mask, pcfg), mask


def _slim_sample(sample: OctaSample, task: SegTask) -> OctaSample:
    """Drop label masks the trainer will not touch (augmentation cost)."""
    keep = {task.name}
    opposing = OPPOSING_TASK.get(task.name)
    if opposing is not None:
        keep.add(opposing)
    labels = {name: mask for name, mask in sample.labels.items() if name in keep}
    if len(labels) == len(sample.labels):
        return sample
    return replace(sample, labels=labels)


def _prepare_train_example(sample, config: TrainConfig, epoch: int):
    side = config.model_config.input_side
    aug = augment(_slim_sample(sample, config.task), config.augmentation,
                  seed=derive_seed(config.seed, "aug", epoch))
    if not _task_mask(aug, config.task).any():
        aug = sample  # degenerate augmentation wiped the target; train on the original
    prompt_seed = derive_seed(config.seed, "prompt", sample.sample_id, epoch)
    points, target_mask = _prompts_for_sample(aug, config.task, config.prompt_config, prompt_seed)
    image = stack_projections(aug, list(config.layer_selection) if config.layer_selection else None)
    std = standardize_input(image, side=side)
    coords = std.transform.apply_coords(points.coords())
    labels = points.labels().copy()
    labels[points.pad_flags()] = 2
    target = (standardize_mask(target_mask, side) >= 0.5).astype(np.float32)
    return {
        "image": torch.from_numpy(std.image),
        "coords": torch.from_numpy(coords).float(),
        "labels": torch.from_numpy(labels).long(),
        "target": torch.from_numpy(target),
    }


def _loss_fn(name: str, config: LossConfig):
    """Batched per-sample loss, (B, H, W) x2 -> (B,)."""
    if name == "dice":
        return lambda pred, target: dice_loss_batch(pred, target, config.smooth)
    return lambda pred, target: cl_dice_loss_batch(pred, target, config)


def _soft_iou(probs: torch.Tensor, targets: torch.Tensor, threshold: float) -> torch.Tensor:
    """Actual IoU of each candidate mask against the target, (B, k), no grad."""
    with torch.no_grad():
        hard = (probs >= threshold).float()
        t = targets[:, None]
        inter = (hard * t).sum(dim=(-2, -1))
        union = ((hard + t) > 0).float().sum(dim=(-2, -1))
        return torch.where(union > 0, inter / union.clamp(min=1.0), torch.ones_like(inter))


@dataclass
class TrainResult:
    model: AdaptedModel
    history: list[dict]
    best_epoch: int
    best_val_dice: float


def train_fold(
    train_samples: list[OctaSample],
    val_samples: list[OctaSample],
    config: TrainConfig,
) -> TrainResult:
    """Fine-tune adapters on one split; keeps the best-validation state."""
    for sample in [*train_samples, *val_samples]:
        _task_mask(sample, config.task)  # missing labels fail before any training

    torch.manual_seed(derive_seed(config.seed, "train"))
    model = build_model(config.model_config)
    adapted = inject_lora(model, config.lora_config)
    loss_fn = _loss_fn(pick_loss(config.task), config.loss_config)
    optimizer = torch.optim.AdamW(
        adapted.trainable_parameters(), lr=config.lr_start,
        weight_decay=config.weight_decay,
    )

    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    history: list[dict] = []
    best_state: dict | None = None
    best_val = -1.0
    best_epoch = -1
    step = 0

    for epoch in range(config.epochs):
        adapted.train()
        order = derive_rng(config.seed, "order", epoch).permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [
                _prepare_train_example(train_samples[i], config, epoch)
                for i in order[start:start + config.batch_size]
            ]
            images = torch.stack([b["image"] for b in batch])
            coords = torch.stack([b["coords"] for b in batch])
            labels = torch.stack([b["labels"] for b in batch])
            targets = torch.stack([b["target"] for b in batch])

            lr = lr_at(step, total_steps, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits, confidences = adapted(images, coords, labels)
            probs = torch.sigmoid(logits)
            best_idx = confidences.detach().argmax(dim=1)
            selected = probs[torch.arange(len(batch)), best_idx]
            task_loss = loss_fn(selected, targets).mean()
            iou_target = _soft_iou(probs, targets, config.loss_config.metric_threshold)
            conf_loss = torch.nn.functional.mse_loss(confidences, iou_target)
            loss = task_loss + config.iou_loss_weight * conf_loss

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            epoch_losses.append(float(loss.detach()))

        val = evaluate(adapted, val_samples, config.task, prompts_enabled=True,
                       seed=config.eval_prompt_seed, prompt_config=config.prompt_config,
                       loss_config=config.loss_config)
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_dice": val.dice_mean,
        })
        if val.dice_mean > best_val:
            best_val = val.dice_mean
            best_epoch = epoch
            best_state = {
                name: p.detach().clone()
                for name, p in adapted.model.named_parameters() if p.requires_grad
            }

    if best_state is not None:
        params = dict(adapted.model.named_parameters())
        with torch.no_grad():
            for name, tensor in best_state.items():
                params[name].copy_(tensor)
    return TrainResult(model=adapted, history=history,
                       best_epoch=best_epoch, best_val_dice=best_val)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSummary:
    dice_mean: float
    dice_std: float
    jaccard_mean: float
    jaccard_std: float
    n_samples: int
    per_sample: list[dict] = field(default_factory=list)


def evaluate(
    model: AdaptedModel,
    samples: list[OctaSample],
    task: SegTask,
    prompts_enabled: bool,
    seed: int,
    prompt_config: PromptGenConfig | None = None,
    loss_config: LossConfig | None = None,
    layer_selection: tuple[str, ...] | None = None,
) -> EvalSummary:
    """Dice/Jaccard of the best mask per sample, in original image space.

    With prompts disabled the model sees an empty prompt set and no point
    generation runs; local mode still scores against the same deterministic
    component selection so both settings share a target.
    """
    base_pcfg = prompt_config or PromptGenConfig(mode=task.mode)
    loss_config = loss_config or LossConfig()
    side = model.model_config.input_side
    threshold = loss_config.metric_threshold
    adapted = model.eval()
    records = []
    with torch.inference_mode():
        for sample in samples:
            mask = _task_mask(sample, task)
            prompt_seed = derive_seed(seed, "prompt", sample.sample_id)
            pcfg = replace(base_pcfg, seed=prompt_seed)
            if task.mode == PromptMode.LOCAL:
                if prompts_enabled:
                    points, target_mask = _prompts_for_sample(sample, task, base_pcfg, prompt_seed)
                else:
                    labeling, selected = select_local_target(mask, pcfg)
                    target_mask = mask if pcfg.local_supervision == "full_mask" \
                        else labeling.component_mask(selected)
                    points = PromptSet()
            else:
                target_mask = mask
                points = _prompts_for_sample(sample, task, base_pcfg, prompt_seed)[0] \
                    if prompts_enabled else PromptSet()

            image = stack_projections(sample, list(layer_selection) if layer_selection else None)
            std = standardize_input(image, side=side)
            images = torch.from_numpy(std.image)[None]
            if len(points) > 0:
                coords = torch.from_numpy(std.transform.apply_coords(points.coords())).float()[None]
                labels = points.labels().copy()
                labels[points.pad_flags()] = 2
                labels = torch.from_numpy(labels).long()[None]
            else:
                coords, labels = None, None
            logits, confidences = adapted(images, coords, labels)
            conf = confidences[0].cpu().numpy()
            best = int(np.argmax(conf))
            probs = torch.sigmoid(logits[0, best]).cpu().numpy()
            pred = binarize(unstandardize_mask(probs, std.transform), threshold)
            records.append({
                "sample_id": sample.sample_id,
                "dice": dice_metric(pred, target_mask),
                "jaccard": jaccard_metric(pred, target_mask),
                "confidence": float(conf[best]),
            })
    dices = np.array([r["dice"] for r in records], dtype=np.float64)
    jaccards = np.array([r["jaccard"] for r in records], dtype=np.float64)
    return EvalSummary(
        dice_mean=float(dices.mean()) if len(records) else 0.0,
        dice_std=float(dices.std()) if len(records) else 0.0,
        jaccard_mean=float(jaccards.mean()) if len(records) else 0.0,
        jaccard_std=float(jaccards.std()) if len(records) else 0.0,
        n_samples=len(records),
        per_sample=records,
    )


# ---------------------------------------------------------------------------
# results table


#: Published full-scale Dice/Jaccard for RV and FAZ on OCTA-500, kept for
#: report context only. Reported, not reproduced by this package.
REPORTED_BASELINE_RESULTS = {
    ("U-Net (2015)", "RV", "3M"): (0.9068, 0.8301),
    ("U-Net (2015)", "RV", "6M"): (0.8876, 0.7987),
    ("U-Net (2015)", "FAZ", "3M"): (0.9747, 0.9585),
    ("U-Net (2015)", "FAZ", "6M"): (0.8770, 0.8124),
    ("IPN (2020)", "RV", "3M"): (0.9062, 0.8325),
    ("IPN (2020)", "RV", "6M"): (0.8864, 0.7973),
    ("IPN (2020)", "FAZ", "3M"): (0.9505, 0.9091),
    ("IPN (2020)", "FAZ", "6M"): (0.8802, 0.7980),
    ("IPN V2+ (2021)", "RV", "3M"): (0.9274, 0.8667),
    ("IPN V2+ (2021)", "RV", "6M"): (0.8941, 0.8095),
    ("IPN V2+ (2021)", "FAZ", "3M"): (0.9755, 0.9532),
    ("IPN V2+ (2021)", "FAZ", "6M"): (0.9084, 0.8423),
    ("FARGO (2021)", "RV", "3M"): (0.9112, 0.8374),
    ("FARGO (2021)", "RV", "6M"): (0.8798, 0.7864),
    ("FARGO (2021)", "FAZ", "3M"): (0.9785, 0.9587),
    ("FARGO (2021)", "FAZ", "6M"): (0.8930, 0.8355),
    ("Joint-Seg (2022)", "RV", "3M"): (0.9113, 0.8378),
    ("Joint-Seg (2022)", "RV", "6M"): (0.8972, 0.8117),
    ("Joint-Seg (2022)", "FAZ", "3M"): (0.9843, 0.9693),
    ("Joint-Seg (2022)", "FAZ", "6M"): (0.9051, 0.8424),
}

_TSV_COLUMNS = ("task", "fov", "mode", "prompts", "dice_mean", "dice_std",
                "jaccard_mean", "jaccard_std", "n_folds")


@dataclass
class ResultsTable:
    """Per-(task, fov, prompts, mode) Dice/Jaccard aggregates over folds."""

    rows: dict[tuple[str, str, str, str], dict] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def add_row(self, task: str, fov: str, prompts: str, mode: str, *,
                dice_mean: float, dice_std: float, jaccard_mean: float,
                jaccard_std: float, n_folds: int) -> None:
        for value, name in ((dice_mean, "dice_mean"), (jaccard_mean, "jaccard_mean")):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        self.rows[(task, fov, prompts, mode)] = {
            "dice_mean": dice_mean, "dice_std": dice_std,
            "jaccard_mean": jaccard_mean, "jaccard_std": jaccard_std,
            "n_folds": n_folds,
        }

    def to_tsv(self) -> str:
        lines = ["\t".join(_TSV_COLUMNS)]
        for (task, fov, prompts, mode), stats in sorted(self.rows.items()):
            lines.append("\t".join([
                task, fov, mode, prompts,
                f"{stats['dice_mean']:.4f}", f"{stats['dice_std']:.4f}",
                f"{stats['jaccard_mean']:.4f}", f"{stats['jaccard_std']:.4f}",
                str(stats["n_folds"]),
            ]))
        for failure in self.failures:
            lines.append(f"# FAILED\t{json.dumps(failure)}")
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "rows": [
                {"task": k[0], "fov": k[1], "prompts": k[2], "mode": k[3], **v}
                for k, v in sorted(self.rows.items())
            ],
            "failures": self.failures,
        }

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.tsv").write_text(self.to_tsv())
        (out / "results.json").write_text(json.dumps(self.to_json_obj(), indent=2) + "\n")
        return out


def run_cv(
    samples: list[OctaSample],
    config: TrainConfig,
    k: int = 10,
    tasks: list[SegTask] | None = None,
    prompt_settings: tuple[str, ...] = ("on", "off"),
    out_dir: str | Path | None = None,
) -> ResultsTable:
    """Cross-validated training and evaluation; flushes partial tables on failure."""
    if len(samples) < k:
        raise ValueError(f"dataset of {len(samples)} samples cannot be split into {k} folds")
    tasks = tasks or [config.task]
    by_id = {s.sample_id: s for s in samples}
    folds = make_folds(sorted(by_id), k, config.seed)
    fov = samples[0].fov.value
    table = ResultsTable()

    for task in tasks:
        cfg = replace(
            config, task=task,
            prompt_config=replace(config.prompt_config, mode=task.mode),
        )
        fold_stats = {setting: [] for setting in prompt_settings}
        for fold in folds:
            fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, "fold", fold.fold_index))
            train = [by_id[i] for i in fold.train_ids]
            val = [by_id[i] for i in fold.val_ids]
            try:
                result = train_fold(train, val, fold_cfg)
                for setting in prompt_settings:
                    summary = evaluate(
                        result.model, val, task,
                        prompts_enabled=(setting == "on"),
                        seed=cfg.eval_prompt_seed,
                        prompt_config=cfg.prompt_config,
                        loss_config=cfg.loss_config,
                        layer_selection=cfg.layer_selection,
                    )
                    fold_stats[setting].append(summary)
            except Exception as exc:
                table.failures.append({
                    "task": task.name.value, "fold": fold.fold_index, "error": str(exc),
                })
                if out_dir is not None:
                    table.save(out_dir)
                raise
        for setting in prompt_settings:
            dice = np.array([s.dice_mean for s in fold_stats[setting]])
            jac = np.array([s.jaccard_mean for s in fold_stats[setting]])
            table.add_row(
                task.name.value, fov, setting, task.mode.value,
                dice_mean=float(dice.mean()), dice_std=float(dice.std()),
                jaccard_mean=float(jac.mean()), jaccard_std=float(jac.std()),
                n_folds=k,
            )
    if out_dir is not None:
        table.save(out_dir)
    return table


# ---------------------------------------------------------------------------
# synthetic desk-scale dataset


def _walk_path(rng, side: int, start: np.ndarray, heading: float, n_steps: int) -> np.ndarray:
    """Momentum random walk producing a smooth curve across the image."""
    pts = np.empty((n_steps, 2), dtype=np.float64)
    pos = start.astype(np.float64).copy()
    turn = 0.0
    for i in range(n_steps):
        pts[i] = pos
        turn = 0.9 * turn + rng.normal(0.0, 0.045)
        turn = float(np.clip(turn, -0.12, 0.12))
        heading += turn
        pos += np.array([math.cos(heading), math.sin(heading)])
        if not (-side * 0.2 <= pos[0] <= side * 1.2 and -side * 0.2 <= pos[1] <= side * 1.2):
            return pts[: i + 1]
    return pts


def _stamp_path(canvas: np.ndarray, path: np.ndarray, width: int) -> None:
    side = canvas.shape[0]
    half_lo = (width - 1) // 2
    half_hi = width // 2
    for x, y in path:
        cx, cy = int(round(x)), int(round(y))
        if not (0 <= cx < side and 0 <= cy < side):
            continue
        y0, y1 = max(0, cy - half_lo), min(side, cy + half_hi + 1)
        x0, x1 = max(0, cx - half_lo), min(side, cx + half_hi + 1)
        canvas[y0:y1, x0:x1] = True


def _edge_start(rng, side: int) -> tuple[np.ndarray, float]:
    edge = rng.integers(0, 4)
    t = rng.uniform(0.1, 0.9) * side
    if edge == 0:  # left -> rightwards
        return np.array([0.0, t]), rng.uniform(-0.5, 0.5)
    if edge == 1:  # right -> leftwards
        return np.array([side - 1.0, t]), math.pi + rng.uniform(-0.5, 0.5)
    if edge == 2:  # top -> downwards
        return np.array([t, 0.0]), math.pi / 2 + rng.uniform(-0.5, 0.5)
    return np.array([t, side - 1.0]), -math.pi / 2 + rng.uniform(-0.5, 0.5)


def _offset_path(path: np.ndarray, gap: float, rng) -> np.ndarray:
    """Shift a path along its local normal, with slight jitter."""
    grad = np.gradient(path, axis=0)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    tangent = grad / np.clip(norm, 1e-6, None)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    wobble = 1.0 + 0.15 * np.sin(np.linspace(0, rng.uniform(2, 5) * math.pi, len(path)))
    return path + normal * gap * wobble[:, None]


def _faz_mask(rng, side: int) -> np.ndarray:
    cx = side / 2 + rng.uniform(-0.1, 0.1) * side
    cy = side / 2 + rng.uniform(-0.1, 0.1) * side
    r0 = side * rng.uniform(0.09, 0.15)
    amp2, amp3 = rng.uniform(0.05, 0.2, size=2)
    ph2, ph3 = rng.uniform(0, 2 * math.pi, size=2)
    yy, xx = np.mgrid[0:side, 0:side]
    dx, dy = xx - cx, yy - cy
    radius = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    boundary = r0 * (1.0 + amp2 * np.sin(2 * phi + ph2) + amp3 * np.sin(3 * phi + ph3))
    return (radius <= boundary).astype(np.uint8)


def _render_layer(rng, side, base, vessel_sets, faz, weights, faz_dark=0.1):
    img = base.copy()
    img -= faz_dark * faz
    for mask, weight in zip(vessel_sets, weights):
        gain = weight * (1.0 + 0.1 * rng.standard_normal(img.shape))
        img = np.where(mask.astype(bool), np.clip(0.25 + gain, 0, 1), img)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(n_samples: int, image_side: int = 128, seed: int = 0) -> list[OctaSample]:
    """Procedural vessel trees over a noisy background.

    Arteries and veins run as adjacent pairs (possibly touching, never
    overlapping) to exercise the confusion case; other thin curves stand in
    for capillaries; the central avascular blob is the FAZ analog.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    samples = []
    for i in range(n_samples):
        rng = derive_rng(seed, "synth", i)
        side = image_side
        faz = _faz_mask(rng, side)

        artery = np.zeros((side, side), dtype=bool)
        vein = np.zeros((side, side), dtype=bool)
        other = np.zeros((side, side), dtype=bool)
        for _ in range(2):
            start, heading = _edge_start(rng, side)
            path = _walk_path(rng, side, start, heading, n_steps=int(2.5 * side))
            _stamp_path(artery, path, width=int(rng.integers(2, 4)))
            gap = rng.uniform(3.0, 5.5) * rng.choice([-1.0, 1.0])
            _stamp_path(vein, _offset_path(path, gap, rng), width=int(rng.integers(2, 4)))
        for _ in range(int(rng.integers(2, 5))):
            start, heading = _edge_start(rng, side)
            path = _walk_path(rng, side, start, heading, n_steps=int(2.0 * side))
            _stamp_path(other, path, width=1)

        clear = ~faz.astype(bool)
        artery &= clear
        vein &= clear & ~artery  # adjacency allowed, overlap removed
        other &= clear & ~artery & ~vein
        rv = artery | vein | other

        base = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, size=(side, side)), sigma=6)
        span = base.max() - base.min()
        base = 0.12 + 0.18 * (base - base.min()) / (span if span > 0 else 1.0)

        projections = {
            "full": _render_layer(rng, side, base, [artery, vein, other], faz,
                                  weights=[0.42, 0.40, 0.30]),
            "inner": _render_layer(rng, side, base, [artery, vein, other], faz,
                                   weights=[0.50, 0.28, 0.10]),
            "outer": _render_layer(rng, side, base, [artery, vein, other], faz,
                                   weights=[0.12, 0.30, 0.50], faz_dark=0.05),
        }
        labels = {
            TaskName.RV: rv.astype(np.uint8),
            TaskName.FAZ: faz.astype(np.uint8),
            TaskName.CAPILLARY: other.astype(np.uint8),
            TaskName.ARTERY: artery.astype(np.uint8),
            TaskName.VEIN: vein.astype(np.uint8),
        }
        samples.append(OctaSample(
            sample_id=f"synth_{i:04d}", fov=Fov.FOV_3M,
            projections=projections, labels=labels,
        ))
    return samples
