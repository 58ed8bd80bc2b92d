"""OCTA dataset ingestion, projection stacking, input standardization,
augmentation, and k-fold splitting.

Dataset layout on disk (one directory per field of view):

    <root>/<fov>/projections/<layer>/<id>.png   8-bit grayscale
    <root>/<fov>/labels/<task>/<id>.png         8-bit grayscale, nonzero = fg
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .seeding import derive_rng


class DatasetNotFoundError(FileNotFoundError):
    pass


class CorruptSampleError(ValueError):
    """A sample's images/masks are inconsistent; message names the sample id."""


class InputTooSmallError(ValueError):
    pass


class Fov(str, Enum):
    FOV_3M = "3M"
    FOV_6M = "6M"


class TaskName(str, Enum):
    RV = "RV"
    FAZ = "FAZ"
    CAPILLARY = "CAPILLARY"
    ARTERY = "ARTERY"
    VEIN = "VEIN"


class PromptMode(str, Enum):
    GLOBAL = "GLOBAL"
    LOCAL = "LOCAL"


#: Tasks for which single-vessel (local) prompting is defined.
LOCAL_CAPABLE_TASKS = (TaskName.ARTERY, TaskName.VEIN)

#: Per-class opposing vessel class, used to place informative negatives.
OPPOSING_TASK = {TaskName.ARTERY: TaskName.VEIN, TaskName.VEIN: TaskName.ARTERY}

#: Preferred projection layers for the 3-channel stack, in channel order.
DEFAULT_LAYERS = ("full", "inner", "outer")


@dataclass(frozen=True)
class SegTask:
    """A segmentation target plus its prompting mode."""

    name: TaskName
    mode: PromptMode = PromptMode.GLOBAL

    def __post_init__(self) -> None:
        if self.mode == PromptMode.LOCAL and self.name not in LOCAL_CAPABLE_TASKS:
            raise ValueError(
                f"local mode is only defined for {[t.value for t in LOCAL_CAPABLE_TASKS]}, "
                f"got {self.name.value}"
            )


@dataclass
class OctaSample:
    """One eye: depth projections plus per-task binary label masks.

    All projections and labels share a single H x W; projections are float32
    in [0, 1], labels are uint8 in {0, 1}.
    """

    sample_id: str
    fov: Fov
    projections: dict[str, np.ndarray]
    labels: dict[TaskName, np.ndarray]
    height: int = 0
    width: int = 0

    def __post_init__(self) -> None:
        if not self.projections:
            raise CorruptSampleError(f"sample {self.sample_id!r}: no projections")
        shapes = {a.shape for a in self.projections.values()}
        shapes |= {a.shape for a in self.labels.values()}
        if len(shapes) != 1:
            raise CorruptSampleError(
                f"sample {self.sample_id!r}: inconsistent shapes {sorted(shapes)}"
            )
        h, w = next(iter(shapes))
        if not self.height:
            self.height = int(h)
        if not self.width:
            self.width = int(w)
        if (self.height, self.width) != (h, w):
            raise CorruptSampleError(
                f"sample {self.sample_id!r}: declared {self.height}x{self.width} "
                f"but arrays are {h}x{w}"
            )
        for task, mask in self.labels.items():
            vals = np.unique(mask)
            if not np.isin(vals, (0, 1)).all():
                raise CorruptSampleError(
                    f"sample {self.sample_id!r}: {task.value} mask is not binary"
                )


@dataclass(frozen=True)
class InputTransform:
    """Invertible record of the scale+pad applied by standardize_input."""

    scale: float
    pad_right: int
    pad_bottom: int
    original_hw: tuple[int, int]

    def apply_coords(self, xy: np.ndarray) -> np.ndarray:
        """Map (x, y) coordinates from original to model input space."""
        return np.asarray(xy, dtype=np.float64) * self.scale

    def invert_coords(self, xy: np.ndarray) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) / self.scale


@dataclass
class StandardizedInput:
    """3-channel square model input plus the transform that produced it."""

    image: np.ndarray  # (3, S, S) float32
    transform: InputTransform

    @property
    def side(self) -> int:
        return self.image.shape[-1]


@dataclass(frozen=True)
class AugmentationConfig:
    """Flip / photometric / slight-rotation settings.

    Deltas are sampled uniformly in [-limit, +limit]; each transform fires
    independently with its probability.
    """

    flip_p: float = 0.5
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    photometric_p: float = 0.5
    rotation_limit: float = 15.0
    rotation_p: float = 0.5

    def __post_init__(self) -> None:
        for name in ("flip_p", "photometric_p", "rotation_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not 0.0 <= self.rotation_limit <= 30.0:
            raise ValueError(f"rotation_limit must be <= 30 deg, got {self.rotation_limit}")
        if self.brightness_limit < 0 or self.contrast_limit < 0:
            raise ValueError("brightness/contrast limits must be non-negative")


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]


# ---------------------------------------------------------------------------
# loading / saving


def _load_gray(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def load_dataset(root_path: str | Path, fov: Fov) -> list[OctaSample]:
    """Load every sample under ``<root>/<fov>`` in lexicographic id order.

    Labels are binarized (any nonzero pixel becomes foreground). A sample
    whose projections and masks disagree in shape, or that is missing a mask
    present for its siblings, raises :class:`CorruptSampleError` naming it.
    """
    base = Path(root_path) / fov.value
    proj_root = base / "projections"
    if not proj_root.is_dir():
        raise DatasetNotFoundError(f"no dataset at {base} (missing {proj_root})")
    layer_dirs = sorted(d for d in proj_root.iterdir() if d.is_dir())
    if not layer_dirs:
        raise DatasetNotFoundError(f"no projection layers under {proj_root}")
    label_root = base / "labels"
    task_dirs = {}
    if label_root.is_dir():
        for d in sorted(label_root.iterdir()):
            if d.is_dir():
                try:
                    task_dirs[TaskName(d.name.upper())] = d
                except ValueError:
                    continue  # unknown task directories are ignored

    ids = sorted(p.stem for p in layer_dirs[0].glob("*.png"))
    if not ids:
        raise DatasetNotFoundError(f"no samples under {layer_dirs[0]}")

    samples = []
    for sample_id in ids:
        projections = {}
        for layer_dir in layer_dirs:
            path = layer_dir / f"{sample_id}.png"
            if not path.is_file():
                raise CorruptSampleError(
                    f"sample {sample_id!r}: missing projection layer {layer_dir.name!r}"
                )
            projections[layer_dir.name] = (_load_gray(path) / 255.0).astype(np.float32)
        labels = {}
        for task, task_dir in task_dirs.items():
            path = task_dir / f"{sample_id}.png"
            if not path.is_file():
                raise CorruptSampleError(
                    f"sample {sample_id!r}: missing {task.value} mask"
                )
            labels[task] = (_load_gray(path) != 0).astype(np.uint8)
        shape = next(iter(projections.values())).shape
        for name, arr in [*projections.items(), *labels.items()]:
            if arr.shape != shape:
                raise CorruptSampleError(
                    f"sample {sample_id!r}: shape mismatch for {name} "
                    f"({arr.shape} vs {shape})"
                )
        samples.append(OctaSample(sample_id, fov, projections, labels))
    return samples


def save_dataset(samples: list[OctaSample], root_path: str | Path) -> Path:
    """Write samples back out in the documented PNG layout."""
    root = Path(root_path)
    for sample in samples:
        base = root / sample.fov.value
        for layer, arr in sample.projections.items():
            d = base / "projections" / layer
            d.mkdir(parents=True, exist_ok=True)
            img = Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8))
            img.save(d / f"{sample.sample_id}.png")
        for task, mask in sample.labels.items():
            d = base / "labels" / task.value.lower()
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray((mask * 255).astype(np.uint8)).save(d / f"{sample.sample_id}.png")
    return root


# ---------------------------------------------------------------------------
# stacking / standardizing


def default_layer_selection(sample: OctaSample) -> list[str]:
    """Prefer the canonical 3-layer stack; fall back to replicating one layer."""
    if all(layer in sample.projections for layer in DEFAULT_LAYERS):
        return list(DEFAULT_LAYERS)
    if "full" in sample.projections:
        return ["full"]
    return [next(iter(sample.projections))]


def stack_projections(
    sample: OctaSample, layer_selection: list[str] | None = None
) -> np.ndarray:
    """Stack selected depth projections into a (3, H, W) float32 image.

    One selected layer is replicated across all three channels; with two,
    the first is repeated; with three, channel order equals selection order.
    """
    selection = layer_selection or default_layer_selection(sample)
    if not 1 <= len(selection) <= 3:
        raise ValueError(f"select 1-3 layers, got {len(selection)}")
    unknown = [name for name in selection if name not in sample.projections]
    if unknown:
        raise KeyError(
            f"unknown layer(s) {unknown}; available: {sorted(sample.projections)}"
        )
    if len(selection) == 1:
        selection = [selection[0]] * 3
    elif len(selection) == 2:
        selection = [selection[0], selection[0], selection[1]]
    return np.stack([sample.projections[name] for name in selection]).astype(np.float32)


def standardize_input(image: np.ndarray, side: int = 1024) -> StandardizedInput:
    """Scale the longest edge to ``side`` and zero-pad right/bottom to a square.

    Aspect ratio is preserved by a single scale factor and intensities are
    untouched, so the transform record inverts losslessly.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {image.shape}")
    h, w = image.shape[1:]
    if h < 16 or w < 16:
        raise InputTooSmallError(f"input {h}x{w} is smaller than 16px per side")
    scale = side / max(h, w)
    new_h = max(1, round(h * scale))
    new_w = max(1, round(w * scale))
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    resized = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)[0]
    canvas = torch.zeros(3, side, side)
    canvas[:, :new_h, :new_w] = resized
    transform = InputTransform(
        scale=scale,
        pad_right=side - new_w,
        pad_bottom=side - new_h,
        original_hw=(h, w),
    )
    return StandardizedInput(image=canvas.numpy(), transform=transform)


def standardize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Apply the same geometry as standardize_input to one (H, W) mask.

    Returns a float32 (side, side) map; binarize with >= 0.5 where needed.
    """
    h, w = mask.shape
    scale = side / max(h, w)
    new_h = max(1, round(h * scale))
    new_w = max(1, round(w * scale))
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
    resized = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)[0, 0]
    canvas = torch.zeros(side, side)
    canvas[:new_h, :new_w] = resized
    return canvas.numpy()


def unstandardize_mask(grid: np.ndarray, transform: InputTransform) -> np.ndarray:
    """Invert standardization: crop the padding, resize back to original H x W."""
    side = grid.shape[-1]
    h, w = transform.original_hw
    crop = grid[: side - transform.pad_bottom, : side - transform.pad_right]
    t = torch.from_numpy(np.ascontiguousarray(crop, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    return out.numpy()


# ---------------------------------------------------------------------------
# augmentation


def _rotate(arr: np.ndarray, angle: float) -> np.ndarray:
    return ndimage.rotate(
        arr.astype(np.float32), angle, reshape=False, order=1,
        mode="constant", cval=0.0, prefilter=False,
    )


def augment(sample: OctaSample, config: AugmentationConfig, seed: int) -> OctaSample:
    """Apply flip/rotation to projections AND masks, photometrics to projections.

    Masks are re-binarized at 0.5 after rotation resampling. Deterministic for
    a given (seed, sample_id).
    """
    rng = derive_rng(seed, sample.sample_id)
    do_flip = rng.random() < config.flip_p
    brightness = rng.uniform(-config.brightness_limit, config.brightness_limit) \
        if rng.random() < config.photometric_p else 0.0
    contrast = rng.uniform(-config.contrast_limit, config.contrast_limit) \
        if rng.random() < config.photometric_p else 0.0
    angle = rng.uniform(-config.rotation_limit, config.rotation_limit) \
        if rng.random() < config.rotation_p else 0.0

    projections = {k: v.copy() for k, v in sample.projections.items()}
    labels = {k: v.copy() for k, v in sample.labels.items()}

    if do_flip:
        projections = {k: v[:, ::-1].copy() for k, v in projections.items()}
        labels = {k: v[:, ::-1].copy() for k, v in labels.items()}
    if angle != 0.0:
        projections = {k: _rotate(v, angle) for k, v in projections.items()}
        labels = {k: (_rotate(v, angle) >= 0.5).astype(np.uint8) for k, v in labels.items()}
    if brightness != 0.0 or contrast != 0.0:
        projections = {
            k: np.clip(v * (1.0 + contrast) + brightness, 0.0, 1.0).astype(np.float32)
            for k, v in projections.items()
        }
    return replace(sample, projections=projections, labels=labels)


# ---------------------------------------------------------------------------
# folds


def make_folds(ids: list[str], k: int, seed: int) -> list[FoldSplit]:
    """Shuffle ids and partition into k val folds of near-equal size."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ValueError(f"need at least k={k} ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    rng = derive_rng(seed, "folds")
    order = list(ids)
    rng.shuffle(order)
    chunks = np.array_split(np.asarray(order, dtype=object), k)
    folds = []
    for i, chunk in enumerate(chunks):
        val = tuple(str(s) for s in chunk)
        val_set = set(val)
        train = tuple(s for s in order if s not in val_set)
        folds.append(FoldSplit(fold_index=i, train_ids=train, val_ids=val))
    return folds
