"""Positive/negative prompt-point generation from binary label masks.

Global mode samples foreground points anywhere on the class mask; local mode
targets individual 8-connected vessel components and places negatives on the
adjacent background (preferring the opposing vessel class when it runs close).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import PromptMode
from .seeding import derive_rng

SOURCE_COMPONENT = "component"
SOURCE_BACKGROUND_BAND = "background_band"
SOURCE_OPPOSING_CLASS = "opposing_class"
SOURCE_PAD = "pad"

_SOURCES = (SOURCE_COMPONENT, SOURCE_BACKGROUND_BAND, SOURCE_OPPOSING_CLASS, SOURCE_PAD)


class NoForegroundError(ValueError):
    pass


class CannotStandardizeError(ValueError):
    pass


@dataclass(frozen=True)
class PromptPoint:
    """One (x, y, label) prompt; label 1 = foreground, 0 = background."""

    x: int
    y: int
    label: int
    source: str = SOURCE_BACKGROUND_BAND
    component: int | None = None  # component id for SOURCE_COMPONENT points

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.source not in _SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    def to_record(self) -> dict:
        source = self.source
        if self.component is not None:
            source = f"{self.source}:{self.component}"
        return {"x": int(self.x), "y": int(self.y), "label": int(self.label), "source": source}

    @classmethod
    def from_record(cls, rec: dict) -> "PromptPoint":
        source = rec.get("source", SOURCE_BACKGROUND_BAND)
        component = None
        if ":" in source:
            source, comp = source.split(":", 1)
            component = int(comp)
        return cls(x=int(rec["x"]), y=int(rec["y"]), label=int(rec["label"]),
                   source=source, component=component)


@dataclass
class PromptSet:
    """Ordered prompt points for one sample."""

    points: list[PromptPoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i):
        return self.points[i]

    def positives(self) -> list[PromptPoint]:
        return [p for p in self.points if p.label == 1]

    def negatives(self) -> list[PromptPoint]:
        return [p for p in self.points if p.label == 0]

    def coords(self) -> np.ndarray:
        """(n, 2) float64 array of (x, y)."""
        if not self.points:
            return np.zeros((0, 2), dtype=np.float64)
        return np.array([[p.x, p.y] for p in self.points], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.points], dtype=np.int64)

    def pad_flags(self) -> np.ndarray:
        return np.array([p.source == SOURCE_PAD for p in self.points], dtype=bool)

    def to_records(self) -> list[dict]:
        return [p.to_record() for p in self.points]

    @classmethod
    def from_records(cls, recs: list[dict]) -> "PromptSet":
        return cls([PromptPoint.from_record(r) for r in recs])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_records(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PromptSet":
        return cls.from_records(json.loads(Path(path).read_text()))


@dataclass
class ComponentLabeling:
    """8-connected component labels: 0 = background, 1..C in raster order."""

    label_grid: np.ndarray
    component_count: int
    component_sizes: np.ndarray  # pixel count per component, index i -> id i+1

    def component_mask(self, ids) -> np.ndarray:
        return np.isin(self.label_grid, np.atleast_1d(ids)).astype(np.uint8)


@dataclass(frozen=True)
class PromptGenConfig:
    """Point counts, negative band, and sampling seed for one generation."""

    mode: PromptMode = PromptMode.GLOBAL
    n_pos: int = 2
    n_neg: int = 2
    band: tuple[int, int] = (2, 20)
    seed: int = 0
    n_components: int = 1  # components selected per local sample
    local_supervision: str = "selected"  # or "full_mask"

    def __post_init__(self) -> None:
        if self.n_pos < 0 or self.n_neg < 0 or self.n_pos + self.n_neg < 1:
            raise ValueError("need n_pos >= 0, n_neg >= 0, n_pos + n_neg >= 1")
        d_min, d_max = self.band
        if d_min < 1 or d_max <= d_min:
            raise ValueError(f"band must satisfy 1 <= d_min < d_max, got {self.band}")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.local_supervision not in ("selected", "full_mask"):
            raise ValueError(f"unknown local_supervision {self.local_supervision!r}")


def _as_binary(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("mask must be binary (values in {0, 1})")
    return arr.astype(np.uint8)


# ---------------------------------------------------------------------------
# component labeling (two-pass union-find over row runs)


def label_components(mask: np.ndarray) -> ComponentLabeling:
    """Label 8-connected components; ids follow raster order of first pixel."""
    mask = _as_binary(mask)
    h, w = mask.shape
    label_grid = np.zeros((h, w), dtype=np.int32)

    parent: list[int] = []

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:  # path compression
            parent[a], a = root, parent[a]
        return root

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    all_runs: list[tuple[int, int, int, int]] = []  # (y, start, stop, run label)
    prev_runs: list[tuple[int, int, int]] = []  # (start, stop, run label), stop exclusive
    for y in range(h):
        row = mask[y]
        edges = np.flatnonzero(np.diff(np.concatenate(([0], row, [0])).astype(np.int8)))
        cur_runs = []
        for s, e in zip(edges[0::2], edges[1::2]):
            s, e = int(s), int(e)
            lab = len(parent)
            parent.append(lab)
            # 8-connectivity: a previous-row run [ps, pe) touches [s, e)
            # when the column intervals overlap after widening by one.
            for ps, pe, plab in prev_runs:
                if ps <= e and s <= pe:
                    union(lab, plab)
            cur_runs.append((s, e, lab))
            all_runs.append((y, s, e, lab))
        prev_runs = cur_runs

    order: dict[int, int] = {}
    sizes: list[int] = []
    for y, s, e, lab in all_runs:  # raster order: first run = first pixel
        root = find(lab)
        cid = order.get(root)
        if cid is None:
            cid = len(order) + 1
            order[root] = cid
            sizes.append(0)
        label_grid[y, s:e] = cid
        sizes[cid - 1] += e - s
    return ComponentLabeling(
        label_grid=label_grid,
        component_count=len(order),
        component_sizes=np.asarray(sizes, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# adjacency band


_STRUCT8 = np.ones((3, 3), dtype=bool)


def adjacency_band(mask: np.ndarray, d_min: int, d_max: int) -> np.ndarray:
    """Background pixels at Chebyshev distance in [d_min, d_max] from foreground."""
    if d_min < 1 or d_max <= d_min:
        raise ValueError(f"need 1 <= d_min < d_max, got ({d_min}, {d_max})")
    mask = _as_binary(mask).astype(bool)
    if not mask.any():
        return np.zeros_like(mask, dtype=np.uint8)
    within_max = ndimage.binary_dilation(mask, _STRUCT8, iterations=d_max)
    if d_min > 1:
        within_lt = ndimage.binary_dilation(mask, _STRUCT8, iterations=d_min - 1)
    else:
        within_lt = mask
    return (within_max & ~within_lt & ~mask).astype(np.uint8)


# ---------------------------------------------------------------------------
# sampling helpers


def _sample_pixels(rng, region: np.ndarray, count: int, replace_ok: bool = False):
    """Sample up to ``count`` (y, x) pixels uniformly from a binary region."""
    coords = np.argwhere(region)
    if len(coords) == 0 or count <= 0:
        return []
    if len(coords) >= count:
        idx = rng.choice(len(coords), size=count, replace=False)
    elif replace_ok:
        idx = rng.choice(len(coords), size=count, replace=True)
    else:
        idx = rng.permutation(len(coords))
    return [tuple(coords[i]) for i in np.atleast_1d(idx)]


def _negative_points(rng, mask, band_region, n_neg, opposing=None):
    """Draw negatives from the band (opposing class first), background fallback."""
    points: list[PromptPoint] = []
    pools: list[tuple[np.ndarray, str]] = []
    if opposing is not None:
        pools.append((band_region & opposing.astype(bool), SOURCE_OPPOSING_CLASS))
        pools.append((band_region & ~opposing.astype(bool), SOURCE_BACKGROUND_BAND))
    else:
        pools.append((band_region, SOURCE_BACKGROUND_BAND))
    pools.append((~mask.astype(bool), SOURCE_BACKGROUND_BAND))  # fallback: any background
    taken = np.zeros_like(mask, dtype=bool)
    for pool, source in pools:
        if len(points) >= n_neg:
            break
        avail = pool & ~taken
        for y, x in _sample_pixels(rng, avail, n_neg - len(points)):
            points.append(PromptPoint(x=int(x), y=int(y), label=0, source=source))
            taken[y, x] = True
    return points


# ---------------------------------------------------------------------------
# generation


def generate_global(mask: np.ndarray, config: PromptGenConfig) -> PromptSet:
    """Sample n_pos foreground and n_neg band-background points for a class mask."""
    if config.mode != PromptMode.GLOBAL:
        raise ValueError(f"config.mode must be GLOBAL, got {config.mode.value}")
    mask = _as_binary(mask)
    rng = derive_rng(config.seed, "global")
    if config.n_pos > 0 and not mask.any():
        raise NoForegroundError("mask has no foreground to sample positive points from")

    points: list[PromptPoint] = []
    if config.n_pos > 0:
        labeling = label_components(mask)
        for y, x in _sample_pixels(rng, mask.astype(bool), config.n_pos):
            points.append(PromptPoint(
                x=int(x), y=int(y), label=1, source=SOURCE_COMPONENT,
                component=int(labeling.label_grid[y, x]),
            ))
    band = adjacency_band(mask, *config.band).astype(bool) if mask.any() \
        else ~mask.astype(bool)
    points.extend(_negative_points(rng, mask, band, config.n_neg))

    prompt_set = PromptSet(points)
    target = config.n_pos + config.n_neg
    if len(prompt_set) < target:
        prompt_set = standardize_points(prompt_set, target, mask, config)
    return prompt_set


def select_local_target(
    target_mask: np.ndarray, config: PromptGenConfig,
    rng: np.random.Generator | None = None,
) -> tuple[ComponentLabeling, list[int]]:
    """Pick the component(s) a local prompt round targets.

    Shared by point generation and by prompt-free evaluation so both see the
    same supervision mask for a given seed. Components smaller than n_pos are
    skipped while larger ones exist.
    """
    mask = _as_binary(target_mask)
    if not mask.any():
        raise NoForegroundError("target mask has no foreground")
    if rng is None:
        rng = derive_rng(config.seed, "local")
    labeling = label_components(mask)
    eligible = [i + 1 for i in range(labeling.component_count)
                if labeling.component_sizes[i] >= config.n_pos]
    if not eligible:
        eligible = list(range(1, labeling.component_count + 1))
    count = min(config.n_components, len(eligible))
    selected = sorted(int(i) for i in rng.choice(eligible, size=count, replace=False))
    return labeling, selected


def generate_local(
    target_mask: np.ndarray,
    opposing_mask: np.ndarray | None,
    config: PromptGenConfig,
) -> tuple[PromptSet, np.ndarray]:
    """Prompt a randomly selected vessel component; negatives hug its outline.

    Returns the prompt set and the local supervision target (the selected
    component(s) by default, or the full class mask when configured so).
    """
    if config.mode != PromptMode.LOCAL:
        raise ValueError(f"config.mode must be LOCAL, got {config.mode.value}")
    mask = _as_binary(target_mask)
    opposing = _as_binary(opposing_mask) if opposing_mask is not None else None
    rng = derive_rng(config.seed, "local")
    labeling, selected = select_local_target(mask, config, rng)
    component_region = labeling.component_mask(selected)

    points: list[PromptPoint] = []
    if config.n_pos > 0:
        pixels = _sample_pixels(rng, component_region.astype(bool), config.n_pos,
                                replace_ok=True)
        for y, x in pixels:
            points.append(PromptPoint(
                x=int(x), y=int(y), label=1, source=SOURCE_COMPONENT,
                component=int(labeling.label_grid[y, x]),
            ))
    # keep negatives off every target-class vessel, selected or not
    band = adjacency_band(component_region, *config.band).astype(bool) & ~mask.astype(bool)
    points.extend(_negative_points(rng, mask, band, config.n_neg, opposing=opposing))

    prompt_set = PromptSet(points)
    target = config.n_pos + config.n_neg
    if len(prompt_set) < target:
        prompt_set = standardize_points(prompt_set, target, mask, config)
    local_target = mask if config.local_supervision == "full_mask" else component_region
    return prompt_set, local_target


def standardize_points(
    points: PromptSet, target_count: int, mask: np.ndarray, config: PromptGenConfig
) -> PromptSet:
    """Pad a prompt set to an exact length with PAD negatives from the band."""
    if target_count < len(points):
        raise ValueError(
            f"target_count {target_count} is below current size {len(points)}"
        )
    need = target_count - len(points)
    if need == 0:
        return PromptSet(list(points.points))
    mask = _as_binary(mask)
    rng = derive_rng(config.seed, "standardize")
    band = adjacency_band(mask, *config.band).astype(bool) if mask.any() else None
    pool = band if band is not None and band.any() else ~mask.astype(bool)
    if not pool.any():
        raise CannotStandardizeError("no background available to pad negatives from")
    pixels = _sample_pixels(rng, pool, need, replace_ok=True)
    padded = list(points.points)
    padded.extend(
        PromptPoint(x=int(x), y=int(y), label=0, source=SOURCE_PAD) for y, x in pixels
    )
    return PromptSet(padded)
