"""SAM-style promptable segmentation model at configurable scale.

A patch-transformer image encoder, a point-prompt encoder, and a lightweight
two-way mask decoder producing k candidate masks with confidence scores.
LoRA adapters can be injected into the encoder's attention projections; the
base weights are then frozen and checkpoints carry only adapter state.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import StandardizedInput
from .prompts import PromptSet


class ShapeMismatchError(ValueError):
    pass


class OutOfBoundsPointError(ValueError):
    pass


class AlreadyAdaptedError(RuntimeError):
    pass


class IncompatibleCheckpointError(RuntimeError):
    pass


PROJECTION_NAMES = ("query", "key", "value", "output")
_PROJ_ATTR = {"query": "q_proj", "key": "k_proj", "value": "v_proj", "output": "out_proj"}

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 1024
    patch_size: int = 16
    embed_dim: int = 768
    encoder_depth: int = 12
    num_heads: int = 12
    decoder_mask_count: int = 3
    decoder_depth: int = 2
    scale_preset: str = "custom"
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.input_side % self.patch_size != 0:
            raise ValueError("input_side must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.decoder_mask_count < 1:
            raise ValueError("decoder_mask_count must be >= 1")

    @property
    def grid_side(self) -> int:
        return self.input_side // self.patch_size

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()


_PRESETS = {
    "desk": dict(input_side=128, patch_size=16, embed_dim=128, encoder_depth=4,
                 num_heads=4, decoder_mask_count=3),
    "vit_b_like": dict(input_side=1024, patch_size=16, embed_dim=768,
                       encoder_depth=12, num_heads=12, decoder_mask_count=3),
    "vit_h_like": dict(input_side=1024, patch_size=16, embed_dim=1280,
                       encoder_depth=32, num_heads=16, decoder_mask_count=3),
}


def model_config(preset: str = "desk", **overrides) -> ModelConfig:
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
    params = dict(_PRESETS[preset], scale_preset=preset)
    params.update(overrides)
    return ModelConfig(**params)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float | None = None  # defaults to rank
    target_projections: tuple[str, ...] = ("query", "value")
    adapt_every_block: bool = True
    unfreeze_mask_decoder: bool = False

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not self.target_projections:
            raise ValueError("target_projections must be nonempty")
        unknown = set(self.target_projections) - set(PROJECTION_NAMES)
        if unknown:
            raise ValueError(f"unknown projections {sorted(unknown)}")

    @property
    def scaling_alpha(self) -> float:
        return self.alpha if self.alpha is not None else float(self.rank)


# ---------------------------------------------------------------------------
# building blocks


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/output linears (LoRA targets)."""

    def __init__(self, embed_dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, query: torch.Tensor, keyval: torch.Tensor | None = None) -> torch.Tensor:
        keyval = query if keyval is None else keyval
        b, nq, d = query.shape
        q = self.q_proj(query).view(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keyval).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(keyval).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = attn.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, nq, d)
        return self.out_proj(out)


class MLPBlock(nn.Module):
    def __init__(self, embed_dim: int, hidden: int) -> None:
        super().__init__()
        self.lin1 = nn.Linear(embed_dim, hidden)
        self.lin2 = nn.Linear(hidden, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(F.gelu(self.lin1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, embed_dim: int, num_heads: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(embed_dim)
        self.attn = Attention(embed_dim, num_heads)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.mlp = MLPBlock(embed_dim, embed_dim * 4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.patch_embed = nn.Conv2d(3, config.embed_dim,
                                     kernel_size=config.patch_size,
                                     stride=config.patch_size)
        n_tokens = config.grid_side ** 2
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, config.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.embed_dim, config.num_heads)
            for _ in range(config.encoder_depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(images)  # (B, D, h, w)
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class PromptEncoder(nn.Module):
    """Maps (x, y, label) points to tokens: Fourier position code + label embedding."""

    LABEL_NEGATIVE, LABEL_POSITIVE, LABEL_PAD = 0, 1, 2

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.input_side = config.input_side
        half = config.embed_dim // 2
        self.register_buffer("pe_gaussian", torch.randn(2, half))
        self.label_embed = nn.Embedding(3, config.embed_dim)

    def _position_encoding(self, coords01: torch.Tensor) -> torch.Tensor:
        proj = (2.0 * coords01 - 1.0) @ self.pe_gaussian * (2.0 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def forward(self, coords: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """coords (B, n, 2) in model-input pixels, labels (B, n) in {0, 1, 2}."""
        pe = self._position_encoding(coords / self.input_side)
        return pe + self.label_embed(labels)

    def dense_grid_encoding(self, grid_side: int) -> torch.Tensor:
        """(grid_side**2, D) positional code of patch centers, for the decoder."""
        device = self.pe_gaussian.device
        centers = (torch.arange(grid_side, device=device, dtype=torch.float32) + 0.5) / grid_side
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        coords01 = torch.stack([xx, yy], dim=-1).reshape(-1, 2)
        return self._position_encoding(coords01)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, embed_dim: int, num_heads: int) -> None:
        super().__init__()
        self.self_attn = Attention(embed_dim, num_heads)
        self.norm1 = nn.LayerNorm(embed_dim)
        self.cross_t2i = Attention(embed_dim, num_heads)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.mlp = MLPBlock(embed_dim, embed_dim * 4)
        self.norm3 = nn.LayerNorm(embed_dim)
        self.cross_i2t = Attention(embed_dim, num_heads)
        self.norm4 = nn.LayerNorm(embed_dim)

    def forward(self, tokens, image, image_pe):
        tokens = tokens + self.self_attn(self.norm1(tokens))
        tokens = tokens + self.cross_t2i(self.norm2(tokens), image + image_pe)
        tokens = tokens + self.mlp(self.norm3(tokens))
        image = image + self.cross_i2t(self.norm4(image), tokens)
        return tokens, image


class SmallMLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, depth: int = 3) -> None:
        super().__init__()
        dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class ImageStem(nn.Module):
    """Half-resolution conv features of the raw image, fused into the mask head.

    Gives the decoder a fine-grained intensity path that the 16px token grid
    cannot carry; computed once per image alongside the embedding.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d8 = config.embed_dim // 8
        self.conv1 = nn.Conv2d(3, d8, kernel_size=5, stride=2, padding=2)
        self.conv2 = nn.Conv2d(d8, d8, kernel_size=3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.gelu(self.conv1(images)))


class MaskDecoder(nn.Module):
    """Two-way transformer decoding k mask logit grids plus confidences."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d = config.embed_dim
        self.mask_count = config.decoder_mask_count
        self.mask_tokens = nn.Embedding(self.mask_count, d)
        self.conf_token = nn.Embedding(1, d)
        self.image_stem = ImageStem(config)
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, config.num_heads) for _ in range(config.decoder_depth)
        )
        self.final_cross = Attention(d, config.num_heads)
        self.final_norm = nn.LayerNorm(d)
        # x8 spatial upscale so thin structures survive the final resize to S
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d // 4, kernel_size=2, stride=2),
            LayerNorm2d(d // 4),
            nn.GELU(),
            nn.ConvTranspose2d(d // 4, d // 8, kernel_size=2, stride=2),
            nn.GELU(),
            nn.ConvTranspose2d(d // 8, d // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.mask_mlps = nn.ModuleList(
            SmallMLP(d, d, d // 8) for _ in range(self.mask_count)
        )
        # point prompts rasterized as gaussian bumps (pos/neg channels) give the
        # mask head sub-patch-resolution prompt position information
        self.splat_conv = nn.Conv2d(2, d // 8, kernel_size=3, padding=1)
        # negative bias so untrained masks start near-empty; foreground is sparse
        self.mask_bias = nn.Parameter(torch.full((self.mask_count,), -4.0))
        self.conf_head = SmallMLP(d, d, self.mask_count)

    def _splat_points(self, coords, labels, spatial, input_side):
        """Gaussian point maps at feature resolution: (B, 2, h, w), pos then neg."""
        b = coords.shape[0]
        h, w = spatial
        maps = torch.zeros(b, 2, h, w, device=coords.device)
        if coords.shape[1] == 0:
            return maps
        sigma = max(2.0, h / 32.0)
        scale = h / input_side
        cx = coords[..., 0] * scale
        cy = coords[..., 1] * scale
        xs = torch.arange(w, device=coords.device, dtype=torch.float32)
        ys = torch.arange(h, device=coords.device, dtype=torch.float32)
        gx = torch.exp(-((xs[None, None] - cx[..., None]) ** 2) / (2 * sigma ** 2))
        gy = torch.exp(-((ys[None, None] - cy[..., None]) ** 2) / (2 * sigma ** 2))
        bumps = gy[..., :, None] * gx[..., None, :]  # (B, n, h, w)
        positive = labels == 1
        for channel, selector in enumerate([positive, ~positive]):
            sel = bumps * selector[..., None, None]
            maps[:, channel] = sel.amax(dim=1)
        return maps

    def forward(self, image_emb, image_pe, prompt_tokens, grid_side, output_side,
                stem_features=None):
        b = image_emb.shape[0]
        fixed = torch.cat([self.mask_tokens.weight, self.conf_token.weight], dim=0)
        tokens = fixed[None].expand(b, -1, -1)
        if prompt_tokens is not None and prompt_tokens.shape[1] > 0:
            tokens = torch.cat([tokens, prompt_tokens], dim=1)
        image = image_emb
        pe = image_pe[None].expand(b, -1, -1)
        for block in self.blocks:
            tokens, image = block(tokens, image, pe)
        tokens = tokens + self.final_cross(self.final_norm(tokens), image + pe)

        feat = image.transpose(1, 2).reshape(b, -1, grid_side, grid_side)
        up = self.upscale(feat)  # (B, D/8, 8h, 8w)
        if stem_features is not None:
            if stem_features.shape[-2:] != up.shape[-2:]:
                stem_features = F.interpolate(stem_features, size=up.shape[-2:],
                                              mode="bilinear", align_corners=False)
            up = up + stem_features
        masks = []
        for i, mlp in enumerate(self.mask_mlps):
            weights = mlp(tokens[:, i])  # (B, D/8)
            masks.append(torch.einsum("bc,bchw->bhw", weights, up) + self.mask_bias[i])
        logits = torch.stack(masks, dim=1)
        if logits.shape[-1] != output_side:
            logits = F.interpolate(logits, size=(output_side, output_side),
                                   mode="bilinear", align_corners=False)
        confidences = torch.sigmoid(self.conf_head(tokens[:, self.mask_count]))
        return logits, confidences


class PromptableSegmenter(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.mask_decoder = MaskDecoder(config)
        self._lora_injected = False

    def forward(self, images, coords=None, labels=None):
        """images (B,3,S,S); coords (B,n,2); labels (B,n) in {0 neg, 1 pos, 2 pad}."""
        emb = self.image_encoder(images)
        stem = self.mask_decoder.image_stem(images)
        if coords is not None and coords.shape[1] > 0:
            prompt_tokens = self.prompt_encoder(coords.float(), labels)
        else:
            prompt_tokens = None
        pe = self.prompt_encoder.dense_grid_encoding(self.config.grid_side)
        return self.mask_decoder(
            emb, pe, prompt_tokens, self.config.grid_side, self.config.input_side,
            stem_features=stem,
        )


def build_model(config: ModelConfig) -> PromptableSegmenter:
    """Construct with deterministic random init from config.init_seed."""
    with torch.random.fork_rng():
        torch.manual_seed(config.init_seed)
        return PromptableSegmenter(config)


def load_base_weights(model: PromptableSegmenter, path: str | Path) -> PromptableSegmenter:
    """Load a full base state dict (optional pretrained weights)."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# LoRA


class LoraLinear(nn.Module):
    """base(x) + (alpha/r) * B @ A @ x with A gaussian-init and B zero-init."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float) -> None:
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scaling


class AdaptedModel:
    """A frozen base segmenter plus trainable LoRA adapter state."""

    def __init__(self, model: PromptableSegmenter, model_config: ModelConfig,
                 lora_config: LoraConfig) -> None:
        self.model = model
        self.model_config = model_config
        self.lora_config = lora_config

    def __call__(self, *args, **kwargs):
        return self.model(*args, **kwargs)

    def eval(self) -> "AdaptedModel":
        self.model.eval()
        return self

    def train(self, mode: bool = True) -> "AdaptedModel":
        self.model.train(mode)
        return self

    def adapter_named_parameters(self):
        for name, param in self.model.named_parameters():
            if "lora_a" in name or "lora_b" in name:
                yield name, param

    def extra_trainable_named_parameters(self):
        """Non-adapter parameters deliberately unfrozen (e.g. the mask decoder)."""
        for name, param in self.model.named_parameters():
            if param.requires_grad and "lora_a" not in name and "lora_b" not in name:
                yield name, param

    def trainable_parameters(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def adapter_parameter_count(self) -> int:
        return sum(p.numel() for _, p in self.adapter_named_parameters())

    def base_state_snapshot(self) -> dict[str, torch.Tensor]:
        """Bitwise copy of every non-adapter parameter, for freeze checks."""
        return {
            name: p.detach().clone()
            for name, p in self.model.named_parameters()
            if "lora_a" not in name and "lora_b" not in name
        }


def inject_lora(model: PromptableSegmenter, lora_config: LoraConfig) -> AdaptedModel:
    """Install adapters on the encoder attention projections and freeze the base."""
    if getattr(model, "_lora_injected", False):
        raise AlreadyAdaptedError("model already has LoRA adapters installed")
    for param in model.parameters():
        param.requires_grad_(False)
    blocks = list(model.image_encoder.blocks)
    if not lora_config.adapt_every_block:
        blocks = blocks[-1:]
    alpha = lora_config.scaling_alpha
    for block in blocks:
        for proj in lora_config.target_projections:
            attr = _PROJ_ATTR[proj]
            base = getattr(block.attn, attr)
            setattr(block.attn, attr, LoraLinear(base, lora_config.rank, alpha))
    if lora_config.unfreeze_mask_decoder:
        for param in model.mask_decoder.parameters():
            param.requires_grad_(True)
    model._lora_injected = True
    return AdaptedModel(model, model.config, lora_config)


# ---------------------------------------------------------------------------
# op-level inference surface


@dataclass
class ImageEmbedding:
    tokens: torch.Tensor  # (1, N, D) patch-token grid
    grid_side: int
    config_digest: str
    stem: torch.Tensor | None = None  # (1, D/8, S/2, S/2) fine-intensity features


@dataclass
class SparsePromptEmbedding:
    tokens: torch.Tensor  # (1, n, D)
    config_digest: str


@dataclass
class MaskPrediction:
    mask_logits: torch.Tensor  # (k, S, S)
    confidences: torch.Tensor  # (k,)

    def __post_init__(self) -> None:
        if self.mask_logits.shape[0] != self.confidences.shape[0]:
            raise ValueError("number of masks must equal number of confidences")


def prompt_tensors(points: PromptSet, side: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(1, n, 2) coords and (1, n) label indices (PAD points get the PAD index)."""
    coords = points.coords()
    for i, (x, y) in enumerate(coords):
        if not (0 <= x < side and 0 <= y < side):
            raise OutOfBoundsPointError(
                f"point {i} at ({x:g}, {y:g}) is outside [0, {side})^2"
            )
    labels = points.labels().copy()
    labels[points.pad_flags()] = PromptEncoder.LABEL_PAD
    return (
        torch.from_numpy(coords).float()[None],
        torch.from_numpy(labels).long()[None],
    )


def encode_image(std_input: StandardizedInput, model: AdaptedModel) -> ImageEmbedding:
    side = model.model_config.input_side
    if std_input.side != side:
        raise ShapeMismatchError(
            f"expected input side {side}, got {std_input.side}"
        )
    images = torch.from_numpy(std_input.image)[None]
    tokens = model.model.image_encoder(images)
    stem = model.model.mask_decoder.image_stem(images)
    return ImageEmbedding(tokens=tokens, grid_side=model.model_config.grid_side,
                          config_digest=model.model_config.digest(), stem=stem)


def encode_prompts(points: PromptSet, model: AdaptedModel) -> SparsePromptEmbedding:
    coords, labels = prompt_tensors(points, model.model_config.input_side)
    if coords.shape[1] == 0:
        tokens = torch.zeros(1, 0, model.model_config.embed_dim)
    else:
        tokens = model.model.prompt_encoder(coords, labels)
    return SparsePromptEmbedding(tokens=tokens, config_digest=model.model_config.digest())


def encode_prompt_arrays(coords: np.ndarray, labels: np.ndarray,
                         model: AdaptedModel) -> SparsePromptEmbedding:
    """Encode raw model-space (x, y) coordinates with {0, 1, 2} label indices."""
    side = model.model_config.input_side
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    for i, (x, y) in enumerate(coords):
        if not (0 <= x < side and 0 <= y < side):
            raise OutOfBoundsPointError(
                f"point {i} at ({x:g}, {y:g}) is outside [0, {side})^2"
            )
    if len(coords) == 0:
        tokens = torch.zeros(1, 0, model.model_config.embed_dim)
    else:
        tokens = model.model.prompt_encoder(
            torch.from_numpy(coords).float()[None],
            torch.from_numpy(np.asarray(labels, dtype=np.int64))[None],
        )
    return SparsePromptEmbedding(tokens=tokens, config_digest=model.model_config.digest())


def decode_masks(image_emb: ImageEmbedding, prompt_emb: SparsePromptEmbedding | None,
                 model: AdaptedModel) -> MaskPrediction:
    cfg = model.model_config
    if image_emb.config_digest != cfg.digest():
        raise ShapeMismatchError("image embedding comes from a different model config")
    if prompt_emb is not None and prompt_emb.config_digest != cfg.digest():
        raise ShapeMismatchError("prompt embedding comes from a different model config")
    if image_emb.tokens.shape[1] != cfg.grid_side ** 2 \
            or image_emb.tokens.shape[2] != cfg.embed_dim:
        raise ShapeMismatchError(
            f"image embedding shape {tuple(image_emb.tokens.shape)} does not match "
            f"config (N={cfg.grid_side ** 2}, D={cfg.embed_dim})"
        )
    pe = model.model.prompt_encoder.dense_grid_encoding(cfg.grid_side)
    prompt_tokens = prompt_emb.tokens if prompt_emb is not None else None
    logits, confidences = model.model.mask_decoder(
        image_emb.tokens, pe, prompt_tokens, cfg.grid_side, cfg.input_side,
        stem_features=image_emb.stem,
    )
    return MaskPrediction(mask_logits=logits[0], confidences=confidences[0])


def select_best(pred: MaskPrediction) -> tuple[torch.Tensor, float]:
    """Highest-confidence mask; ties break to the lowest index."""
    conf = pred.confidences.detach().cpu().numpy()
    idx = int(np.argmax(conf))
    return pred.mask_logits[idx], float(conf[idx])


# ---------------------------------------------------------------------------
# adapter checkpoints


def save_adapter(adapted: AdaptedModel, path: str | Path) -> Path:
    """Write adapter parameters (plus any unfrozen decoder state) and configs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(adapted.model_config),
        "model_config_digest": adapted.model_config.digest(),
        "lora_config": asdict(adapted.lora_config),
        "adapter_state": {
            name: p.detach().cpu().clone()
            for name, p in adapted.adapter_named_parameters()
        },
        "extra_state": {
            name: p.detach().cpu().clone()
            for name, p in adapted.extra_trainable_named_parameters()
        },
    }
    torch.save(payload, path)
    return path


def _read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"unsupported checkpoint format version {version!r}"
        )
    return payload


def load_adapter(adapted: AdaptedModel, path: str | Path) -> AdaptedModel:
    """Load adapter state into an already-adapted model with matching configs."""
    payload = _read_checkpoint(path)
    if payload["model_config_digest"] != adapted.model_config.digest() \
            or payload["lora_config"] != asdict(adapted.lora_config):
        raise IncompatibleCheckpointError(
            "checkpoint configs do not match the model:\n"
            f"  checkpoint model_config: {payload['model_config']}\n"
            f"  model     model_config: {asdict(adapted.model_config)}\n"
            f"  checkpoint lora_config: {payload['lora_config']}\n"
            f"  model     lora_config: {asdict(adapted.lora_config)}"
        )
    state = dict(payload["adapter_state"])
    state.update(payload["extra_state"])
    params = dict(adapted.model.named_parameters())
    missing = set(state) - set(params)
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint has unknown parameters: {sorted(missing)}")
    with torch.no_grad():
        for name, tensor in state.items():
            params[name].copy_(tensor)
    return adapted


def load_checkpoint(path: str | Path) -> AdaptedModel:
    """Rebuild the base model from the stored configs and load adapter state."""
    payload = _read_checkpoint(path)
    config = ModelConfig(**payload["model_config"])
    lora_config = LoraConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in payload["lora_config"].items()
    })
    adapted = inject_lora(build_model(config), lora_config)
    return load_adapter(adapted, path)
