"""
Plain ViT Image Encoder
Single-scale encoder whose only output is the last-stage map at 1/patch_size resolution
"""

import logging
import math
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from api_models import BackboneInit, EncoderConfig
from errors import DimensionError, InputError, WeightLoadError

logger = logging.getLogger(__name__)

# SAM normalizes 0..255 pixels with these statistics; images here arrive in [0, 1]
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)

# (pattern, replacement) applied in order; external naming -> internal naming
KEY_REMAP_TABLES: Dict[str, List[Tuple[str, str]]] = {
    "internal": [],
    "generic": [],
    "sam": [
        (r"^image_encoder\.", ""),
        (r"^(blocks\.\d+\.mlp)\.lin1\.", r"\1.fc1."),
        (r"^(blocks\.\d+\.mlp)\.lin2\.", r"\1.fc2."),
        (r"^neck\.0\.", "neck.conv1."),
        (r"^neck\.1\.", "neck.norm1."),
        (r"^neck\.2\.", "neck.conv2."),
        (r"^neck\.3\.", "neck.norm2."),
    ],
}
KEY_REMAP_TABLES["mobile_sam"] = KEY_REMAP_TABLES["sam"]

# Keys that exist in external checkpoints but have no internal counterpart
IGNORED_KEY_PATTERNS: Dict[str, List[str]] = {
    "internal": [],
    "generic": [r"^cls_token$", r"^head\.", r"^fc_norm\.", r"^norm\.", r"^dist_token$", r"^head_dist\."],
    "sam": [r"^prompt_encoder\.", r"^mask_decoder\.", r"\.attn\.rel_pos_[hw]$"],
}
IGNORED_KEY_PATTERNS["mobile_sam"] = IGNORED_KEY_PATTERNS["sam"]


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection"""

    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # B C H W -> B h w C
        return self.proj(x).permute(0, 2, 3, 1)


class Attention(nn.Module):
    """Global multi-head self-attention over all tokens"""

    def __init__(self, dim: int, num_heads: int, qkv_bias: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class MLPBlock(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block"""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, qkv_bias: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads, qkv_bias=qkv_bias)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dim of a B C H W map"""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class Neck(nn.Module):
    """SAM-style neck: 1x1 conv, LN, 3x3 conv, LN"""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_dim, out_dim, kernel_size=1, bias=False)
        self.norm1 = LayerNorm2d(out_dim)
        self.conv2 = nn.Conv2d(out_dim, out_dim, kernel_size=3, padding=1, bias=False)
        self.norm2 = LayerNorm2d(out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm2(self.conv2(self.norm1(self.conv1(x))))


def resize_pos_embed(pos_embed: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample a 1 x h x w x C positional table to a new grid"""
    if tuple(pos_embed.shape[1:3]) == tuple(grid):
        return pos_embed
    resized = F.interpolate(pos_embed.permute(0, 3, 1, 2), size=grid, mode="bilinear", align_corners=False)
    return resized.permute(0, 2, 3, 1)


class ViTEncoder(nn.Module):
    """
    Non-hierarchical ViT encoder.

    Input: B x 3 x H x W images in [0, 1].
    Output: B x C x H/p x W/p feature map, C = embed_dim (or neck_dim with the neck kept).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_size = cfg.patch_size
        self.patch_embed = PatchEmbed(cfg.patch_size, 3, cfg.embed_dim)
        grid = cfg.grid_size
        self.pos_embed = nn.Parameter(torch.zeros(1, grid, grid, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.qkv_bias) for _ in range(cfg.depth)]
        )
        self.neck = Neck(cfg.embed_dim, cfg.neck_dim) if cfg.keep_neck else None
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise DimensionError(f"Expected B x 3 x H x W images, got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        if H % self.patch_size != 0 or W % self.patch_size != 0:
            raise DimensionError(f"Image size {H}x{W} is not divisible by patch size {self.patch_size}")
        if not torch.isfinite(images).all():
            raise InputError("Image contains NaN or infinite values")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self.check_input(images)
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        x = self.patch_embed(x)
        B, h, w, C = x.shape
        x = x + resize_pos_embed(self.pos_embed, (h, w))
        x = x.reshape(B, h * w, C)
        for block in self.blocks:
            x = block(x)
        x = x.transpose(1, 2).reshape(B, C, h, w)
        if self.neck is not None:
            x = self.neck(x)
        return x


def to_image_tensor(image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """
    Accept H x W x 3 arrays, 3 x H x W or B x 3 x H x W tensors; return a float
    B x 3 x H x W tensor clipped to [0, 1].
    """
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[-1] != 3:
            raise DimensionError(f"Expected an H x W x 3 array, got {image.shape}")
        tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
    else:
        tensor = image if image.is_floating_point() else image.float()
    if tensor.dim() == 3:
        tensor = tensor.unsqueeze(0)
    if torch.isnan(tensor).any():
        raise InputError("Image contains NaN values")
    return tensor.clamp(0.0, 1.0)


def build_encoder(cfg: EncoderConfig, seed: Optional[int] = None) -> ViTEncoder:
    """Build a randomly initialised encoder; a seed makes the init reproducible"""
    if seed is None:
        return ViTEncoder(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ViTEncoder(cfg)


@torch.no_grad()
def encode(image: Union[np.ndarray, torch.Tensor], cfg: EncoderConfig,
           encoder: Optional[ViTEncoder] = None, seed: int = 0) -> torch.Tensor:
    """Encode one image (or a batch) to its B x C x H/p x W/p feature map"""
    if encoder is None:
        encoder = build_encoder(cfg, seed=seed)
    encoder.eval()
    images = to_image_tensor(image).to(next(encoder.parameters()).dtype)
    return encoder(images)


def save_encoder(encoder: ViTEncoder, path: Union[str, Path]) -> Path:
    """Write encoder parameters as a flat name -> tensor container"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({k: v.detach().clone() for k, v in encoder.state_dict().items()}, path)
    logger.info("Encoder weights saved to %s", path)
    return path


def _flatten_checkpoint(raw) -> Dict[str, torch.Tensor]:
    for key in ("model", "state_dict", "encoder"):
        if isinstance(raw, dict) and key in raw and isinstance(raw[key], dict):
            raw = raw[key]
    if not isinstance(raw, dict):
        raise WeightLoadError("Weight file does not contain a tensor map")
    return {k: v for k, v in raw.items() if isinstance(v, torch.Tensor)}


def resolve_weights_format(cfg: EncoderConfig) -> str:
    if cfg.weights_format:
        if cfg.weights_format not in KEY_REMAP_TABLES:
            raise WeightLoadError(f"Unknown weights format '{cfg.weights_format}'")
        return cfg.weights_format
    return {
        BackboneInit.RANDOM: "internal",
        BackboneInit.GENERIC: "generic",
        BackboneInit.SAM: "sam",
    }[cfg.init]


def remap_state_dict(state: Dict[str, torch.Tensor], weights_format: str,
                     keep_neck: bool) -> Tuple[Dict[str, torch.Tensor], List[str]]:
    """Translate external key names; returns (remapped, ignored keys)"""
    remapped: Dict[str, torch.Tensor] = {}
    ignored: List[str] = []
    patterns = IGNORED_KEY_PATTERNS[weights_format]
    for key, tensor in state.items():
        if any(re.search(p, key) for p in patterns):
            ignored.append(key)
            continue
        new_key = key
        for pattern, replacement in KEY_REMAP_TABLES[weights_format]:
            new_key = re.sub(pattern, replacement, new_key)
        if new_key.startswith("neck.") and not keep_neck:
            ignored.append(key)
            continue
        if new_key == "pos_embed" and tensor.dim() == 3:
            # 1 x (extra + N) x C table; leading class/distillation slots are dropped
            side = math.isqrt(tensor.shape[1])
            tensor = tensor[:, tensor.shape[1] - side * side:].reshape(1, side, side, tensor.shape[-1])
        remapped[new_key] = tensor
    return remapped, ignored


def load_pretrained(weights_path: Union[str, Path], cfg: EncoderConfig,
                    encoder: Optional[ViTEncoder] = None) -> ViTEncoder:
    """
    Load external encoder weights into a model built from cfg.

    Positional tables of a different grid are bilinearly resampled; any other
    missing, unexpected or wrongly shaped key aborts with WeightLoadError.
    """
    weights_path = Path(weights_path)
    if not weights_path.exists():
        raise FileNotFoundError(f"Encoder weights not found: {weights_path}")

    weights_format = resolve_weights_format(cfg)
    raw = torch.load(weights_path, map_location="cpu")
    state, ignored = remap_state_dict(_flatten_checkpoint(raw), weights_format, cfg.keep_neck)

    encoder = encoder if encoder is not None else ViTEncoder(cfg)
    expected = encoder.state_dict()

    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    if missing or unexpected:
        raise WeightLoadError(
            f"Key schema mismatch ({len(missing)} missing, {len(unexpected)} unexpected)",
            missing + unexpected,
        )

    mismatched = []
    for key, tensor in state.items():
        target = expected[key]
        if key == "pos_embed" and tensor.dim() == 4 and tensor.shape[-1] == target.shape[-1]:
            state[key] = resize_pos_embed(tensor.to(target.dtype), tuple(target.shape[1:3]))
            continue
        if tuple(tensor.shape) != tuple(target.shape):
            mismatched.append(f"{key} {tuple(tensor.shape)} != {tuple(target.shape)}")
    if mismatched:
        raise WeightLoadError("Shape mismatch", mismatched)

    encoder.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items()}, strict=True)
    if ignored:
        logger.info("Ignored %d checkpoint keys without an encoder counterpart: %s",
                    len(ignored), ", ".join(ignored[:8]) + (" ..." if len(ignored) > 8 else ""))
    logger.info("Loaded %s encoder weights from %s", weights_format, weights_path)
    return encoder
