"""
Transformer Mask Decoder
Refines queries against flattened C3/C4/C5 memory; every layer emits masks as the
dot product of its queries with the C2 pixel-embedding map
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from api_models import DecoderConfig
from errors import DimensionError


@dataclass
class LayerPrediction:
    mask_logits: torch.Tensor  # B x N x 4h x 4w
    class_logits: torch.Tensor  # B x N x 2, [glass, no-object]
    boxes: torch.Tensor  # B x N x 4, normalized cxcywh
    mask_queries: torch.Tensor  # B x N x d, the vectors multiplied with C2


@dataclass
class MaskPrediction:
    """One LayerPrediction per decoder layer, first to last"""
    layers: List[LayerPrediction]

    @property
    def last(self) -> LayerPrediction:
        return self.layers[-1]

    def __len__(self) -> int:
        return len(self.layers)


def sine_encode(coords: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """
    Sinusoidal encoding of normalized (x, y) coords, ... x 2 -> ... x dim.

    Half the channels encode y, half x; each half interleaves sin and cos.
    """
    if dim % 4 != 0:
        # pad odd layouts by encoding a slightly wider vector and trimming
        return sine_encode(coords, dim + (4 - dim % 4), temperature)[..., :dim]
    num_feats = dim // 2
    scale = 2 * math.pi
    dim_t = torch.arange(num_feats, dtype=coords.dtype, device=coords.device)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / num_feats)
    pos_x = coords[..., 0:1] * scale / dim_t
    pos_y = coords[..., 1:2] * scale / dim_t
    pos_x = torch.stack((pos_x[..., 0::2].sin(), pos_x[..., 1::2].cos()), dim=-1).flatten(-2)
    pos_y = torch.stack((pos_y[..., 0::2].sin(), pos_y[..., 1::2].cos()), dim=-1).flatten(-2)
    return torch.cat((pos_y, pos_x), dim=-1)


def grid_coords(h: int, w: int, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    """Normalized cell centres of an h x w grid, row-major, hw x 2"""
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.flatten(), yy.flatten()], dim=-1)


def mask_product(queries: torch.Tensor, c2: torch.Tensor) -> torch.Tensor:
    """B x N x d queries (x) B x d x H x W pixel embeddings -> B x N x H x W logits"""
    if queries.shape[-1] != c2.shape[1]:
        raise DimensionError(f"Query dim {queries.shape[-1]} != C2 channel dim {c2.shape[1]}")
    return torch.einsum("bqc,bchw->bqhw", queries, c2)


class MLP(nn.Module):
    """Plain multi-layer perceptron with ReLU between layers"""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip(dims, dims[1:] + [output_dim]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        return x


class DecoderLayer(nn.Module):
    """cross-attention -> self-attention -> feed-forward, post-norm"""

    def __init__(self, dim: int, num_heads: int, dim_feedforward: int, dropout: float):
        super().__init__()
        self.cross_attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, dim_feedforward),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(dim_feedforward, dim),
        )
        self.norm3 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tgt: torch.Tensor, query_pos: torch.Tensor,
                memory: torch.Tensor, memory_pos: torch.Tensor) -> torch.Tensor:
        attn, _ = self.cross_attn(tgt + query_pos, memory + memory_pos, memory, need_weights=False)
        tgt = self.norm1(tgt + self.dropout(attn))
        q = k = tgt + query_pos
        attn, _ = self.self_attn(q, k, tgt, need_weights=False)
        tgt = self.norm2(tgt + self.dropout(attn))
        return self.norm3(tgt + self.dropout(self.ffn(tgt)))


class MaskDecoder(nn.Module):
    """
    Query decoder without pixel-decoder fusion: C2 is used as-is as the pixel
    embedding map. Prediction heads are shared across layers.

    Mask logits are mask_embed(norm(Q_l)) (x) C2: each layer's queries pass
    through the mask MLP before the product, so LayerPrediction.mask_queries
    (not the raw queries) are the vectors multiplied with C2.
    """

    def __init__(self, dim: int, cfg: DecoderConfig, use_dqs: bool = True):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.use_dqs = use_dqs
        self.num_queries = cfg.num_queries
        self.level_embed = nn.Embedding(3, dim)
        if not use_dqs:
            self.query_feat = nn.Embedding(cfg.num_queries, dim)
            self.query_pos = nn.Embedding(cfg.num_queries, dim)
        self.layers = nn.ModuleList(
            DecoderLayer(dim, cfg.num_heads, cfg.dim_feedforward, cfg.dropout) for _ in range(cfg.num_layers)
        )
        self.decoder_norm = nn.LayerNorm(dim)
        self.class_embed = nn.Linear(dim, 2)
        self.mask_embed = MLP(dim, dim, dim, 3)
        self.bbox_embed = MLP(dim, dim, 4, 3)

    def flatten_memory(self, levels: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        """C3, C4, C5 -> memory B x S x d and its level + position encodings"""
        tokens, pos = [], []
        for i, level in enumerate(levels):
            B, d, h, w = level.shape
            if d != self.dim:
                raise DimensionError(f"Memory level {i} has {d} channels, decoder expects {self.dim}")
            tokens.append(level.flatten(2).transpose(1, 2))
            encoding = sine_encode(grid_coords(h, w, level.dtype, level.device), d)
            pos.append((encoding + self.level_embed.weight[i].to(level.dtype)).unsqueeze(0).expand(B, -1, -1))
        return torch.cat(tokens, dim=1), torch.cat(pos, dim=1)

    def learned_queries(self, batch_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Image-independent content and position queries (DQS off)"""
        content = self.query_feat.weight.unsqueeze(0).expand(batch_size, -1, -1)
        pos = self.query_pos.weight.unsqueeze(0).expand(batch_size, -1, -1)
        return content, pos

    def selected_query_pos(self, coords: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return sine_encode(coords.to(dtype), self.dim)

    def predict(self, tgt: torch.Tensor, c2: torch.Tensor) -> LayerPrediction:
        """Heads on one layer's queries; masks are mask_embed(norm(tgt)) (x) C2"""
        out = self.decoder_norm(tgt)
        mask_queries = self.mask_embed(out)
        return LayerPrediction(
            mask_logits=mask_product(mask_queries, c2),
            class_logits=self.class_embed(out),
            boxes=self.bbox_embed(out).sigmoid(),
            mask_queries=mask_queries,
        )

    def forward(self, content: torch.Tensor, query_pos: torch.Tensor,
                memory: torch.Tensor, memory_pos: torch.Tensor, c2: torch.Tensor) -> MaskPrediction:
        if content.shape[-1] != c2.shape[1]:
            raise DimensionError(f"Query dim {content.shape[-1]} != C2 channel dim {c2.shape[1]}")
        tgt = content
        layers = []
        for layer in self.layers:
            tgt = layer(tgt, query_pos, memory, memory_pos)
            layers.append(self.predict(tgt, c2))
        return MaskPrediction(layers=layers)


def decode(decoder: MaskDecoder, content: torch.Tensor, memory_levels: Sequence[torch.Tensor],
           c2: torch.Tensor, query_pos: Optional[torch.Tensor] = None) -> MaskPrediction:
    """Run the decoder on content queries against Flatten(C3, C4, C5)"""
    if content.shape[-1] != c2.shape[1]:
        raise DimensionError(f"Query dim {content.shape[-1]} != C2 channel dim {c2.shape[1]}")
    memory, memory_pos = decoder.flatten_memory(memory_levels)
    if query_pos is None:
        query_pos = torch.zeros_like(content)
    return decoder(content, query_pos, memory, memory_pos, c2)


def semantic_probability(pred: MaskPrediction, output_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """
    Per-pixel glass probability from the last layer: max over queries of
    P(glass) * sigmoid(mask), bilinearly upsampled to output_size. Returns B x H x W.
    """
    last = pred.last
    glass = last.class_logits.softmax(dim=-1)[..., 0]
    prob = (glass[..., None, None] * last.mask_logits.sigmoid()).max(dim=1).values
    if output_size is not None and tuple(prob.shape[-2:]) != tuple(output_size):
        prob = F.interpolate(prob.unsqueeze(1), size=output_size, mode="bilinear", align_corners=False).squeeze(1)
    return prob


def predict_semantic(pred: MaskPrediction, threshold: float = 0.5,
                     output_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Binary B x H x W glass mask"""
    return semantic_probability(pred, output_size) >= threshold
