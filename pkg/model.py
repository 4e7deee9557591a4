"""
GEM Model
Encoder -> simple feature pyramid -> discerning query selection -> mask decoder
"""

import copy
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn

from api_models import BackboneInit, ModelConfig
from decoder import MaskDecoder, MaskPrediction, predict_semantic, semantic_probability
from dqs import DiscerningQuerySelector, DQSOutput, positions_to_coords
from encoder import ViTEncoder, load_pretrained
from errors import ConfigError
from pyramid import FeaturePyramid, SimpleFeaturePyramid

logger = logging.getLogger(__name__)

# Shape presets; widths of the tiny/base encoders follow the SAM-family backbones
MODEL_PRESETS: Dict[str, Dict] = {
    "micro": {
        "encoder": {"patch_size": 8, "embed_dim": 32, "depth": 2, "num_heads": 2, "image_size": 64},
        "pyramid": {"dim": 32},
        "decoder": {"num_layers": 2, "num_queries": 4, "num_heads": 2, "dim_feedforward": 64},
    },
    "desk": {
        "encoder": {"patch_size": 16, "embed_dim": 192, "depth": 4, "num_heads": 3, "image_size": 384},
        "pyramid": {"dim": 256},
        "decoder": {"num_layers": 6, "num_queries": 100, "num_heads": 8, "dim_feedforward": 1024},
    },
    "tiny": {
        "encoder": {"patch_size": 16, "embed_dim": 192, "depth": 12, "num_heads": 3, "image_size": 384},
        "pyramid": {"dim": 256},
        "decoder": {"num_layers": 6, "num_queries": 100, "num_heads": 8, "dim_feedforward": 2048},
    },
    "base": {
        "encoder": {"patch_size": 16, "embed_dim": 768, "depth": 12, "num_heads": 12, "image_size": 384},
        "pyramid": {"dim": 256},
        "decoder": {"num_layers": 6, "num_queries": 100, "num_heads": 8, "dim_feedforward": 2048},
    },
}


@dataclass
class GEMOutput:
    prediction: MaskPrediction
    pyramid: FeaturePyramid
    dqs: Optional[DQSOutput] = None


class GEMModel(nn.Module):
    """Glass surface segmentation model"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg.encoder)
        self.pyramid = SimpleFeaturePyramid(self.encoder.out_dim, cfg.pyramid)
        self.dqs = (
            DiscerningQuerySelector(cfg.pyramid.dim, cfg.decoder.num_queries, cfg.dqs)
            if cfg.dqs.enabled or cfg.dqs.aux_loss else None
        )
        self.decoder = MaskDecoder(cfg.pyramid.dim, cfg.decoder, use_dqs=cfg.dqs.enabled)

    def forward(self, images: torch.Tensor) -> GEMOutput:
        f16 = self.encoder(images)
        pyramid = self.pyramid(f16)
        memory, memory_pos = self.decoder.flatten_memory(pyramid.memory_levels)
        B = images.shape[0]
        dqs_out = self.dqs(pyramid, select=self.cfg.dqs.enabled) if self.dqs is not None else None
        if self.cfg.dqs.enabled:
            h, w = pyramid.c4.shape[-2:]
            coords = positions_to_coords(dqs_out.selected.positions, h, w)
            content = dqs_out.selected.embeddings
            query_pos = self.decoder.selected_query_pos(coords, content.dtype)
        else:
            content, query_pos = self.decoder.learned_queries(B)
        prediction = self.decoder(content, query_pos, memory, memory_pos, pyramid.c2)
        return GEMOutput(prediction=prediction, pyramid=pyramid, dqs=dqs_out)

    @torch.no_grad()
    def predict_probability(self, images: torch.Tensor) -> torch.Tensor:
        """B x H x W glass probability at input resolution"""
        out = self(images)
        return semantic_probability(out.prediction, output_size=tuple(images.shape[-2:]))

    @torch.no_grad()
    def predict_mask(self, images: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
        out = self(images)
        return predict_semantic(out.prediction, threshold, output_size=tuple(images.shape[-2:]))

    def backbone_parameters(self):
        return self.encoder.parameters()

    def head_parameters(self):
        backbone = {id(p) for p in self.encoder.parameters()}
        return (p for p in self.parameters() if id(p) not in backbone)


def preset_config(name: str) -> Dict:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"Unknown model preset '{name}'. Available: {sorted(MODEL_PRESETS)}")
    return copy.deepcopy(MODEL_PRESETS[name])


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> GEMModel:
    """
    Build GEM and initialise its backbone according to cfg.encoder.init.

    random keeps the fresh init; generic and sam load weights_path through the
    matching key-remap table.
    """
    if seed is not None:
        torch.manual_seed(seed)
    model = GEMModel(cfg)
    if cfg.encoder.init != BackboneInit.RANDOM:
        if not cfg.encoder.weights_path:
            raise ConfigError(f"encoder.init={cfg.encoder.init.value} needs encoder.weights_path")
        load_pretrained(cfg.encoder.weights_path, cfg.encoder, encoder=model.encoder)
    logger.info("Built GEM: %d parameters (backbone init %s, DQS %s)",
                sum(p.numel() for p in model.parameters()), cfg.encoder.init.value,
                "on" if cfg.dqs.enabled else "off")
    return model
