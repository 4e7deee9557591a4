"""
Configuration Models and Wire Schemas for GEM
Every tunable of the model, loss, training harness and data generator lives here
"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, root_validator, validator


class BackboneInit(str, Enum):
    """Encoder initialisation source (ablation axis)"""
    RANDOM = "random"
    GENERIC = "generic"
    SAM = "sam"


class NormType(str, Enum):
    """Normalization used inside the pyramid"""
    GROUP = "group"
    LAYER = "layer"


class Stage(str, Enum):
    """Training stage"""
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class Provenance(str, Enum):
    """Where an image/mask pair came from"""
    REAL = "real"
    SYNTHETIC = "synthetic"


class ScaleTag(str, Enum):
    """Synthetic dataset scale"""
    X1 = "1x"
    X5 = "5x"
    X10 = "10x"
    X20 = "20x"


class DatasetPooling(str, Enum):
    """How per-image confusion counts become a dataset number"""
    MEAN = "mean"
    POOLED = "pooled"


class EncoderConfig(BaseModel):
    """
    Plain ViT image encoder.

    The output grid is image_size / patch_size on each side.
    """
    patch_size: int = Field(16, ge=1, description="Patch edge in pixels")
    embed_dim: int = Field(192, ge=1, description="Token channels")
    depth: int = Field(4, ge=1, description="Number of transformer blocks")
    num_heads: int = Field(3, ge=1, description="Attention heads per block")
    image_size: int = Field(384, ge=1, description="Square input edge in pixels")
    mlp_ratio: float = Field(4.0, gt=0)
    qkv_bias: bool = True
    keep_neck: bool = Field(False, description="Keep the SAM-style neck convolutions")
    neck_dim: int = Field(256, ge=1)
    init: BackboneInit = BackboneInit.RANDOM
    weights_path: Optional[str] = Field(None, description="Weight file for generic/sam init")
    weights_format: Optional[str] = Field(
        None, description="Key-remap table: internal, generic, sam or mobile_sam (default from init)"
    )

    @validator("image_size")
    def image_size_divisible_by_patch(cls, v, values):
        if "patch_size" in values and v % values["patch_size"] != 0:
            raise ValueError("image_size must be divisible by patch_size")
        return v

    @validator("num_heads")
    def embed_dim_divisible_by_heads(cls, v, values):
        if "embed_dim" in values and values["embed_dim"] % v != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        return v

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def out_dim(self) -> int:
        return self.neck_dim if self.keep_neck else self.embed_dim


class PyramidConfig(BaseModel):
    """Simple feature pyramid built from the last encoder map"""
    dim: int = Field(256, ge=1, description="Channel dim shared by C2..C5")
    norm: NormType = NormType.GROUP


class DQSConfig(BaseModel):
    """Discerning query selection"""
    enabled: bool = True
    fg_only: bool = Field(False, description="Rank the foreground block only instead of all 2hw scores")
    aux_loss: bool = Field(True, description="Per-location BCE on the classification scores")
    aux_weight: float = Field(1.0, ge=0)


class DecoderConfig(BaseModel):
    """Transformer mask decoder"""
    num_layers: int = Field(6, ge=1)
    num_queries: int = Field(100, ge=1)
    num_heads: int = Field(8, ge=1)
    dim_feedforward: int = Field(2048, ge=1)
    dropout: float = Field(0.0, ge=0, lt=1)


class LossWeights(BaseModel):
    """Weights of the five matched-pair terms"""
    cls: float = Field(4.0, ge=0)
    l1: float = Field(5.0, ge=0)
    giou: float = Field(2.0, ge=0)
    ce: float = Field(5.0, ge=0)
    dice: float = Field(5.0, ge=0)


class LossConfig(BaseModel):
    """Matching, target construction and deep supervision"""
    weights: LossWeights = LossWeights()
    no_object_weight: float = Field(0.1, ge=0, description="Class weight of the no-object label")
    deep_supervision: bool = True
    dice_eps: float = Field(1.0, gt=0)
    mask_downsample: str = Field("area", description="area or nearest")
    min_component_area: int = Field(16, ge=0)
    small_component_policy: str = Field("merge", description="merge or drop")
    single_mask: bool = Field(False, description="Treat all glass as one target")

    @validator("mask_downsample")
    def known_downsample(cls, v):
        if v not in ("area", "nearest"):
            raise ValueError("mask_downsample must be 'area' or 'nearest'")
        return v

    @validator("small_component_policy")
    def known_policy(cls, v):
        if v not in ("merge", "drop"):
            raise ValueError("small_component_policy must be 'merge' or 'drop'")
        return v


class ModelConfig(BaseModel):
    """Full GEM model"""
    encoder: EncoderConfig = EncoderConfig()
    pyramid: PyramidConfig = PyramidConfig()
    dqs: DQSConfig = DQSConfig()
    decoder: DecoderConfig = DecoderConfig()

    @root_validator(skip_on_failure=True)
    def grid_supports_pyramid(cls, values):
        encoder = values["encoder"]
        if encoder.grid_size % 2 != 0:
            raise ValueError("encoder grid (image_size / patch_size) must be even for the pyramid")
        if values["pyramid"].dim % values["decoder"].num_heads != 0:
            raise ValueError("pyramid.dim must be divisible by decoder.num_heads")
        return values


class AugmentConfig(BaseModel):
    """Training-time augmentation"""
    enabled: bool = True
    hflip: bool = True
    scale_jitter: Tuple[float, float] = (0.8, 1.2)


class TrainConfig(BaseModel):
    """
    Training harness configuration.

    Defaults are the GEM-Tiny schedule; the base model uses lr 5e-5.
    """
    lr: float = Field(2e-4, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs_pretrain: int = Field(160, gt=0)
    epochs_finetune: int = Field(80, gt=0)
    max_steps: Optional[int] = Field(None, gt=0, description="Stop after this many optimizer steps")
    seed: int = 0
    backbone_lr_mult: float = Field(0.1, ge=0)
    lr_drop_fraction: float = Field(0.9, gt=0, le=1)
    lr_gamma: float = Field(0.1, gt=0)
    grad_clip: Optional[float] = Field(None, gt=0)
    checkpoint_every: int = Field(0, ge=0, description="Steps between checkpoints, 0 for final only")
    log_every: int = Field(1, ge=1)
    num_workers: int = Field(0, ge=0)
    prefetch_factor: int = Field(2, ge=1)
    threshold: float = Field(0.5, ge=0, le=1)
    pooling: DatasetPooling = DatasetPooling.MEAN
    device: str = "cpu"
    dtype: str = Field("float32", description="float32 or float64")
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()

    @validator("dtype")
    def known_dtype(cls, v):
        if v not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return v

    @property
    def image_size(self) -> int:
        return self.model.encoder.image_size

    @property
    def queries(self) -> int:
        return self.model.decoder.num_queries

    @property
    def dropout(self) -> float:
        return self.model.decoder.dropout

    def epochs(self, stage: Stage) -> int:
        return self.epochs_pretrain if stage == Stage.PRETRAIN else self.epochs_finetune


class DatagenConfig(BaseModel):
    """Synthetic dataset generation"""
    scale_tag: ScaleTag = ScaleTag.X1
    count: Optional[int] = Field(None, gt=0, description="Override the per-scale job count")
    object_string: str = "transparent glasses"
    prompts_path: str = "configs/prompts.json"
    single_prompt: bool = Field(False, description="Use the first template for every job")
    target_size: int = Field(384, ge=1)
    parallelism: int = Field(4, ge=1)
    retries: int = Field(3, ge=0)
    backoff: float = Field(0.5, ge=0, description="Initial retry delay in seconds, doubled per retry")
    backend: str = Field("stub", description="stub or remote")
    backend_url: Optional[str] = None
    timeout: float = Field(60.0, gt=0)


class GenerationRequest(BaseModel):
    """
    Wire request of the generation service.

    The mask travels as a base64 PNG with values {0,255}.
    """
    mask: str = Field(..., description="Base64-encoded single-channel PNG")
    prompt: str = Field(..., min_length=1, example="a photo of a clean transparent glasses")
    seed: int = Field(..., ge=0, le=2 ** 64 - 1)
    size: int = Field(..., ge=1, le=4096, example=384)


class GenerationResponse(BaseModel):
    """Wire response of the generation service"""
    image: str = Field(..., description="Base64-encoded RGB PNG")
    model_version: str


class PredictResponse(BaseModel):
    """Glass mask predicted for one uploaded image"""
    mask: str = Field(..., description="Base64-encoded PNG with values {0,255}")
    glass_fraction: float
    width: int
    height: int


class HealthResponse(BaseModel):
    """Health check response"""
    status: str
    timestamp: str
    version: str = "1.0.0"
    model_version: str
    predictor_loaded: bool = False


class EmbeddingRequest(BaseModel):
    """Wire request of the image-embedding service"""
    images: List[str] = Field(..., min_items=1, description="Base64-encoded RGB PNGs")


class EmbeddingResponse(BaseModel):
    embeddings: List[List[float]]
    model_version: str
