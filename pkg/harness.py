"""
Training Harness
Pretrain/finetune loop, checkpointing, evaluation, zero-shot evaluation and FPS benchmarking
"""

import json
import logging
import os
import platform
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from torch.utils.data import DataLoader, Dataset

from api_models import AugmentConfig, BackboneInit, Stage, TrainConfig
from config import config_hash
from datagen import DatasetManifest, load_image, load_mask
from errors import ConfigError, DataError, NumericError, ParameterError
from losses import GEMCriterion, TargetSet, build_targets
from metrics import MetricsReport, evaluate_dataset
from model import GEMModel, build_model

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def atomic_write_json(path: Path, data: Any) -> None:
    """Write JSON through a temp file and rename"""
    path = Path(path)
    temp_path = path.with_suffix(".tmp")
    with open(temp_path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.flush()
        os.fsync(f.fileno())
    temp_path.replace(path)


# =============================================================================
# DATA
# =============================================================================

def _resize(tensor: torch.Tensor, size: Tuple[int, int], mode: str) -> torch.Tensor:
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(tensor.unsqueeze(0), size=size, mode=mode, **kwargs).squeeze(0)


def augment_pair(image: torch.Tensor, mask: torch.Tensor, size: int, cfg: AugmentConfig,
                 rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Horizontal flip, scale jitter, then a size x size crop (zero padded when smaller)"""
    if cfg.hflip and rng.random() < 0.5:
        image, mask = image.flip(-1), mask.flip(-1)
    low, high = cfg.scale_jitter
    scaled = max(1, int(round(size * rng.uniform(low, high))))
    image = _resize(image, (scaled, scaled), "bilinear")
    mask = _resize(mask.unsqueeze(0), (scaled, scaled), "nearest").squeeze(0)
    if scaled < size:
        pad = size - scaled
        image = F.pad(image, (0, pad, 0, pad))
        mask = F.pad(mask, (0, pad, 0, pad))
    elif scaled > size:
        y = int(rng.integers(0, scaled - size + 1))
        x = int(rng.integers(0, scaled - size + 1))
        image = image[:, y:y + size, x:x + size]
        mask = mask[y:y + size, x:x + size]
    return image, mask


class GlassDataset(Dataset):
    """
    Image/mask pairs of a manifest at a fixed square size.

    Entries are validated on construction. Augmentation draws from a generator
    seeded by (seed, epoch, index), so a run is reproducible for any worker count.
    """

    def __init__(self, manifest: DatasetManifest, image_size: int, augment: Optional[AugmentConfig] = None,
                 seed: int = 0, validate: bool = True):
        if manifest.count == 0:
            raise DataError("Manifest has no entries")
        if validate:
            problems = manifest.validate_files()
            if problems:
                entry, violations = problems[0]
                raise DataError(f"{len(problems)} invalid manifest entries, first {entry.image_path}: "
                                f"{'; '.join(violations)}")
        self.manifest = manifest
        self.image_size = image_size
        self.augment = augment if augment is not None and augment.enabled else None
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return self.manifest.count

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def sample_id(self, index: int) -> str:
        return self.manifest.entries[index].image_path

    def load(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        entry = self.manifest.entries[index]
        image = torch.from_numpy(load_image(self.manifest.resolve(entry.image_path)).copy())
        image = image.permute(2, 0, 1).float() / 255.0
        mask = torch.from_numpy(load_mask(self.manifest.resolve(entry.mask_path)).astype(np.float32))
        size = (self.image_size, self.image_size)
        if tuple(image.shape[-2:]) != size:
            image = _resize(image, size, "bilinear")
            mask = _resize(mask.unsqueeze(0), size, "nearest").squeeze(0)
        return image, mask

    def original_mask(self, index: int) -> np.ndarray:
        """Stored mask at its own resolution"""
        entry = self.manifest.entries[index]
        return load_mask(self.manifest.resolve(entry.mask_path)).astype(np.uint8)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        image, mask = self.load(index)
        if self.augment is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            image, mask = augment_pair(image, mask, self.image_size, self.augment, rng)
        return image, mask, index


def make_loader(dataset: GlassDataset, cfg: TrainConfig, shuffle: bool) -> DataLoader:
    kwargs: Dict[str, Any] = {}
    if cfg.num_workers > 0:
        kwargs["prefetch_factor"] = cfg.prefetch_factor
    return DataLoader(
        dataset,
        batch_size=min(cfg.batch_size, len(dataset)),
        shuffle=shuffle,
        num_workers=cfg.num_workers,
        generator=torch.Generator().manual_seed(cfg.seed),
        **kwargs,
    )


def batch_targets(masks: torch.Tensor, cfg: TrainConfig) -> List[TargetSet]:
    return [
        build_targets(m.round().to(torch.uint8).numpy(), cfg.loss.min_component_area,
                      cfg.loss.small_component_policy, cfg.loss.single_mask, max_targets=cfg.queries)
        for m in masks.cpu()
    ]


# =============================================================================
# CHECKPOINTS
# =============================================================================

@dataclass
class Checkpoint:
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[Dict[str, Any]]
    epoch: int
    step: int
    config_hash: str
    stage: Stage
    config: Dict[str, Any] = field(default_factory=dict)
    path: Optional[Path] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig.parse_obj(self.config)


def save_checkpoint(path: Union[str, Path], model: GEMModel, optimizer: Optional[torch.optim.Optimizer],
                    epoch: int, step: int, cfg: TrainConfig, stage: Stage) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(".tmp")
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "config_hash": config_hash(cfg),
        "config": json.loads(cfg.json()),
        "stage": Stage(stage).value,
    }, temp_path)
    temp_path.replace(path)
    logger.info("Checkpoint saved: %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    try:
        raw = torch.load(path, map_location="cpu")
        return Checkpoint(
            model_state=raw["model"],
            optimizer_state=raw.get("optimizer"),
            epoch=int(raw["epoch"]),
            step=int(raw.get("step", 0)),
            config_hash=raw["config_hash"],
            stage=Stage(raw["stage"]),
            config=raw.get("config", {}),
            path=path,
        )
    except (KeyError, ValueError, RuntimeError) as e:
        raise DataError(f"Checkpoint {path} is malformed: {e}") from e


def model_from_checkpoint(checkpoint: Union[str, Path, Checkpoint],
                          cfg: Optional[TrainConfig] = None) -> Tuple[GEMModel, TrainConfig]:
    """Rebuild the model a checkpoint was trained with and load its parameters"""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    cfg = cfg or checkpoint.train_config()
    model_cfg = cfg.model.copy(deep=True)
    # parameters come from the checkpoint, not from backbone weights
    model_cfg.encoder.init = BackboneInit.RANDOM
    model = GEMModel(model_cfg).to(DTYPES[cfg.dtype])
    try:
        model.load_state_dict(checkpoint.model_state)
    except RuntimeError as e:
        raise ConfigError(f"Checkpoint does not fit the configured model: {e}") from e
    return model, cfg


# =============================================================================
# TRAINING
# =============================================================================

def build_optimizer(model: GEMModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW; the encoder runs at lr * backbone_lr_mult"""
    return torch.optim.AdamW(
        [
            {"params": list(model.backbone_parameters()), "lr": cfg.lr * cfg.backbone_lr_mult},
            {"params": list(model.head_parameters()), "lr": cfg.lr},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )


def build_scheduler(optimizer: torch.optim.Optimizer, total_steps: int,
                    cfg: TrainConfig) -> torch.optim.lr_scheduler.MultiStepLR:
    milestone = max(1, int(total_steps * cfg.lr_drop_fraction))
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=[milestone], gamma=cfg.lr_gamma)


def initial_model(cfg: TrainConfig, init_checkpoint: Optional[Union[str, Path, Checkpoint]] = None) -> GEMModel:
    """Fresh model, or a warm start from a checkpoint's parameters"""
    if init_checkpoint is not None:
        model, _ = model_from_checkpoint(init_checkpoint, cfg)
        return model
    return build_model(cfg.model, seed=cfg.seed).to(DTYPES[cfg.dtype])


def compute_loss(model: GEMModel, criterion: GEMCriterion, images: torch.Tensor, masks: torch.Tensor,
                 cfg: TrainConfig) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    out = model(images)
    return criterion(
        out.prediction,
        batch_targets(masks, cfg),
        dqs_logits=out.dqs.logits if out.dqs is not None else None,
        gt_masks=masks,
    )


@dataclass
class TrainResult:
    model: GEMModel
    checkpoint_path: Path
    loss_log: List[Dict[str, float]]
    steps: int


def train(cfg: TrainConfig, manifest: DatasetManifest, stage: Stage, output_dir: Union[str, Path],
          init_checkpoint: Optional[Union[str, Path, Checkpoint]] = None) -> TrainResult:
    """
    Train one stage and write last.pt, periodic ckpt_step{N}.pt and loss_log.json.

    A non-finite loss aborts the run after writing nan_dump.json with the batch id
    and the sample ids of that batch.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    dtype = DTYPES[cfg.dtype]
    device = torch.device(cfg.device)

    model = initial_model(cfg, init_checkpoint).to(device)
    criterion = GEMCriterion(cfg.loss, cfg.model.dqs).to(device)
    dataset = GlassDataset(manifest, cfg.image_size, cfg.augment, seed=cfg.seed)
    loader = make_loader(dataset, cfg, shuffle=True)

    epochs = cfg.epochs(stage)
    total_steps = epochs * len(loader)
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    optimizer = build_optimizer(model, cfg)
    scheduler = build_scheduler(optimizer, total_steps, cfg)

    logger.info("Training %s: %d images, %d steps, config %s", Stage(stage).value, len(dataset),
                total_steps, config_hash(cfg)[:12])
    loss_log: List[Dict[str, float]] = []
    step = 0
    epoch = 0
    model.train()
    while step < total_steps:
        dataset.set_epoch(epoch)
        for batch_id, (images, masks, indices) in enumerate(loader):
            if step >= total_steps:
                break
            images = images.to(device=device, dtype=dtype)
            masks = masks.to(device=device, dtype=dtype)
            try:
                loss, components = compute_loss(model, criterion, images, masks, cfg)
            except NumericError as e:
                dump = {
                    "step": step,
                    "epoch": epoch,
                    "batch_id": batch_id,
                    "sample_ids": [dataset.sample_id(int(i)) for i in indices],
                    "diagnostics": e.diagnostics,
                }
                atomic_write_json(output_dir / "nan_dump.json", dump)
                raise NumericError(f"Non-finite loss at step {step} (batch {batch_id}); see nan_dump.json",
                                   dump) from e

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            scheduler.step()
            step += 1

            record = {"step": step, "epoch": epoch, "lr": optimizer.param_groups[-1]["lr"]}
            record.update({k: float(v.detach()) for k, v in components.items()})
            record["loss"] = record.pop("total")
            loss_log.append(record)
            if step % cfg.log_every == 0:
                logger.info("step %d loss %.4f (cls %.4f ce %.4f dice %.4f l1 %.4f giou %.4f)", step,
                            record["loss"], record["cls"], record["ce"], record["dice"], record["l1"], record["giou"])
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(output_dir / f"ckpt_step{step}.pt", model, optimizer, epoch, step, cfg, stage)
        epoch += 1

    checkpoint_path = save_checkpoint(output_dir / "last.pt", model, optimizer, epoch, step, cfg, stage)
    atomic_write_json(output_dir / "loss_log.json", loss_log)
    return TrainResult(model=model, checkpoint_path=checkpoint_path, loss_log=loss_log, steps=step)


# =============================================================================
# EVALUATION
# =============================================================================

@torch.no_grad()
def predict_dataset(model: GEMModel, dataset: GlassDataset, cfg: TrainConfig) -> Tuple[List[np.ndarray],
                                                                                        List[np.ndarray]]:
    """
    Probability maps and GT masks for every entry, in manifest order.

    Predictions are made at the model's square size and resized back to each
    stored mask's own size, so scores are taken at the original resolution.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    predictions, gts = [], []
    loader = make_loader(dataset, cfg, shuffle=False)
    for images, _, indices in loader:
        probs = model.predict_probability(images.to(device=device, dtype=dtype))
        for prob, index in zip(probs, indices.tolist()):
            gt = dataset.original_mask(index)
            if tuple(prob.shape) != gt.shape:
                prob = _resize(prob.unsqueeze(0), gt.shape, "bilinear").squeeze(0)
            predictions.append(prob.float().cpu().numpy())
            gts.append(gt)
    return predictions, gts


def evaluate(model: GEMModel, manifest: DatasetManifest, cfg: TrainConfig) -> MetricsReport:
    """Metrics of a model on a manifest; no parameter updates"""
    dataset = GlassDataset(manifest, cfg.image_size, augment=None, seed=cfg.seed)
    predictions, gts = predict_dataset(model, dataset, cfg)
    return evaluate_dataset(predictions, gts, pooling=cfg.pooling, threshold=cfg.threshold)


@torch.no_grad()
def evaluate_loss(model: GEMModel, manifest: DatasetManifest, cfg: TrainConfig) -> float:
    """Mean training loss over a manifest without augmentation"""
    model.eval()
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    criterion = GEMCriterion(cfg.loss, cfg.model.dqs).to(device)
    dataset = GlassDataset(manifest, cfg.image_size, augment=None, seed=cfg.seed)
    total, batches = 0.0, 0
    for images, masks, _ in make_loader(dataset, cfg, shuffle=False):
        loss, _ = compute_loss(model, criterion, images.to(device=device, dtype=dtype),
                               masks.to(device=device, dtype=dtype), cfg)
        total += float(loss)
        batches += 1
    return total / max(batches, 1)


def zero_shot_eval(checkpoint: Union[str, Path, Checkpoint], manifest: DatasetManifest,
                   cfg: Optional[TrainConfig] = None) -> MetricsReport:
    """Evaluate a pretrain-stage checkpoint on real data it never saw"""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    if checkpoint.stage != Stage.PRETRAIN:
        raise ConfigError(f"Zero-shot evaluation needs a pretrain checkpoint, got stage '{checkpoint.stage.value}'")
    model, cfg = model_from_checkpoint(checkpoint, cfg)
    return evaluate(model, manifest, cfg)


# =============================================================================
# SPEED
# =============================================================================

class FPSReport(BaseModel):
    fps_mean: float
    fps_std: float
    trials: int
    warmup: int
    image_size: int
    hardware: str

    def table_row(self, name: str) -> str:
        return f"{name} | {self.fps_mean:.2f}"


def hardware_string(device: torch.device) -> str:
    if device.type == "cuda":
        return torch.cuda.get_device_name(device)
    return f"{platform.processor() or platform.machine()} ({torch.get_num_threads()} threads)"


@torch.no_grad()
def benchmark_fps(model: GEMModel, image_size: int, trials: int = 50, warmup: int = 5) -> FPSReport:
    """
    Batch-1 forward passes on a random image.

    fps_mean is trials over the summed wall time; fps_std is the spread of the
    per-trial rates.
    """
    if trials < 10:
        raise ParameterError(f"trials must be >= 10, got {trials}")
    if warmup < 3:
        raise ParameterError(f"warmup must be >= 3, got {warmup}")
    model.eval()
    param = next(model.parameters())
    image = torch.rand(1, 3, image_size, image_size, generator=torch.Generator().manual_seed(0))
    image = image.to(device=param.device, dtype=param.dtype)
    synchronize = torch.cuda.synchronize if param.device.type == "cuda" else (lambda: None)

    for _ in range(warmup):
        model(image)
    synchronize()
    times = []
    for _ in range(trials):
        start = time.perf_counter()
        model(image)
        synchronize()
        times.append(time.perf_counter() - start)

    times = np.asarray(times)
    report = FPSReport(
        fps_mean=float(trials / times.sum()),
        fps_std=float(np.std(1.0 / times)),
        trials=trials,
        warmup=warmup,
        image_size=image_size,
        hardware=hardware_string(param.device),
    )
    logger.info("%.2f +- %.2f FPS at %dpx on %s", report.fps_mean, report.fps_std, image_size, report.hardware)
    return report
