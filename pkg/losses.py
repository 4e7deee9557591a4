"""
Matching and Losses
Target construction from a glass mask, Hungarian matching, the five weighted
terms summed over decoder layers, and the DQS auxiliary loss
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from torchvision.ops import box_convert, generalized_box_iou

from api_models import DQSConfig, LossConfig, LossWeights
from decoder import LayerPrediction, MaskPrediction
from errors import CapacityError, InputError, NumericError

logger = logging.getLogger(__name__)

GLASS = 0
NO_OBJECT = 1

Assignment = Tuple[np.ndarray, np.ndarray]  # (query indices, target indices)


@dataclass
class TargetSet:
    """Glass instances of one image: masks T x H x W in {0,1}, boxes T x 4 cxcywh, labels T"""
    masks: torch.Tensor
    boxes: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return int(self.masks.shape[0])

    def to(self, device=None, dtype=None) -> "TargetSet":
        return TargetSet(
            masks=self.masks.to(device=device, dtype=dtype),
            boxes=self.boxes.to(device=device, dtype=dtype),
            labels=self.labels.to(device=device),
        )

    def resized_masks(self, size: Tuple[int, int], mode: str = "area") -> torch.Tensor:
        if len(self) == 0:
            return self.masks.new_zeros((0, *size))
        if tuple(self.masks.shape[-2:]) == tuple(size):
            return self.masks
        return F.interpolate(self.masks.unsqueeze(1), size=size, mode=mode).squeeze(1)


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized cxcywh box of a non-empty binary mask"""
    H, W = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return np.array([(x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H], dtype=np.float64)


def _merge_into_nearest(labels: np.ndarray, absorbed: Sequence[int], kept: Sequence[int]):
    """Relabel the absorbed components with the id of the nearest kept pixel, in place"""
    keep = np.isin(labels, kept)
    _, (iy, ix) = ndimage.distance_transform_edt(~keep, return_indices=True)
    moved = np.isin(labels, absorbed)
    labels[moved] = labels[iy[moved], ix[moved]]


def build_targets(gt_mask: Union[np.ndarray, torch.Tensor], min_area: int = 16,
                  small_component_policy: str = "merge", single_mask: bool = False,
                  max_targets: Optional[int] = None) -> TargetSet:
    """
    One target per 4-connected glass component.

    Components under min_area pixels are merged into the nearest large component
    ("merge") or dropped ("drop"); with no large component they are dropped either way.
    With more than max_targets components left, the largest max_targets are kept
    and every other component joins the nearest kept one.
    """
    if isinstance(gt_mask, torch.Tensor):
        gt_mask = gt_mask.detach().cpu().numpy()
    gt_mask = np.asarray(gt_mask)
    if gt_mask.ndim != 2:
        raise InputError(f"Expected an H x W mask, got shape {gt_mask.shape}")
    if not np.isin(gt_mask, (0, 1)).all():
        raise InputError("Ground-truth mask must be binary")
    binary = gt_mask.astype(bool)
    H, W = binary.shape

    if single_mask:
        masks = [binary] if binary.any() else []
    else:
        labels, count = ndimage.label(binary)
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        large_ids = [i for i in range(1, count + 1) if sizes[i] >= min_area]
        small_ids = [i for i in range(1, count + 1) if sizes[i] < min_area]
        if small_ids and large_ids and small_component_policy == "merge":
            _merge_into_nearest(labels, small_ids, large_ids)
        elif small_ids:
            labels[np.isin(labels, small_ids)] = 0
        if max_targets is not None and len(large_ids) > max_targets:
            merged_sizes = np.bincount(labels.ravel(), minlength=count + 1)
            # stable: equal areas keep the lower component id
            by_area = sorted(large_ids, key=lambda i: -merged_sizes[i])
            kept = sorted(by_area[:max_targets])
            logger.warning("Mask has %d components for %d queries; merging the %d smallest into their neighbours",
                           len(large_ids), max_targets, len(large_ids) - max_targets)
            _merge_into_nearest(labels, by_area[max_targets:], kept)
            large_ids = kept
        masks = [labels == i for i in large_ids]

    if not masks:
        return TargetSet(
            masks=torch.zeros(0, H, W),
            boxes=torch.zeros(0, 4),
            labels=torch.zeros(0, dtype=torch.long),
        )
    return TargetSet(
        masks=torch.from_numpy(np.stack(masks).astype(np.float32)),
        boxes=torch.from_numpy(np.stack([mask_to_box(m) for m in masks]).astype(np.float32)),
        labels=torch.full((len(masks),), GLASS, dtype=torch.long),
    )


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Per-row dice loss of probabilities vs targets, both M x P"""
    numerator = 2 * (probs * targets).sum(-1)
    denominator = probs.sum(-1) + targets.sum(-1)
    return 1 - (numerator + eps) / (denominator + eps)


def sigmoid_ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-row mean binary cross-entropy, M x P -> M"""
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="none").mean(-1)


def pairwise_sigmoid_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """N x P logits vs T x P targets -> N x T mean BCE"""
    pos = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits), reduction="none")
    neg = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits), reduction="none")
    loss = torch.einsum("nc,mc->nm", pos, targets) + torch.einsum("nc,mc->nm", neg, 1 - targets)
    return loss / logits.shape[1]


def pairwise_dice(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    probs = logits.sigmoid()
    numerator = 2 * torch.einsum("nc,mc->nm", probs, targets)
    denominator = probs.sum(-1)[:, None] + targets.sum(-1)[None, :]
    return 1 - (numerator + eps) / (denominator + eps)


def giou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """Pairwise generalized IoU of cxcywh boxes"""
    return generalized_box_iou(box_convert(boxes_a, "cxcywh", "xyxy"), box_convert(boxes_b, "cxcywh", "xyxy"))


def solve_assignment(cost: Union[np.ndarray, torch.Tensor]) -> List[Tuple[int, int]]:
    """
    Minimum-cost assignment of every target (row) to a distinct query (column).

    Returns (target, query) pairs ordered by target.
    """
    cost = cost.detach().cpu().numpy() if isinstance(cost, torch.Tensor) else np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError(f"Cost matrix must be 2-D, got shape {cost.shape}")
    T, N = cost.shape
    if T > N:
        raise CapacityError(f"{T} targets cannot be matched to {N} queries")
    if not np.isfinite(cost).all():
        raise NumericError("Matching cost matrix contains non-finite values")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


class HungarianMatcher:
    """Matches targets to queries under the same five weighted terms as the loss"""

    def __init__(self, weights: LossWeights, dice_eps: float = 1.0):
        self.weights = weights
        self.dice_eps = dice_eps

    @torch.no_grad()
    def cost_matrix(self, class_logits: torch.Tensor, mask_logits: torch.Tensor, boxes: torch.Tensor,
                    target_masks: torch.Tensor, target_boxes: torch.Tensor) -> torch.Tensor:
        """T x N matching cost for one image; masks are compared at mask_logits resolution"""
        w = self.weights
        prob_glass = class_logits.softmax(-1)[:, GLASS]
        out_masks = mask_logits.flatten(1)
        tgt_masks = target_masks.flatten(1).to(out_masks.dtype)
        cost = (
            w.cls * -prob_glass[:, None]
            + w.ce * pairwise_sigmoid_ce(out_masks, tgt_masks)
            + w.dice * pairwise_dice(out_masks, tgt_masks, self.dice_eps)
            + w.l1 * torch.cdist(boxes, target_boxes.to(boxes.dtype), p=1)
            + w.giou * (1 - giou(boxes, target_boxes.to(boxes.dtype)))
        )
        return cost.T

    def __call__(self, layer: LayerPrediction, targets: Sequence[TargetSet]) -> List[Assignment]:
        """targets must already be at mask resolution"""
        indices = []
        for b, target in enumerate(targets):
            if len(target) == 0:
                empty = np.zeros(0, dtype=np.int64)
                indices.append((empty, empty))
                continue
            cost = self.cost_matrix(layer.class_logits[b], layer.mask_logits[b], layer.boxes[b],
                                    target.masks, target.boxes)
            pairs = solve_assignment(cost)
            indices.append((np.array([q for _, q in pairs], dtype=np.int64),
                            np.array([t for t, _ in pairs], dtype=np.int64)))
        return indices


def hungarian_match(layer: LayerPrediction, targets: Sequence[TargetSet], weights: LossWeights,
                    dice_eps: float = 1.0) -> List[Assignment]:
    """Match one decoder layer's predictions to per-image targets"""
    mask_size = tuple(layer.mask_logits.shape[-2:])
    resized = [TargetSet(t.resized_masks(mask_size), t.boxes, t.labels) for t in targets]
    return HungarianMatcher(weights, dice_eps)(layer, resized)


def dqs_auxiliary_loss(logits: torch.Tensor, gt_masks: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """
    Per-location BCE of the glass-vs-background scores against the GT mask
    area-downsampled to the DQS grid. logits: B x hw x 2, gt_masks: B x H x W.
    """
    target = F.interpolate(gt_masks.unsqueeze(1).to(logits.dtype), size=grid, mode="area").flatten(1)
    margin = logits[..., GLASS] - logits[..., NO_OBJECT]
    return F.binary_cross_entropy_with_logits(margin, target)


class GEMCriterion(nn.Module):
    """
    Deep-supervised set loss.

    For every supervised layer: match, then
    cls: cross-entropy over all queries (unmatched -> no-object, down-weighted),
    ce / dice: mask terms on matched pairs at C2 resolution,
    l1 / giou: box terms on matched pairs.
    Mask and box terms are normalized by the number of targets in the batch.
    """

    TERMS = ("cls", "ce", "dice", "l1", "giou")

    def __init__(self, cfg: LossConfig, dqs_cfg: Optional[DQSConfig] = None):
        super().__init__()
        self.cfg = cfg
        self.dqs_cfg = dqs_cfg or DQSConfig(enabled=False, aux_loss=False)
        self.matcher = HungarianMatcher(cfg.weights, cfg.dice_eps)
        self.register_buffer("empty_weight", torch.tensor([1.0, cfg.no_object_weight]), persistent=False)

    def layer_losses(self, layer: LayerPrediction, targets: Sequence[TargetSet],
                     indices: Sequence[Assignment], num_targets: float) -> Dict[str, torch.Tensor]:
        B, N = layer.class_logits.shape[:2]
        device = layer.class_logits.device

        target_classes = torch.full((B, N), NO_OBJECT, dtype=torch.long, device=device)
        for b, (q_idx, _) in enumerate(indices):
            target_classes[b, torch.as_tensor(q_idx, device=device)] = GLASS
        loss_cls = F.cross_entropy(layer.class_logits.transpose(1, 2), target_classes,
                                   weight=self.empty_weight.to(layer.class_logits.dtype))

        src_masks, tgt_masks, src_boxes, tgt_boxes = [], [], [], []
        for b, (q_idx, t_idx) in enumerate(indices):
            if len(q_idx) == 0:
                continue
            q = torch.as_tensor(q_idx, device=device)
            t = torch.as_tensor(t_idx, device=device)
            src_masks.append(layer.mask_logits[b, q].flatten(1))
            tgt_masks.append(targets[b].masks[t].flatten(1))
            src_boxes.append(layer.boxes[b, q])
            tgt_boxes.append(targets[b].boxes[t])

        if not src_masks:
            zero = layer.mask_logits.sum() * 0 + layer.boxes.sum() * 0
            return {"cls": loss_cls, "ce": zero, "dice": zero, "l1": zero, "giou": zero}

        src_m = torch.cat(src_masks)
        tgt_m = torch.cat(tgt_masks).to(src_m.dtype)
        src_b = torch.cat(src_boxes)
        tgt_b = torch.cat(tgt_boxes).to(src_b.dtype)
        return {
            "cls": loss_cls,
            "ce": sigmoid_ce_loss(src_m, tgt_m).sum() / num_targets,
            "dice": dice_loss(src_m.sigmoid(), tgt_m, self.cfg.dice_eps).sum() / num_targets,
            "l1": F.l1_loss(src_b, tgt_b, reduction="none").sum() / num_targets,
            "giou": (1 - torch.diag(giou(src_b, tgt_b))).sum() / num_targets,
        }

    def weighted(self, terms: Dict[str, torch.Tensor]) -> torch.Tensor:
        w = self.cfg.weights
        return (w.cls * terms["cls"] + w.ce * terms["ce"] + w.dice * terms["dice"]
                + w.l1 * terms["l1"] + w.giou * terms["giou"])

    def forward(self, prediction: MaskPrediction, targets: Sequence[TargetSet],
                dqs_logits: Optional[torch.Tensor] = None,
                gt_masks: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        dtype = prediction.last.mask_logits.dtype
        device = prediction.last.mask_logits.device
        mask_size = tuple(prediction.last.mask_logits.shape[-2:])
        resized = [
            TargetSet(t.resized_masks(mask_size, self.cfg.mask_downsample), t.boxes, t.labels).to(device, dtype)
            for t in targets
        ]
        num_targets = float(max(sum(len(t) for t in resized), 1))

        supervised = range(len(prediction)) if self.cfg.deep_supervision else [len(prediction) - 1]
        total = prediction.last.mask_logits.new_zeros(())
        components: Dict[str, torch.Tensor] = {term: total.clone() for term in self.TERMS}
        for l in supervised:
            layer = prediction.layers[l]
            indices = self.matcher(layer, resized)
            terms = self.layer_losses(layer, resized, indices, num_targets)
            layer_total = self.weighted(terms)
            components[f"layer{l}"] = layer_total
            for term in self.TERMS:
                components[term] = components[term] + getattr(self.cfg.weights, term) * terms[term]
            total = total + layer_total

        if self.dqs_cfg.aux_loss and dqs_logits is not None and gt_masks is not None:
            hw = dqs_logits.shape[1]
            grid = self._dqs_grid(hw, gt_masks.shape[-2:])
            aux = self.dqs_cfg.aux_weight * dqs_auxiliary_loss(dqs_logits, gt_masks.to(device), grid)
            components["dqs"] = aux
            total = total + aux

        if not torch.isfinite(total):
            raise NumericError("Loss is not finite", {k: float(v.detach()) for k, v in components.items()})
        components["total"] = total
        return total, components

    @staticmethod
    def _dqs_grid(hw: int, image_size: Sequence[int]) -> Tuple[int, int]:
        H, W = int(image_size[0]), int(image_size[1])
        # the DQS grid shares the image aspect ratio
        h = int(round((hw * H / W) ** 0.5))
        return h, hw // h


def total_loss(prediction: MaskPrediction, targets: Sequence[TargetSet], cfg: LossConfig,
               dqs_logits: Optional[torch.Tensor] = None, gt_masks: Optional[torch.Tensor] = None,
               dqs_cfg: Optional[DQSConfig] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Scalar loss plus per-term breakdown"""
    return GEMCriterion(cfg, dqs_cfg)(prediction, targets, dqs_logits=dqs_logits, gt_masks=gt_masks)
