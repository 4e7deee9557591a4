"""
Evaluation Metrics
IoU, F-beta, MAE and balance error rate on glass masks, plus dataset-level aggregation
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, Field

from api_models import DatasetPooling
from errors import DimensionError, InputError

logger = logging.getLogger(__name__)

BETA_SQ = 0.3
THRESHOLD = 0.5

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class Confusion:
    """Pixel confusion counts of one binary prediction against one binary GT"""
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"Prediction shape {pred.shape} != ground-truth shape {gt.shape}")


def binarize(pred_prob: ArrayLike, threshold: float = THRESHOLD) -> np.ndarray:
    return _as_array(pred_prob) >= threshold


def confusion(pred: ArrayLike, gt: ArrayLike) -> Confusion:
    pred = _as_array(pred).astype(bool)
    gt = _as_array(gt).astype(bool)
    _check_shapes(pred, gt)
    return Confusion(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
    )


def iou_from_confusion(c: Confusion) -> float:
    union = c.tp + c.fp + c.fn
    if union == 0:
        return 1.0
    return c.tp / union


def f_beta_from_confusion(c: Confusion, beta_sq: float = BETA_SQ) -> float:
    if c.tp + c.fp + c.fn == 0:
        # empty prediction on empty GT
        return 1.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    denominator = beta_sq * precision + recall
    if denominator == 0:
        return 0.0
    return (1 + beta_sq) * precision * recall / denominator


def ber_from_confusion(c: Confusion) -> float:
    """
    100 * (1 - (sensitivity + specificity) / 2).

    A single-class GT has only one defined recall term; BER then uses that term alone.
    """
    terms = []
    if c.tp + c.fn > 0:
        terms.append(c.tp / (c.tp + c.fn))
    if c.tn + c.fp > 0:
        terms.append(c.tn / (c.tn + c.fp))
    if not terms:
        return 0.0
    return 100.0 * (1 - sum(terms) / len(terms))


def iou(pred: ArrayLike, gt: ArrayLike) -> float:
    """|P & G| / |P | G|, 1.0 when both are empty"""
    return iou_from_confusion(confusion(pred, gt))


def f_beta(pred_prob: ArrayLike, gt: ArrayLike, beta_sq: float = BETA_SQ, threshold: float = THRESHOLD) -> float:
    """F-beta of the prediction binarized at threshold"""
    pred_prob = _as_array(pred_prob)
    _check_shapes(pred_prob, _as_array(gt))
    if pred_prob.size and (pred_prob.min() < 0 or pred_prob.max() > 1):
        raise InputError("Probabilities must lie in [0, 1]")
    return f_beta_from_confusion(confusion(binarize(pred_prob, threshold), gt), beta_sq)


def mae(pred_prob: ArrayLike, gt: ArrayLike) -> float:
    pred_prob = _as_array(pred_prob).astype(np.float64)
    gt = _as_array(gt).astype(np.float64)
    _check_shapes(pred_prob, gt)
    return float(np.abs(pred_prob - gt).mean())


def ber(pred: ArrayLike, gt: ArrayLike) -> float:
    return ber_from_confusion(confusion(pred, gt))


class ImageMetrics(BaseModel):
    iou: float
    f_beta: float
    mae: float
    ber: float


class MetricsReport(BaseModel):
    """Dataset-level metrics with the per-image values they came from"""
    iou: float = Field(..., ge=0, le=1)
    f_beta: float = Field(..., ge=0, le=1)
    mae: float = Field(..., ge=0, le=1)
    ber: float = Field(..., ge=0, le=100)
    pooling: DatasetPooling = DatasetPooling.MEAN
    num_images: int = 0
    per_image: List[ImageMetrics] = []

    def summary(self) -> Dict[str, float]:
        return {"iou": self.iou, "f_beta": self.f_beta, "mae": self.mae, "ber": self.ber}

    def table_row(self, name: str) -> str:
        """Method | IoU | F-beta | MAE | BER with 3/3/3/2 decimals"""
        return f"{name} | {self.iou:.3f} | {self.f_beta:.3f} | {self.mae:.3f} | {self.ber:.2f}"


def image_metrics(pred_prob: ArrayLike, gt: ArrayLike, threshold: float = THRESHOLD) -> ImageMetrics:
    pred_prob = _as_array(pred_prob)
    gt = _as_array(gt)
    c = confusion(binarize(pred_prob, threshold), gt)
    return ImageMetrics(
        iou=iou_from_confusion(c),
        f_beta=f_beta_from_confusion(c),
        mae=mae(pred_prob, gt),
        ber=ber_from_confusion(c),
    )


def evaluate_dataset(predictions: Sequence[ArrayLike], gts: Sequence[ArrayLike],
                     pooling: DatasetPooling = DatasetPooling.MEAN,
                     threshold: float = THRESHOLD) -> MetricsReport:
    """
    Score aligned probability maps against binary GT masks.

    mean: unweighted average of per-image metrics.
    pooled: metrics of the summed confusion counts; MAE over all pixels.
    """
    if len(predictions) != len(gts):
        raise DimensionError(f"{len(predictions)} predictions for {len(gts)} ground-truth masks")
    if not predictions:
        raise InputError("Cannot evaluate an empty dataset")

    per_image = [image_metrics(p, g, threshold) for p, g in zip(predictions, gts)]
    if pooling == DatasetPooling.POOLED:
        total = Confusion(0, 0, 0, 0)
        abs_error, pixels = 0.0, 0
        for p, g in zip(predictions, gts):
            p, g = _as_array(p), _as_array(g)
            total = total + confusion(binarize(p, threshold), g)
            abs_error += float(np.abs(p.astype(np.float64) - g.astype(np.float64)).sum())
            pixels += g.size
        values = {
            "iou": iou_from_confusion(total),
            "f_beta": f_beta_from_confusion(total),
            "mae": abs_error / max(pixels, 1),
            "ber": ber_from_confusion(total),
        }
    else:
        values = {
            key: float(np.mean([getattr(m, key) for m in per_image]))
            for key in ("iou", "f_beta", "mae", "ber")
        }

    logger.info("Evaluated %d images (%s): IoU %.3f, Fb %.3f, MAE %.3f, BER %.2f",
                len(per_image), pooling.value, values["iou"], values["f_beta"], values["mae"], values["ber"])
    return MetricsReport(pooling=pooling, num_images=len(per_image), per_image=per_image, **values)
