"""
Discerning Query Selection
Aggregates C3/C4/C5, scores every location glass vs background and turns the
top-k locations into initial decoder queries
"""

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from api_models import DQSConfig
from errors import CapacityError, DimensionError, InputError
from pyramid import FeaturePyramid

Projection = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class SelectedQueries:
    """k queries per image: embeddings B x k x d, flat positions B x k, scores B x k"""
    embeddings: torch.Tensor
    positions: torch.Tensor
    scores: torch.Tensor


@dataclass
class DQSOutput:
    features: torch.Tensor  # aggregated f, B x d x h x w
    logits: torch.Tensor  # B x hw x 2, [glass, background]
    scores: torch.Tensor  # B x 2hw, class-major
    selected: Optional[SelectedQueries]  # None when only the scores are needed


def _identity(x: torch.Tensor) -> torch.Tensor:
    return x


def aggregate(c3: torch.Tensor, c4: torch.Tensor, c5: torch.Tensor,
              proj_c3: Optional[Projection] = None, proj_c5: Optional[Projection] = None) -> torch.Tensor:
    """
    f = proj(down2(C3)) + C4 + proj(up2(C5)) at C4 resolution.

    down2 is stride-2 average pooling, up2 bilinear upsampling to C4's grid.
    """
    if not (c3.shape[1] == c4.shape[1] == c5.shape[1]):
        raise DimensionError(
            f"Channel dims differ: C3 {c3.shape[1]}, C4 {c4.shape[1]}, C5 {c5.shape[1]}"
        )
    proj_c3 = proj_c3 or _identity
    proj_c5 = proj_c5 or _identity
    down = F.avg_pool2d(c3, kernel_size=2, stride=2)
    if down.shape[-2:] != c4.shape[-2:]:
        raise DimensionError(f"down2(C3) is {tuple(down.shape[-2:])}, C4 is {tuple(c4.shape[-2:])}")
    up = F.interpolate(c5, size=c4.shape[-2:], mode="bilinear", align_corners=False)
    return proj_c3(down) + c4 + proj_c5(up)


def scores_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """B x hw x 2 logits -> B x 2hw softmax scores, all glass scores first"""
    if not torch.isfinite(logits).all():
        raise InputError("Classification logits are not finite")
    probs = logits.softmax(dim=-1)
    return torch.cat([probs[..., 0], probs[..., 1]], dim=1)


def select_topk(scores: torch.Tensor, features: torch.Tensor, k: int, fg_only: bool = False) -> SelectedQueries:
    """
    Pick k unique locations from a class-major score vector.

    All 2hw entries are ranked descending and each location is taken at its first
    (best) entry, so a location ranks by max(fg, bg). Equal scores go to the lower
    flat index. With fg_only the background block is ignored.
    """
    if scores.dim() == 1:
        scores = scores.unsqueeze(0)
    if features.dim() == 3:
        features = features.unsqueeze(0)
    B, two_hw = scores.shape
    hw = two_hw // 2
    d = features.shape[1]
    if features.shape[-2] * features.shape[-1] != hw:
        raise DimensionError(f"Score vector covers {hw} locations, features have "
                             f"{features.shape[-2] * features.shape[-1]}")
    if k > hw:
        raise CapacityError(f"Cannot select {k} queries from {hw} locations")

    fg, bg = scores[:, :hw], scores[:, hw:]
    best = fg if fg_only else torch.maximum(fg, bg)
    order = torch.sort(best, dim=1, descending=True, stable=True).indices[:, :k]
    flat = features.flatten(2)  # B x d x hw
    embeddings = flat.gather(2, order.unsqueeze(1).expand(B, d, k)).transpose(1, 2)
    return SelectedQueries(embeddings=embeddings, positions=order, scores=best.gather(1, order))


def positions_to_coords(positions: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Flat indices -> normalized (x, y) cell centres in [0, 1]"""
    ys = torch.div(positions, w, rounding_mode="floor")
    xs = positions - ys * w
    return torch.stack([(xs.to(torch.float64) + 0.5) / w, (ys.to(torch.float64) + 0.5) / h], dim=-1)


class DiscerningQuerySelector(nn.Module):
    """Learned part of DQS: the two 1x1 projections and the glass/background head"""

    def __init__(self, dim: int, num_queries: int, cfg: DQSConfig):
        super().__init__()
        self.cfg = cfg
        self.num_queries = num_queries
        self.proj_c3 = nn.Conv2d(dim, dim, kernel_size=1)
        self.proj_c5 = nn.Conv2d(dim, dim, kernel_size=1)
        self.classifier = nn.Linear(dim, 2)

    def aggregate(self, c3: torch.Tensor, c4: torch.Tensor, c5: torch.Tensor) -> torch.Tensor:
        return aggregate(c3, c4, c5, self.proj_c3, self.proj_c5)

    def classify_logits(self, f: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(f).all():
            raise InputError("Aggregated feature is not finite")
        return self.classifier(f.flatten(2).transpose(1, 2))

    def classify(self, f: torch.Tensor) -> torch.Tensor:
        return scores_from_logits(self.classify_logits(f))

    def forward(self, pyramid: FeaturePyramid, select: bool = True) -> DQSOutput:
        f = self.aggregate(pyramid.c3, pyramid.c4, pyramid.c5)
        logits = self.classify_logits(f)
        scores = scores_from_logits(logits)
        selected = select_topk(scores, f, self.num_queries, fg_only=self.cfg.fg_only) if select else None
        return DQSOutput(features=f, logits=logits, scores=scores, selected=selected)
