"""Backbone + interaction network wired into one box-sequence predictor."""
from __future__ import annotations

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig
from .interaction import InteractionNetwork, roi_pool_batch


def boxes_to_cxcywh(boxes: torch.Tensor, frame_size: tuple[int, int]) -> torch.Tensor:
    """Pixel ``(x_min, y_min, x_max, y_max)`` to normalized ``(cx, cy, w, h)``."""
    width, height = frame_size
    scale = boxes.new_tensor([width, height, width, height])
    x0, y0, x1, y1 = (boxes / scale).unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


class DynamicsModel(nn.Module):
    def __init__(self, config: BackboneConfig, frame_size: tuple[int, int], roi_size: int = 4, seed: int = 0):
        super().__init__()
        self.config = config
        self.frame_size = tuple(frame_size)
        self.roi_size = roi_size
        self.backbone = Backbone(config, frame_size, seed=seed)
        self.interaction = InteractionNetwork(config.feature_channels, t_ref=config.in_frames, roi_size=roi_size)

    def features(self, frames: torch.Tensor | None, batch: int) -> torch.Tensor:
        return self.backbone(frames, batch)

    def pool(self, feature_map: torch.Tensor, ref_boxes: torch.Tensor) -> torch.Tensor:
        """(B, C, H', W') and (B, T_ref, 3, 4) pixel boxes -> (B, T_ref, 3, C, k, k)."""
        bsz, t, n, _ = ref_boxes.shape
        pooled = roi_pool_batch(
            feature_map, ref_boxes.reshape(bsz, t * n, 4), self.roi_size, 1.0 / self.config.downsample_factor
        )
        return pooled.reshape(bsz, t, n, *pooled.shape[2:])

    def forward(self, frames: torch.Tensor | None, ref_boxes: torch.Tensor, horizon: int) -> torch.Tensor:
        """Predicted normalized boxes (B, horizon, 3, 4)."""
        fmap = self.features(frames, ref_boxes.shape[0])
        return self.interaction(self.pool(fmap, ref_boxes), horizon)
