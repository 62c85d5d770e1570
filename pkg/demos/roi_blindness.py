"""RoI pooling on a constant map cannot tell two boxes apart; on a varying map it can."""
import torch

from padprobe.interaction import roi_pool

boxes = [(4.0, 4.0, 8.0, 8.0), (40.0, 28.0, 44.0, 32.0)]
maps = {
    "constant": torch.full((2, 16, 16), 0.3),
    "varying": torch.randn(2, 16, 16, generator=torch.Generator().manual_seed(0)),
}
for name, fmap in maps.items():
    a, b = (roi_pool(fmap, box) for box in boxes)
    print(f"{name:8s} identical features for both boxes: {torch.equal(a, b)}")
