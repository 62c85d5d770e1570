"""Which (input, padding, bias) combinations leave the hourglass output spatially constant?

Prints the 40-cell matrix for an untrained backbone and dumps the first few
feature channels of two contrasting cells as images.
"""
import sys
from pathlib import Path

from padprobe.backbone import BackboneConfig
from padprobe.probe import backbone_output, export_feature_figures, format_matrix, uniformity, uniformity_matrix

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

table = uniformity_matrix(seed=0, feature_channels=16)
print(format_matrix(table))

for inp, pad in [("all_ones", "zero"), ("all_ones", "reflect")]:
    fmap = backbone_output(BackboneConfig(input_mode=inp, padding_mode=pad, feature_channels=16), seed=0)
    stats = uniformity(fmap, 0.0)
    print(f"{inp}/{pad}: max spatial deviation {stats.max_deviation:.3g}")
    export_feature_figures(fmap[:4], out / f"{inp}_{pad}", upscale=8)
