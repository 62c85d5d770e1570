"""Short training run on SimB, then P1/P2 against the constant-prediction oracle.

A few hundred iterations on CPU only gets part of the way; the point is the
comparison between a varying-feature config and a position-blind one.
"""
import sys

import torch

from padprobe.backbone import BackboneConfig
from padprobe.dataset import DatasetManifest, build_dataset
from padprobe.evaluator import evaluate
from padprobe.probe import constant_prediction_oracle
from padprobe.trainer import TrainConfig, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
torch.set_num_threads(1)

train_set = build_dataset(DatasetManifest("SimB", "train", 50, 0))
test_set = build_dataset(DatasetManifest("SimB", "test", 10, 0))
print("oracle p1/p2: %.1f / %.1f" % constant_prediction_oracle(train_set, test_set))

for inp, pad in [("visual", "zero"), ("all_ones", "reflect")]:
    cfg = TrainConfig(iterations=iterations, backbone=BackboneConfig(input_mode=inp, padding_mode=pad,
                                                                      feature_channels=8))
    ckpt = train(cfg, train_set)
    p1, p2 = evaluate(ckpt, test_set)
    print(f"{inp}/{pad}: final loss {ckpt.losses[-1]:.4f}  p1 {p1:.1f}  p2 {p2:.1f}")
