"""Train the toy decoder with and without contrastive supervision on Q^0.

Both runs see the same scenes and start from the same weights. Pass the
number of epochs as the first argument (default 50, about 30 s per run).
"""

import sys

from mmcl import SceneParams, TrainConfig, run_training

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 50
for label, target in (("MMCL on layer 0", (0,)), ("no contrastive", ())):
    trace, _ = run_training(TrainConfig(epochs=epochs, target_layers=target, seed=0),
                            SceneParams())
    last = trace.records[-1]
    print(f"{label:16s} consistency {last.group_class_consistency:.3f}"
          f" (fixed labels {last.fixed_group_class_consistency:.3f})"
          f"  detection {last.detection_accuracy:.3f}  homogeneity {last.homogeneity:.3f}")
