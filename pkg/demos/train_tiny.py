"""A few minutes of training on 10-node bi-objective TSP instances.

Prints one line per epoch; epoch 0 is the untrained model. Pass an output
folder to keep the metric log and checkpoints.

    python demos/train_tiny.py [out_dir]
"""

import sys

from mgroute.instancegen import GenConfig
from mgroute.model import ModelConfig
from mgroute.training import TrainConfig, train

out = sys.argv[1] if len(sys.argv) > 1 else None
res = train(
    TrainConfig(epochs=5, instances_per_epoch=512, batch_size=32, k1=10, k2_train=8, k2_eval=8, lr=1e-3),
    GenConfig.parse("flex2", 10, "motsp"),
    ModelConfig.desk("motsp", edge_stage="learned"),
    out_dir=out,
    progress=lambda rec, secs: print(f"epoch {rec['epoch']:2d}  val cost {rec['val_cost']:.4f}  beta {rec['beta']:.3f}  {secs:.0f}s"),
)
print(f"untrained val cost {res.log[0]['val_cost']:.4f}, final {res.log[-1]['val_cost']:.4f}")
