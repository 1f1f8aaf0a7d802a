"""Dev probe: stage-1 with alpha variants."""
import sys
import numpy as np
from dbreg import geometry as geo, training

tag, lr, alpha, epochs = sys.argv[1], float(sys.argv[2]), float(sys.argv[3]), int(sys.argv[4])
params = geo.CorruptionParams()
train = geo.generate_dataset(0, 200, params)
test = geo.generate_dataset(1, 50, params)
net = training.PipelineConfig.desk_scale()
cfg = training.TrainConfig(stage="overlap", epochs=epochs, lr=lr, seed=0, focal_alpha=alpha)
res = training.train_overlap_stage(train, cfg, net, val=test,
                                   log_fn=lambda s: print(f"[{tag}] {s}", flush=True))
print(f"[{tag}] final {res.final_metric}", flush=True)
