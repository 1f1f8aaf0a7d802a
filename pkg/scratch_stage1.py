"""Dev probe: full-scale stage-1 run at candidate lr."""
import os, sys, time
import numpy as np
from dbreg import geometry as geo, training

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-4
alpha = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 60

params = geo.CorruptionParams()
t0 = time.time()
train = geo.generate_dataset(0, 200, params)
test = geo.generate_dataset(1, 50, params)
print(f"data gen {time.time()-t0:.1f}s", flush=True)
net = training.PipelineConfig.desk_scale()
cfg = training.TrainConfig(stage="overlap", epochs=epochs, lr=lr, seed=0, focal_alpha=alpha)
t0 = time.time()
res = training.train_overlap_stage(train, cfg, net, val=test, log_fn=lambda s: print(s, flush=True))
print(f"TOTAL {time.time()-t0:.1f}s  final F1 {res.final_metric['f1']:.4f}")
print(res.final_metric)
