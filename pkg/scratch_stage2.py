"""Dev probe: stage-2 registration training quality."""
import sys
import numpy as np
from dbreg import geometry as geo, training
from dbreg.checkpoint import load_checkpoint

tag, lr, epochs = sys.argv[1], float(sys.argv[2]), int(sys.argv[3])
ckpt = sys.argv[4] if len(sys.argv) > 4 else None

params = geo.CorruptionParams()
train = geo.generate_dataset(0, 200, params)
test = geo.generate_dataset(1, 50, params)
net = training.PipelineConfig.desk_scale()
cfg = training.TrainConfig(stage="registration", epochs=epochs, lr=lr, seed=0)
ov = load_checkpoint(ckpt) if ckpt else {}
res = training.train_registration_stage(
    train, cfg, net, ov, val=test, no_overlap=ckpt is None,
    log_fn=lambda s: print(f"[{tag}] {s}", flush=True))
print(f"[{tag}] final {res.final_metric}", flush=True)
