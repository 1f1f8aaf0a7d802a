"""Dev probe: compare stage-1 recipes."""
import sys, time
import numpy as np
from dbreg import geometry as geo, training

tag = sys.argv[1]
lr = float(sys.argv[2])
widths = tuple(int(x) for x in sys.argv[3].split(","))
d = int(sys.argv[4])
epochs = int(sys.argv[5])
blocks = int(sys.argv[6]) if len(sys.argv) > 6 else 2

params = geo.CorruptionParams()
train = geo.generate_dataset(0, 200, params)
test = geo.generate_dataset(1, 50, params)
from dbreg.multires import MultiResConfig
from dbreg.overlap import OverlapConfig
from dbreg.dualreg import RegConfig
ext = MultiResConfig(branches=3, stages=3, k=8, widths=widths, out_dim=d)
net = training.PipelineConfig(overlap=OverlapConfig(extractor=ext, blocks=blocks),
                              reg=RegConfig(extractor=ext))
cfg = training.TrainConfig(stage="overlap", epochs=epochs, lr=lr, seed=0, focal_alpha=0.5)
t0 = time.time()
res = training.train_overlap_stage(train, cfg, net, val=test,
                                   log_fn=lambda s: print(f"[{tag}] {s}", flush=True))
print(f"[{tag}] TOTAL {time.time()-t0:.0f}s final {res.final_metric}")
