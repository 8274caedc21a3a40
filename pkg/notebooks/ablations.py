# Build every ablation variant at full size and print its shape path and size.
import numpy as np

from stgaze.model import ABLATIONS, ModelConfig, STGaze

rng = np.random.default_rng(0)
x = rng.random((1, 2, 3, 128, 128)).astype(np.float32)
for name in ABLATIONS:
    model = STGaze(ModelConfig().with_ablation(name))
    out = model(x, x, x)
    print(f"{name:14s} params {model.num_parameters():>9,d}  output {out.angles.shape}")
