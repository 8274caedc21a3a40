# Train the tiny model on rendered-on-demand sequences and watch validation error.
# Takes a few minutes on one core; pass a smaller count for a faster look.
import sys
import time

from stgaze.model import STGaze, tiny_config
from stgaze.synth import SceneParams, SyntheticDataset
from stgaze.train import TrainConfig, train

n = int(sys.argv[1]) if len(sys.argv) > 1 else 512
train_set = SyntheticDataset(n, 8, SceneParams(), seed=1)
val_set = SyntheticDataset(32, 8, SceneParams(), seed=2)

model = STGaze(tiny_config(seed=0))
start = time.time()


def show(row):
    print(f"epoch {row['epoch']}: train loss {row['train_loss']:.3f}  "
          f"val {row['val_ang_deg']:.2f} deg  ({time.time() - start:.0f} s)")


result = train(TrainConfig(epochs=5, base_lr=1e-3, T=8, seed=0), train_set, model, val_set, on_epoch=show)
print("best validation error, deg:", round(result.best_val_ang_deg, 2))
