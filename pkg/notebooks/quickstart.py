# Quick tour: render a synthetic sequence, run an untrained model, score it.
import numpy as np

from stgaze.geometry import ScreenGeometry, angular_error_deg, pog_cm, pog_px
from stgaze.model import STGaze, tiny_config
from stgaze.synth import SceneParams, centroid_gaze, gen_sequence
from stgaze.train import evaluate, predict_batch

params = SceneParams()
sample = gen_sequence(T=8, params=params, seed=0)
print("eye patches", sample.eye_left.shape, "labels (rad)", sample.labels.shape)

# The renderer is invertible from the pupil centroid alone.
recovered = np.array([centroid_gaze(img, params) for img in sample.eye_left])
print("centroid oracle error, deg:", angular_error_deg(recovered, sample.labels).mean().round(3))

geom = ScreenGeometry()
p = pog_cm(sample.labels[0], geom, sample.origin)
print("first-frame point of gaze:", p.round(2), "cm ->", pog_px(p, geom).round(1), "px")

model = STGaze(tiny_config(seed=0))
print("tiny model parameters:", model.num_parameters())

pred = predict_batch(model, [sample])
print("untrained per-frame error, deg:", angular_error_deg(pred[0], sample.labels).round(1))

metrics = evaluate(model, [sample], geom)
print(metrics)
