"""
Where does the model look?
==========================

Trains the minimal model briefly on synthetic textures, then renders Grad-CAM
overlays for one validation image per class. The heatmap comes from the last
residual block; the score is the raw class logit.
"""
import tempfile
from pathlib import Path

import numpy as np

from phytnet import arch, data, gradcam, holdout
from phytnet.metrics import predict_class
from phytnet.train import TrainConfig

work = Path(tempfile.mkdtemp(prefix="phytnet-cam-"))
manifest = data.synthesize_dataset(40, seed=3, out=work / "data")
plan = data.kfold_split(manifest, k=4, seed=42)
cfg = arch.ModelConfig(stem_channels=16, stage_channels=[16], blocks_per_stage=[1], groups=4, activation="relu")
result = holdout(cfg, manifest, plan, 0, TrainConfig(lr=1e-3, max_epochs=15), run_dir=work / "run")
print(f"val macro F1 {result.val.macro_f1:.3f} (best epoch {result.best_epoch})")

model = arch.load_checkpoint(work / "run" / "best.ckpt")
stats = plan.norm_stats[0]
mean = np.asarray(stats["mean"], np.float32)[:, None, None]
std = np.asarray(stats["std"], np.float32)[:, None, None]

seen = set()
for sid in result.val_ids:
    label = manifest.labels[manifest.source_ids.index(sid)]
    if label in seen:
        continue
    seen.add(label)
    img = data.resize(data.read_image(manifest.image_path(sid)), cfg.input_size)
    x = (img - mean) / std
    pred = int(predict_class(arch.forward(model, x[None]), 4)[0])
    heat = gradcam.grad_cam(model, x, label)
    name = gradcam.overlay_filename(sid, manifest.class_names[label], manifest.class_names[pred])
    gradcam.overlay(heat, img, work / name)
    peak = tuple(int(i) for i in np.unravel_index(heat.values.argmax(), heat.values.shape))
    print(f"{sid}: feature map {heat.source_shape}, peak at {peak} -> {work / name}")
