"""Train the defect synthesis GAN briefly and steer where defects appear.

Run: python3 demos/02_train_and_generate.py [iterations]

A few hundred updates show the mechanics. Box-following masks need the
full 2000-update desk preset (about five minutes on one core).
"""

# %% Data and a shortened desk-scale configuration.
import sys
from pathlib import Path

import numpy as np
import torch

from defectsynth import ControlRegionSpec, ToyDefectSpec, desk_config, load_manifest, make_toy_dataset, paint_regions
from defectsynth.datamodel import save_image
from defectsynth.trainer import build_trainer, to_numpy

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
root = Path("demo_out")
make_toy_dataset(ToyDefectSpec(samples_per_class=50, seed=0), root / "toy")
config = desk_config(iterations=iterations, checkpoint_every=iterations)
trainer = build_trainer(config, load_manifest(root / "toy", "train"), root / "gan")

# %% Five critic updates precede every generator update; the log keeps each loss term.
trainer.train(
    callback=lambda i, kind, r: (
        kind == "g" and i % 60 == 59 and print(f"update {i}: rec {r.rec:.3f} sd_con {r.sd_con:.3f}")
    )
)

# %% Deface one normal patch three ways: a uniform crack label, and two boxes.
G = trainer.G.eval()
normal = trainer.normal_images[:1]
maps = {
    "uniform": paint_regions(ControlRegionSpec.from_boxes(["crack:0,0,32,32"]), 32, 32),
    "top_left": paint_regions(ControlRegionSpec.from_boxes(["crack:0,0,16,16"]), 32, 32),
    "bottom_right": paint_regions(ControlRegionSpec.from_boxes(["spallation:16,16,32,32"]), 32, 32),
}
tiles = [to_numpy(normal)[0]]
for name, amap in maps.items():
    with torch.no_grad():
        d, _, m = G.deface(normal, amap.to_tensor(), noise_seed=0)
    box = amap.values.max(axis=2) > 0
    mask = m[0, 0].numpy()
    line = f"{name}: mean mask inside {mask[box].mean():.3f}"
    if (~box).any():
        line += f", outside {mask[~box].mean():.3f}"
    print(line)
    tiles.append(to_numpy(d)[0])
save_image(np.concatenate(tiles, axis=1), root / "deface_grid.png")
print("wrote", root / "deface_grid.png")
