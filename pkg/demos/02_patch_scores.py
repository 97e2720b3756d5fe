"""Score patches of a photograph and compare internal vs external rankings.

The same min/max ranking runs once with the corpus-trained checkpoint and
once with the single-image checkpoint; only the checkpoint changes.  The
most-likely patches are smooth under both, while the least-likely ones
differ: rare-in-the-image versus rare-in-the-world.
"""

from pathlib import Path

import numpy as np

from patchlikely import data_io
from patchlikely.analysis import minmax_patches
from patchlikely.training import load_checkpoint

OUT = Path(__file__).resolve().parent / "output"
image = data_io.load_image(OUT / "camera.png")

for tag in ("external", "internal"):
    params = load_checkpoint(OUT / f"{tag}.plfw").params
    top, bottom = minmax_patches(image, params, k=100, stride=4)

    target = OUT / f"minmax_{tag}"
    target.mkdir(exist_ok=True)
    for i, score in enumerate(top[:8]):
        data_io.save_image(score.patch8, target / f"most_{i}.png")
    for i, score in enumerate(bottom[:8]):
        data_io.save_image(score.patch8, target / f"least_{i}.png")

    smooth = lambda ps: np.mean([p.patch8.astype(float).std() for p in ps])
    print(f"{tag:9s}: most-likely mean NLL {np.mean([p.nll for p in top]):9.1f}"
          f" (pixel std {smooth(top):5.1f}) | least-likely mean NLL "
          f"{np.mean([p.nll for p in bottom]):9.1f} (pixel std {smooth(bottom):5.1f})")

print(f"\npatch crops written under {OUT}/minmax_external and minmax_internal")
