"""Train two desk-scale patch models: one on a small photo corpus (external
statistics) and one on a single photograph (internal statistics).

Run this first; the other demos load the checkpoints it writes under
demos/output/.  Takes a few minutes on CPU.
"""

from pathlib import Path

from patchlikely import data_io
from patchlikely.flow import bits_per_dim
from patchlikely.toydata import reference_photo, save_photo_corpus
from patchlikely.training import PatchDataset, TrainConfig, train

OUT = Path(__file__).resolve().parent / "output"
OUT.mkdir(exist_ok=True)

# A corpus of 120 augmented crops from the bundled sample photographs stands
# in for a large scene dataset.
corpus_dir = OUT / "corpus"
if not (corpus_dir / "crop_0119.png").exists():
    print("building corpus ...")
    save_photo_corpus(corpus_dir, count=120, size=96, seed=0)

# One photograph for the single-image (internal statistics) model.
single_path = OUT / "camera.png"
data_io.save_image(reference_photo("camera"), single_path)


def progress(tag):
    def log_fn(step, metrics):
        if step % 100 == 0:
            bpd = bits_per_dim(metrics["nll"], 768)
            print(f"[{tag}] step {step:5d}  nll {metrics['nll']:9.1f} nats"
                  f"  {bpd:5.2f} bits/dim")
    return log_fn


print("\ntraining the corpus model (external statistics) ...")
corpus_cfg = TrainConfig(batch_size=48, steps=1500, learning_rate=7e-4,
                         warmup_steps=100, checkpoint_every=500, seed=11,
                         patch_size=16, flow_steps=8, hidden_width=48)
train(corpus_cfg, PatchDataset(corpus_dir, 16),
      out_path=OUT / "external.plfw", log_fn=progress("external"))

print("\ntraining the single-image model (internal statistics) ...")
single_cfg = TrainConfig(batch_size=32, steps=800, learning_rate=1e-3,
                         warmup_steps=100, checkpoint_every=400, seed=7,
                         patch_size=16, flow_steps=6, hidden_width=32)
train(single_cfg, PatchDataset(single_path, 16),
      out_path=OUT / "internal.plfw", log_fn=progress("internal"))

print(f"\ncheckpoints written to {OUT}/external.plfw and {OUT}/internal.plfw")
