"""Render the glyph dataset, train the toy denoiser and look at a few samples.

    python demos/02_train_and_sample.py [workdir] [epochs]

With the default 120 epochs this takes several minutes on one core; pass a
smaller epoch count for a quick look. The checkpoint lands in
<workdir>/model/model.dnlb and is reused by the other demos.
"""
import sys

import numpy as np

from diffusionlab.engine import GuidancePolicy, sample_trajectory
from diffusionlab.experiments import ExperimentConfig, generate_data, train_pipeline
from diffusionlab.probes import TemplateBank, prompt_alignment
from diffusionlab.prompts import NOUNS, ATTRIBUTES, PromptSpec, encode_prompt

work = sys.argv[1] if len(sys.argv) > 1 else "lab_work"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 120
cfg = ExperimentConfig(data_dir=f"{work}/data", checkpoint=f"{work}/model", epochs=epochs)

print("rendering", generate_data(cfg, cfg.data_dir), "images")
model, curve = train_pipeline(cfg, f"{work}/model",
                              log=lambda e, l: print(f"epoch {e:3d}  loss {l:.4f}")
                              if e % 10 == 0 else None)
print(f"{curve.seconds:.0f}s, loss {curve.mean_loss[0]:.4f} -> {curve.mean_loss[-1]:.4f}")


def ascii_art(img):
    g = img.mean(axis=0)
    chars = " .:-=+*#%@"
    idx = np.clip(((g + 1) / 2 * (len(chars) - 1)).round().astype(int), 0, len(chars) - 1)
    return ["".join(chars[i] for i in row) for row in idx]


prompts = [PromptSpec(n, n % len(ATTRIBUTES)) for n in range(4)]
traj = sample_trajectory(model, cfg.schedule(), GuidancePolicy(7.5),
                         [encode_prompt(p) for p in prompts], seed=1)
for p, img in zip(prompts, traj.x0):
    print("\n" + p.text)
    print("\n".join(ascii_art(img)))

bank = TemplateBank()
print("\nclassifier agreement on these four:", prompt_alignment(traj.x0, prompts, bank))
