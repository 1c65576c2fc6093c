"""Skip the conditional pass for the last `a` sampled steps and see what is
lost. Needs the checkpoint from 02_train_and_sample.py.

    python demos/03_guidance_dropping.py [workdir]
"""
import sys

from diffusionlab.engine import DROP_EARLY, DROP_LATE, FULL, GuidancePolicy, sample_trajectory
from diffusionlab.experiments import ExperimentConfig, load_model, prompt_cycle
from diffusionlab.probes import TemplateBank, l1_distance, prompt_alignment
from diffusionlab.prompts import encode_prompt

work = sys.argv[1] if len(sys.argv) > 1 else "lab_work"
cfg = ExperimentConfig(checkpoint=f"{work}/model")
model, sched, bank = load_model(cfg), cfg.schedule(), TemplateBank()
prompts = prompt_cycle(200, seed=0)
conds = [encode_prompt(p) for p in prompts]

base = sample_trajectory(model, sched, GuidancePolicy(7.5, 0, FULL), conds, keep_latents=False)
print(" mode        a   passes  saved   L1 to full   shape  attribute")
for mode in (DROP_LATE, DROP_EARLY):
    for a in (0, 10, 20, 30, 40, 50):
        tr = sample_trajectory(model, sched, GuidancePolicy(7.5, a, mode), conds,
                               keep_latents=False)
        rep = prompt_alignment(tr.x0, prompts, bank)
        saved = (base.total_evals - tr.total_evals) / base.total_evals
        print(f" {mode:<10} {a:>2}   {tr.total_evals:>6}  {saved:5.0%}   "
              f"{l1_distance(tr.x0, base.x0):10.3f}   {rep.shape_accuracy:5.2f}  "
              f"{rep.attribute_accuracy:9.2f}")
