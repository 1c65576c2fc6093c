"""Token surgery on the trained model: swap the EOS block between prompts,
blank out token classes, and see which prompt the samples follow.

    python demos/04_token_surgery.py [workdir]
"""
import sys

from diffusionlab.engine import GuidancePolicy, sample_trajectory
from diffusionlab.experiments import ExperimentConfig, load_model, prompt_cycle, prompt_pairs
from diffusionlab.probes import TemplateBank, attention_class_weights, prompt_alignment
from diffusionlab.prompts import EOS, SEM, SurgerySpec, apply_surgery, encode_prompt, switch_eos

work = sys.argv[1] if len(sys.argv) > 1 else "lab_work"
cfg = ExperimentConfig(checkpoint=f"{work}/model")
model, sched, bank = load_model(cfg), cfg.schedule(), TemplateBank()


def sample(conds):
    return sample_trajectory(model, sched, GuidancePolicy(7.5), conds, keep_latents=False)


pairs = prompt_pairs(200, seed=0)
traj = sample([switch_eos(encode_prompt(a), encode_prompt(b)) for a, b in pairs])
src = prompt_alignment(traj.x0, [a for a, _ in pairs], bank)
tgt = prompt_alignment(traj.x0, [b for _, b in pairs], bank)
print("switched EOS: shape follows source", src.shape_accuracy, "target", tgt.shape_accuracy)
print("              attribute follows source", src.attribute_accuracy,
      "target", tgt.attribute_accuracy)

w = attention_class_weights(traj)
print("\nmean attention per token class at a few steps")
for row in w[::10]:
    print(f"  t={row['t']:>4}  SOS {row['SOS']:.3f}  SEM {row[SEM]:.3f}  EOS {row[EOS]:.3f}")

prompts = prompt_cycle(200, seed=1)
base = [encode_prompt(p) for p in prompts]
print("\nvariant        shape  attribute")
for label, spec in [("original", None), ("zero SEM", SurgerySpec("zero_class", SEM)),
                    ("zero EOS", SurgerySpec("zero_class", EOS)),
                    ("SOS only", SurgerySpec("sos_only"))]:
    conds = base if spec is None else [apply_surgery(s, None, spec) for s in base]
    rep = prompt_alignment(sample(conds).x0, prompts, bank)
    print(f"{label:<12} {rep.shape_accuracy:6.2f}  {rep.attribute_accuracy:9.2f}")
