"""
Infrared proxy: domain token and cold patches
=============================================

The infrared stand-in is a blurred, contrast-compressed luminance image.
A learned domain token steers sampling toward it; prompts tuned with the
non-uniformity and edge losses restore cold-patch attacks.
"""

# %%
from pathlib import Path

import torch

from diffender.bench import ExperimentConfig, evaluate_defense
from diffender.attacker import AttackSpec
from diffender.data_io import load_checkpoint, save_png
from diffender.desk import build_desk
from diffender.diffusion import empty_prompt, model_from_checkpoint, sample
from diffender.losses import sobel_magnitude
from diffender.tuner import IDC_TEMPLATES, idc_from_checkpoint, template_tokens

art = build_desk()
model, sched = model_from_checkpoint(load_checkpoint(art.diffusion))
out = Path("demo_out")

# %%
# Samples with and without the domain token. Infrared-like images are smoother.
idc = idc_from_checkpoint(load_checkpoint(art.idc))
for name, p in (("idc", template_tokens(model, IDC_TEMPLATES[0], idc)), ("empty", empty_prompt(model))):
    s = sample(p, 50, model, sched, seed=0, batch=16)
    print(f"{name:5s} mean Sobel energy {float(sobel_magnitude(s).mean()):.4f}")
    grid = torch.cat([torch.cat(list(s[r * 4 : r * 4 + 4]), dim=2) for r in range(4)], dim=1)
    save_png(grid.permute(1, 2, 0).numpy(), out / f"samples_{name}.png")

# %%
# Cold-patch attacks against the infrared classifier, with each prompt variant.
base = dict(
    eval_data=str(art.ir_eval), classifier=str(art.classifier_ir), diffusion=str(art.diffusion),
    cache_dir=str(art.root / "cache"), num_eval_images=64, attack=AttackSpec("ir_cold"),
)
print("undefended ASR", evaluate_defense(ExperimentConfig(**base, defense="none")).asr)
for variant in ("full", "no_idc", "no_losses"):
    r = evaluate_defense(ExperimentConfig(**base, defense="diffender", prompts=str(art.ir_prompts(variant))))
    print(f"{variant:10s} ASR {r.asr:.3f}  clean {r.clean_acc:.3f}")
