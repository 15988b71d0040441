"""
Localizing a patch from denoising disagreement
==============================================

Attack a few desk images with a square patch, then compare the one-step
denoisings under the tuned prompt and the empty prompt. The difference
concentrates on the patch; thresholding and refining it gives the mask.
Figures land in ``demo_out/``.
"""

# %%
# Build (or reuse) the desk artifacts. The first call trains everything.
from pathlib import Path

import torch

from diffender.attacker import AttackSpec, run_attack
from diffender.bench import quadriptych
from diffender.data_io import load_checkpoint, load_dataset, save_png
from diffender.desk import build_desk
from diffender.diffusion import model_from_checkpoint
from diffender.localizer import aap_difference, iou, localize
from diffender.tuner import prompts_from_checkpoint
from diffender.victims import classifier_from_checkpoint, predict, to_tensor

art = build_desk()
model, sched = model_from_checkpoint(load_checkpoint(art.diffusion))
clf = classifier_from_checkpoint(load_checkpoint(art.classifier))
prompts = prompts_from_checkpoint(load_checkpoint(art.prompts))
out = Path("demo_out")

# %%
# Eight correctly classified images, each with a 5% patch.
ds = load_dataset(art.eval)
x, y = to_tensor(ds.images), torch.from_numpy(ds.labels)
keep = (torch.from_numpy(predict(clf, x)) == y).nonzero().flatten()[:8]
adv = run_attack(x[keep], y[keep], clf, AttackSpec("advp"))
print("attack success:", adv.success.tolist())

# %%
# The raw difference map and the refined mask.
cfg = prompts.localizer_config()
diff = aap_difference(adv.x_adv, prompts.left(), cfg, model, sched, seed=0)
mask, area = localize(adv.x_adv, prompts.left(), cfg, model, sched, seed=0)
gt = adv.gt_mask > 0
print(f"in-patch / out-of-patch difference: {float(diff[gt].mean() / diff[~gt].mean()):.1f}")
print("IoU per image:", [round(v, 2) for v in iou(mask, adv.gt_mask).tolist()])

# %%
# Save input | difference | mask | ground truth panels.
for i in range(len(keep)):
    save_png(quadriptych(adv.x_adv[i], diff[i], mask[i], adv.gt_mask[i].expand(3, -1, -1)), out / f"aap_{i}.png")
print("figures in", out.resolve())
