"""
Defenses side by side
=====================

Evaluate the undefended classifier, JPEG, median smoothing, diffusion
purification and the localize-and-restore defense on the same cached
patch attacks, and print the report table.
"""

# %%
import json
from pathlib import Path

from diffender.bench import run_experiment_suite, summary_table
from diffender.desk import build_desk

art = build_desk()
out = Path("demo_out")
out.mkdir(exist_ok=True)

# %%
# A suite is a JSON grid of defenses x attacks over shared experiment fields.
# ``expect`` rows turn into regression checks (exit code 4 from the CLI).
suite = {
    "name": "desk_comparison",
    "out_dir": str(out / "suite"),
    "defenses": ["none", "jpeg", "smoothing", "purify", "diffender"],
    "attacks": [{"kind": "advp"}, {"kind": "lavan"}],
    "base": {
        "eval_data": str(art.eval),
        "classifier": str(art.classifier),
        "diffusion": str(art.diffusion),
        "prompts": str(art.prompts),
        "cache_dir": str(art.root / "cache"),
        "num_eval_images": 64,
    },
    "figures": 2,
    "expect": [{"defense": "diffender", "attack": "advp", "metric": "robust_acc", "min": 0.5}],
}
path = out / "suite.json"
path.write_text(json.dumps(suite, indent=2))

# %%
res = run_experiment_suite(path)
print(summary_table(res.reports))
print("regressions:", res.regressions or "none")
print("combined CSV:", res.combined_csv)
