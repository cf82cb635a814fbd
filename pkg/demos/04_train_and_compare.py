"""
Train adaptive and top-2 models on the smoke corpus
===================================================

Two short runs with the same seed. The adaptive run calls fewer experts per
token; the analysis table shows where in the network it still uses two.
Takes a few minutes on one core.
"""

import sys
import tempfile
from pathlib import Path

from adaptmoe.config import RunConfig
from adaptmoe.runner import analyze, format_table, train
from adaptmoe.synth import write_corpora

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
paths = write_corpora(root / "corpus", n_train=1500, n_val=150, seed=10)

results = {}
for policy in ["top2", "adaptive"]:
    cfg = RunConfig(train_path=str(paths["train"]), val_path=str(paths["val"]),
                    output_dir=str(root / policy), policy=policy, epochs=1, eval_every=25)
    results[policy] = train(cfg)

rows = []
for policy, res in results.items():
    rows.append([policy, res.final_val_loss, res.mean_frac_top1, res.total_expert_flops / 1e9])
print(format_table(["policy", "val loss", "frac_top1", "expert GFLOPs"], rows))

# %%
# share of two-expert tokens per layer, averaged over the epoch
out = analyze(results["adaptive"].run_dir)
header = ["epoch"] + [f"layer {i} %" for i in out["layers"]]
print(format_table(header, [[r["epoch"]] + [r[f"layer_{i}"] for i in out["layers"]] for r in out["epochs"]]))
print("run directories under", root)
