"""
Bone against LoRA and the two ablations
=======================================

Four arms at 1024 trainable parameters per layer on the desk teacher/student
task. Takes about half a minute.
"""

from pathlib import Path
from statistics import median

from blockaffine.experiment import ExperimentConfig
from blockaffine.train import train

configs = Path(__file__).resolve().parent.parent / "configs"

for arm in ("bone_col", "lora", "bone_unconstrained", "bone_hadamard"):
    cfg = ExperimentConfig.load(configs / f"desk_{arm}.json")
    results = [train(run) for run in cfg.runs()]
    print(f"{arm:<20} step100 {median(r.loss_at(100) for r in results):.4f}"
          f"  final {median(r.final_loss for r in results):.4f}")

###############################################################################
# With this teacher LoRA leads at step 100 and overall.
# Bone does beat both of its ablations at the end.
