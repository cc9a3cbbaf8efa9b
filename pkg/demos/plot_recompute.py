"""
Recomputing the weight delta
============================

Recompute mode drops the weight-sized buffer after forward and rebuilds it in
backward. The loss curve is unchanged bit for bit.
"""

from blockaffine import AdapterConfig
from blockaffine.model import SyntheticTask
from blockaffine.train import TrainRun, train

task = SyntheticTask(dataset_size=1024)
cached = train(TrainRun(AdapterConfig("bone_col", block_size=16), task=task, steps=100))
recompute = train(TrainRun(AdapterConfig("bone_col", block_size=16, recompute=True), task=task, steps=100))

print("identical logs:", cached.log == recompute.log)
for name, res in [("cached", cached), ("recompute", recompute)]:
    print(name, res.memory.to_dict())
