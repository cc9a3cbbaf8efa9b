"""
Merging and exporting
=====================

Train briefly, fold the adapter into the weights, save, reload.
"""

import tempfile
from pathlib import Path

import numpy as np

from blockaffine import AdapterConfig
from blockaffine.model import SyntheticTask, generate_task
from blockaffine.persistence import export_merged, load_model
from blockaffine.tensor import no_tape
from blockaffine.train import TrainRun, train

res = train(TrainRun(AdapterConfig("bone_col", block_size=16), task=SyntheticTask(dataset_size=512),
                     steps=100, lr=3e-3, dtype="f64"))

path = Path(tempfile.mkdtemp()) / "merged.ckpt"
export_merged(path, res.model)
merged, meta = load_model(path)
print(meta)

X, _ = generate_task(SyntheticTask(seed=1, dataset_size=64), res.model.base())
with no_tape():
    print("max abs diff:", np.max(np.abs(merged.forward(X).data - res.model.forward(X).data)))
