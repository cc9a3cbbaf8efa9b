"""
What each variant does to one weight matrix
===========================================

A 4x4 weight tiled into 2x2 blocks makes the block sharing visible.
"""

import numpy as np

from blockaffine import Tensor
from blockaffine.adapters import delta_w_col, delta_w_hadamard, delta_w_row
from blockaffine.reference import naive_delta_w_col

W = np.arange(16.0).reshape(4, 4) / 16
bone = np.stack([np.eye(2), 2 * np.eye(2)])

# col shares one bone block across each block row
print(delta_w_col(Tensor(W), Tensor(bone)).data)

# row shares one per block column
print(delta_w_row(Tensor(W), Tensor(bone)).data)

# hadamard swaps the block product for an elementwise one
print(delta_w_hadamard(Tensor(W), Tensor(bone)).data)

###############################################################################
# The vectorized kernel against a plain per-block loop

rng = np.random.default_rng(0)
W, bone = rng.standard_normal((32, 64)), rng.standard_normal((4, 8, 8))
fast = delta_w_col(Tensor(W), Tensor(bone)).data
print("max abs diff vs loop:", np.max(np.abs(fast - naive_delta_w_col(W, bone))))
