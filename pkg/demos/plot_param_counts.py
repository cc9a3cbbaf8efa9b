"""
Trainable parameters on LLaMA2-7B
=================================

Counts are computed from shapes alone, so the full 7B catalog costs nothing.
"""

from blockaffine import AdapterConfig, CATALOGS, format_millions, param_count

shapes = CATALOGS["llama2-7b"]
print(len(shapes), "adapted matrices")

# LoRA pays (n + m) * r per matrix, Bone pays n * b
for config in [AdapterConfig("lora", rank=36),
               AdapterConfig("bone_col", block_size=64),
               AdapterConfig("bone_row", block_size=64),
               AdapterConfig("bone_unconstrained", block_size=32)]:
    count = param_count(shapes, config)
    print(f"{config.variant:<20}{config.size:>4}{count:>14,}  {format_millions(count)}")

###############################################################################
# On square matrices a block size of 2r matches LoRA rank r exactly.

square = CATALOGS["llama2-7b-attn"]
for r in (4, 8, 16, 32):
    print(r, param_count(square, AdapterConfig("lora", rank=r)),
          param_count(square, AdapterConfig("bone_col", block_size=2 * r)))
