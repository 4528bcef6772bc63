"""The four ablation axes on the toy stream.

Each table is one run per value with a shared seed. Read the merged column
of the merge-ratio table and the reward_sd column of the window table.
"""

from streamkv import PipelineConfig
from streamkv.harness import sweep

base = PipelineConfig(per_layer_budget=256)
for axis in ("lambda", "window", "merge_ratio", "components"):
    print(f"\n== {axis} ==")
    print(sweep(base, axis, frames=20).format())
