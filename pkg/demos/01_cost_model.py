"""
Where the device compute goes
=============================

Every scheme fine-tunes the same 12-layer GPT-2 with rank-4 adapters. They
differ in what a device has to run. This script prices one training sample
per scheme with the analytic cost model (one multiply-add = 2 FLOPs).
"""

# %%
# The model and workload profile: GPT-2 small, 128-token sequences.
from splitfrozen import costmodel as cm
from splitfrozen.harness import load_config
from splitfrozen.scheduler import allocate_layers, device_flops_per_sample

cfg = load_config("paper.gpt2")
cluster = cfg.cluster_spec()
model, work = cluster.model, cluster.workload.per_sample()

print(f"forward, one layer:      {cm.forward_flops_per_layer(model, work) / 1e6:10.1f} MFLOP")
print(f"adapters, one layer:     {cm.lora_flops_per_layer(model, work) / 1e6:10.1f} MFLOP")

# %%
# A frozen prefix needs no backward pass, so a device that holds ``L``
# frozen layers pays ``L`` forwards and nothing else. The allocator gives
# the weaker devices shallower prefixes.
depths = allocate_layers(cluster)
print("prefix depths per device:", depths)

# %%
# Device MFLOP per sample, fleet average, for every scheme.
fed = device_flops_per_sample(cluster, "fedlora")
for scheme in ("splitfrozen", "splitlora", "fedlora", "cenlora"):
    f = device_flops_per_sample(cluster, scheme, depths if scheme == "splitfrozen" else None)
    print(f"{scheme:12s} {f / 1e6:9.1f} MFLOP   {f / fed:6.1%} of fedlora")

# %%
# ``cenlora`` trains everything on the server. Its device figure is what a
# single device would need to fine-tune the whole model alone, which is the
# same as fedlora's.
