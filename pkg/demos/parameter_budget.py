"""
Where the parameters go
=======================

Closed-form counts per group, checked against the live parameter inventory,
and a report for an encoder/LLM pairing of realistic width.
"""

from ccra import CcraConfig, count_parameters, enumerate_parameters, init_params

cfg = CcraConfig()
print("default:", count_parameters(cfg))
print("enumerated:", enumerate_parameters(init_params(cfg)))

# Tying the three stage queries, or the three norm affines, trims the count.
for flags in ({"tie_queries": True}, {"tie_norms": True}):
    print(flags, count_parameters(cfg.replace(**flags))["total"])

# 24 layers of 576 patches, width 1024, into a 4096-wide language model.
# The visual projection dominates.
wide = CcraConfig(L=24, N=576, d=1024, d_llm=4096, d_hidden=128, k=5)
for group, n in count_parameters(wide).items():
    print(f"{group:>13}: {n:>10,}")
