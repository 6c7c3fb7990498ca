"""
Checking gradients
==================

Every parameter group's backprop gradient is compared with central
differences on a small configuration.
"""

import time

from ccra import CcraConfig, gradient_check

cfg = CcraConfig(L=3, N=4, d=4, T=3, d_hidden=8, d_llm=4, V=6, k=3)

for variant in ("pai", "decoupled", "shuffled"):
    start = time.perf_counter()
    report = gradient_check(cfg.replace(variant=variant), eps=1e-5)
    summary = "  ".join(f"{group}={err:.1e}" for group, err in report.items())
    print(f"{variant:>9} ({time.perf_counter() - start:.1f}s): {summary}")

# Layer norm almost cancels a positive rescaling of its input, so the
# gradients reaching the gate keys and queries are tiny. The default report
# floors its denominator at 1e-5 for that reason. With a large eps they are
# big enough to check with almost no floor:
print(gradient_check(cfg.replace(ln_eps=1.0), floor=1e-12))
