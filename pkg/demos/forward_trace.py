"""
A single forward pass
=====================

Run one seeded input through the default configuration and look at every
intermediate map the forward pass records.
"""

import numpy as np

from ccra import CcraConfig, evaluate, init_params, synth_inputs

cfg = CcraConfig()
params = init_params(cfg)
text, visual, target = synth_inputs(cfg)
print(f"{cfg.T} text tokens, {cfg.L} layers of {cfg.N} patches, width {cfg.d}")

trace = evaluate(params, text, visual, cfg)
for name, arr in trace.as_arrays().items():
    print(f"{name:>12}: shape {arr.shape}")

# The score head starts at zero, so every text token counts equally.
print("token importance:", np.round(trace.alpha.data, 4))

# Layer weights before and after depth smoothing. The smoothed row is a
# probability vector.
print("raw layer logits:   ", np.round(trace.w_l_raw.data, 4))
print("smoothed weights:   ", np.round(trace.w_l_smoothed.data, 4), "sum", trace.w_l_smoothed.data.sum())

# Toy decoder output over the vocabulary.
probs = np.exp(trace.logits.data - trace.logits.data.max())
probs /= probs.sum()
print("next-token distribution:", np.round(probs, 3), "target", target)
