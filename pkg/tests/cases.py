"""Shared configurations and the implementation-vs-oracle comparison."""

import itertools

import numpy as np

import oracle
from ccra.pipeline import CcraConfig, ccra_forward, init_params, jitter_params, synth_inputs

KERNEL_FOR_DEPTH = {1: 1, 2: 3, 4: 5}


def grid_configs():
    """L x N x T x d x d_hidden grid; d_llm=3 so the text projection is exercised at both widths."""
    for L, N, T, d, dh in itertools.product((1, 2, 4), (1, 4, 9), (1, 3), (2, 4), (1, 2)):
        yield CcraConfig(L=L, N=N, d=d, T=T, d_hidden=dh, d_llm=3, V=5, k=KERNEL_FOR_DEPTH[L])


def oracle_errors(cfg, seed=0):
    """Max abs difference per trace field between ccra_forward and the loop oracle."""
    params = jitter_params(init_params(cfg, seed=seed, zero_score_head=False), seed=seed + 100, scale=0.3)
    text, vs, _ = synth_inputs(cfg, seed)
    got = ccra_forward(text, vs, params, cfg).as_arrays()
    want = oracle.forward(text.tokens.data.tolist(), vs.layers.data.tolist(), oracle.params_as_lists(params),
                          cfg.k, cfg.kernel_sigma, cfg.ln_eps)
    return {name: float(np.abs(got[name] - np.asarray(want[name])).max()) for name in got}
