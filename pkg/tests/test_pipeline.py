import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import cases
from ccra.errors import ConfigError, EmptyInput, ShapeMismatch, StageError, UnknownVariant
from ccra.lpwca import VisualStack
from ccra.lwca import LwcaParams
from ccra.numerics import Tensor, cross_entropy, layer_norm
from ccra.pipeline import (
    GROUPS,
    VARIANTS,
    CcraConfig,
    ForwardTrace,
    batch_loss,
    ccra_forward,
    count_parameters,
    depth_query_task,
    enumerate_parameters,
    evaluate,
    fuse,
    gradient_check,
    init_params,
    jitter_params,
    project_visual,
    synth_inputs,
    toy_train_step,
    train,
    variant_forward,
)

SMALL = CcraConfig(L=2, N=4, d=3, T=2, d_hidden=2, d_llm=3, V=5, k=3)


def neutral_params(cfg):
    """Score head, stage queries and stage keys all zero."""
    params = init_params(cfg)
    c = params.conditioning
    zeroed = [c.w_s, c.w_q_lp, c.w_q_l, c.w_q_p, params.lpwca.w_k, params.lwca.w_k, params.pwca.w_k]
    return params.replace_values({id(t): np.zeros(t.shape) for t in zeroed})


class TestConfig:
    @pytest.mark.parametrize("change,field", [
        ({"L": 0}, "L"), ({"k": 4}, "k"), ({"k": 7, "L": 3}, "k"), ({"sigma": 0.0}, "sigma"),
        ({"variant": "serial"}, "variant"), ({"d_hidden": 1.5}, "d_hidden"), ({"seed": -1}, "seed"),
    ])
    def test_invalid(self, change, field):
        with pytest.raises(ConfigError, match=f"^{field}"):
            CcraConfig(**change)

    def test_defaults(self):
        cfg = CcraConfig()
        assert (cfg.d_hidden, cfg.k, cfg.variant) == (128, 5, "pai")
        assert cfg.kernel_sigma == pytest.approx(5 / 3)


class TestFuseAndProject:
    def test_fuse_doubles_equal_inputs(self):
        r = np.random.default_rng(0).standard_normal((3, 2))
        np.testing.assert_array_equal(fuse(Tensor(r), Tensor(r)).data, np.hstack([r, r]))

    def test_fuse_order(self):
        np.testing.assert_array_equal(fuse(Tensor([[1.5]]), Tensor([[-2.0]])).data, [[1.5, -2.0]])

    def test_fuse_slices_back(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        out = fuse(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(out[:, :3], a)
        np.testing.assert_array_equal(out[:, 3:], b)

    def test_fuse_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fuse(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))

    def _params(self, w, b, d, d_llm):
        cfg = CcraConfig(L=1, N=1, d=d, T=1, d_hidden=1, d_llm=d_llm, V=2, k=1)
        p = init_params(cfg)
        return p.replace_values({id(p.w_proj): np.asarray(w, float), id(p.b_proj): np.asarray(b, float)})

    def test_zero_projection_gives_bias(self):
        p = self._params(np.zeros((4, 3)), [0.1, 0.2, 0.3], 2, 3)
        out = project_visual(Tensor(np.random.default_rng(2).standard_normal((5, 4))), p).data
        np.testing.assert_array_equal(out, np.tile([0.1, 0.2, 0.3], (5, 1)))

    def test_identity_projection(self):
        x = np.random.default_rng(3).standard_normal((3, 4))
        p = self._params(np.eye(4), np.zeros(4), 2, 4)
        np.testing.assert_array_equal(project_visual(Tensor(x), p).data, x)

    def test_hand_case(self):
        # [a, b] @ [[p], [q]] + c with a=2, b=-1, p=3, q=4, c=0.5
        p = self._params([[3.0], [4.0]], [0.5], 1, 1)
        np.testing.assert_array_equal(project_visual(Tensor([[2.0, -1.0]]), p).data, [[2 * 3 - 4 + 0.5]])


class TestForward:
    def test_matches_oracle(self):
        errors = cases.oracle_errors(SMALL, seed=3)
        assert set(errors) == set(ForwardTrace.FIELDS)
        assert max(errors.values()) < 1e-10

    @pytest.mark.parametrize("cfg", list(cases.grid_configs())[::7], ids=str)
    def test_matches_oracle_on_grid_sample(self, cfg):
        assert max(cases.oracle_errors(cfg, seed=1).values()) < 1e-10

    def test_neutral_case(self):
        cfg = CcraConfig(L=4, N=4, d=3, T=3, d_hidden=5, d_llm=3, V=4, k=3)
        params = neutral_params(cfg)
        text, vs, _ = synth_inputs(cfg, 0)
        tr = ccra_forward(text, vs, params, cfg)
        np.testing.assert_array_equal(tr.alpha.data, np.full(3, 1 / 3))
        np.testing.assert_array_equal(tr.W_lp.data, np.zeros((4, 4)))
        np.testing.assert_allclose(tr.w_l_smoothed.data, np.full(4, 0.25), atol=1e-15)
        np.testing.assert_array_equal(tr.w_p.data, np.zeros(4))
        lp = params.lpwca
        np.testing.assert_array_equal(tr.F_lp.data, layer_norm(vs.layers, lp.gamma, lp.beta).data)
        pw = params.pwca
        np.testing.assert_array_equal(tr.F_regional.data, layer_norm(tr.F_semantic, pw.gamma, pw.beta).data)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_shapes(self, seed):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(1, 6))
        cfg = CcraConfig(L=L, N=int(rng.integers(1, 10)), d=int(rng.integers(1, 6)), T=int(rng.integers(1, 5)),
                         d_hidden=int(rng.integers(1, 8)), d_llm=int(rng.integers(1, 7)), V=int(rng.integers(2, 9)),
                         k=1)
        tr = ccra_forward(*synth_inputs(cfg, seed)[:2], init_params(cfg), cfg)
        assert tr.F_fused.shape == (cfg.N, 2 * cfg.d)
        assert tr.projected.shape == (cfg.N, cfg.d_llm)
        assert tr.logits.shape == (cfg.V,)
        assert tr.W_lp.shape == (cfg.L, cfg.N) and tr.w_p.shape == (cfg.N,) and tr.alpha.shape == (cfg.T,)

    def test_fused_columns(self):
        text, vs, _ = synth_inputs(SMALL, 0)
        tr = ccra_forward(text, vs, init_params(SMALL), SMALL)
        np.testing.assert_array_equal(tr.F_fused.data[:, :3], tr.F_regional.data)
        np.testing.assert_array_equal(tr.F_fused.data[:, 3:], vs.layers.data[-1])

    def test_deterministic(self):
        cfg = CcraConfig()
        runs = [evaluate(init_params(cfg), *synth_inputs(cfg)[:2], cfg).as_arrays() for _ in range(2)]
        for name in ForwardTrace.FIELDS:
            assert runs[0][name].tobytes() == runs[1][name].tobytes()

    def test_concurrent_forward_passes_agree(self):
        cfg = CcraConfig()
        params = init_params(cfg)
        text, vs, _ = synth_inputs(cfg)
        ref = evaluate(params, text, vs, cfg).F_fused.data
        with ThreadPoolExecutor(4) as pool:
            outs = list(pool.map(lambda _: ccra_forward(text, vs, params, cfg).F_fused.data, range(8)))
        for out in outs:
            assert out.tobytes() == ref.tobytes()

    def test_stage_errors_name_the_stage(self):
        params = init_params(SMALL)
        bad = dataclasses.replace(params, lwca=LwcaParams(Tensor(np.ones((4, 2))), params.lwca.gamma,
                                                          params.lwca.beta))
        with pytest.raises(StageError) as exc:
            ccra_forward(*synth_inputs(SMALL)[:2], bad, SMALL)
        assert exc.value.stage == "lwca"
        assert isinstance(exc.value.cause, ShapeMismatch)
        assert str(exc.value).startswith("[lwca]")

    def test_input_shape_checked(self):
        text, _, _ = synth_inputs(SMALL)
        vs = VisualStack(Tensor(np.ones((2, 5, 3))))
        with pytest.raises(StageError) as exc:
            ccra_forward(text, vs, init_params(SMALL), SMALL)
        assert exc.value.stage == "inputs"


class TestVariants:
    cfg = CcraConfig()

    def traces(self):
        params = init_params(self.cfg)
        text, vs, _ = synth_inputs(self.cfg)
        return {m: variant_forward(m, text, vs, params, self.cfg) for m in VARIANTS}, (text, vs, params)

    def test_pai_alias(self):
        traces, (text, vs, params) = self.traces()
        direct = ccra_forward(text, vs, params, self.cfg).as_arrays()
        for name, arr in traces["pai"].as_arrays().items():
            assert arr.tobytes() == direct[name].tobytes()

    def test_pairwise_different(self):
        traces, _ = self.traces()
        for a, b in [("pai", "decoupled"), ("pai", "shuffled"), ("decoupled", "shuffled")]:
            assert np.abs(traces[a].F_fused.data - traces[b].F_fused.data).max() > 1e-6

    def test_same_shapes(self):
        traces, _ = self.traces()
        for name in ForwardTrace.FIELDS:
            assert len({getattr(t, name).shape for t in traces.values()}) == 1

    def test_decoupled_skips_layer_patch_stage(self):
        traces, (_, vs, _) = self.traces()
        tr = traces["decoupled"]
        np.testing.assert_array_equal(tr.W_lp.data, 0.0)
        np.testing.assert_array_equal(tr.F_lp.data, vs.layers.data)

    def test_shuffled_gates_each_layer(self):
        traces, _ = self.traces()
        tr = traces["shuffled"]
        assert tr.w_p_layers.shape == (self.cfg.L, self.cfg.N)
        np.testing.assert_allclose(tr.w_p.data, tr.w_p_layers.data.mean(axis=0), atol=1e-15)

    def test_unknown(self):
        with pytest.raises(UnknownVariant):
            variant_forward("parallel", *self.traces()[1], self.cfg)


class TestParameterCounts:
    def test_all_ones(self):
        cfg = CcraConfig(L=1, N=1, d=1, T=1, d_hidden=1, d_llm=1, V=1, k=1)
        # conditioning: 3 attention + 3 query projections + score head = 7
        # each stage: key (1) + gamma + beta = 3; projection: 2 + 1 = 3
        assert count_parameters(cfg) == {"conditioning": 7, "lpwca": 3, "lwca": 3, "pwca": 3,
                                         "projection": 3, "total": 19}

    def test_doubling_hidden_width(self):
        cfg = CcraConfig(d=5, d_hidden=4, d_llm=6)
        a, b = count_parameters(cfg), count_parameters(cfg.replace(d_hidden=8))
        d, dh = 5, 4
        assert b["conditioning"] - a["conditioning"] == 6 * d * dh + dh
        for g in ("lpwca", "lwca", "pwca"):
            assert b[g] - a[g] == d * dh
        assert b["projection"] == a["projection"]

    @pytest.mark.parametrize("cfg", list(cases.grid_configs())[::5] + [
        CcraConfig(tie_queries=True), CcraConfig(tie_norms=True), CcraConfig(tie_queries=True, tie_norms=True),
    ], ids=str)
    def test_matches_enumeration(self, cfg):
        params = init_params(cfg)
        counted = enumerate_parameters(params)
        assert count_parameters(cfg) == counted
        assert counted["total"] == sum(t.size for _, t in params.named_parameters())

    def test_groups_and_names_are_stable(self):
        names = [n for n, _ in init_params(SMALL).named_parameters()]
        assert names == [n for n, _ in init_params(SMALL.replace(seed=5)).named_parameters()]
        assert list(init_params(SMALL).grouped()) == list(GROUPS)

    def test_default_config(self):
        assert count_parameters(CcraConfig())["total"] == 9528


class TestTraining:
    def test_zero_rate_leaves_params(self):
        cfg = SMALL
        params = init_params(cfg)
        new, loss = toy_train_step(params, [synth_inputs(cfg)], 0.0, cfg)
        assert math.isfinite(loss)
        for (_, a), (_, b) in zip(params.named_parameters(), new.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_negative_rate(self):
        with pytest.raises(ValueError):
            toy_train_step(init_params(SMALL), [synth_inputs(SMALL)], -0.1, SMALL)

    def test_empty_batch(self):
        with pytest.raises(EmptyInput):
            toy_train_step(init_params(SMALL), [], 0.1, SMALL)

    def test_uniform_logits_loss_is_log_vocab(self):
        for V in (2, 5, 10, 1000):
            assert abs(cross_entropy(Tensor(np.zeros(V)), 0).item() - math.log(V)) < 1e-10

    def test_zero_decoder_gives_log_vocab(self):
        cfg = CcraConfig()
        params = init_params(cfg)
        params = dataclasses.replace(params, w_dec=Tensor(np.zeros(params.w_dec.shape)))
        assert abs(batch_loss(params, [synth_inputs(cfg)], cfg).item() - math.log(cfg.V)) < 1e-10

    def test_fifty_steps_on_one_sample(self):
        cfg = CcraConfig()
        _, losses = train(init_params(cfg), [synth_inputs(cfg)], cfg, steps=50, lr=0.05)
        assert all(b <= a for a, b in zip(losses[5:], losses[6:]))
        assert losses[-1] < losses[0]
        assert losses[-1] < 0.5 * math.log(cfg.V)

    def test_frozen_decoder(self):
        cfg = SMALL
        params = init_params(cfg)
        new, _ = toy_train_step(params, [synth_inputs(cfg)], 0.1, cfg)
        assert new.w_dec is params.w_dec and new.text_proj is params.text_proj

    def test_tied_queries_stay_tied(self):
        cfg = SMALL.replace(tie_queries=True, tie_norms=True)
        new, _ = toy_train_step(init_params(cfg), [synth_inputs(cfg)], 0.1, cfg)
        c = new.conditioning
        assert c.w_q_lp is c.w_q_l is c.w_q_p
        assert new.lpwca.gamma is new.lwca.gamma is new.pwca.gamma


class TestSynthInputs:
    def test_same_seed(self):
        a, b = synth_inputs(SMALL, 4), synth_inputs(SMALL, 4)
        assert a[0].tokens.data.tobytes() == b[0].tokens.data.tobytes()
        assert a[1].layers.data.tobytes() == b[1].layers.data.tobytes()
        assert a[2] == b[2]

    def test_different_seeds(self):
        a, b = synth_inputs(SMALL, 4), synth_inputs(SMALL, 5)
        assert np.abs(a[1].layers.data - b[1].layers.data).max() > 0

    def test_shapes(self):
        text, vs, target = synth_inputs(SMALL)
        assert text.tokens.shape == (SMALL.T, SMALL.d)
        assert vs.layers.shape == (SMALL.L, SMALL.N, SMALL.d)
        assert 0 <= target < SMALL.V


class TestGradients:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_small_config_every_group(self, variant):
        report = gradient_check(SMALL.replace(variant=variant))
        assert list(report) == list(GROUPS)
        assert max(report.values()) < 1e-4

    def test_weak_gates_checked_at_their_own_scale(self):
        # a large LN eps keeps gate gradients well above roundoff, so no floor is needed
        cfg = SMALL.replace(ln_eps=1.0, d_hidden=3)
        report = gradient_check(cfg, floor=1e-12)
        assert max(report.values()) < 1e-4

    def test_tied_parameters(self):
        cfg = SMALL.replace(tie_queries=True, tie_norms=True)
        assert max(gradient_check(cfg).values()) < 1e-4


class TestDepthTask:
    cfg = CcraConfig(L=8, k=5)

    def test_structure(self):
        batch, shallow, deep, images, (lo, hi) = depth_query_task(self.cfg)
        assert len(batch) == 8 and len(images) == 4
        assert max(lo) < min(hi) and max(hi) < self.cfg.L - 1
        assert {t for _, _, t in batch} == {0, 1}

    def test_needs_depth(self):
        with pytest.raises(ConfigError):
            depth_query_task(CcraConfig(L=3, k=3))

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_queries_pull_attention_apart(self, seed):
        cfg = self.cfg.replace(seed=seed)
        batch, shallow, deep, images, _ = depth_query_task(cfg)
        params, losses = train(init_params(cfg), batch, cfg, steps=200, lr=0.2)
        assert losses[-1] < losses[0]
        w_shallow = evaluate(params, shallow, images[0], cfg).w_l_smoothed.data
        w_deep = evaluate(params, deep, images[0], cfg).w_l_smoothed.data
        assert np.argmax(w_shallow) < np.argmax(w_deep)
