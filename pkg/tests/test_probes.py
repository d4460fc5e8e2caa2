import math
from dataclasses import replace

import numpy as np
import pytest

from layerfuse.diffcore import finite_difference_check, weighted_ce
from layerfuse.probes import (
    AttentiveProbe,
    build_config,
    count_params,
    enumerate_params,
    fusion_backward,
    fusion_forward,
    init_probe,
    linear_forward_probe,
    load_probe,
    make_aat_config,
    make_hybrid_config,
    probe_backward,
    probe_forward,
    resolve_heads,
    save_probe,
)
from layerfuse.reprstore import LayerScheme, StackedBatch
from layerfuse.rng import RngStream
from layerfuse.synthgen import SynthSpec, generate_separable


def _batch(rng, B, R, d, K=2, unit_rows=True):
    H = rng.normal(size=(B, R, d))
    if unit_rows:
        H /= np.linalg.norm(H, axis=2, keepdims=True)
    labels = rng.integers(0, K, size=B)
    return StackedBatch(H, [("CLS", r + 1) for r in range(R)], labels)


def _fusion_probe(rng_seed, R, d, K, M, dropout=0.0):
    cfg = _cfg("attentive_fusion", R, d, K, M, dropout)
    return init_probe(cfg, RngStream(rng_seed, "init"))


def _cfg(kind, R, d, K, M=1, dropout=0.0, variant=None):
    from layerfuse.probes import ProbeConfig

    return ProbeConfig(
        kind=kind,
        layers=LayerScheme("custom", tuple(range(1, R + 1))),
        tokens=("CLS",),
        resolved_layers=tuple(range(1, R + 1)),
        num_rows=R,
        d_model=d,
        num_classes=K,
        num_heads=M,
        attn_dropout=dropout,
        variant=variant,
    )


class TestResolveHeads:
    def test_auto_matches_rows(self):
        assert resolve_heads("auto", 24, 384) == (24, False)

    def test_auto_fallback_to_divisor(self):
        # 2d = 32 has no 12-head split; largest divisor <= 12 is 8
        assert resolve_heads("auto", 12, 16) == (8, True)

    def test_explicit_must_divide(self):
        assert resolve_heads(4, 10, 8) == (4, False)
        with pytest.raises(ValueError):
            resolve_heads(3, 10, 8)


class TestInitProbe:
    def test_deterministic(self):
        a = _fusion_probe(3, 4, 8, 2, M=4)
        b = _fusion_probe(3, 4, 8, 2, M=4)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_head_dim_rule(self):
        probe = _fusion_probe(0, 4, 8, 2, M=4)
        assert probe.config.head_dim == 4
        assert probe.params["w_key"].shape == (4, 8, 4)

    def test_init_moments(self):
        # ~1.3e6 weight entries at d=128: std within 0.02 +- 0.0005
        probe = _fusion_probe(1, 4, 128, 10, M=8)
        weights = np.concatenate(
            [probe.params[k].ravel() for k in ("q", "w_query", "w_key", "w_val", "w_out", "w_clf")]
        )
        assert weights.size > 1e5
        assert abs(weights.std() - 0.02) < 0.0005
        assert not probe.params["b_out"].any()
        np.testing.assert_array_equal(probe.params["norm_gain"], 1.0)


def scalar_fusion_oracle(params, H_row, M, dh, eps=1e-6):
    """Scalar-by-scalar evaluation of the fusion probe on one sample."""
    R, d = len(H_row), len(H_row[0])
    K = len(params["b_clf"])
    heads_out = []
    for m in range(M):
        q = [
            sum(params["q"][0][i] * params["w_query"][m][i][h] for i in range(d))
            + params["b_query"][m][h]
            for h in range(dh)
        ]
        Km = [
            [
                sum(H_row[r][i] * params["w_key"][m][i][h] for i in range(d))
                + params["b_key"][m][h]
                for h in range(dh)
            ]
            for r in range(R)
        ]
        Vm = [
            [
                sum(H_row[r][i] * params["w_val"][m][i][h] for i in range(d))
                + params["b_val"][m][h]
                for h in range(dh)
            ]
            for r in range(R)
        ]
        scores = [sum(q[h] * Km[r][h] for h in range(dh)) / math.sqrt(dh) for r in range(R)]
        top = max(scores)
        es = [math.exp(s - top) for s in scores]
        total = sum(es)
        attn = [e / total for e in es]
        heads_out.extend(sum(attn[r] * Vm[r][h] for r in range(R)) for h in range(dh))
    fused = [
        sum(heads_out[i] * params["w_out"][i][j] for i in range(2 * d)) + params["b_out"][j]
        for j in range(d)
    ]
    mu = sum(fused) / d
    sd = math.sqrt(sum((x - mu) ** 2 for x in fused) / d)
    z = [(x - mu) / (sd + eps) for x in fused]
    normed = [params["norm_gain"][j] * z[j] + params["norm_bias"][j] for j in range(d)]
    return [
        sum(normed[j] * params["w_clf"][j][k] for j in range(d)) + params["b_clf"][k]
        for k in range(K)
    ]


class TestFusionForward:
    def test_single_row_ignores_query(self, rng):
        probe = _fusion_probe(0, 1, 6, 3, M=4)
        batch = _batch(np.random.default_rng(5), 3, 1, 6, K=3)
        logits_a, attn, _ = fusion_forward(probe, batch)
        np.testing.assert_allclose(attn, 1.0)
        probe.params["q"] += 5.0
        probe.params["w_query"] -= 2.0
        logits_b, _, _ = fusion_forward(probe, batch)
        np.testing.assert_allclose(logits_a, logits_b, atol=1e-12)

    def test_identical_rows_uniform_attention(self, rng):
        probe = _fusion_probe(1, 5, 8, 2, M=2)
        row = rng.normal(size=(3, 1, 8))
        batch = StackedBatch(np.repeat(row, 5, axis=1), [("CLS", r + 1) for r in range(5)], np.zeros(3, dtype=int))
        _, attn, _ = fusion_forward(probe, batch)
        np.testing.assert_allclose(attn, 0.2, atol=1e-12)

    def test_matches_scalar_oracle(self):
        # B=1, R=2, d=4, M=2, dropout off, hand-seeded small weights
        probe = _fusion_probe(7, 2, 4, 3, M=2)
        for k, p in probe.params.items():
            if p.ndim and not k.startswith("norm"):
                # nudge biases off zero so every term participates
                probe.params[k] = p + 0.01 * (np.arange(p.size).reshape(p.shape) % 5 - 2)
        rng = np.random.default_rng(0)
        H = rng.normal(size=(1, 2, 4))
        batch = StackedBatch(H, [("CLS", 1), ("CLS", 2)], np.zeros(1, dtype=int))
        logits, _, _ = fusion_forward(probe, batch)
        expected = scalar_fusion_oracle(probe.params, H[0].tolist(), M=2, dh=4)
        np.testing.assert_allclose(logits[0], expected, atol=1e-10)

    def test_attention_rows_sum_to_one(self, rng):
        probe = _fusion_probe(2, 6, 8, 2, M=4)
        batch = _batch(np.random.default_rng(2), 5, 6, 8)
        _, attn, _ = fusion_forward(probe, batch)
        np.testing.assert_allclose(attn.sum(axis=2), 1.0, atol=1e-12)

    def test_permutation_equivariance(self):
        probe = _fusion_probe(3, 7, 8, 2, M=4)
        batch = _batch(np.random.default_rng(3), 4, 7, 8)
        logits, attn, _ = fusion_forward(probe, batch)
        perm = np.random.default_rng(0).permutation(7)
        batch_p = StackedBatch(batch.H[:, perm, :], batch.row_index, batch.labels)
        logits_p, attn_p, _ = fusion_forward(probe, batch_p)
        np.testing.assert_allclose(logits_p, logits, atol=1e-12)
        np.testing.assert_allclose(attn_p, attn[:, :, perm], atol=1e-12)

    def test_score_count_instrumentation(self):
        probe = _fusion_probe(4, 6, 9, 2, M=6)
        batch = _batch(np.random.default_rng(4), 2, 6, 9)
        _, _, cache = fusion_forward(probe, batch)
        assert cache["score_entries_per_sample"] == 6 * 6

    def test_row_count_mismatch_rejected(self):
        probe = _fusion_probe(5, 4, 8, 2, M=4)
        batch = _batch(np.random.default_rng(5), 2, 5, 8)
        with pytest.raises(ValueError, match="rows"):
            fusion_forward(probe, batch)


def _probe_loss_fn(probe, batch, weights, dropout=0.0, seed=11):
    def fn(params):
        rng = RngStream(seed, "fd-dropout")  # rebuilt per call: mask frozen
        logits, _, cache = probe_forward(probe, batch, train=dropout > 0, rng=rng)
        loss, dLogits = weighted_ce(logits, batch.labels, weights)
        return loss, probe_backward(probe, cache, dLogits)

    return fn


def _well_conditioned(probe, seed=99):
    # move weights away from the tiny init so sampled coordinates carry
    # healthy gradient magnitudes for the difference quotient
    noise = RngStream(seed, "fd-conditioning")
    for k, p in probe.params.items():
        probe.params[k] = p + noise.normal(p.shape, scale=0.3)
    return probe


class TestFusionBackward:
    # step 3e-4: large enough that the roundoff noise floor eps*loss/(2h)
    # stays below tolerance against the 1e-8 denominator guard on the
    # structurally zero-gradient coordinates (key biases shift every score
    # of a sample equally, and softmax is shift-invariant), small enough
    # that truncation stays negligible elsewhere
    FD_STEP = 3e-4

    def test_finite_difference_dropout_free(self):
        probe = _well_conditioned(_fusion_probe(0, 6, 8, 3, M=4))
        batch = _batch(np.random.default_rng(1), 4, 6, 8, K=3)
        loss_fn = _probe_loss_fn(probe, batch, np.ones(3))
        err = finite_difference_check(loss_fn, probe.params, step=self.FD_STEP)
        assert err < 1e-4
        # coordinates with measurable gradients must be far tighter
        _, grads = loss_fn(probe.params)
        h = self.FD_STEP
        for name in ("w_clf", "w_out", "q", "norm_gain"):
            p = probe.params[name]
            for flat in np.random.default_rng(0).choice(p.size, size=min(20, p.size), replace=False):
                idx = np.unravel_index(flat, p.shape)
                orig = p[idx]
                p[idx] = orig + h
                hi, _ = loss_fn(probe.params)
                p[idx] = orig - h
                lo, _ = loss_fn(probe.params)
                p[idx] = orig
                numeric = (hi - lo) / (2 * h)
                if abs(numeric) >= 1e-5:
                    assert abs(grads[name][idx] - numeric) / abs(numeric) < 1e-6

    def test_finite_difference_frozen_dropout(self):
        probe = _well_conditioned(_fusion_probe(1, 6, 8, 3, M=4, dropout=0.3))
        batch = _batch(np.random.default_rng(2), 4, 6, 8, K=3)
        err = finite_difference_check(
            _probe_loss_fn(probe, batch, np.ones(3), dropout=0.3), probe.params, step=self.FD_STEP
        )
        assert err < 1e-4

    def test_key_bias_gradient_is_structurally_zero(self):
        # a key bias adds the same constant to every attention score of a
        # sample; shift-invariant softmax makes its gradient vanish
        probe = _well_conditioned(_fusion_probe(2, 6, 8, 3, M=4))
        batch = _batch(np.random.default_rng(7), 4, 6, 8, K=3)
        _, grads = _probe_loss_fn(probe, batch, np.ones(3))(probe.params)
        np.testing.assert_allclose(grads["b_key"], 0.0, atol=1e-15)

    def test_zero_upstream_gives_zero_grads(self):
        probe = _fusion_probe(2, 4, 8, 2, M=4)
        batch = _batch(np.random.default_rng(3), 3, 4, 8)
        _, _, cache = fusion_forward(probe, batch)
        grads = fusion_backward(probe, cache, np.zeros((3, 2)))
        assert all(not g.any() for g in grads.values())

    def test_query_gradient_zero_for_single_row(self):
        probe = _fusion_probe(3, 1, 6, 2, M=3)
        batch = _batch(np.random.default_rng(4), 4, 1, 6)
        logits, _, cache = fusion_forward(probe, batch)
        _, dLogits = weighted_ce(logits, batch.labels, np.ones(2))
        grads = fusion_backward(probe, cache, dLogits)
        np.testing.assert_array_equal(grads["q"], np.zeros_like(grads["q"]))
        np.testing.assert_array_equal(grads["w_query"], np.zeros_like(grads["w_query"]))


class TestLinearProbe:
    def test_zero_weights_give_bias(self):
        cfg = _cfg("linear_concat", 3, 4, 2)
        probe = init_probe(cfg, RngStream(0, "init"))
        probe.params["w_clf"][:] = 0.0
        probe.params["b_clf"][:] = [0.25, -1.0]
        batch = _batch(np.random.default_rng(0), 5, 3, 4)
        logits, _, _ = linear_forward_probe(probe, batch)
        np.testing.assert_array_equal(logits, np.tile([0.25, -1.0], (5, 1)))

    def test_single_row_equals_cls_probe(self):
        # linear_concat restricted to one row computes the same map as linear_cls
        cfg_c = _cfg("linear_concat", 1, 6, 3)
        cfg_s = _cfg("linear_cls", 1, 6, 3)
        pc = init_probe(cfg_c, RngStream(5, "init"))
        ps = init_probe(cfg_s, RngStream(5, "init"))
        np.testing.assert_array_equal(pc.params["w_clf"], ps.params["w_clf"])
        batch = _batch(np.random.default_rng(5), 4, 1, 6, K=3)
        lc, _, _ = linear_forward_probe(pc, batch)
        ls, _, _ = linear_forward_probe(ps, batch)
        np.testing.assert_array_equal(lc, ls)

    def test_matches_matmul_oracle(self):
        cfg = _cfg("linear_concat", 2, 5, 3)
        probe = init_probe(cfg, RngStream(1, "init"))
        batch = _batch(np.random.default_rng(1), 3, 2, 5, K=3)
        logits, _, _ = linear_forward_probe(probe, batch)
        flat = batch.H.reshape(3, 10)
        expected = flat @ probe.params["w_clf"] + probe.params["b_clf"]
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_finite_difference(self):
        cfg = _cfg("linear_concat", 3, 6, 3)
        probe = _well_conditioned(init_probe(cfg, RngStream(2, "init")))
        batch = _batch(np.random.default_rng(2), 4, 3, 6, K=3)
        err = finite_difference_check(
            _probe_loss_fn(probe, batch, np.ones(3)), probe.params, step=1e-5
        )
        assert err < 1e-6


# reference counts for the three standard ViT geometries (small/base/large):
# 18 (d, layers, K) cells, each with a concatenation and an attentive count
PARAM_TABLE = {
    (384, 12): {
        2: (18434, 1184258),
        5: (46085, 1185413),
        10: (92170, 1187338),
        50: (460850, 1202738),
        100: (921700, 1221988),
        200: (1843400, 1260488),
    },
    (768, 12): {
        2: (36866, 4727810),
        5: (92165, 4730117),
        10: (184330, 4733962),
        50: (921650, 4764722),
        100: (1843300, 4803172),
        200: (3686600, 4880072),
    },
    (1024, 24): {
        2: (98306, 8400898),
        5: (245765, 8403973),
        10: (491530, 8409098),
        50: (2457650, 8450098),
        100: (4915300, 8501348),
        200: (9830600, 8603848),
    },
}


class TestCountParams:
    @pytest.mark.parametrize("d,L", list(PARAM_TABLE))
    def test_reference_table(self, d, L):
        for K, (linear, attentive) in PARAM_TABLE[(d, L)].items():
            assert count_params("linear_concat", d, L, K) == linear
            assert count_params("attentive_fusion", d, K=K) == attentive
            assert count_params("attentive_tokens", d, K=K) == attentive

    def test_cls_linear(self):
        assert count_params("linear_cls", 384, K=10) == 384 * 10 + 10

    def test_enumeration_matches_formula(self):
        for R, d, K, M in [(4, 16, 3, 4), (24, 48, 7, 24), (6, 36, 5, 8)]:
            probe = init_probe(_cfg("attentive_fusion", R, d, K, M), RngStream(0, "init"))
            assert enumerate_params(probe) == count_params("attentive_fusion", d, K=K)
        lin = init_probe(_cfg("linear_concat", 24, 16, 5), RngStream(0, "init"))
        # 24 rows = 12 layers x (CLS+AP)
        assert enumerate_params(lin) == count_params("linear_concat", 16, 12, 5)


class TestTokenProbeConfigs:
    def _patch_store(self, L, P, d, n=2):
        spec = SynthSpec(
            split_sizes={"train": n, "val": n, "test": n},
            num_layers=L,
            hidden_dims=d,
            num_patches=P,
            num_classes=2,
            seed=0,
        )
        return generate_separable(spec)

    def test_aat_rows_and_heads(self):
        store = self._patch_store(L=4, P=16, d=8)
        cfg = make_aat_config(store)
        assert cfg.num_rows == 17
        assert cfg.num_heads == 8
        assert cfg.variant == "aat"
        assert cfg.resolved_layers == (4,)

    def test_aat_requires_patches(self):
        spec = SynthSpec(split_sizes={"train": 2}, num_layers=2, hidden_dims=8, num_classes=2)
        store = generate_separable(spec)
        with pytest.raises(ValueError, match="PATCH"):
            make_aat_config(store)

    def test_aat_score_entries(self):
        store = self._patch_store(L=4, P=16, d=8)
        cfg = make_aat_config(store)
        probe = init_probe(cfg, RngStream(0, "init"))
        from layerfuse.reprstore import assemble_batch

        batch = assemble_batch(store, "train", [0, 1], cfg.resolved_layers, cfg.tokens)
        _, _, cache = fusion_forward(probe, batch)
        assert cache["score_entries_per_sample"] == 8 * 17

    def test_hybrid_token_counts(self):
        store = self._patch_store(L=12, P=196, d=12)
        cfg = make_hybrid_config(store)
        assert cfg.resolved_layers == (3, 6, 9, 12)
        assert cfg.num_rows == 4 * 197 == 788
        assert cfg.attn_dropout == 0.5
        assert cfg.num_heads == 24

    def test_hybrid_dinov2_patch_grid(self):
        store = self._patch_store(L=12, P=256, d=12)
        cfg = make_hybrid_config(store)
        assert cfg.num_rows == 4 * 257 == 1028


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        probe = _fusion_probe(9, 4, 8, 3, M=4)
        path = tmp_path / "p.lfpb"
        save_probe(probe, path, seed=9, provenance={"note": "unit"})
        back = load_probe(path)
        assert isinstance(back, AttentiveProbe)
        assert back.config == probe.config
        for k in probe.params:
            np.testing.assert_array_equal(probe.params[k], back.params[k])

    def test_linear_roundtrip(self, tmp_path):
        probe = init_probe(_cfg("linear_concat", 3, 4, 2), RngStream(0, "init"))
        save_probe(probe, tmp_path / "l.lfpb")
        back = load_probe(tmp_path / "l.lfpb")
        np.testing.assert_array_equal(probe.params["w_clf"], back.params["w_clf"])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.lfpb"
        path.write_bytes(b"AAAA" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_probe(path)
