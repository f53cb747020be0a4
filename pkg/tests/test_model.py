"""Model ops against independent oracles: patchify index mapping, naive
attention loops, SVD factorization, finite differences."""

import numpy as np
import pytest
from scipy.special import erf

from tinyvitlab import model as M
from tinyvitlab import tensor as T
from tinyvitlab.tensor import Tensor, grad_check, cross_entropy


def tiny_config(variant="none", d_c=8, n_cls=1, **kw):
    return M.ModelConfig(image_size=16, embed_dim=32, num_heads=4, depth=2,
                         num_cls_tokens=n_cls, mla=M.MlaConfig(variant, d_c), **kw)


def make_attn_params(cfg, rng, dtype=np.float64, prefix="attn"):
    c, dc = cfg.embed_dim, cfg.mla.d_c
    compressed = cfg.mla.compressed()
    params = {}
    for proj in ("q", "k", "v"):
        for name, arr in M.mla_factor(compressed, proj, c, dc, rng, dtype).items():
            params[f"{prefix}.{proj}.{name}"] = Tensor(arr * 10, requires_grad=True)
    params[f"{prefix}.o.weight"] = Tensor(
        M.trunc_normal(rng, (c, c), dtype=dtype) * 10, requires_grad=True)
    return params


def attention_oracle(x, params, cfg, prefix="attn"):
    """Naive per-head loop: explicit Q/K/V materialization, scalar softmax."""
    h, dk = cfg.num_heads, cfg.head_dim
    wq = M.effective_projection(params, f"{prefix}.q")
    wk = M.effective_projection(params, f"{prefix}.k")
    wv = M.effective_projection(params, f"{prefix}.v")
    wo = params[f"{prefix}.o.weight"].data
    q, k, v = x @ wq, x @ wk, x @ wv
    s = x.shape[0]
    heads = []
    for i in range(h):
        qi = q[:, i * dk:(i + 1) * dk]
        ki = k[:, i * dk:(i + 1) * dk]
        vi = v[:, i * dk:(i + 1) * dk]
        out = np.zeros((s, dk))
        for a in range(s):
            scores = np.array([qi[a] @ ki[b] / np.sqrt(dk) for b in range(s)])
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            for b in range(s):
                out[a] += w[b] * vi[b]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ wo


# ---------------------------------------------------------------------------
# patchify

class TestPatchify:
    def test_shape(self):
        img = Tensor(np.zeros((3, 32, 32), dtype=np.float32))
        assert M.patchify(img, 4).shape == (64, 48)

    def test_constant_image(self):
        img = Tensor(np.full((3, 32, 32), 7.0, dtype=np.float32))
        out = M.patchify(img, 4).data
        assert np.all(out == 7.0)

    def test_single_pixel_index_mapping(self):
        # every pixel must land in exactly one row, at the grid-index row
        for r, c in [(0, 0), (3, 7), (12, 30), (31, 31), (17, 2)]:
            img = np.zeros((3, 32, 32), dtype=np.float32)
            img[1, r, c] = 1.0
            out = M.patchify(Tensor(img), 4).data
            rows = np.flatnonzero(out.sum(axis=1))
            assert list(rows) == [(r // 4) * 8 + (c // 4)]

    def test_exhaustive_permutation(self):
        # unique value per position: patchify must be a pure permutation
        img = np.arange(3 * 16 * 16, dtype=np.float64).reshape(3, 16, 16)
        out = M.patchify(Tensor(img, dtype=np.float64), 4).data
        assert sorted(out.reshape(-1).tolist()) == sorted(img.reshape(-1).tolist())
        # row 0 = channel-major flattening of the top-left 4x4 patch
        expected = img[:, :4, :4].reshape(-1)
        assert np.array_equal(out[0], expected)

    def test_indivisible_extent_rejected(self):
        with pytest.raises(M.ConfigError):
            M.patchify(Tensor(np.zeros((3, 30, 30), dtype=np.float32)), 4)


# ---------------------------------------------------------------------------
# positional tables

class TestPositionalTable:
    def test_sinusoidal_position_zero(self):
        table = M.sinusoidal_table(4, 8)
        assert np.allclose(table[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_sinusoidal_position_one_col_zero(self):
        table = M.sinusoidal_table(4, 8)
        assert table[1, 0] == pytest.approx(np.sin(1.0), abs=1e-6)

    def test_rows_pairwise_distinct(self):
        table = M.sinusoidal_table(64, 192).astype(np.float64)
        diffs = table[:, None, :] - table[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(axis=-1))
        dist[np.diag_indices(64)] = np.inf
        assert dist.min() > 0

    def test_learnable_is_trainable(self):
        t = M.positional_table("learnable", 8, 16, np.random.default_rng(0))
        assert t.requires_grad and t.shape == (8, 16)

    def test_sinusoidal_frozen(self):
        t = M.positional_table("sinusoidal", 8, 16)
        assert not t.requires_grad

    def test_odd_channels_rejected(self):
        with pytest.raises(M.ConfigError):
            M.positional_table("sinusoidal", 8, 15)


# ---------------------------------------------------------------------------
# whitening init

class TestWhiteningInit:
    def test_iid_normal_sample_gives_identity_covariance(self):
        rng = np.random.default_rng(0)
        d = 48
        sample = rng.standard_normal((10_000, d))
        w = M.whitening_init(sample, d, rng)
        fresh = rng.standard_normal((10_000, d))
        emb = fresh @ w.astype(np.float64)
        cov = np.cov(emb.T)
        assert np.all(np.diag(cov) > 0.8) and np.all(np.diag(cov) < 1.2)

    def test_degenerate_coordinate_floored(self):
        rng = np.random.default_rng(1)
        sample = rng.standard_normal((600, 12))
        sample[:, 5] = 3.0  # constant coordinate: zero variance direction
        w = M.whitening_init(sample, 12, rng)
        assert np.all(np.isfinite(w))

    def test_excess_output_dims_random(self):
        rng = np.random.default_rng(2)
        sample = rng.standard_normal((500, 12))
        w = M.whitening_init(sample, 20, rng)
        assert w.shape == (12, 20)
        # whitened block has large magnitudes; the random tail stays at init scale
        assert np.abs(w[:, 12:]).max() <= 0.04

    def test_small_sample_rejected(self):
        with pytest.raises(ValueError):
            M.whitening_init(np.zeros((5, 12)), 12, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# attention

class TestAttention:
    def test_single_token_weight_is_one(self):
        rng = np.random.default_rng(3)
        cfg = tiny_config()
        params = make_attn_params(cfg, rng)
        x = rng.standard_normal((1, cfg.embed_dim))
        out = M.attention(Tensor(x, dtype=np.float64), params, cfg).data
        wv = M.effective_projection(params, "attn.v")
        wo = params["attn.o.weight"].data
        assert np.allclose(out, (x @ wv) @ wo, atol=1e-12)

    def test_zero_query_uniform_attention(self):
        rng = np.random.default_rng(4)
        cfg = tiny_config()
        params = make_attn_params(cfg, rng)
        params["attn.q.weight"] = Tensor(np.zeros((32, 32)), requires_grad=True)
        x = rng.standard_normal((5, cfg.embed_dim))
        out = M.attention(Tensor(x, dtype=np.float64), params, cfg).data
        wv = M.effective_projection(params, "attn.v")
        wo = params["attn.o.weight"].data
        expected = np.tile(((x @ wv).mean(axis=0) @ wo), (5, 1))
        assert np.allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("variant", M.MLA_VARIANTS)
    @pytest.mark.parametrize("seq", [1, 5, 65])
    def test_matches_naive_loop_oracle(self, variant, seq):
        rng = np.random.default_rng(hash((variant, seq)) % 2 ** 32)
        cfg = tiny_config(variant=variant)
        params = make_attn_params(cfg, rng)
        x = rng.standard_normal((seq, cfg.embed_dim))
        out = M.attention(Tensor(x, dtype=np.float64), params, cfg).data
        expected = attention_oracle(x, params, cfg)
        scale = np.abs(expected).max()
        assert np.abs(out - expected).max() <= 1e-10 * max(scale, 1.0)


# ---------------------------------------------------------------------------
# MLA factorization

class TestMlaFactor:
    def test_parameter_arithmetic(self):
        rng = np.random.default_rng(5)
        factored = M.mla_factor({"q"}, "q", 192, 48, rng)
        assert factored["down"].size + factored["up"].size == 2 * 192 * 48 == 18_432
        full = M.mla_factor(set(), "q", 192, 48, rng)
        assert full["weight"].size == 192 * 192 == 36_864

    def test_rank_bound(self):
        rng = np.random.default_rng(6)
        f = M.mla_factor({"k"}, "k", 64, 12, rng, dtype=np.float64)
        effective = f["up"] @ f["down"]
        assert np.linalg.matrix_rank(effective) <= 12

    def test_svd_truncation_reproduces_full_attention(self):
        rng = np.random.default_rng(7)
        cfg = tiny_config(variant="none")
        params = make_attn_params(cfg, rng)
        c, dc = cfg.embed_dim, 8
        # rank-dc reference obtained by SVD truncation
        u, s, vt = np.linalg.svd(rng.standard_normal((c, c)))
        w_ref = u[:, :dc] @ np.diag(s[:dc]) @ vt[:dc]
        params["attn.q.weight"] = Tensor(w_ref, requires_grad=True)

        fcfg = tiny_config(variant="q", d_c=dc)
        fparams = dict(params)
        del fparams["attn.q.weight"]
        fparams["attn.q.down"] = Tensor((u[:, :dc] @ np.diag(s[:dc])).T, requires_grad=True)
        fparams["attn.q.up"] = Tensor(vt[:dc].T, requires_grad=True)
        assert np.allclose(M.effective_projection(fparams, "attn.q"), w_ref, atol=1e-12)

        x = Tensor(rng.standard_normal((6, c)), dtype=np.float64)
        full = M.attention(x, params, cfg).data
        fact = M.attention(x, fparams, fcfg).data
        assert np.abs(full - fact).max() <= 1e-10 * max(np.abs(full).max(), 1.0)

    def test_compression_must_compress(self):
        with pytest.raises(M.ConfigError):
            M.MlaConfig("q", 32).validate(32)


# ---------------------------------------------------------------------------
# FFN

class TestFfn:
    @staticmethod
    def params(rng, c=6, hidden=24, dtype=np.float64, scale=1.0):
        return {
            "ffn.w1": Tensor(rng.standard_normal((c, hidden)) * scale, requires_grad=True),
            "ffn.b1": Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype),
            "ffn.w2": Tensor(rng.standard_normal((hidden, c)) * scale, requires_grad=True),
            "ffn.b2": Tensor(np.zeros(c), requires_grad=True, dtype=dtype),
        }

    def test_zero_input_zero_biases(self):
        rng = np.random.default_rng(8)
        p = self.params(rng)
        out = M.ffn(Tensor(np.zeros((3, 6))), p).data
        assert np.allclose(out, 0.0)

    def test_identity_like_construction(self):
        # w1 routes x0 into hidden0 with a +5 shift (gelu ~ identity there),
        # b2 removes the shift: out0 ~ x0
        c, hidden = 2, 8
        p = {
            "ffn.w1": Tensor(np.zeros((c, hidden)), dtype=np.float64),
            "ffn.b1": Tensor(np.zeros(hidden), dtype=np.float64),
            "ffn.w2": Tensor(np.zeros((hidden, c)), dtype=np.float64),
            "ffn.b2": Tensor(np.zeros(c), dtype=np.float64),
        }
        p["ffn.w1"].data[0, 0] = 1.0
        p["ffn.b1"].data[0] = 5.0
        p["ffn.w2"].data[0, 0] = 1.0
        p["ffn.b2"].data[0] = -5.0
        x = np.array([[0.37, -1.2]])
        out = M.ffn(Tensor(x, dtype=np.float64), p).data
        assert out[0, 0] == pytest.approx(0.37, abs=1e-5)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_random_matches_composition_oracle(self):
        rng = np.random.default_rng(9)
        p = self.params(rng)
        x = rng.standard_normal((4, 6))
        h = x @ p["ffn.w1"].data + p["ffn.b1"].data
        h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
        expected = h @ p["ffn.w2"].data + p["ffn.b2"].data
        out = M.ffn(Tensor(x, dtype=np.float64), p).data
        assert np.abs(out - expected).max() <= 1e-10


# ---------------------------------------------------------------------------
# block / drop path

class _ScriptedRng:
    """Returns scripted uniform draws; stands in for a Generator in block()."""

    def __init__(self, values):
        self.values = list(values)

    def random(self, n):
        return np.full(n, self.values.pop(0))


class TestBlock:
    @staticmethod
    def block_params(cfg, rng, scale=1.0):
        p = make_attn_params(cfg, rng, prefix="blk.attn")
        c = cfg.embed_dim
        p.update({
            "blk.norm1.gamma": Tensor(np.ones(c), dtype=np.float64),
            "blk.norm1.beta": Tensor(np.zeros(c), dtype=np.float64),
            "blk.norm2.gamma": Tensor(np.ones(c), dtype=np.float64),
            "blk.norm2.beta": Tensor(np.zeros(c), dtype=np.float64),
        })
        for k, v in TestFfn.params(rng, c, cfg.ffn_ratio * c, scale=scale).items():
            p[f"blk.{k}"] = v
        return p

    def test_no_drop_train_equals_eval(self):
        rng = np.random.default_rng(10)
        cfg = tiny_config()
        p = self.block_params(cfg, rng, scale=0.1)
        x = Tensor(rng.standard_normal((2, 5, cfg.embed_dim)), dtype=np.float64)
        train = M.block(x, p, cfg, "blk", drop_prob=0.0, mode="train",
                        rng=np.random.default_rng(0)).data
        ev = M.block(x, p, cfg, "blk", drop_prob=0.0, mode="eval").data
        assert np.array_equal(train, ev)

    def test_forced_drop_passthrough(self):
        rng = np.random.default_rng(11)
        cfg = tiny_config()
        p = self.block_params(cfg, rng, scale=0.1)
        x = Tensor(rng.standard_normal((1, 5, cfg.embed_dim)), dtype=np.float64)
        drop = 0.4
        # drop the attention branch, keep the ffn branch (scaled by 1/keep)
        out = M.block(x, p, cfg, "blk", drop_prob=drop, mode="train",
                      rng=_ScriptedRng([0.99, 0.0])).data
        ffn_branch = M.ffn(T.layer_norm(x, p["blk.norm2.gamma"], p["blk.norm2.beta"]),
                           p, prefix="blk.ffn").data
        assert np.allclose(out, x.data + ffn_branch / (1.0 - drop), atol=1e-12)

    @pytest.mark.parametrize("zeroed", ["attn", "ffn"])
    def test_monte_carlo_expectation(self, zeroed):
        # silence one branch so the surviving mask enters linearly; then
        # E[train output] equals the eval output exactly
        rng = np.random.default_rng(12)
        cfg = tiny_config()
        p = self.block_params(cfg, rng, scale=0.5)
        if zeroed == "attn":
            p["blk.attn.o.weight"] = Tensor(np.zeros((32, 32)), requires_grad=True)
        else:
            p["blk.ffn.w2"] = Tensor(np.zeros((cfg.ffn_ratio * 32, 32)),
                                     requires_grad=True)
        x = Tensor(rng.standard_normal((1, 5, cfg.embed_dim)), dtype=np.float64)
        ev = M.block(x, p, cfg, "blk", drop_prob=0.0, mode="eval").data
        draws = np.stack([
            M.block(x, p, cfg, "blk", drop_prob=0.3, mode="train",
                    rng=np.random.default_rng(1000 + i)).data
            for i in range(10_000)])
        mean = draws.mean(axis=0)
        sem = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(mean - ev) <= 3.5 * sem + 1e-12)


# ---------------------------------------------------------------------------
# head and full forward

class TestClsHead:
    def test_single_cls_standard_head(self):
        rng = np.random.default_rng(13)
        cfg = tiny_config(n_cls=1)
        params = M.init_params(cfg, rng, dtype=np.float64)
        assert params["head.w1"].shape == (cfg.embed_dim, cfg.embed_dim)
        tokens = Tensor(rng.standard_normal((2, cfg.seq_len, cfg.embed_dim)), dtype=np.float64)
        out = M.cls_head(tokens, params, cfg).data
        h = tokens.data[:, 0, :] @ params["head.w1"].data + params["head.b1"].data
        h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
        expected = h @ params["head.w2"].data + params["head.b2"].data
        assert np.allclose(out, expected, atol=1e-12)

    def test_mcls_input_dim(self):
        cfg = M.ModelConfig(embed_dim=96, num_heads=12, depth=2, num_cls_tokens=2)
        params = M.init_params(cfg, np.random.default_rng(0))
        assert params["head.w1"].shape == (192, 96)

    def test_logits_shape(self):
        cfg = tiny_config()
        params = M.init_params(cfg, np.random.default_rng(0))
        tokens = Tensor(np.zeros((3, cfg.seq_len, cfg.embed_dim), dtype=np.float32))
        assert M.cls_head(tokens, params, cfg).shape == (3, 10)


class TestForward:
    def test_output_shape(self):
        cfg = tiny_config(n_cls=2)
        params = M.init_params(cfg, np.random.default_rng(0))
        images = Tensor(np.random.default_rng(1).standard_normal((4, 3, 16, 16)).astype(np.float32))
        assert M.forward(cfg, params, images).shape == (4, 10)

    def test_eval_bitwise_deterministic(self):
        cfg = tiny_config()
        params = M.init_params(cfg, np.random.default_rng(0))
        images = Tensor(np.random.default_rng(1).standard_normal((2, 3, 16, 16)).astype(np.float32))
        a = M.forward(cfg, params, images).data
        b = M.forward(cfg, params, images).data
        assert np.array_equal(a, b)

    def test_sinusoidal_has_no_positional_parameter(self):
        cfg = tiny_config(pos_embed="sinusoidal")
        params = M.init_params(cfg, np.random.default_rng(0))
        assert "pos_embed" not in params

    def test_patch_permutation_sensitivity(self):
        rng = np.random.default_rng(14)
        images = rng.standard_normal((1, 3, 16, 16)).astype(np.float64)
        permuted = images.copy()
        # swap two 4x4 patches
        permuted[:, :, 0:4, 0:4], permuted[:, :, 8:12, 4:8] = \
            images[:, :, 8:12, 4:8].copy(), images[:, :, 0:4, 0:4].copy()

        cfg = tiny_config(pos_embed="learnable")
        params = M.init_params(cfg, np.random.default_rng(2), dtype=np.float64)
        a = M.forward(cfg, params, Tensor(images, dtype=np.float64)).data
        b = M.forward(cfg, params, Tensor(permuted, dtype=np.float64)).data
        assert not np.allclose(a, b, atol=1e-9)

        zcfg = tiny_config(pos_embed="zero")
        zparams = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()
                   if k != "pos_embed"}
        a = M.forward(zcfg, zparams, Tensor(images, dtype=np.float64)).data
        b = M.forward(zcfg, zparams, Tensor(permuted, dtype=np.float64)).data
        assert np.allclose(a, b, atol=1e-10)

    def test_end_to_end_grad_check_tiny(self):
        rng = np.random.default_rng(15)
        cfg = tiny_config(variant="kv")
        params = M.grad_check_point(cfg, rng)
        images = Tensor(rng.standard_normal((2, 3, 16, 16)), dtype=np.float64)
        targets = np.full((2, 10), 0.1)

        def f():
            return cross_entropy(M.forward(cfg, params, images, mode="eval"), targets)

        err = grad_check(f, list(params.values()), h=1e-5, max_coords=3,
                         rng=np.random.default_rng(0))
        assert err < 1e-4


# ---------------------------------------------------------------------------
# parameter accounting

class TestParamCount:
    def test_baseline_attention_layer(self):
        cfg = M.ModelConfig()  # C=192, h=12, depth=9
        assert M.attention_params_per_layer(cfg) == 4 * 192 * 192 == 147_456

    def test_variant_q_layer(self):
        cfg = M.ModelConfig(mla=M.MlaConfig("q", 48))
        assert M.attention_params_per_layer(cfg) == 3 * 36_864 + 18_432 == 129_024

    def test_counts_match_actual_params(self):
        cfg = M.ModelConfig(depth=2, mla=M.MlaConfig("qk", 48))
        params = M.init_params(cfg, np.random.default_rng(0))
        counts = M.param_count(params)
        assert counts["total"] == sum(p.size for p in params.values())
        assert counts["attention"] == 2 * M.attention_params_per_layer(cfg)

    @pytest.mark.parametrize("variant", ["q", "k", "qk", "kv", "qkv"])
    def test_factoring_strictly_reduces_total(self, variant):
        base = M.param_count(M.init_params(
            M.ModelConfig(depth=2), np.random.default_rng(0)))["total"]
        comp = M.param_count(M.init_params(
            M.ModelConfig(depth=2, mla=M.MlaConfig(variant, 48)),
            np.random.default_rng(0)))["total"]
        assert comp < base
