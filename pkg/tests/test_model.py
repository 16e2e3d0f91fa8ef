import numpy as np
import pytest

from fedsim import tensor as T
from fedsim.errors import ConfigError, ShapeError
from fedsim.losses import cross_entropy
from fedsim.model import DualScaleTransformer, ModelConfig
from fedsim.optim import Adam
from fedsim.tensor import Tape, Tensor, backward, grad_check

TINY = ModelConfig(image_size=16, patch_small=4, patch_large=8, embed_dim=8,
                   depth=1, heads=2, window=2, num_classes=7, lora_rank=2)


def rng(seed=0):
    return np.random.default_rng(seed)


def batch(cfg, n=2, seed=0):
    return Tensor(rng(seed).normal(size=(n, cfg.channels, cfg.image_size, cfg.image_size)))


@pytest.fixture(scope="module")
def tiny_model():
    return DualScaleTransformer(TINY, seed=0)


class TestConfig:
    def test_defaults_match_pinned_values(self):
        cfg = ModelConfig()
        assert (cfg.image_size, cfg.patch_small, cfg.patch_large) == (224, 16, 32)
        assert (cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout) == (4, 4.0, 0.2)
        assert cfg.num_classes == 7
        cfg.validate()

    def test_token_counts(self):
        cfg = ModelConfig()
        assert cfg.tokens_small == 196 and cfg.tokens_small + 2 == 198
        assert cfg.tokens_large == 49 and cfg.tokens_large + 2 == 51

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=100).validate()  # 100 % 16 != 0
        with pytest.raises(ConfigError):
            ModelConfig(embed_dim=130).validate()
        with pytest.raises(ConfigError):
            ModelConfig(window=5).validate()  # 5 does not divide 14
        with pytest.raises(ConfigError):
            ModelConfig(lora_rank=64).validate()  # rank > head_dim 32
        with pytest.raises(ConfigError):
            ModelConfig(lora_dropout=1.0).validate()

    def test_fingerprint_stable_and_sensitive(self):
        a = ModelConfig().fingerprint()
        assert a == ModelConfig().fingerprint()
        assert a != ModelConfig(embed_dim=64).fingerprint()
        assert len(a) == 32


class TestPatchEmbed:
    def test_sequence_lengths(self, tiny_model):
        x = batch(TINY)
        s = tiny_model._patch_embed(x, "small")
        l = tiny_model._patch_embed(x, "large")
        assert s.shape == (2, 16 + 2, 8)
        assert l.shape == (2, 4 + 2, 8)

    def test_zero_image_rows_equal_pos_plus_tokens(self, tiny_model):
        x = Tensor(np.zeros((1, 3, 16, 16)))
        seq = tiny_model._patch_embed(x, "small").data[0]
        p = tiny_model.parameters()
        pos = p["embed_small/pos"].data
        assert np.allclose(seq[0], p["embed_small/ct"].data + pos[0], atol=1e-15)
        assert np.allclose(seq[1], p["embed_small/dt"].data + pos[1], atol=1e-15)
        # bias is zero-initialized, so patch rows reduce to the positional table
        assert np.allclose(seq[2:], pos[2:], atol=1e-15)

    def test_non_divisible_image_rejected(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.forward(Tensor(np.zeros((1, 3, 20, 20))))


class TestLocalWindowAttention:
    def test_single_window_equals_global_over_patches(self):
        cfg = ModelConfig(image_size=16, patch_small=4, patch_large=8, embed_dim=8,
                          depth=1, heads=2, window=4, num_classes=7, lora_rank=2)
        m = DualScaleTransformer(cfg, seed=1)
        seq = Tensor(rng(2).normal(size=(2, 18, 8)))
        out = m._local_window_attention(seq)
        p = m.parameters()
        args = (p["pre_small/wq"], p["pre_small/wk"], p["pre_small/wv"], cfg.heads)
        patches = T.slice_axis(seq, 1, 2, 18)
        manual_patches = m._mha(patches, patches, *args)
        manual_ctdt = m._mha(T.slice_axis(seq, 1, 0, 2), seq, *args)
        manual = (seq + T.concat([manual_ctdt, manual_patches], axis=1)).data
        assert np.max(np.abs(out.data - manual)) < 1e-10

    def test_locality_outside_window(self, tiny_model):
        seq = rng(3).normal(size=(1, 18, 8))
        out1 = tiny_model._local_window_attention(Tensor(seq)).data
        # window (0,0) of the 4x4 grid holds patch positions 0,1,4,5 -> rows 2,3,6,7
        inside = [2, 3, 6, 7]
        outside = [i for i in range(2, 18) if i not in inside]
        perturbed = seq.copy()
        perturbed[:, outside, :] += rng(4).normal(size=(1, len(outside), 8))
        out2 = tiny_model._local_window_attention(Tensor(perturbed)).data
        assert np.array_equal(out1[:, inside, :], out2[:, inside, :])
        # CT/DT attend globally, so they do change
        assert not np.allclose(out1[:, 0, :], out2[:, 0, :])

    def test_window_permutation_equivariance(self, tiny_model):
        seq = rng(5).normal(size=(1, 18, 8))
        win_a = [2, 3, 6, 7]       # grid window (0,0)
        win_b = [10, 11, 14, 15]   # grid window (1,0)
        swapped = seq.copy()
        swapped[:, win_a, :], swapped[:, win_b, :] = seq[:, win_b, :], seq[:, win_a, :]
        out = tiny_model._local_window_attention(Tensor(seq)).data
        out_sw = tiny_model._local_window_attention(Tensor(swapped)).data
        assert np.allclose(out[:, win_a, :], out_sw[:, win_b, :], atol=1e-12)
        assert np.allclose(out[:, win_b, :], out_sw[:, win_a, :], atol=1e-12)


class TestGlobalSelfAttention:
    def test_single_token_is_value_projection_plus_residual(self, tiny_model):
        x = Tensor(rng(6).normal(size=(2, 1, 8)))
        out = tiny_model._global_self_attention(x)
        manual = x.data + x.data @ tiny_model.parameters()["pre_large/wv"].data
        assert np.allclose(out.data, manual, atol=1e-12)

    def test_attention_rows_sum_to_one(self, tiny_model):
        capture = {"attention": []}
        tiny_model.forward(batch(TINY), capture=capture)
        assert capture["attention"], "no attention captured"
        for attn in capture["attention"]:
            assert np.max(np.abs(attn.sum(axis=-1) - 1.0)) < 1e-12

    def test_uniform_keys_give_uniform_attention(self, tiny_model):
        x = Tensor(np.ones((1, 6, 8)) * 0.3)
        capture = []
        tiny_model._attn_sink = capture
        try:
            tiny_model._global_self_attention(x)
        finally:
            tiny_model._attn_sink = None
        assert np.allclose(capture[0], 1.0 / 6.0, atol=1e-12)


class TestLora:
    def test_zero_b_matches_base_exactly(self):
        m1 = DualScaleTransformer(TINY, seed=3)
        m2 = DualScaleTransformer(TINY, seed=3)
        # scramble every A; with B = 0 the delta path contributes exact zeros
        for path, t in m2.lora_parameters().items():
            if path.endswith("_a"):
                t.data = rng(hash(path) % 2**32).normal(size=t.data.shape)
        x = batch(TINY, seed=7)
        l1 = m1.forward(x).data
        l2 = m2.forward(x).data
        assert np.max(np.abs(l1 - l2)) <= 1e-12

    def test_nonzero_b_changes_output(self, tiny_model):
        m = DualScaleTransformer(TINY, seed=3)
        for path, t in m.lora_parameters().items():
            if path.endswith("_b"):
                t.data = rng(1).normal(size=t.data.shape) * 0.1
        x = batch(TINY, seed=7)
        base = DualScaleTransformer(TINY, seed=3).forward(x).data
        assert np.max(np.abs(m.forward(x).data - base)) > 1e-6

    def test_adapter_parameter_count_formula(self):
        cfg = ModelConfig(image_size=16, patch_small=4, patch_large=8, embed_dim=64,
                          depth=1, heads=1, window=2, num_classes=7, lora_rank=4)
        m = DualScaleTransformer(cfg, seed=0)
        lora = m.lora_parameters()
        per_projection = 64 * 4 + 4 * 64  # E*r + r*(d_k*heads)
        assert per_projection == 512
        # 2 branches x depth 1 x 2 adapted projections (Q, K)
        assert sum(t.size for t in lora.values()) == 4 * per_projection

    def test_only_adapters_trainable(self, tiny_model):
        lora = set(tiny_model.lora_parameters())
        for path, t in tiny_model.parameters().items():
            assert t.requires_grad == (path in lora)

    def test_optimizer_step_freezing_contract(self):
        m = DualScaleTransformer(TINY, seed=5)
        # make the loss depend on the adapters
        for path, t in m.lora_parameters().items():
            if path.endswith("_b"):
                t.data = rng(2).normal(size=t.data.shape) * 0.05
        before_base = m.base_checksum()
        wq_before = m.parameters()["branch_small/0/wq"].data.copy()
        a_before = m.parameters()["branch_small/0/lora_q_a"].data.copy()
        opt = Adam(m.lora_parameters(), lr=1e-2)
        x = batch(TINY, seed=8)
        with Tape() as tape:
            loss = cross_entropy(m.forward(x), np.array([0, 1]))
            backward(loss, tape)
        opt.step()
        assert m.base_checksum() == before_base
        assert np.array_equal(m.parameters()["branch_small/0/wq"].data, wq_before)
        assert not np.array_equal(m.parameters()["branch_small/0/lora_q_a"].data, a_before)

    def test_trainable_ratio_under_default_config(self):
        m = DualScaleTransformer(ModelConfig(), seed=0)
        trainable, total = m.parameter_counts()
        assert trainable / total < 0.10

    def test_lora_state_round_trip(self, tiny_model):
        state = tiny_model.lora_state()
        m2 = DualScaleTransformer(TINY, seed=99)
        m2.load_lora_state(state)
        for path, (a, b) in m2.lora_state().items():
            assert np.array_equal(a, state[path][0])
            assert np.array_equal(b, state[path][1])

    def test_load_key_mismatch_rejected(self, tiny_model):
        state = tiny_model.lora_state()
        del state["branch_small/0/q"]
        with pytest.raises(ShapeError, match="branch_small/0/q"):
            DualScaleTransformer(TINY, seed=0).load_lora_state(state)


class TestFusion:
    def test_single_key_token_is_value_projection(self, tiny_model):
        q = Tensor(rng(9).normal(size=(2, 1, 8)))
        tok = Tensor(rng(10).normal(size=(2, 1, 8)))
        out = tiny_model._cross_attention(q, tok, "cross_small")
        manual = tok.data @ tiny_model.parameters()["fusion/cross_small/wv"].data
        assert np.allclose(out.data, manual, atol=1e-12)

    def test_logit_length(self, tiny_model):
        assert tiny_model.forward(batch(TINY)).shape == (2, 7)

    def test_perturbing_coarse_branch_changes_logits(self, tiny_model):
        h1 = Tensor(rng(11).normal(size=(1, 18, 8)))
        h2 = rng(12).normal(size=(1, 6, 8))
        base = tiny_model._fuse(h1, Tensor(h2)).data
        h2p = h2.copy()
        h2p[:, 2:, :] = 0.0
        changed = tiny_model._fuse(h1, Tensor(h2p)).data
        assert np.max(np.abs(base - changed)) > 1e-8


class TestForward:
    def test_batch_logits_shape_default_config(self):
        m = DualScaleTransformer(ModelConfig(), seed=0)
        x = Tensor(rng(13).normal(size=(2, 3, 224, 224)) * 0.1)
        logits = m.forward(x)
        assert logits.shape == (2, 7)
        assert np.all(np.isfinite(logits.data))

    def test_eval_forward_bit_deterministic(self, tiny_model):
        x = batch(TINY, seed=14)
        a = tiny_model.forward(x).data
        b = tiny_model.forward(x).data
        assert np.array_equal(a, b)

    def test_finite_logits_random_input(self, tiny_model):
        x = Tensor(rng(15).normal(size=(4, 3, 16, 16)) * 10)
        assert np.all(np.isfinite(tiny_model.forward(x).data))

    def test_depth_zero_still_runs(self):
        cfg = ModelConfig(image_size=16, patch_small=4, patch_large=8, embed_dim=8,
                          depth=0, heads=2, window=2, num_classes=5, lora_rank=2)
        m = DualScaleTransformer(cfg, seed=0)
        assert m.forward(batch(cfg)).shape == (2, 5)
        assert m.lora_paths() == []

    def test_same_seed_same_init(self):
        m1 = DualScaleTransformer(TINY, seed=42)
        m2 = DualScaleTransformer(TINY, seed=42)
        assert m1.base_checksum() == m2.base_checksum()
        x = batch(TINY, seed=16)
        assert np.array_equal(m1.forward(x).data, m2.forward(x).data)

    def test_different_seed_different_init(self):
        assert (DualScaleTransformer(TINY, seed=1).base_checksum()
                != DualScaleTransformer(TINY, seed=2).base_checksum())

    def test_train_mode_needs_rng_for_dropout(self, tiny_model):
        with pytest.raises(ConfigError):
            tiny_model.forward(batch(TINY), train=True, rng=None)

    def test_train_mode_dropout_deterministic_per_stream(self, tiny_model):
        # make dropout observable through nonzero B
        m = DualScaleTransformer(TINY, seed=6)
        for path, t in m.lora_parameters().items():
            if path.endswith("_b"):
                t.data = rng(3).normal(size=t.data.shape) * 0.1
        x = batch(TINY, seed=17)
        a = m.forward(x, train=True, rng=np.random.default_rng(5)).data
        b = m.forward(x, train=True, rng=np.random.default_rng(5)).data
        c = m.forward(x, train=True, rng=np.random.default_rng(6)).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestGradients:
    def test_encoder_branch_depth2_grad_check(self):
        cfg = ModelConfig(image_size=16, patch_small=4, patch_large=8, embed_dim=8,
                          depth=2, heads=2, window=2, num_classes=7, lora_rank=2)
        m = DualScaleTransformer(cfg, seed=7)
        for t in m.parameters().values():
            t.requires_grad = False
        probe = Tensor(rng(18).normal(size=(8,)))

        def f(x):
            h = m._encoder_block(m._encoder_block(x, "small", 0, False, None),
                                 "small", 1, False, None)
            return T.tsum(T.mul(h, T.broadcast_to(T.reshape(probe, (1, 1, 8)), h.shape)))

        assert grad_check(f, Tensor(rng(19).normal(size=(1, 6, 8)))) < 1e-5

    def test_full_model_input_gradient_sampled(self, tiny_model):
        y = np.array([2, 5])

        def f(x):
            return cross_entropy(tiny_model.forward(x), y)

        x = batch(TINY, seed=20)
        idx = np.linspace(0, x.size - 1, 25).astype(int)
        assert grad_check(f, x, indices=idx) < 1e-5

    def test_lora_parameter_gradients(self):
        m = DualScaleTransformer(TINY, seed=8)
        for path, t in m.lora_parameters().items():
            if path.endswith("_b"):
                t.data = rng(4).normal(size=t.data.shape) * 0.05
        x = batch(TINY, seed=21)
        y = np.array([1, 3])
        for path in ("branch_small/0/lora_q_a", "branch_large/0/lora_k_b"):
            p = m.parameters()[path]
            with Tape() as tape:
                backward(cross_entropy(m.forward(x), y), tape)
            analytic = p.grad.reshape(-1).copy()
            flat = p.data.reshape(-1)
            eps = 1e-5
            for i in np.linspace(0, flat.size - 1, 5).astype(int):
                orig = flat[i]
                flat[i] = orig + eps
                fp = cross_entropy(m.forward(x), y).item()
                flat[i] = orig - eps
                fm = cross_entropy(m.forward(x), y).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                rel = abs(analytic[i] - num) / (abs(analytic[i]) + abs(num) + 1e-12)
                assert rel < 1e-5, f"{path}[{i}]: {rel}"
