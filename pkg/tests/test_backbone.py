import numpy as np
import pytest

from spoofcl import autodiff as ad
from spoofcl.backbone import (
    BackboneConfig,
    ContrastiveModel,
    Encoder,
    ProjectionHead,
    parameter_count,
    patchify,
)
from spoofcl.stage1 import contrastive_loss

from gradcheck import rel_error

MICRO = BackboneConfig(embed_dim=8, num_blocks=1, num_heads=2, n_mels=4, n_frames=5,
                       mlp_hidden=16, projection_dim=8)
SMALL = BackboneConfig(embed_dim=16, num_blocks=2, num_heads=2, n_mels=8, n_frames=12,
                       mlp_hidden=32, projection_dim=16)


def _closed_form_count(cfg):
    d, h, p = cfg.embed_dim, cfg.mlp_hidden, cfg.projection_dim
    embed = cfg.patch_size * d + d + cfg.num_patches * d
    block = 2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    head = 2 * d + d * p + p + 2 * p
    return embed + cfg.num_blocks * block + head


class TestConfig:
    def test_defaults(self):
        cfg = BackboneConfig()
        assert (cfg.embed_dim, cfg.num_blocks, cfg.num_heads) == (192, 12, 3)
        assert cfg.num_patches == 511
        assert cfg.patch_size == 256

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            BackboneConfig(embed_dim=10, num_heads=3)


class TestPatchify:
    def test_full_size(self):
        assert patchify(np.zeros((128, 512))).shape == (511, 256)

    def test_relaxed_shape(self):
        assert patchify(np.zeros((128, 3))).shape == (2, 256)

    def test_patch_zero_is_first_two_columns(self):
        spec = np.random.default_rng(0).normal(size=(128, 512))
        p = patchify(spec)
        np.testing.assert_array_equal(p[0], spec[:, 0:2].reshape(-1))
        np.testing.assert_array_equal(p[300], spec[:, 300:302].reshape(-1))

    def test_batched(self):
        spec = np.random.default_rng(1).normal(size=(3, 4, 6))
        p = patchify(spec)
        assert p.shape == (3, 5, 8)
        np.testing.assert_array_equal(p[2, 4], spec[2, :, 4:6].reshape(-1))

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            patchify(np.zeros(10))
        with pytest.raises(ValueError):
            patchify(np.zeros((128, 1)))


class TestEmbed:
    def test_zero_patches_give_bias(self):
        enc = Encoder(SMALL, np.random.default_rng(0), np.float64)
        enc.pos_embed.data[...] = 0
        enc.patch_embed.bias.data[...] = np.arange(16.0)
        out = enc.embed(np.zeros((1, 8, 12))).data
        assert out.shape == (1, 11, 16)
        np.testing.assert_array_equal(out[0], np.tile(np.arange(16.0), (11, 1)))

    def test_zero_weights_give_positions(self):
        enc = Encoder(SMALL, np.random.default_rng(0), np.float64)
        enc.patch_embed.weight.data[...] = 0
        out = enc.embed(np.random.default_rng(1).normal(size=(2, 8, 12))).data
        np.testing.assert_array_equal(out[1], enc.pos_embed.data)


class TestEncoder:
    def test_shapes(self):
        enc = Encoder(SMALL, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(8, 12)).astype(np.float32)
        assert enc.encode_self(x).shape == (16,)
        assert enc.encode_cross(x, x).shape == (16,)
        assert enc.encode_self(np.stack([x, x, x])).shape == (3, 16)

    def test_wrong_input_shape(self):
        with pytest.raises(ValueError):
            Encoder(SMALL).encode_self(np.zeros((8, 13)))

    def test_deterministic(self):
        enc = Encoder(SMALL, np.random.default_rng(0))
        x = np.random.default_rng(2).normal(size=(8, 12)).astype(np.float32)
        assert enc.encode_self(x).data.tobytes() == enc.encode_self(x.copy()).data.tobytes()

    @pytest.mark.parametrize("seed", range(10))
    def test_cross_degenerates_to_self(self, seed):
        rng = np.random.default_rng(seed)
        enc = Encoder(SMALL, rng)
        x = rng.normal(size=(2, 8, 12)).astype(np.float32)
        assert np.array_equal(enc.encode_cross(x, x).data, enc.encode_self(x).data)

    def test_cross_is_not_symmetric(self):
        rng = np.random.default_rng(3)
        enc = Encoder(SMALL, rng, np.float64)
        a, b = rng.normal(size=(2, 8, 12))
        assert not np.allclose(enc.encode_cross(a, b).data, enc.encode_cross(b, a).data)

    def test_cross_uses_x2_embeddings_as_first_skip(self):
        # with attention and MLP output zeroed the blocks are identities on the
        # residual stream, so the cross branch returns pooled x2 embeddings
        rng = np.random.default_rng(4)
        enc = Encoder(SMALL, rng, np.float64)
        for blk in enc.blocks:
            blk.attn.w_o.data[...] = 0
            blk.mlp.fc2.weight.data[...] = 0
        a, b = rng.normal(size=(2, 8, 12))
        expected = enc.embed(b).data.mean(axis=1)[0]
        np.testing.assert_allclose(enc.encode_cross(a, b).data, expected, rtol=1e-12)

    def test_triplet_matches_separate_calls(self):
        rng = np.random.default_rng(5)
        enc = Encoder(SMALL, rng, np.float64)
        a, b = rng.normal(size=(2, 3, 8, 12))
        r1, r2, r12 = enc.encode_triplet(a, b)
        np.testing.assert_array_equal(r1.data, enc.encode_self(a).data)
        np.testing.assert_array_equal(r2.data, enc.encode_self(b).data)
        np.testing.assert_array_equal(r12.data, enc.encode_cross(a, b).data)

    def test_pool_is_linear(self):
        s = np.random.default_rng(6).normal(size=(2, 11, 16))
        a = Encoder.pool(ad.Tensor(s)).data
        b = Encoder.pool(ad.Tensor(3.5 * s)).data
        np.testing.assert_allclose(b, 3.5 * a, rtol=1e-12)

    def test_nan_input_raises(self):
        x = np.zeros((8, 12), dtype=np.float32)
        x[0, 0] = np.nan
        with pytest.raises(ad.NonFiniteError):
            Encoder(SMALL).encode_self(x)

    def test_stable_tensor_names(self):
        names = [n for n, _ in ContrastiveModel(SMALL).named_parameters()]
        assert names[:3] == ["encoder.patch_embed.weight", "encoder.patch_embed.bias",
                             "encoder.pos_embed"]
        assert "encoder.blocks.1.attn.w_q" in names
        assert names[-1] == "projection.norm2.bias"


class TestProjection:
    def test_nonnegative_512(self):
        head = ProjectionHead(BackboneConfig())
        z = head(ad.Tensor(np.random.default_rng(0).normal(size=(4, 192)).astype(np.float32))).data
        assert z.shape == (4, 512)
        assert np.all(z >= 0)

    def test_zero_weights(self):
        head = ProjectionHead(SMALL)
        for p in head.parameters():
            p.data[...] = 0
        z = head(ad.Tensor(np.ones((2, 16), dtype=np.float32))).data
        assert not np.any(z)

    def test_deterministic(self):
        head = ProjectionHead(SMALL)
        r = ad.Tensor(np.random.default_rng(1).normal(size=(16,)).astype(np.float32))
        assert head(r).data.tobytes() == head(r).data.tobytes()


class TestParameterCount:
    def test_paper_band(self):
        n = parameter_count(BackboneConfig())
        assert 5.0e6 <= n <= 6.5e6
        assert n == _closed_form_count(BackboneConfig())

    def test_zero_blocks(self):
        cfg = BackboneConfig(num_blocks=0)
        assert parameter_count(cfg) == _closed_form_count(cfg)

    def test_linear_in_blocks(self):
        c0 = parameter_count(BackboneConfig(num_blocks=0))
        c3 = parameter_count(BackboneConfig(num_blocks=3))
        c6 = parameter_count(BackboneConfig(num_blocks=6))
        assert c6 - c0 == 2 * (c3 - c0)


def micro_loss(model, x1, x2, same, alpha=0.2):
    r1, r2, r12 = model.encoder.encode_triplet(x1, x2)
    total, _ = contrastive_loss(model.project(r1), model.project(r2), model.project(r12),
                                same, alpha)
    return total


def micro_gradcheck(seed, h=1e-5):
    """Largest relative error between analytic and central-difference grads over all parameters."""
    rng = np.random.default_rng(seed)
    model = ContrastiveModel(MICRO, seed=seed, dtype=np.float64)
    # larger weights than the default init so every term is well away from zero
    for p in model.parameters():
        if p.data.ndim > 1:
            p.data[...] = p.data * 10
        else:
            p.data[...] = p.data + rng.normal(scale=0.1, size=p.shape)
    x1 = rng.normal(size=(2, 4, 5))
    x2 = rng.normal(size=(2, 4, 5))
    same = np.array([True, False])
    model.zero_grad()
    micro_loss(model, x1, x2, same).backward()
    worst = 0.0
    for name, p in model.named_parameters():
        num = np.zeros_like(p.data)
        for i in np.ndindex(p.shape):
            old = p.data[i]
            with ad.no_grad():
                p.data[i] = old + h
                up = micro_loss(model, x1, x2, same).item()
                p.data[i] = old - h
                down = micro_loss(model, x1, x2, same).item()
            p.data[i] = old
            num[i] = (up - down) / (2 * h)
        # difference-quotient round-off here is ~1e-10, far below this floor
        worst = max(worst, rel_error(p.grad, num, floor=1e-6))
    return worst


class TestContrastiveGradients:
    def test_micro_backbone_all_parameters(self):
        assert micro_gradcheck(0) < 1e-3

    def test_shared_weights_sum_branch_contributions(self):
        rng = np.random.default_rng(7)
        model = ContrastiveModel(MICRO, seed=1, dtype=np.float64)
        x1, x2 = rng.normal(size=(2, 2, 4, 5))
        same = np.array([True, False])
        enc, proj = model.encoder, model.project

        def grads(loss):
            model.zero_grad()
            loss.backward()
            return {n: p.grad.copy() for n, p in model.named_parameters()}

        from spoofcl.stage1 import contrastive_terms
        r1, r2, r12 = enc.encode_triplet(x1, x2)
        l_sa, l_ca = contrastive_terms(proj(r1), proj(r2), proj(r12), same)
        full = grads(l_sa.mean() + l_ca.mean() * 0.2)
        r1, r2, _ = enc.encode_triplet(x1, x2)
        only_sa = grads(contrastive_terms(proj(r1), proj(r2), None, same)[0].mean())
        r1, r2, r12 = enc.encode_triplet(x1, x2)
        only_ca = grads(contrastive_terms(proj(r1), proj(r2), proj(r12), same)[1].mean() * 0.2)
        for name in full:
            np.testing.assert_allclose(full[name], only_sa[name] + only_ca[name],
                                       rtol=1e-10, atol=1e-14)
