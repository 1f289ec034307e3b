import math

import pytest
import torch

from onetok.encoder import (
    VitConfig,
    VitEncoder,
    _apply_view,
    augment,
    cosine_alignment_loss,
    nt_xent_loss,
    partition_params,
    patchify,
    ssl_pretrain_step,
    unpatchify,
)
from onetok.errors import DegenerateNumericsError

from datagen import shapes_dataset
from oracles import check_gradients


def tiny_encoder(embed_dim=8, depth=1, heads=2, image_size=8, patch_size=4, extra_tokens=1, seed=0):
    torch.manual_seed(seed)
    cfg = VitConfig(
        image_size=image_size,
        patch_size=patch_size,
        embed_dim=embed_dim,
        depth=depth,
        heads=heads,
        extra_tokens=extra_tokens,
    )
    return VitEncoder(cfg)


class TestPatchify:
    def test_zero_input(self):
        out = patchify(torch.zeros(1, 1, 4, 4), 2)
        assert out.shape == (1, 4, 4)
        assert torch.equal(out, torch.zeros(1, 4, 4))

    def test_identity_flattening(self):
        img = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = patchify(img, 2)
        assert torch.equal(out, torch.tensor([[[1.0, 2.0, 3.0, 4.0]]]))

    def test_round_trip(self):
        x = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        p = patchify(x, 4)
        assert p.shape == (1, 4, 48)
        assert torch.equal(unpatchify(p, 4, 3, 8, 8), x)

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            patchify(torch.zeros(1, 1, 5, 5), 2)


class TestVitConfig:
    def test_divisibility_checks(self):
        with pytest.raises(ValueError):
            VitConfig(image_size=30, patch_size=4)
        with pytest.raises(ValueError):
            VitConfig(embed_dim=30, heads=4)


class TestEncode:
    def test_identical_images_identical_tokens(self):
        enc = tiny_encoder(embed_dim=16, depth=2)
        img = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(1))
        batch = torch.cat([img, torch.randn(1, 1, 8, 8), img])
        z = enc.encode(batch)
        assert torch.equal(z[0], z[2])
        assert not torch.equal(z[0], z[1])

    def test_shape_contract(self):
        enc = tiny_encoder(embed_dim=128, heads=4, image_size=16)
        z = enc.encode(torch.randn(8, 1, 16, 16))
        assert z.shape == (8, 128)

    def test_deterministic_independent_of_batch_composition(self):
        enc = tiny_encoder(embed_dim=16, depth=2, seed=3)
        imgs = torch.randn(4, 1, 8, 8, generator=torch.Generator().manual_seed(2))
        full = enc.encode(imgs)
        solo = enc.encode(imgs[2:3])
        assert torch.equal(full[2], solo[0])

    def test_token_index_out_of_range(self):
        enc = tiny_encoder(extra_tokens=2)
        with pytest.raises(ValueError, match="token_index"):
            enc.encode(torch.zeros(1, 1, 8, 8), token_index=2)

    def test_extra_token_selection_differs(self):
        enc = tiny_encoder(embed_dim=16, extra_tokens=2)
        x = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(4))
        assert not torch.equal(enc.encode(x, 0), enc.encode(x, 1))

    def test_cls_gradient_matches_finite_differences(self):
        enc = tiny_encoder().double()
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        cls = enc.extra_tokens[0]
        check_gradients(lambda: enc.encode(x).sum(), [("extra_tokens.0", cls)], tol=1e-3)


class TestPartition:
    def test_cls_only(self):
        enc = tiny_encoder()
        trainable, frozen = partition_params(enc, "cls_only")
        assert trainable == ["extra_tokens.0"]
        assert all(not p.requires_grad for n, p in enc.named_parameters() if n != "extra_tokens.0")
        assert enc.extra_tokens[0].requires_grad

    def test_none(self):
        enc = tiny_encoder()
        trainable, frozen = partition_params(enc, "none")
        assert trainable == []
        assert len(frozen) == len(list(enc.named_parameters()))

    def test_all(self):
        enc = tiny_encoder()
        trainable, frozen = partition_params(enc, "all")
        assert frozen == []

    def test_every_name_in_exactly_one_side(self):
        enc = tiny_encoder(extra_tokens=3)
        for mode in ("cls_only", "all", "none"):
            trainable, frozen = partition_params(enc, mode)
            names = sorted(trainable + frozen)
            assert names == sorted(n for n, _ in enc.named_parameters())
            assert not set(trainable) & set(frozen)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown partition mode"):
            partition_params(tiny_encoder(), "most")

    def test_frozen_tensors_untouched_after_100_steps(self):
        enc = tiny_encoder(embed_dim=16, depth=2, seed=7)
        partition_params(enc, "cls_only")
        init = {n: p.detach().clone() for n, p in enc.named_parameters()}
        opt = torch.optim.AdamW([p for p in enc.parameters() if p.requires_grad], lr=1e-2)
        x = torch.randn(4, 1, 8, 8, generator=torch.Generator().manual_seed(8))
        for _ in range(100):
            loss = enc.encode(x).pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        for name, param in enc.named_parameters():
            if name == "extra_tokens.0":
                assert not torch.equal(param, init[name])
            else:
                assert torch.equal(param, init[name]), f"{name} changed while frozen"


class TestCosineAlignment:
    def test_equal_tokens(self):
        z = torch.randn(4, 8, generator=torch.Generator().manual_seed(0))
        assert cosine_alignment_loss(z, z.clone(), 1.0).item() == pytest.approx(0.0, abs=1e-6)

    def test_antiparallel(self):
        z = torch.randn(4, 8, generator=torch.Generator().manual_seed(1))
        assert cosine_alignment_loss(z, -z, 1.0).item() == pytest.approx(2.0, abs=1e-6)

    def test_orthogonal(self):
        z = torch.tensor([[1.0, 0.0]])
        zf = torch.tensor([[0.0, 1.0]])
        assert cosine_alignment_loss(z, zf, 0.5).item() == pytest.approx(0.5, abs=1e-7)

    def test_range(self):
        g = torch.Generator().manual_seed(2)
        for lam in (0.3, 1.0, 2.0):
            for _ in range(10):
                val = cosine_alignment_loss(
                    torch.randn(4, 8, generator=g), torch.randn(4, 8, generator=g), lam
                ).item()
                assert 0.0 <= val <= 2.0 * lam

    def test_scale_invariance_means_zero(self):
        z = torch.randn(3, 8, generator=torch.Generator().manual_seed(3))
        assert cosine_alignment_loss(2.5 * z, z, 1.0).item() == pytest.approx(0.0, abs=1e-6)

    def test_zero_norm_rejected(self):
        z = torch.zeros(1, 4)
        with pytest.raises(DegenerateNumericsError):
            cosine_alignment_loss(z, torch.ones(1, 4), 1.0)

    def test_no_gradient_into_frozen_side(self):
        z = torch.randn(2, 4, requires_grad=True)
        zf = torch.randn(2, 4, requires_grad=True)
        cosine_alignment_loss(z, zf, 1.0).backward()
        assert z.grad is not None
        assert zf.grad is None


class TestNtXent:
    def test_hand_enumerated_two_image_batch(self):
        # positives at cos=1, the other image orthogonal: each anchor sees
        # softmax(e / (e + 1)) in its view direction.
        za = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        zb = torch.tensor([[2.0, 0.0], [0.0, 3.0]])
        expected = -math.log(math.e / (math.e + 1.0))
        assert nt_xent_loss(za, zb, 1.0).item() == pytest.approx(expected, rel=1e-6)
        assert expected == pytest.approx(0.31326, abs=1e-5)

    def test_rotation_invariance(self):
        g = torch.Generator().manual_seed(4)
        za = torch.randn(6, 8, generator=g)
        zb = torch.randn(6, 8, generator=g)
        q, _ = torch.linalg.qr(torch.randn(8, 8, generator=g))
        base = nt_xent_loss(za, zb, 0.5).item()
        rotated = nt_xent_loss(za @ q, zb @ q, 0.5).item()
        assert rotated == pytest.approx(base, abs=1e-5)

    def test_batch_too_small(self):
        with pytest.raises(ValueError):
            nt_xent_loss(torch.randn(1, 4), torch.randn(1, 4), 1.0)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            nt_xent_loss(torch.randn(2, 4), torch.randn(2, 4), 0.0)


class TestAugment:
    def test_identity_path(self):
        x = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(5)) * 2 - 1
        out = _apply_view(x, top=0, left=0, side=8, flip=False, jitter=torch.zeros(1))
        assert torch.equal(out, x)

    def test_range_contract(self):
        g = torch.Generator().manual_seed(6)
        x = torch.rand(4, 1, 16, 16, generator=g) * 2 - 1
        for _ in range(20):
            out = augment(x, g)
            assert out.min().item() >= -1.0
            assert out.max().item() <= 1.0
            assert out.shape == x.shape

    def test_different_seeds_differ(self):
        x = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(7)) * 2 - 1
        a = augment(x, torch.Generator().manual_seed(1))
        b = augment(x, torch.Generator().manual_seed(2))
        assert not torch.equal(a, b)

    def test_same_seed_repeats(self):
        x = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(8)) * 2 - 1
        a = augment(x, torch.Generator().manual_seed(3))
        b = augment(x, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)


class TestSslPretrainStep:
    def test_updates_all_parameters_and_batch_guard(self):
        enc = tiny_encoder(embed_dim=16, depth=1, image_size=16, seed=9)
        opt = torch.optim.AdamW(enc.parameters(), lr=1e-3)
        x = torch.rand(4, 1, 16, 16, generator=torch.Generator().manual_seed(9)) * 2 - 1
        before = {n: p.detach().clone() for n, p in enc.named_parameters()}
        loss = ssl_pretrain_step(enc, opt, x, 0.5, torch.Generator().manual_seed(0))
        assert loss > 0
        changed = [n for n, p in enc.named_parameters() if not torch.equal(p, before[n])]
        assert len(changed) == len(before)
        with pytest.raises(ValueError):
            ssl_pretrain_step(enc, opt, x[:1], 0.5, torch.Generator().manual_seed(0))

    def test_loss_decreases_on_two_class_shapes(self):
        images, _ = shapes_dataset(64, size=16, seed=0)
        enc = tiny_encoder(embed_dim=32, depth=2, heads=4, image_size=16, seed=11)
        opt = torch.optim.AdamW(enc.parameters(), lr=3e-4)
        g = torch.Generator().manual_seed(1)
        losses = []
        for step in range(200):
            idx = torch.randint(0, len(images), (16,), generator=g)
            losses.append(ssl_pretrain_step(enc, opt, images[idx], 0.2, g))
        early = sum(losses[:20]) / 20
        late = sum(losses[-20:]) / 20
        assert late < early, f"contrastive loss did not decrease: {early} -> {late}"
