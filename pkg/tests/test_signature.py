"""Signature derivation against independent hashlib oracles."""

import hashlib
import json
import struct

import numpy as np
import pytest
import torch

from deepseal.signature import (BinarySignature, SignatureError,
                                canonical_image_bytes, derive_signature,
                                digest_bits, fit_bit_length, flip_pixel_lsb,
                                image_digest, sgn_map, sign_agreement)


def oracle_signs(image, channel_count):
    """Independent route: struct+tobytes -> hashlib -> bin() string."""
    arr = np.ascontiguousarray(image.numpy(), dtype="<f4")
    blob = struct.pack("<3I", *arr.shape) + arr.tobytes(order="C")
    digest = hashlib.sha512(blob).digest()
    bits = "".join(f"{byte:08b}" for byte in digest)
    signs = [1 if b == "1" else -1 for b in bits]
    if channel_count <= 512:
        return signs[512 - channel_count:]
    out = []
    while len(out) < channel_count:
        out.extend(signs)
    return out[:channel_count]


class TestSgnMap:
    def test_direct_mapping(self):
        assert sgn_map([0, 1, 1, 0]).tolist() == [-1, 1, 1, -1]

    def test_empty(self):
        assert sgn_map([]).tolist() == []

    def test_all_ones_512(self):
        out = sgn_map([1] * 512)
        assert out.tolist() == [1] * 512

    def test_rejects_non_binary(self):
        with pytest.raises(SignatureError):
            sgn_map([0, 2, 1])


class TestCanonicalBytes:
    def test_header_and_length(self):
        img = torch.zeros(3, 4, 5)
        blob = canonical_image_bytes(img)
        assert blob[:12] == struct.pack("<3I", 3, 4, 5)
        assert len(blob) == 12 + 3 * 4 * 5 * 4

    def test_bijective_with_pixels(self):
        a = torch.rand(3, 8, 8)
        b = a.clone()
        b[0, 0, 0] += 1e-3
        assert canonical_image_bytes(a) != canonical_image_bytes(b)
        assert canonical_image_bytes(a) == canonical_image_bytes(a.clone())

    def test_rejects_bad_rank(self):
        with pytest.raises(SignatureError):
            canonical_image_bytes(torch.zeros(4, 4))


class TestDeriveSignature:
    def test_full_512_matches_oracle(self):
        img = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0))
        sig = derive_signature([img], [512])
        assert sig.layers[0].tolist() == oracle_signs(img, 512)

    def test_truncation_keeps_trailing_bits(self):
        img = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(1))
        full = derive_signature([img], [512]).layers[0]
        short = derive_signature([img], [256]).layers[0]
        assert short.tolist() == full[256:].tolist()

    def test_frozen_all_zero_vector(self):
        # SHA-512 of the canonical bytes of a zero 3x32x32 image, trailing 8
        # signs; digest verified with a standalone hashlib oracle
        img = torch.zeros(3, 32, 32)
        sig = derive_signature([img], [8])
        assert sig.layers[0].tolist() == [1, -1, 1, -1, 1, 1, -1, -1]
        assert sig.source_digests[0] == (
            "1ed543b210179c4fc13ac6863634b7bb9ba03b6f7184fb2e4591415f0d76da81"
            "fc5afcbaa28a39472398277df606a4e3d9805758cd73f416bece399bb054d8ac")

    def test_frozen_ramp_vector(self):
        img = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4)
        sig = derive_signature([img], [8])
        assert sig.layers[0].tolist() == [1, 1, -1, 1, -1, 1, -1, -1]

    def test_cycling_beyond_512(self):
        img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(2))
        sig = derive_signature([img], [700]).layers[0]
        assert sig.tolist() == oracle_signs(img, 700)
        # positions i and i+512 agree
        assert sig[:700 - 512].tolist() == sig[512:].tolist()

    def test_rejects_bad_channel_count(self):
        with pytest.raises(SignatureError):
            derive_signature([torch.zeros(3, 4, 4)], [0])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(SignatureError):
            derive_signature([torch.zeros(3, 4, 4)], [8], expected_shape=(3, 8, 8))

    def test_per_layer_images_give_distinct_layers(self):
        g = torch.Generator().manual_seed(3)
        imgs = [torch.rand(3, 8, 8, generator=g) for _ in range(2)]
        sig = derive_signature(imgs, [64, 64])
        assert sig.layers[0].tolist() != sig.layers[1].tolist()

    def test_single_image_fallback(self):
        img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(4))
        sig = derive_signature([img], [64, 128], single_image=True)
        assert sig.lengths == [64, 128]
        # same digest, different truncations: layer0 is the tail of layer1
        assert sig.layers[0].tolist() == sig.layers[1][64:].tolist()

    def test_determinism(self):
        img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(5))
        a = derive_signature([img], [100])
        b = derive_signature([img.clone()], [100])
        assert a == b


class TestAvalanche:
    def test_single_pixel_lsb_flip_decorrelates(self):
        g = torch.Generator().manual_seed(7)
        img = torch.rand(3, 32, 32, generator=g)
        base = derive_signature([img], [512])
        rng = np.random.default_rng(7)
        for _ in range(100):
            idx = int(rng.integers(0, img.numel()))
            perturbed = flip_pixel_lsb(img, idx)
            assert not torch.equal(perturbed, img)
            sa = sign_agreement(base, derive_signature([perturbed], [512]))
            assert 0.35 <= sa <= 0.65

    def test_flip_is_involution(self):
        img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(8))
        assert torch.equal(flip_pixel_lsb(flip_pixel_lsb(img, 5), 5), img)


class TestSignAgreement:
    def test_identical(self):
        sig = derive_signature([torch.rand(3, 4, 4)], [64])
        assert sign_agreement(sig, sig) == 1.0

    def test_negated(self):
        sig = derive_signature([torch.rand(3, 4, 4)], [64])
        neg = BinarySignature([-layer for layer in sig.layers])
        assert sign_agreement(sig, neg) == 0.0

    def test_structure_mismatch_raises(self):
        a = BinarySignature([[1, -1]])
        b = BinarySignature([[1, -1, 1]])
        with pytest.raises(SignatureError):
            sign_agreement(a, b)

    def test_symmetry_and_hamming_complement(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = BinarySignature([rng.choice([-1, 1], size=64)])
            b = BinarySignature([rng.choice([-1, 1], size=64)])
            sa = sign_agreement(a, b)
            assert sa == sign_agreement(b, a)
            hamming = np.mean(a.layers[0] != b.layers[0])
            assert sa == pytest.approx(1.0 - hamming)

    def test_random_pairs_concentrate_at_half(self):
        # Monte-Carlo binomial check: |SA - 0.5| < 0.07 in >= 99% of trials
        rng = np.random.default_rng(13)
        trials = 1000
        outliers = 0
        for _ in range(trials):
            a = BinarySignature([rng.choice([-1, 1], size=512)])
            b = BinarySignature([rng.choice([-1, 1], size=512)])
            if abs(sign_agreement(a, b) - 0.5) >= 0.07:
                outliers += 1
        assert outliers <= trials // 100

    def test_pooled_over_layers(self):
        a = BinarySignature([[1, 1], [1, 1, 1, 1]])
        b = BinarySignature([[-1, -1], [1, 1, 1, 1]])
        assert sign_agreement(a, b) == pytest.approx(4 / 6)


class TestSerialization:
    def test_json_round_trip(self):
        g = torch.Generator().manual_seed(21)
        imgs = [torch.rand(3, 8, 8, generator=g) for _ in range(3)]
        sig = derive_signature(imgs, [32, 64, 64])
        restored = BinarySignature.from_json(sig.to_json())
        assert restored == sig
        assert restored.source_digests == sig.source_digests

    def test_json_format(self):
        sig = derive_signature([torch.zeros(3, 4, 4)], [8])
        doc = json.loads(sig.to_json())
        assert set(doc["layers"][0]) <= {"+", "-"}
        assert len(doc["layers"][0]) == 8
        assert doc["source_digests"][0] == image_digest(torch.zeros(3, 4, 4)).hex()

    def test_rejects_foreign_characters(self):
        with pytest.raises(SignatureError):
            BinarySignature.from_json('{"layers": ["+-x"]}')


class TestExtractSignature:
    def _model_and_passports(self, seed=31):
        from deepseal.models import ModelSpec, build_model
        from deepseal.passport_layer import PassportPair
        torch.manual_seed(seed)
        model = build_model(ModelSpec(architecture="toy_cnn"))
        g = torch.Generator().manual_seed(seed + 1)
        pairs = [PassportPair(torch.rand(3, 32, 32, generator=g),
                              torch.rand(3, 32, 32, generator=g),
                              layer_index=i) for i in range(3)]
        return model, pairs

    def test_negating_tlp_output_flips_every_sign(self):
        from deepseal.signature import extract_signature
        model, pairs = self._model_and_passports()
        before = extract_signature(model, pairs)
        with torch.no_grad():
            for site in model.passport_sites():
                site.tlp_gamma[2].weight.mul_(-1)
                site.tlp_gamma[2].bias.mul_(-1)
        after = extract_signature(model, pairs)
        for a, b in zip(before.layers, after.layers):
            assert (a == -b).all()

    def test_matches_independent_pooled_product_recompute(self):
        from deepseal.signature import extract_signature
        model, pairs = self._model_and_passports(seed=37)
        extracted = extract_signature(model, pairs)
        feats = model.propagate_passports(pairs)
        for layer_idx, (site, (gamma_feat, _)) in enumerate(
                zip(model.passport_sites(), feats)):
            pooled = gamma_feat.detach().numpy().mean(axis=(2, 3)).reshape(-1)
            w0 = site.tlp_gamma[0].weight.detach().numpy()
            b0 = site.tlp_gamma[0].bias.detach().numpy()
            h = w0 @ pooled + b0
            h = np.where(h > 0, h, 0.01 * h)
            w1 = site.tlp_gamma[2].weight.detach().numpy()
            b1 = site.tlp_gamma[2].bias.detach().numpy()
            gamma_p = w1 @ h + b1
            signs = np.where(pooled * gamma_p >= 0, 1, -1)
            assert extracted.layers[layer_idx].tolist() == signs.tolist()


class TestBitPlumbing:
    def test_digest_bits_msb_first(self):
        assert digest_bits(b"\x80\x01").tolist() == [1, 0, 0, 0, 0, 0, 0, 0,
                                                     0, 0, 0, 0, 0, 0, 0, 1]

    def test_fit_length_identity(self):
        signs = sgn_map(np.arange(512) % 2)
        assert fit_bit_length(signs, 512).tolist() == signs.tolist()
