"""Hash-derived binary model signatures.

The owner-side gamma passport image of every passport layer is hashed with
SHA-512 over a canonical byte encoding; the digest bits, mapped to {-1,+1},
become that layer's signature. Channel counts below 512 keep the trailing
bits of the digest, larger counts cycle the digest bit stream.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

DIGEST_BITS = 512


class SignatureError(ValueError):
    pass


def canonical_image_bytes(image) -> bytes:
    """Deterministic byte serialization of a (C, H, W) image tensor.

    Layout: '<3I' shape header followed by little-endian float32 pixels in
    row-major (channel-first) order. Bijective with (shape, pixel values),
    platform independent.
    """
    arr = image.detach().cpu().numpy() if torch.is_tensor(image) else np.asarray(image)
    if arr.ndim != 3:
        raise SignatureError(f"expected a 3-dim (C,H,W) image, got shape {tuple(arr.shape)}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack("<3I", *arr.shape)
    return header + arr.tobytes(order="C")


def image_digest(image) -> bytes:
    return hashlib.sha512(canonical_image_bytes(image)).digest()


def sgn_map(bits) -> np.ndarray:
    """Map a {0,1} bit sequence elementwise to {-1,+1}."""
    arr = np.asarray(list(bits), dtype=np.int64) if not isinstance(bits, np.ndarray) else bits.astype(np.int64)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise SignatureError("sgn_map input must contain only 0/1 bits")
    return (2 * arr - 1).astype(np.int8)


def digest_bits(digest: bytes) -> np.ndarray:
    """Unpack digest bytes to 512 bits, MSB first within each byte."""
    return np.unpackbits(np.frombuffer(digest, dtype=np.uint8))


def fit_bit_length(signs: np.ndarray, channel_count: int) -> np.ndarray:
    """Apply the per-layer length rule to a 512-entry sign sequence.

    Shorter than 512: drop leading bits, keep the trailing channel_count.
    Longer: cycle the sequence until channel_count entries are collected.
    """
    if channel_count <= 0:
        raise SignatureError(f"channel_count must be positive, got {channel_count}")
    n = signs.shape[0]
    if channel_count <= n:
        return signs[n - channel_count:]
    reps = int(np.ceil(channel_count / n))
    return np.tile(signs, reps)[:channel_count]


class BinarySignature:
    """Per-layer sign sequences over {-1,+1}, one sequence per passport layer."""

    def __init__(self, layers, source_digests=None):
        self.layers = []
        for seq in layers:
            arr = np.asarray(seq, dtype=np.int8)
            if arr.ndim != 1:
                raise SignatureError("each signature layer must be a 1-dim sequence")
            if arr.size and not np.isin(arr, (-1, 1)).all():
                raise SignatureError("signature entries must be -1 or +1")
            self.layers.append(arr)
        self.source_digests = list(source_digests) if source_digests else []

    @property
    def lengths(self):
        return [len(layer) for layer in self.layers]

    @property
    def total_bits(self) -> int:
        return sum(self.lengths)

    def __len__(self):
        return len(self.layers)

    def __eq__(self, other):
        if not isinstance(other, BinarySignature):
            return NotImplemented
        return self.lengths == other.lengths and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers)
        )

    def to_json(self) -> str:
        doc = {
            "layers": ["".join("+" if s > 0 else "-" for s in layer) for layer in self.layers],
            "source_digests": self.source_digests,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BinarySignature":
        doc = json.loads(text)
        layers = []
        for encoded in doc["layers"]:
            if set(encoded) - {"+", "-"}:
                raise SignatureError("signature strings may only contain '+'/'-'")
            layers.append(np.array([1 if ch == "+" else -1 for ch in encoded], dtype=np.int8))
        return cls(layers, doc.get("source_digests", []))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "BinarySignature":
        with open(path) as fh:
            return cls.from_json(fh.read())


def derive_signature(gamma_images, channel_counts, expected_shape=None,
                     single_image=False) -> BinarySignature:
    """Hash owner-side gamma images into the per-layer model signature.

    One image per passport layer by default. With single_image=True a single
    gamma image is hashed once and its digest reused for every layer (lengths
    still applied per layer).
    """
    channel_counts = list(channel_counts)
    if any(c <= 0 for c in channel_counts):
        raise SignatureError(f"channel counts must be positive, got {channel_counts}")
    if single_image:
        if len(gamma_images) != 1:
            raise SignatureError("single_image mode takes exactly one gamma image")
        gamma_images = list(gamma_images) * len(channel_counts)
    if len(gamma_images) != len(channel_counts):
        raise SignatureError(
            f"need one gamma image per layer: {len(gamma_images)} images, "
            f"{len(channel_counts)} layers")
    layers, digests = [], []
    for image, count in zip(gamma_images, channel_counts):
        if expected_shape is not None and tuple(image.shape) != tuple(expected_shape):
            raise SignatureError(
                f"passport image shape {tuple(image.shape)} != configured {tuple(expected_shape)}")
        digest = image_digest(image)
        signs = sgn_map(digest_bits(digest))
        layers.append(fit_bit_length(signs, count))
        digests.append(digest.hex())
    return BinarySignature(layers, digests)


def extract_signature(model, passports) -> BinarySignature:
    """Read the live signature from a dual-branch model.

    Per layer: the elementwise sign of the pooled gamma-passport feature map
    times the derived passport scale vector. Zero products count as +1.
    """
    with torch.no_grad():
        feats = model.propagate_passports(passports)
        layers = []
        for site, (gamma_feat, beta_feat) in zip(model.passport_sites(), feats):
            pooled = gamma_feat.mean(dim=(2, 3)).reshape(-1)
            gamma_p, _ = site.derive_affine(gamma_feat, beta_feat)
            prod = (pooled * gamma_p.reshape(-1)).cpu().numpy()
            layers.append(np.where(prod >= 0, 1, -1).astype(np.int8))
    return BinarySignature(layers)


def sign_agreement(xi: BinarySignature, xi_star: BinarySignature) -> float:
    """Fraction of matching signs, pooled over all bits of all layers."""
    if xi.lengths != xi_star.lengths:
        raise SignatureError(
            f"signature structure mismatch: {xi.lengths} vs {xi_star.lengths}")
    total = xi.total_bits
    if total == 0:
        raise SignatureError("cannot compare empty signatures")
    matches = sum(int((a == b).sum()) for a, b in zip(xi.layers, xi_star.layers))
    return matches / total


def flip_pixel_lsb(image: torch.Tensor, index) -> torch.Tensor:
    """Flip the least-significant float32 bit of one pixel (avalanche probe)."""
    out = image.detach().clone().to(torch.float32)
    flat = out.view(-1)
    raw = flat.numpy().view(np.uint32)
    raw[index] ^= 1
    return out
