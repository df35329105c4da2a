"""Key-based invertible steganographic network.

The forward pass hides a user ID image inside an owner passport image; the
reverse pass, fed the private key image in place of the discarded residual
branch, reveals it. Built from a Haar wavelet stage around a chain of affine
coupling blocks whose transforms are dense five-conv subnets, so each block
is algebraically invertible at any weights.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .passport_layer import PassportPair, ShapeError

PSNR_CAP_DB = 99.0


class NotReadyError(RuntimeError):
    pass


# ----- image I/O and quality ------------------------------------------------


def load_image(path, resolution: int | None = None) -> torch.Tensor:
    """PNG/JPG file -> (3, H, W) float tensor in [0,1]."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None:
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path):
    """(3, H, W) float tensor -> 8-bit PNG (values clamped to [0,1])."""
    from PIL import Image

    arr = tensor.detach().clamp(0, 1).mul(255).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path)


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0,
         cap: float = PSNR_CAP_DB) -> float:
    """10*log10(peak^2 / MSE); identical images return the cap value."""
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"psnr shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


# ----- wavelet stage ---------------------------------------------------------


def dwt_haar(x: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2x2 Haar analysis: (N,C,H,W) -> (N,4C,H/2,W/2)."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"Haar stage needs even spatial dims, got {tuple(x.shape)}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return torch.cat([ll, lh, hl, hh], dim=1)


def iwt_haar(y: torch.Tensor) -> torch.Tensor:
    """Inverse of dwt_haar: (N,4C,H,W) -> (N,C,2H,2W)."""
    if y.shape[1] % 4:
        raise ShapeError(f"inverse Haar needs 4k channels, got {y.shape[1]}")
    c = y.shape[1] // 4
    ll, lh, hl, hh = y[:, :c], y[:, c:2 * c], y[:, 2 * c:3 * c], y[:, 3 * c:]
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    cc = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    n, _, h, w = ll.shape
    out = y.new_zeros((n, c, h * 2, w * 2))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = cc
    out[..., 1::2, 1::2] = d
    return out


# ----- coupling machinery ----------------------------------------------------


class DenseSubnet(nn.Module):
    """Five-conv dense block used for every coupling transform."""

    def __init__(self, in_ch: int, out_ch: int, growth: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, growth, 3, padding=1)
        self.conv2 = nn.Conv2d(in_ch + growth, growth, 3, padding=1)
        self.conv3 = nn.Conv2d(in_ch + 2 * growth, growth, 3, padding=1)
        self.conv4 = nn.Conv2d(in_ch + 3 * growth, growth, 3, padding=1)
        self.conv5 = nn.Conv2d(in_ch + 4 * growth, out_ch, 3, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        nn.init.zeros_(self.conv5.weight)
        nn.init.zeros_(self.conv5.bias)

    def forward(self, x):
        x1 = self.act(self.conv1(x))
        x2 = self.act(self.conv2(torch.cat([x, x1], 1)))
        x3 = self.act(self.conv3(torch.cat([x, x1, x2], 1)))
        x4 = self.act(self.conv4(torch.cat([x, x1, x2, x3], 1)))
        return self.conv5(torch.cat([x, x1, x2, x3, x4], 1))


class CouplingBlock(nn.Module):
    """Affine coupling over (cover-branch, secret-branch) channel halves.

    forward:  y1 = x1 + phi(x2)
              y2 = x2 * exp(s(y1)) + eta(y1),  s = clamp * (2*sigmoid(rho) - 1)
    reverse inverts exactly for any weights.
    """

    def __init__(self, channels: int, clamp: float = 2.0, growth: int = 16):
        super().__init__()
        self.clamp = clamp
        self.phi = DenseSubnet(channels, channels, growth)
        self.rho = DenseSubnet(channels, channels, growth)
        self.eta = DenseSubnet(channels, channels, growth)

    def _scale(self, y1):
        return self.clamp * (2 * torch.sigmoid(self.rho(y1)) - 1)

    def forward(self, x1, x2):
        y1 = x1 + self.phi(x2)
        y2 = x2 * torch.exp(self._scale(y1)) + self.eta(y1)
        return y1, y2

    def reverse(self, y1, y2):
        x2 = (y2 - self.eta(y1)) * torch.exp(-self._scale(y1))
        x1 = y1 - self.phi(x2)
        return x1, x2


@dataclass
class StegoKey:
    """Private key image substituting the residual branch in the reveal pass."""

    key_image: torch.Tensor
    source_path: str = ""
    digest: str = field(default="")

    def __post_init__(self):
        if self.key_image.dim() != 3:
            raise ShapeError("key image must be a (C, H, W) tensor")
        if not self.digest:
            self.digest = hashlib.sha512(
                np.ascontiguousarray(self.key_image.detach().cpu().numpy(),
                                     dtype="<f4").tobytes()).hexdigest()

    @classmethod
    def from_file(cls, path, resolution: int | None = None) -> "StegoKey":
        return cls(load_image(path, resolution), source_path=str(path))


class StegoNetwork(nn.Module):
    """Invertible hiding network with a key-conditioned reveal pass."""

    def __init__(self, image_channels: int = 3, num_blocks: int = 8,
                 clamp: float = 2.0, growth: int = 16):
        super().__init__()
        self.image_channels = image_channels
        wc = 4 * image_channels  # channels after the Haar stage
        self.blocks = nn.ModuleList(
            CouplingBlock(wc, clamp=clamp, growth=growth) for _ in range(num_blocks))
        self.register_buffer("steps_trained", torch.zeros((), dtype=torch.long))

    @property
    def is_trained(self) -> bool:
        return int(self.steps_trained) > 0

    def _check_ready(self, op: str):
        if not self.is_trained:
            raise NotReadyError(
                f"{op} refused: the steganographic network has not been trained")

    def _check_image(self, img: torch.Tensor, name: str):
        if img.dim() != 3 or img.shape[0] != self.image_channels:
            raise ShapeError(
                f"{name} must be ({self.image_channels}, H, W), got {tuple(img.shape)}")

    # ----- wavelet-domain passes ------------------------------------------

    def forward_couple(self, x1, x2):
        for block in self.blocks:
            x1, x2 = block(x1, x2)
        return x1, x2

    def reverse_couple(self, y1, y2):
        for block in reversed(self.blocks):
            y1, y2 = block.reverse(y1, y2)
        return y1, y2

    # ----- image-domain passes --------------------------------------------

    def hide_batch(self, cover: torch.Tensor, secret: torch.Tensor):
        """(stego, residual_wavelet) for (N,C,H,W) batches."""
        y1, y2 = self.forward_couple(dwt_haar(cover), dwt_haar(secret))
        return iwt_haar(y1), y2

    def reveal_batch(self, stego: torch.Tensor, key: torch.Tensor):
        """Reveal secrets with the key injected for the residual branch."""
        if tuple(key.shape[-3:]) != tuple(stego.shape[-3:]):
            raise ShapeError(
                f"key shape {tuple(key.shape[-3:])} must match stego image "
                f"shape {tuple(stego.shape[-3:])}")
        key_w = dwt_haar(key.expand(stego.shape[0], -1, -1, -1)
                         if key.dim() == 3 else key)
        _, x2 = self.reverse_couple(dwt_haar(stego), key_w)
        return iwt_haar(x2)

    def hide_image(self, cover: torch.Tensor, secret: torch.Tensor) -> torch.Tensor:
        self._check_image(cover, "cover")
        self._check_image(secret, "secret")
        stego, _ = self.hide_batch(cover.unsqueeze(0), secret.unsqueeze(0))
        return stego.squeeze(0)

    def reveal_image(self, stego: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
        self._check_image(stego, "stego")
        self._check_image(key, "key")
        return self.reveal_batch(stego.unsqueeze(0), key).squeeze(0)

    # ----- passport-level operations ---------------------------------------

    def hide(self, p_o: PassportPair, id_image: torch.Tensor) -> PassportPair:
        """User-side passport: the ID image hidden independently inside the
        gamma and beta owner images; residual branches discarded."""
        self._check_ready("hide")
        with torch.no_grad():
            user_gamma = self.hide_image(p_o.gamma_image, id_image)
            user_beta = self.hide_image(p_o.beta_image, id_image)
        return PassportPair(user_gamma, user_beta, side="user",
                            layer_index=p_o.layer_index)

    def reveal(self, p_u: PassportPair, key: StegoKey) -> torch.Tensor:
        """Revealed ID image (average of the gamma- and beta-image reveals)."""
        self._check_ready("reveal")
        with torch.no_grad():
            rev_gamma = self.reveal_image(p_u.gamma_image, key.key_image)
            rev_beta = self.reveal_image(p_u.beta_image, key.key_image)
        return (rev_gamma + rev_beta) / 2


def synthetic_image_pool(count: int, resolution: int = 64, seed: int = 0,
                         channels: int = 3, noise: float = 0.02) -> torch.Tensor:
    """Smooth procedural images (sinusoid mixtures + light noise) standing in
    for natural photos at desk scale."""
    g = torch.Generator().manual_seed(seed)
    xs = torch.linspace(0, 1, resolution)
    yy, xx = torch.meshgrid(xs, xs, indexing="ij")
    images = []
    for _ in range(count):
        chans = []
        for _ in range(channels):
            freq = float(torch.rand(1, generator=g)) * 6 + 1
            theta = float(torch.rand(1, generator=g)) * math.pi
            phase = float(torch.rand(1, generator=g)) * 2 * math.pi
            wave = torch.sin(2 * math.pi * freq *
                             (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            freq2 = float(torch.rand(1, generator=g)) * 3 + 0.5
            wave2 = torch.sin(2 * math.pi * freq2 * (yy - xx) + phase / 2)
            chans.append(0.5 + 0.3 * wave + 0.15 * wave2)
        img = torch.stack(chans) + noise * torch.randn(channels, resolution,
                                                       resolution, generator=g)
        images.append(img.clamp(0, 1))
    return torch.stack(images)


# ----- training --------------------------------------------------------------


def isn_loss(cover, stego, secret, revealed):
    """L2 hiding distance plus L2 revealing distance."""
    hide_term = ((stego - cover) ** 2).mean()
    reveal_term = ((revealed - secret) ** 2).mean()
    return hide_term + reveal_term, hide_term, reveal_term


def train_isn(cover_set: torch.Tensor, secret_set: torch.Tensor, key: StegoKey,
              steps: int = 3000, lr: float = 4e-4, batch_size: int = 2,
              network: StegoNetwork | None = None, seed: int = 0,
              holdout_fraction: float = 0.1, log_every: int = 100,
              grad_clip: float = 1.0, decay_every: int = 2000,
              progress=None):
    """Train the hiding/revealing passes on randomly paired covers and secrets.

    cover_set / secret_set: (N,C,H,W) image stacks; each step samples covers
    and secrets independently. Gradient clipping is load-bearing: the reveal
    loss backpropagates through the exp-coupled reverse pass and explodes
    without it. Returns (network, history) with history rows
    {step, loss, hide_loss, reveal_loss, holdout_loss}.
    """
    if cover_set.numel() == 0 or secret_set.numel() == 0:
        raise ValueError("train_isn needs non-empty cover and secret sets")
    g = torch.Generator().manual_seed(seed)
    net = network or StegoNetwork(image_channels=cover_set.shape[1])
    opt = torch.optim.Adam(net.parameters(), lr=lr)

    if holdout_fraction > 0:
        n_hold = max(1, int(holdout_fraction * min(len(cover_set), len(secret_set))))
    else:
        n_hold = 0
    hold_cov, hold_sec = cover_set[:max(n_hold, 1)], secret_set[:max(n_hold, 1)]
    train_cov, train_sec = cover_set[n_hold:], secret_set[n_hold:]
    if len(train_cov) == 0 or len(train_sec) == 0:
        train_cov, train_sec = cover_set, secret_set

    key_img = key.key_image
    history = []
    net.train()
    for step in range(steps):
        if decay_every and step and step % decay_every == 0:
            for group in opt.param_groups:
                group["lr"] *= 0.5
        ci = torch.randint(0, len(train_cov), (batch_size,), generator=g)
        si = torch.randint(0, len(train_sec), (batch_size,), generator=g)
        cover, secret = train_cov[ci], train_sec[si]
        stego, _ = net.hide_batch(cover, secret)
        revealed = net.reveal_batch(stego, key_img)
        loss, hide_term, reveal_term = isn_loss(cover, stego, secret, revealed)
        opt.zero_grad()
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
        opt.step()
        net.steps_trained += 1
        if step % log_every == 0 or step == steps - 1:
            with torch.no_grad():
                h_stego, _ = net.hide_batch(hold_cov, hold_sec)
                h_rev = net.reveal_batch(h_stego, key_img)
                h_loss, _, _ = isn_loss(hold_cov, h_stego, hold_sec, h_rev)
            row = {"step": step, "loss": float(loss.detach()),
                   "hide_loss": float(hide_term.detach()),
                   "reveal_loss": float(reveal_term.detach()),
                   "holdout_loss": float(h_loss)}
            history.append(row)
            if progress:
                progress(row)
    net.eval()
    return net, history
