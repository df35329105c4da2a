"""Dual-branch passport normalization layer.

Replaces a designated normalization site with a layer that keeps two affine
routes over one normalized tensor: the deployment route act(gamma*x + beta)
and the verification route act(gamma_p*(gamma_t*x + beta_t) + beta_p), where
(gamma_p, beta_p) are derived from pooled passport feature maps through a
two-layer perceptron. The verification affine enters the activation as its
parameters (Dynamic-ReLU style) rather than as a plain affine, so passport
tampering shows up in the verification output while the deployment output is
untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_KINDS = ("batch", "group")
ACTIVATION_KINDS = ("relu", "sigmoid", "leaky_relu")


class ShapeError(ValueError):
    pass


@dataclass
class PassportPair:
    """Per-layer pair of passport images (gamma-image, beta-image)."""

    gamma_image: torch.Tensor
    beta_image: torch.Tensor
    side: str = "owner"
    layer_index: int = -1

    def __post_init__(self):
        if tuple(self.gamma_image.shape) != tuple(self.beta_image.shape):
            raise ShapeError(
                f"passport pair shape mismatch: {tuple(self.gamma_image.shape)} vs "
                f"{tuple(self.beta_image.shape)}")
        if self.gamma_image.dim() != 3:
            raise ShapeError("passport images must be (C, H, W) tensors")
        if self.side not in ("owner", "user"):
            raise ValueError(f"side must be 'owner' or 'user', got {self.side!r}")

    def detach_clone(self) -> "PassportPair":
        return PassportPair(self.gamma_image.detach().clone(),
                            self.beta_image.detach().clone(),
                            side=self.side, layer_index=self.layer_index)


def apply_activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return F.relu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "leaky_relu":
        return F.leaky_relu(x, 0.01)
    raise ValueError(f"unknown activation kind {kind!r}")


def make_tlp(channels: int) -> nn.Sequential:
    """Two-layer perceptron mapping pooled passport features to affine vectors."""
    return nn.Sequential(
        nn.Linear(channels, channels),
        nn.LeakyReLU(),
        nn.Linear(channels, channels),
    )


def default_group_count(channels: int) -> int:
    g = min(32, channels)
    while channels % g != 0:
        g -= 1
    return g


class PassportLayer(nn.Module):
    """Drop-in dual-branch replacement for a normalization layer.

    Modes:
      deploy   - act(gamma * x_norm + beta); the shipped route. The only mode
                 that writes batch-norm running statistics while training.
      verify   - act(gamma_p * (gamma_t * x_norm + beta_t) + beta_p) with the
                 derived affine attached beforehand (or passed explicitly).
      passport - statistics-only normalization (no affine) + activation, used
                 while propagating passport images between passport layers.

    `apply_act=False` calls return the pre-activation tensor so residual
    architectures can add the shortcut before activating.
    """

    def __init__(self, num_features: int, norm_kind: str = "batch",
                 activation_kind: str = "relu", use_tlp: bool = True,
                 num_groups: int | None = None, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        if norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {norm_kind!r}")
        if activation_kind not in ACTIVATION_KINDS:
            raise ValueError(
                f"activation_kind must be one of {ACTIVATION_KINDS}, got {activation_kind!r}")
        self.num_features = num_features
        self.norm_kind = norm_kind
        self.activation_kind = activation_kind
        self.use_tlp = use_tlp
        self.eps = eps
        self.momentum = momentum
        self.num_groups = num_groups or default_group_count(num_features)

        self.weight = nn.Parameter(torch.ones(num_features))       # gamma
        self.bias = nn.Parameter(torch.zeros(num_features))        # beta
        self.weight_t = nn.Parameter(torch.ones(num_features))     # gamma_t
        self.bias_t = nn.Parameter(torch.zeros(num_features))      # beta_t
        if use_tlp:
            self.tlp_gamma = make_tlp(num_features)
            self.tlp_beta = make_tlp(num_features)
        else:
            self.tlp_gamma = None
            self.tlp_beta = None
        if norm_kind == "batch":
            self.register_buffer("running_mean", torch.zeros(num_features))
            self.register_buffer("running_var", torch.ones(num_features))
        self._gamma_p = None
        self._beta_p = None

    # ----- statistics -------------------------------------------------

    def _batch_stats(self, x: torch.Tensor):
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        return mean, var

    def _update_running(self, mean, var, numel_per_channel):
        m = self.momentum
        with torch.no_grad():
            self.running_mean.mul_(1 - m).add_(m * mean)
            # running_var keeps the unbiased estimate, as nn.BatchNorm does
            n = numel_per_channel
            unbiased = var * (n / max(n - 1, 1))
            self.running_var.mul_(1 - m).add_(m * unbiased)

    def normalize(self, x: torch.Tensor, update_running: bool = False,
                  use_running: bool = False) -> torch.Tensor:
        """(x - mean) / sqrt(var + eps) per norm_kind; no affine applied."""
        if x.dim() != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.num_features:
            raise ShapeError(
                f"channel mismatch: layer has {self.num_features}, input {x.shape[1]}")
        if self.norm_kind == "group":
            return F.group_norm(x, self.num_groups, None, None, self.eps)
        if use_running:
            mean, var = self.running_mean, self.running_var
        else:
            mean, var = self._batch_stats(x)
            if update_running:
                self._update_running(mean, var, x.numel() // x.shape[1])
        return (x - mean.view(1, -1, 1, 1)) / torch.sqrt(var.view(1, -1, 1, 1) + self.eps)

    def _norm_for_branch(self, x: torch.Tensor, update_running: bool) -> torch.Tensor:
        use_running = self.norm_kind == "batch" and not self.training
        return self.normalize(x, update_running=update_running and self.training,
                              use_running=use_running)

    def _passport_norm(self, x: torch.Tensor) -> torch.Tensor:
        # per-sample statistics: batched passport streams must propagate
        # exactly as if each image ran alone
        if self.norm_kind == "group":
            return F.group_norm(x, self.num_groups, None, None, self.eps)
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps)

    # ----- passport affine --------------------------------------------

    @staticmethod
    def pool(feature_map: torch.Tensor) -> torch.Tensor:
        """Global average pooling over spatial dims -> per-channel vector."""
        return feature_map.mean(dim=(2, 3)).reshape(-1)

    def derive_affine(self, gamma_feature_map: torch.Tensor,
                      beta_feature_map: torch.Tensor):
        """(gamma_p, beta_p) from pooled passport feature maps through the TLPs."""
        for fm in (gamma_feature_map, beta_feature_map):
            if fm.dim() != 4 or fm.shape[1] != self.num_features:
                raise ShapeError(
                    f"passport feature map shape {tuple(fm.shape)} does not match "
                    f"layer with {self.num_features} channels")
        pooled_gamma = self.pool(gamma_feature_map)
        pooled_beta = self.pool(beta_feature_map)
        if self.use_tlp:
            return self.tlp_gamma(pooled_gamma), self.tlp_beta(pooled_beta)
        return pooled_gamma, pooled_beta

    def attach_affine(self, gamma_p: torch.Tensor, beta_p: torch.Tensor):
        if gamma_p.reshape(-1).shape[0] != self.num_features:
            raise ShapeError("derived affine length must equal the channel count")
        self._gamma_p = gamma_p.reshape(-1)
        self._beta_p = beta_p.reshape(-1)

    def clear_affine(self):
        self._gamma_p = None
        self._beta_p = None

    @property
    def has_affine(self) -> bool:
        return self._gamma_p is not None

    # ----- branch forwards --------------------------------------------

    def _deploy_out(self, x_norm: torch.Tensor) -> torch.Tensor:
        return self.weight.view(1, -1, 1, 1) * x_norm + self.bias.view(1, -1, 1, 1)

    def _verify_out(self, x_norm: torch.Tensor, gamma_p, beta_p) -> torch.Tensor:
        x_t = self.weight_t.view(1, -1, 1, 1) * x_norm + self.bias_t.view(1, -1, 1, 1)
        return gamma_p.view(1, -1, 1, 1) * x_t + beta_p.view(1, -1, 1, 1)

    def activation(self, x: torch.Tensor) -> torch.Tensor:
        return apply_activation(x, self.activation_kind)

    def forward_dual(self, x: torch.Tensor, gamma_p: torch.Tensor,
                     beta_p: torch.Tensor, apply_act: bool = True):
        """Both branch outputs from one statistics computation over one input."""
        x_norm = self.normalize(x)
        deploy = self._deploy_out(x_norm)
        verify = self._verify_out(x_norm, gamma_p.reshape(-1), beta_p.reshape(-1))
        if apply_act:
            deploy, verify = self.activation(deploy), self.activation(verify)
        return deploy, verify

    def forward(self, x: torch.Tensor, mode: str = "deploy",
                apply_act: bool = True) -> torch.Tensor:
        if mode == "deploy":
            out = self._deploy_out(self._norm_for_branch(x, update_running=True))
        elif mode == "verify":
            if not self.has_affine:
                raise RuntimeError(
                    "verify forward requires derived passport affine; call "
                    "attach_affine (via the model's derive_and_attach) first")
            out = self._verify_out(self._norm_for_branch(x, update_running=False),
                                   self._gamma_p, self._beta_p)
        elif mode == "passport":
            out = self._passport_norm(x)
        else:
            raise ValueError(f"unknown forward mode {mode!r}")
        return self.activation(out) if apply_act else out

    def extra_repr(self) -> str:
        return (f"{self.num_features}, norm_kind={self.norm_kind}, "
                f"activation={self.activation_kind}, use_tlp={self.use_tlp}")


class PlainNormAct(nn.Module):
    """Non-passport normalization site, shared verbatim between branches."""

    def __init__(self, num_features: int, norm_kind: str = "batch",
                 activation_kind: str = "relu", num_groups: int | None = None,
                 eps: float = 1e-5):
        super().__init__()
        if norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {norm_kind!r}")
        self.norm_kind = norm_kind
        self.activation_kind = activation_kind
        self.num_features = num_features
        if norm_kind == "batch":
            self.norm = nn.BatchNorm2d(num_features, eps=eps)
        else:
            self.norm = nn.GroupNorm(num_groups or default_group_count(num_features),
                                     num_features, eps=eps)

    def activation(self, x: torch.Tensor) -> torch.Tensor:
        return apply_activation(x, self.activation_kind)

    def forward(self, x: torch.Tensor, mode: str = "deploy",
                apply_act: bool = True) -> torch.Tensor:
        if mode == "passport" and self.norm_kind == "batch":
            # per-sample statistics, affine applied verbatim; never reads or
            # writes the data running stats
            mean = x.mean(dim=(2, 3), keepdim=True)
            var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
            out = (x - mean) / torch.sqrt(var + self.norm.eps)
            out = out * self.norm.weight.view(1, -1, 1, 1) + self.norm.bias.view(1, -1, 1, 1)
        else:
            out = self.norm(x)
        return self.activation(out) if apply_act else out


def propagate_passports(model, passports):
    """Feed passport pairs through the model's convolutional path.

    Returns one (gamma_feature_map, beta_feature_map) tuple per passport
    layer: the conv outputs entering that layer. Between layers the gamma and
    beta streams continue independently through statistics-only normalization
    at passport sites and verbatim plain layers. Uses per-call statistics
    throughout so the result is a pure function of (weights, passports).
    """
    sites = model.passport_sites()
    if len(passports) != len(sites):
        raise ShapeError(
            f"need one passport pair per passport layer: {len(passports)} pairs, "
            f"{len(sites)} layers")
    expected = model.passport_input_shape()
    for pair in passports:
        if tuple(pair.gamma_image.shape) != tuple(expected):
            raise ShapeError(
                f"passport image shape {tuple(pair.gamma_image.shape)} does not "
                f"match the network input {tuple(expected)}")
    gamma_stream = torch.stack([p.gamma_image for p in passports])
    beta_stream = torch.stack([p.beta_image for p in passports])
    gamma_taps = model.forward_passport_stream(gamma_stream)
    beta_taps = model.forward_passport_stream(beta_stream)
    feats = []
    for idx in range(len(sites)):
        feats.append((gamma_taps[idx][idx:idx + 1], beta_taps[idx][idx:idx + 1]))
    return feats
