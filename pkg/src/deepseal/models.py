"""Classifier zoo with pluggable passport layers, plus dataset ingestion.

Three convolutional architectures (toy_cnn, alexnet_like, resnet18_like) are
built as dual-branch models: every normalization site is either a shared
PlainNormAct or a PassportLayer, and every forward threads a mode so the same
weights serve the deployment branch, the verification branch, and passport
propagation.
"""

from __future__ import annotations

import pickle
import tarfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .passport_layer import PassportLayer, PlainNormAct, propagate_passports

ARCHITECTURES = ("toy_cnn", "alexnet_like", "resnet18_like")
DEFAULT_PASSPORT_SITE_COUNT = {"toy_cnn": 3, "alexnet_like": 3, "resnet18_like": 5}


class ConfigError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    architecture: str = "toy_cnn"
    num_classes: int = 10
    input_resolution: int = 32
    in_channels: int = 3
    norm_kind: str = "batch"
    activation_kind: str = "relu"
    use_tlp: bool = True
    passport_layer_names: list | None = None
    # per-site overrides: {layer_name: {norm_kind, activation_kind, use_tlp}}
    passport_layer_overrides: dict | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def site_option(self, name: str, key: str):
        overrides = self.passport_layer_overrides or {}
        return overrides.get(name, {}).get(key, getattr(self, key))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "input_resolution": self.input_resolution,
            "in_channels": self.in_channels,
            "norm_kind": self.norm_kind,
            "activation_kind": self.activation_kind,
            "use_tlp": self.use_tlp,
            "passport_layer_names": self.passport_layer_names,
            "passport_layer_overrides": self.passport_layer_overrides,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class ConvUnit(nn.Module):
    """conv -> norm site -> activation -> optional pool."""

    def __init__(self, in_ch, out_ch, site, pool=False, kernel=3, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride,
                              padding=kernel // 2, bias=False)
        self.site = site
        self.pool = pool

    def forward(self, x, mode="deploy", tap=None):
        x = self.conv(x)
        if tap is not None and isinstance(self.site, PassportLayer):
            tap.append(x)
        x = self.site(x, mode=mode)
        if self.pool:
            x = F.max_pool2d(x, 2)
        return x


class BasicBlock(nn.Module):
    """ResNet basic block with mode-threaded norm sites."""

    def __init__(self, in_ch, out_ch, site1, site2, stride=1, down_site=None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.site1 = site1
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.site2 = site2
        if down_site is not None:
            self.down_conv = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
            self.down_site = down_site
        else:
            self.down_conv = None
            self.down_site = None

    def forward(self, x, mode="deploy", tap=None):
        identity = x
        out = self.conv1(x)
        if tap is not None and isinstance(self.site1, PassportLayer):
            tap.append(out)
        out = self.site1(out, mode=mode)
        out = self.conv2(out)
        if tap is not None and isinstance(self.site2, PassportLayer):
            tap.append(out)
        out = self.site2(out, mode=mode, apply_act=False)
        if self.down_conv is not None:
            identity = self.down_conv(x)
            if tap is not None and isinstance(self.down_site, PassportLayer):
                tap.append(identity)
            identity = self.down_site(identity, mode=mode, apply_act=False)
        return self.site2.activation(out + identity)


class PassportedClassifier(nn.Module):
    """Dual-branch classifier whose designated norm sites are passport layers.

    All non-affine weights are shared between branches (same modules run in
    both modes); only the affine routes inside passport layers differ.
    """

    def __init__(self, spec: ModelSpec, units: nn.ModuleList, head: nn.Linear,
                 site_names: list, passport_names: list):
        super().__init__()
        self.spec = spec
        self.units = units
        self.head = head
        self._site_names = list(site_names)
        self._passport_names = list(passport_names)

    # ----- structure ----------------------------------------------------

    def norm_site_names(self) -> list:
        return list(self._site_names)

    def passport_site_names(self) -> list:
        return list(self._passport_names)

    def passport_sites(self) -> list:
        out = []
        for name, module in self.named_modules():
            if isinstance(module, PassportLayer):
                out.append((name, module))
        order = {n: i for i, n in enumerate(self._passport_names)}
        out.sort(key=lambda pair: order[pair[0]])
        return [m for _, m in out]

    def channel_counts(self) -> list:
        return [site.num_features for site in self.passport_sites()]

    def passport_input_shape(self):
        return (self.spec.in_channels, self.spec.input_resolution,
                self.spec.input_resolution)

    # ----- forwards -----------------------------------------------------

    def forward_features(self, x, mode="deploy", tap=None):
        for unit in self.units:
            x = unit(x, mode=mode, tap=tap)
        return x

    def forward(self, x, branch="deploy"):
        if branch not in ("deploy", "verify"):
            raise ValueError(f"branch must be 'deploy' or 'verify', got {branch!r}")
        x = self.forward_features(x, mode=branch)
        x = x.mean(dim=(2, 3))
        return self.head(x)

    def forward_passport_stream(self, stream):
        """Run a batch of passport images in passport mode, collecting the
        conv outputs entering each passport site (in forward order)."""
        tap = []
        self.forward_features(stream, mode="passport", tap=tap)
        return tap

    # ----- passport plumbing ---------------------------------------------

    def propagate_passports(self, passports):
        return propagate_passports(self, passports)

    def derive_and_attach(self, passports):
        """Propagate passports, derive (gamma_p, beta_p) per layer, attach them
        for verify-branch forwards. Returns (pooled_gamma, gamma_p, beta_p) lists
        with gradient history intact for the signature/balance losses."""
        feats = self.propagate_passports(passports)
        pooled, gammas, betas = [], [], []
        for site, (gf, bf) in zip(self.passport_sites(), feats):
            gamma_p, beta_p = site.derive_affine(gf, bf)
            site.attach_affine(gamma_p, beta_p)
            pooled.append(site.pool(gf))
            gammas.append(gamma_p)
            betas.append(beta_p)
        return pooled, gammas, betas

    def clear_passport_affine(self):
        for site in self.passport_sites():
            site.clear_affine()


def _make_site(channels, spec, passported, name=""):
    if passported:
        return PassportLayer(channels,
                             norm_kind=spec.site_option(name, "norm_kind"),
                             activation_kind=spec.site_option(name, "activation_kind"),
                             use_tlp=spec.site_option(name, "use_tlp"))
    return PlainNormAct(channels, norm_kind=spec.norm_kind,
                        activation_kind=spec.activation_kind)


def _toy_cnn_sites():
    return ["units.0.site", "units.1.site", "units.2.site", "units.3.site"]


def _alexnet_sites():
    return [f"units.{i}.site" for i in range(5)]


def _resnet18_plan():
    # (in_ch, out_ch, stride, has_downsample) per basic block, 4 stages x 2
    plan = []
    chans = [64, 64, 128, 256, 512]
    for stage in range(4):
        in_ch, out_ch = chans[stage], chans[stage + 1]
        stride = 1 if stage == 0 else 2
        plan.append((in_ch, out_ch, stride, in_ch != out_ch or stride != 1))
        plan.append((out_ch, out_ch, 1, False))
    return plan


def _resnet18_sites():
    names = ["units.0.site"]
    for b in range(8):
        unit = f"units.{b + 1}"
        names.append(f"{unit}.site1")
        names.append(f"{unit}.site2")
        if _resnet18_plan()[b][3]:
            names.append(f"{unit}.down_site")
    return names


def norm_site_names(architecture: str) -> list:
    if architecture == "toy_cnn":
        return _toy_cnn_sites()
    if architecture == "alexnet_like":
        return _alexnet_sites()
    if architecture == "resnet18_like":
        return _resnet18_sites()
    raise ConfigError(f"unknown architecture {architecture!r}")


def default_passport_names(architecture: str) -> list:
    names = norm_site_names(architecture)
    return names[-DEFAULT_PASSPORT_SITE_COUNT[architecture]:]


def build_model(spec: ModelSpec) -> PassportedClassifier:
    """Build a dual-branch classifier with the spec's passport sites."""
    all_names = norm_site_names(spec.architecture)
    if spec.passport_layer_names is None:
        passport_names = default_passport_names(spec.architecture)
    else:
        passport_names = list(spec.passport_layer_names)
        unknown = [n for n in passport_names if n not in all_names]
        if unknown:
            raise ConfigError(
                f"passport_layer_names {unknown} do not name normalization sites "
                f"of {spec.architecture}; valid sites: {all_names}")
        passport_names.sort(key=all_names.index)

    marked = set(passport_names)
    units = nn.ModuleList()

    if spec.architecture == "toy_cnn":
        widths = [16, 32, 64, 64]
        in_ch = spec.in_channels
        for i, out_ch in enumerate(widths):
            name = f"units.{i}.site"
            units.append(ConvUnit(in_ch, out_ch,
                                  _make_site(out_ch, spec, name in marked, name),
                                  pool=i < 3))
            in_ch = out_ch
        head = nn.Linear(in_ch, spec.num_classes)
    elif spec.architecture == "alexnet_like":
        widths = [64, 192, 384, 256, 256]
        pools = [True, True, False, False, True]
        in_ch = spec.in_channels
        for i, out_ch in enumerate(widths):
            name = f"units.{i}.site"
            units.append(ConvUnit(in_ch, out_ch,
                                  _make_site(out_ch, spec, name in marked, name),
                                  pool=pools[i], kernel=5 if i == 0 else 3))
            in_ch = out_ch
        head = nn.Linear(in_ch, spec.num_classes)
    else:  # resnet18_like
        stem_site = _make_site(64, spec, "units.0.site" in marked, "units.0.site")
        units.append(ConvUnit(spec.in_channels, 64, stem_site, pool=False))
        for b, (in_ch, out_ch, stride, down) in enumerate(_resnet18_plan()):
            unit_name = f"units.{b + 1}"
            site1 = _make_site(out_ch, spec, f"{unit_name}.site1" in marked,
                               f"{unit_name}.site1")
            site2 = _make_site(out_ch, spec, f"{unit_name}.site2" in marked,
                               f"{unit_name}.site2")
            down_site = (_make_site(out_ch, spec, f"{unit_name}.down_site" in marked,
                                    f"{unit_name}.down_site")
                         if down else None)
            units.append(BasicBlock(in_ch, out_ch, site1, site2, stride, down_site))
        head = nn.Linear(512, spec.num_classes)

    resolved_spec = ModelSpec(**{**spec.to_dict(),
                                 "passport_layer_names": passport_names})
    return PassportedClassifier(resolved_spec, units, head, all_names, passport_names)


# ----- datasets ----------------------------------------------------------


class LabeledDataset:
    """In-memory labeled image dataset (images in [0,1], channel-first)."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor,
                 classes: list, split: str = "train", source: str = "memory"):
        if images.shape[0] != labels.shape[0]:
            raise IngestionError("images and labels must align")
        bad = [int(l) for l in labels if not 0 <= int(l) < len(classes)]
        if bad:
            raise IngestionError(f"labels out of range for {len(classes)} classes: {bad[:5]}")
        self.images = images.float()
        self.labels = labels.long()
        self.classes = list(classes)
        self.split = split
        self.source = source

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return len(self.classes)

    def channel_stats(self):
        return (self.images.mean(dim=(0, 2, 3)), self.images.std(dim=(0, 2, 3)))

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0):
        n = len(self)
        if shuffle:
            g = torch.Generator().manual_seed(seed)
            order = torch.randperm(n, generator=g)
        else:
            order = torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def subsample(self, fraction: float, seed: int = 0) -> "LabeledDataset":
        """Per-class subsample; each class keeps round(fraction * count)."""
        g = torch.Generator().manual_seed(seed)
        keep = []
        for c in range(self.num_classes):
            idx = torch.nonzero(self.labels == c).reshape(-1)
            k = int(round(fraction * len(idx)))
            perm = torch.randperm(len(idx), generator=g)[:k]
            keep.append(idx[perm])
        keep = torch.cat(keep)
        return LabeledDataset(self.images[keep], self.labels[keep], self.classes,
                              split=self.split, source=f"{self.source}[{fraction:.0%}]")


def synthetic_dataset(num_classes=10, size=1000, resolution=32, seed=0,
                      noise=0.55, split="train", class_offset=0):
    """Procedural classification set: class-specific oriented gratings plus a
    class-placed blob under heavy noise. Learnable by a small CNN in minutes
    without being trivially separable."""
    g = torch.Generator().manual_seed(seed)
    xs = torch.linspace(0, 1, resolution)
    yy, xx = torch.meshgrid(xs, xs, indexing="ij")
    images, labels = [], []
    for i in range(size):
        c = i % num_classes
        k = c + class_offset
        theta = torch.tensor(np.pi * k / num_classes + 0.2 * float(torch.rand(1, generator=g) - 0.5))
        freq = 2.0 + (k % 3) * 1.5
        phase = 2 * np.pi * float(torch.rand(1, generator=g))
        wave = torch.sin(2 * np.pi * freq * (xx * torch.cos(theta) + yy * torch.sin(theta)) + phase)
        cx, cy = (k % 4) / 4 + 0.125, (k // 4 % 4) / 4 + 0.125
        blob = torch.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / 0.02))
        base = 0.5 + 0.25 * wave + 0.35 * blob
        img = base.unsqueeze(0).repeat(3, 1, 1)
        tint = 0.1 * torch.rand(3, 1, 1, generator=g)
        img = (img + tint + noise * torch.randn(3, resolution, resolution, generator=g))
        images.append(img.clamp(0, 1))
        labels.append(c)
    classes = [f"class_{class_offset + c}" for c in range(num_classes)]
    return LabeledDataset(torch.stack(images), torch.tensor(labels), classes,
                          split=split, source=f"synthetic(seed={seed},offset={class_offset})")


def ingest_directory(root, resolution=32, split="train"):
    """Class-per-folder ingestion; folders sorted by name define the labels."""
    from PIL import Image
    import os

    root = str(root)
    if not os.path.isdir(root):
        raise IngestionError(f"dataset directory not found: {root}")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise IngestionError(f"no class folders under {root}")
    images, labels, offenders = [], [], []
    for label, cls in enumerate(classes):
        folder = os.path.join(root, cls)
        for fname in sorted(os.listdir(folder)):
            path = os.path.join(folder, fname)
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB").resize((resolution, resolution),
                                                  Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception:
                offenders.append(path)
                continue
            images.append(torch.from_numpy(arr).permute(2, 0, 1))
            labels.append(label)
    if offenders:
        raise IngestionError(f"unreadable image files: {offenders}")
    if not images:
        raise IngestionError(f"no images found under {root}")
    return LabeledDataset(torch.stack(images), torch.tensor(labels), classes,
                          split=split, source=root)


def ingest_cifar10(archive_path, split="train", resolution=32):
    """Read the CIFAR-10 python-format tar.gz archive directly."""
    names = ([f"data_batch_{i}" for i in range(1, 6)] if split == "train"
             else ["test_batch"])
    images, labels = [], []
    try:
        with tarfile.open(archive_path, "r:gz") as tar:
            for member in tar.getmembers():
                base = member.name.split("/")[-1]
                if base in names:
                    batch = pickle.load(tar.extractfile(member), encoding="bytes")
                    data = batch[b"data"].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
                    images.append(torch.from_numpy(data))
                    labels.extend(batch[b"labels"])
    except (OSError, tarfile.TarError) as exc:
        raise IngestionError(f"cannot read CIFAR archive {archive_path}: {exc}") from exc
    if not images:
        raise IngestionError(f"no {split} batches inside {archive_path}")
    imgs = torch.cat(images)
    if resolution != 32:
        imgs = F.interpolate(imgs, size=(resolution, resolution), mode="bilinear",
                             align_corners=False)
    classes = ["airplane", "automobile", "bird", "cat", "deer",
               "dog", "frog", "horse", "ship", "truck"]
    return LabeledDataset(imgs, torch.tensor(labels), classes, split=split,
                          source=str(archive_path))


def ingest_dataset(dataset_cfg: dict, split: str = "train") -> LabeledDataset:
    """Dispatch on dataset kind: synthetic | directory | cifar10."""
    kind = dataset_cfg.get("kind", "synthetic")
    seed = int(dataset_cfg.get("seed", 0))
    resolution = int(dataset_cfg.get("resolution", 32))
    if kind == "synthetic":
        size = int(dataset_cfg.get("train_size" if split == "train" else "test_size",
                                   1000 if split == "train" else 200))
        return synthetic_dataset(
            num_classes=int(dataset_cfg.get("num_classes", 10)),
            size=size, resolution=resolution,
            seed=seed if split == "train" else seed + 1,
            noise=float(dataset_cfg.get("noise", 0.55)),
            class_offset=int(dataset_cfg.get("class_offset", 0)),
            split=split)
    if kind == "directory":
        data = ingest_directory(dataset_cfg["root"], resolution=resolution, split=split)
        return _deterministic_split(data, split, float(dataset_cfg.get("train_fraction", 0.8)), seed)
    if kind == "cifar10":
        return ingest_cifar10(dataset_cfg["root"], split=split, resolution=resolution)
    raise IngestionError(f"unknown dataset kind {kind!r}")


def _deterministic_split(data: LabeledDataset, split: str, train_fraction: float,
                         seed: int) -> LabeledDataset:
    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(data), generator=g)
    cut = int(round(train_fraction * len(data)))
    idx = order[:cut] if split == "train" else order[cut:]
    return LabeledDataset(data.images[idx], data.labels[idx], data.classes,
                          split=split, source=data.source)
