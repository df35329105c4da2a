"""Joint dual-branch training: performance, signature, and balance losses.

The deployment and verification branches share all weights except affine
routes; the balance loss pins the deployment affine to the composition of
the verification affine, the signature hinge pins the signs of pooled
passport features times the derived scale to the hash signature, and both
branches carry the task cross-entropy.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .models import PassportedClassifier, build_model
from .passport_layer import PassportLayer
from .signature import BinarySignature, extract_signature, sign_agreement


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    omega_s: float = 1.0
    omega_b: float = 1.0
    epsilon: float = 0.1
    seed: int = 0
    grad_clip: float = 5.0   # the joint hinge/balance/CE system explodes bare
    # passport-site affine/TLP vectors are tiny next to the convs and the
    # mean-l1 balance gradients are O(1/C); they need a faster schedule to
    # reach branch equilibrium inside a desk-scale budget
    affine_lr_mult: float = 20.0
    milestones: tuple = ()   # default: 50% and 75% of epochs, decade steps

    def __post_init__(self):
        if self.omega_s < 0 or self.omega_b < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("signature margin epsilon must be positive")

    def resolved_milestones(self):
        if self.milestones:
            return list(self.milestones)
        return [max(1, self.epochs // 2), max(2, (3 * self.epochs) // 4)]


# ----- loss components -----------------------------------------------------


def balance_loss(sites, derived) -> torch.Tensor:
    """Sum over layers of mean-l1 gaps between the deployment affine and the
    composed verification affine: |gamma - gamma_t*gamma_p| and
    |beta - (beta_t*gamma_p + beta_p)|."""
    if len(sites) != len(derived):
        raise ValueError(f"{len(sites)} passport layers but {len(derived)} derived affines")
    total = None
    for site, (gamma_p, beta_p) in zip(sites, derived):
        gamma_p = gamma_p.reshape(-1)
        beta_p = beta_p.reshape(-1)
        if gamma_p.shape[0] != site.weight.shape[0]:
            raise ValueError("derived affine length mismatch with layer width")
        term = (site.weight - site.weight_t * gamma_p).abs().mean() \
            + (site.bias - (site.bias_t * gamma_p + beta_p)).abs().mean()
        total = term if total is None else total + term
    return total if total is not None else torch.zeros(())


def signature_loss(xi: BinarySignature, pooled, gamma_p,
                   epsilon: float = 0.1) -> torch.Tensor:
    """Hinge sum over layers and channels of max(eps - xi*pooled*gamma_p, 0)."""
    if not (len(xi.layers) == len(pooled) == len(gamma_p)):
        raise ValueError("signature loss inputs must align per passport layer")
    total = None
    for signs, pool_vec, gp in zip(xi.layers, pooled, gamma_p):
        pool_vec = pool_vec.reshape(-1)
        gp = gp.reshape(-1)
        if len(signs) != pool_vec.shape[0]:
            raise ValueError("signature length mismatch with pooled feature width")
        signs_t = torch.as_tensor(signs, dtype=pool_vec.dtype, device=pool_vec.device)
        hinge = torch.clamp(epsilon - signs_t * pool_vec * gp, min=0).sum()
        total = hinge if total is None else total + hinge
    return total if total is not None else torch.zeros(())


def performance_loss(model, batch) -> torch.Tensor:
    """Mean cross-entropy of the deployment branch plus the verification branch."""
    x, y = batch
    return (F.cross_entropy(model(x, branch="deploy"), y)
            + F.cross_entropy(model(x, branch="verify"), y))


def total_loss(perf, sig, bal, omega_s: float = 1.0, omega_b: float = 1.0):
    return perf + omega_s * sig + omega_b * bal


# ----- evaluation helpers ----------------------------------------------------


@torch.no_grad()
def branch_accuracy(model, dataset, branch: str, batch_size: int = 256,
                    passports=None) -> float:
    """Accuracy in percent. Attaches passport affine for verify branches."""
    was_training = model.training
    model.eval()
    if branch == "verify" and passports is not None:
        model.derive_and_attach(passports)
    correct = 0
    for x, y in dataset.batches(batch_size):
        pred = model(x, branch=branch).argmax(dim=1)
        correct += int((pred == y).sum())
    if was_training:
        model.train()
    return 100.0 * correct / len(dataset)


# ----- the training loop ------------------------------------------------------


def train_dual(model: PassportedClassifier, train_set, test_set, passports,
               xi: BinarySignature, cfg: TrainConfig, log_path=None,
               progress=None):
    """Optimizes the total loss; logs per-epoch metrics.

    Returns (model, metrics) where metrics is a list of per-epoch dicts
    {epoch, loss, perf_loss, sig_loss, bal_loss, acc_deploy, acc_verify, sa}.
    """
    torch.manual_seed(cfg.seed)
    site_param_ids = set()
    for module in model.modules():
        if isinstance(module, PassportLayer):
            site_param_ids.update(id(p) for p in module.parameters())
    affine_params = [p for p in model.parameters() if id(p) in site_param_ids]
    base_params = [p for p in model.parameters() if id(p) not in site_param_ids]
    opt = torch.optim.SGD(
        [{"params": base_params, "lr": cfg.lr},
         {"params": affine_params, "lr": cfg.lr * cfg.affine_lr_mult}],
        momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, cfg.resolved_milestones(),
                                                 gamma=0.1)
    sites = model.passport_sites()
    metrics = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            sums = {"loss": 0.0, "perf_loss": 0.0, "sig_loss": 0.0, "bal_loss": 0.0}
            batches = 0
            for x, y in train_set.batches(cfg.batch_size, shuffle=True,
                                          seed=cfg.seed + epoch):
                pooled, gammas, betas = model.derive_and_attach(passports)
                perf = performance_loss(model, (x, y))
                sig = signature_loss(xi, pooled, gammas, cfg.epsilon)
                bal = balance_loss(sites, list(zip(gammas, betas)))
                loss = total_loss(perf, sig, bal, cfg.omega_s, cfg.omega_b)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}: perf={float(perf)}, "
                        f"sig={float(sig)}, bal={float(bal)}")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(),
                                                   cfg.grad_clip)
                opt.step()
                sums["loss"] += float(loss.detach())
                sums["perf_loss"] += float(perf.detach())
                sums["sig_loss"] += float(sig.detach())
                sums["bal_loss"] += float(bal.detach())
                batches += 1
            sched.step()
            model.eval()
            sa = sign_agreement(xi, extract_signature(model, passports))
            record = {
                "epoch": epoch,
                **{k: v / max(batches, 1) for k, v in sums.items()},
                "acc_deploy": branch_accuracy(model, test_set, "deploy"),
                "acc_verify": branch_accuracy(model, test_set, "verify",
                                              passports=passports),
                "sa": sa,
            }
            metrics.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if progress:
                progress(record)
    finally:
        if log_fh:
            log_fh.close()
    return model, metrics


# ----- verification-state surgery ---------------------------------------------

VERIFY_PARAM_NAMES = ("weight_t", "bias_t")
VERIFY_MODULE_PREFIXES = ("tlp_gamma", "tlp_beta")


def is_verification_entry(name: str) -> bool:
    """True for state-dict keys that belong to the verification branch."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in VERIFY_PARAM_NAMES:
        return True
    parts = name.split(".")
    return any(p in VERIFY_MODULE_PREFIXES for p in parts)


def extract_verification_state(model: PassportedClassifier) -> dict:
    """Verification-branch tensors keyed by state-dict name."""
    return {k: v.detach().clone() for k, v in model.state_dict().items()
            if is_verification_entry(k)}


class DeployedNorm(torch.nn.Module):
    """Deployment-only remnant of a passport layer: identical normalization
    and affine route, no verification state at all."""

    def __init__(self, source: PassportLayer):
        super().__init__()
        self.num_features = source.num_features
        self.norm_kind = source.norm_kind
        self.activation_kind = source.activation_kind
        self.eps = source.eps
        self.momentum = source.momentum
        self.num_groups = source.num_groups
        self.weight = torch.nn.Parameter(source.weight.detach().clone())
        self.bias = torch.nn.Parameter(source.bias.detach().clone())
        if self.norm_kind == "batch":
            self.register_buffer("running_mean", source.running_mean.detach().clone())
            self.register_buffer("running_var", source.running_var.detach().clone())

    def activation(self, x):
        from .passport_layer import apply_activation
        return apply_activation(x, self.activation_kind)

    def forward(self, x, mode="deploy", apply_act=True):
        if mode == "verify":
            raise RuntimeError("deployment model has no verification branch")
        out = self._norm(x, mode)
        out = self.weight.view(1, -1, 1, 1) * out + self.bias.view(1, -1, 1, 1)
        return self.activation(out) if apply_act else out

    def _norm(self, x, mode):
        import torch.nn.functional as Fn
        if self.norm_kind == "group":
            return Fn.group_norm(x, self.num_groups, None, None, self.eps)
        if mode == "passport":
            mean = x.mean(dim=(2, 3), keepdim=True)
            var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
            return (x - mean) / torch.sqrt(var + self.eps)
        if self.training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                n = x.numel() // x.shape[1]
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(
                    self.momentum * var * (n / max(n - 1, 1)))
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean.view(1, -1, 1, 1)) / torch.sqrt(var.view(1, -1, 1, 1) + self.eps)


def strip_verification(model: PassportedClassifier) -> PassportedClassifier:
    """Deployment-only copy: passport layers replaced by DeployedNorm remnants.

    The deployment forward of the result is bit-identical to the dual model's
    deployment branch; no TLP weights, temporal affine factors, or derived
    affine state survive."""
    model.clear_passport_affine()  # cached affines carry autograd graphs
    stripped = copy.deepcopy(model)
    replacements = []
    for name, module in stripped.named_modules():
        if isinstance(module, PassportLayer):
            replacements.append((name, DeployedNorm(module)))
    for name, new_module in replacements:
        parent = stripped
        *path, leaf = name.split(".")
        for part in path:
            parent = getattr(parent, part)
        setattr(parent, leaf, new_module)
    stripped._passport_names = []
    return stripped


def reattach_verification(stripped: PassportedClassifier,
                          verification_state: dict) -> PassportedClassifier:
    """Rebuild a dual-branch model from a deployment model plus the owner's
    saved verification state."""
    spec = stripped.spec
    restored = build_model(spec)
    state = restored.state_dict()
    deploy_state = {k: v for k, v in stripped.state_dict().items() if k in state}
    state.update(deploy_state)
    missing = [k for k in verification_state if k not in state]
    if missing:
        raise KeyError(f"verification entries not present in the architecture: {missing[:5]}")
    state.update(verification_state)
    restored.load_state_dict(state)
    restored.eval()
    return restored
