"""Red-team harness: ownership ambiguity, license ambiguity, removal attacks.

Every attack operates on an in-memory copy of the victim (checkpoints on disk
are never touched) and emits a plain-dict report that serializes to JSON; the
iterative attacks also return per-iteration curves for plotting.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import PassportedClassifier
from .signature import derive_signature, extract_signature, sign_agreement
from .stego import StegoKey, StegoNetwork, psnr
from .training import (branch_accuracy, reattach_verification, signature_loss,
                       strip_verification)


# ----- ownership ambiguity: expanded residual block ------------------------


class ExpandedResidualBlock(nn.Module):
    """Residual two-layer expansion wrapped around a TLP (or identity).

    The expansion's output layer starts at zero, so the wrapped mapping is
    initially unchanged; training the expansion searches the widened solution
    space for affine vectors matching the forged signature."""

    def __init__(self, wrapped, channels: int, hidden_multiplier: int = 4):
        super().__init__()
        self.wrapped = wrapped
        hidden = hidden_multiplier * channels
        self.expansion = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.LeakyReLU(),
            nn.Linear(hidden, channels),
        )
        nn.init.zeros_(self.expansion[-1].weight)
        nn.init.zeros_(self.expansion[-1].bias)

    def forward(self, x):
        base = self.wrapped(x) if self.wrapped is not None else x
        return base + self.expansion(x)


def _insert_erbs(model: PassportedClassifier, hidden_multiplier: int):
    erb_params = []
    for site in model.passport_sites():
        gamma_erb = ExpandedResidualBlock(site.tlp_gamma, site.num_features,
                                          hidden_multiplier)
        beta_erb = ExpandedResidualBlock(site.tlp_beta, site.num_features,
                                         hidden_multiplier)
        site.tlp_gamma = gamma_erb
        site.tlp_beta = beta_erb
        site.use_tlp = True  # identity wrap still routes through the ERB
        erb_params += list(gamma_erb.expansion.parameters())
        erb_params += list(beta_erb.expansion.parameters())
    return erb_params


def erb_attack(model: PassportedClassifier, train_set, test_set,
               forged_passports, owner_passports, iters: int = 300,
               lr: float = 0.01, data_fraction: float = 0.1,
               batch_size: int = 64, epsilon: float = 0.1,
               hidden_multiplier: int = 4, seed: int = 0,
               train_tlp: bool = False, progress=None) -> dict:
    """Expanded-residual-block ambiguity attack.

    The attacker holds both branches and a fraction of the training data,
    derives the forged signature from the forged passports through the hash
    rule, and retrains the inserted expansions to force the pooled-product
    signs toward it while keeping task accuracy on the stolen data.
    """
    torch.manual_seed(seed)
    model.clear_passport_affine()  # cached affines may carry autograd graphs
    victim = copy.deepcopy(model)
    attacked = copy.deepcopy(victim)

    benign_xi = derive_signature([p.gamma_image for p in owner_passports],
                                 victim.channel_counts())
    forged_xi = derive_signature([p.gamma_image for p in forged_passports],
                                 attacked.channel_counts())
    bdr = 1.0 - sign_agreement(benign_xi, forged_xi)

    params = _insert_erbs(attacked, hidden_multiplier)
    if train_tlp:
        for site in attacked.passport_sites():
            params += list(site.tlp_gamma.wrapped.parameters())
            params += list(site.tlp_beta.wrapped.parameters())
    for p in attacked.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)

    subset = train_set.subsample(data_fraction, seed=seed)
    attacked.train()
    step = 0
    while step < iters:
        for x, y in subset.batches(batch_size, shuffle=True, seed=seed + step):
            if step >= iters:
                break
            pooled, gammas, _ = attacked.derive_and_attach(forged_passports)
            hinge = signature_loss(forged_xi, pooled, gammas, epsilon)
            ce = F.cross_entropy(attacked(x, branch="verify"), y)
            loss = hinge + ce
            opt.zero_grad()
            loss.backward()
            opt.step()
            if progress and step % 50 == 0:
                progress({"iter": step, "hinge": float(hinge.detach()),
                          "ce": float(ce.detach())})
            step += 1
    attacked.eval()

    fsa = sign_agreement(forged_xi, extract_signature(attacked, forged_passports))
    acc_deploy = branch_accuracy(attacked, test_set, "deploy")
    acc_verify = branch_accuracy(attacked, test_set, "verify",
                                 passports=forged_passports)
    report = {
        "attack": "erb",
        "iters": iters,
        "lr": lr,
        "data_fraction": data_fraction,
        "hidden_multiplier": hidden_multiplier,
        "fsa": fsa,
        "bdr": bdr,
        "acc_deploy": acc_deploy,
        "acc_verify": acc_verify,
        "ad": abs(acc_deploy - acc_verify),
        "seed": seed,
    }
    return report


# ----- license ambiguity: forged user-side passport --------------------------


def forge_user_passport_attack(isn: StegoNetwork, owner_passports,
                               genuine_ids, attacker_id, key: StegoKey,
                               iters: int = 1000, lr: float = 0.001,
                               record_every: int = 10, seed: int = 0,
                               progress=None) -> dict:
    """Optimize user-side passport pixels to reveal the attacker's ID.

    Starts from genuine user-side passports (attacker steals them), then
    gradient-descends the pixels so the key-based reveal matches the
    attacker's ID. Records the reveal-PSNR and passport-similarity-PSNR
    trajectories; the two move in opposite directions.
    """
    torch.manual_seed(seed)
    owner_stack = torch.stack([img for pair in owner_passports
                               for img in (pair.gamma_image, pair.beta_image)])
    id_idx = torch.arange(owner_stack.shape[0]) % len(genuine_ids)
    secret_stack = torch.stack([genuine_ids[i] for i in id_idx])
    with torch.no_grad():
        user_stack, _ = isn.hide_batch(owner_stack, secret_stack)

    forged = user_stack.clone().requires_grad_(True)
    opt = torch.optim.Adam([forged], lr=lr)
    target = attacker_id.unsqueeze(0).expand(forged.shape[0], -1, -1, -1)

    curve_iter, curve_reveal, curve_similarity = [], [], []
    for it in range(iters + 1):
        revealed = isn.reveal_batch(forged, key.key_image)
        loss = ((revealed - target) ** 2).mean()
        if it % record_every == 0 or it == iters:
            with torch.no_grad():
                curve_iter.append(it)
                curve_reveal.append(psnr(revealed.detach(), target))
                curve_similarity.append(psnr(forged.detach(), owner_stack))
            if progress:
                progress({"iter": it, "reveal_psnr": curve_reveal[-1],
                          "similarity_psnr": curve_similarity[-1]})
        if it == iters:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()

    return {
        "attack": "forge_passport",
        "iters": iters,
        "lr": lr,
        "seed": seed,
        "num_passport_images": int(owner_stack.shape[0]),
        "curves": {
            "iteration": curve_iter,
            "reveal_psnr": curve_reveal,
            "similarity_psnr": curve_similarity,
        },
        "final_reveal_psnr": curve_reveal[-1],
        "final_similarity_psnr": curve_similarity[-1],
    }


# ----- license ambiguity: forged steganographic key ---------------------------


def forge_key_attack(isn: StegoNetwork, user_passports, forged_ids,
                     trials: int = 10, iters: int = 1000, lr: float = 0.001,
                     record_every: int = 10, z_score: float = 2.33,
                     seed: int = 0, progress=None) -> dict:
    """Optimize key images from Gaussian noise toward revealing forged IDs.

    Per trial: one noise-initialized key, one target forged ID, one stolen
    user-side passport image. Reports the mean reveal-PSNR trajectory with a
    z-score confidence band over trials.
    """
    g = torch.Generator().manual_seed(seed)
    stego_pool = torch.stack([img for pair in user_passports
                              for img in (pair.gamma_image, pair.beta_image)])
    shape = stego_pool.shape[1:]
    curves = []
    for trial in range(trials):
        torch.manual_seed(seed + 1000 + trial)
        forged_key = torch.randn(shape, generator=g).mul(0.25).add(0.5).requires_grad_(True)
        target = forged_ids[trial % len(forged_ids)]
        stego = stego_pool[trial % stego_pool.shape[0]].unsqueeze(0)
        opt = torch.optim.Adam([forged_key], lr=lr)
        row = []
        for it in range(iters + 1):
            revealed = isn.reveal_batch(stego, forged_key)
            loss = ((revealed - target.unsqueeze(0)) ** 2).mean()
            if it % record_every == 0 or it == iters:
                row.append(psnr(revealed.detach().squeeze(0), target))
            if it == iters:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        curves.append(row)
        if progress:
            progress({"trial": trial, "final_reveal_psnr": row[-1]})

    arr = np.asarray(curves)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1) if trials > 1 else np.zeros_like(mean)
    half_band = z_score * std / np.sqrt(max(trials, 1))
    iterations = list(range(0, iters + 1, record_every))
    if iterations[-1] != iters:
        iterations.append(iters)
    return {
        "attack": "forge_key",
        "trials": trials,
        "iters": iters,
        "lr": lr,
        "z_score": z_score,
        "seed": seed,
        "curves": {
            "iteration": iterations,
            "reveal_psnr_mean": mean.tolist(),
            "reveal_psnr_ci": half_band.tolist(),
        },
        "final_reveal_psnr_mean": float(mean[-1]),
        "final_reveal_psnr_max": float(arr[:, -1].max()),
        "initial_reveal_psnr_mean": float(mean[0]),
    }


# ----- removal attacks ----------------------------------------------------------


def finetune_attack(model: PassportedClassifier, new_train_set, new_test_set,
                    owner_passports, verification_state=None, epochs: int = 30,
                    lr: float = 0.001, batch_size: int = 64, seed: int = 0,
                    reset_head: bool = True, progress=None) -> dict:
    """Fine-tune the stolen deployment branch on a transfer task, then let the
    owner re-attach the saved verification state and measure sign agreement."""
    torch.manual_seed(seed)
    from .training import extract_verification_state
    if verification_state is None:
        verification_state = extract_verification_state(model)
    deployed = strip_verification(model)
    if reset_head:
        deployed.head = nn.Linear(deployed.head.in_features,
                                  new_train_set.num_classes)
    opt = torch.optim.SGD(deployed.parameters(), lr=lr, momentum=0.9)
    deployed.train()
    for epoch in range(epochs):
        for x, y in new_train_set.batches(batch_size, shuffle=True,
                                          seed=seed + epoch):
            loss = F.cross_entropy(deployed(x, branch="deploy"), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if progress:
            progress({"epoch": epoch, "loss": float(loss.detach())})
    deployed.eval()

    new_task_acc = branch_accuracy(deployed, new_test_set, "deploy")
    if deployed.head.out_features != deployed.spec.num_classes:
        # transfer task changed the head; keep the model spec honest for re-attach
        from .models import ModelSpec
        deployed.spec = ModelSpec(**{**deployed.spec.to_dict(),
                                     "num_classes": deployed.head.out_features})
    restored = reattach_verification(deployed, verification_state)
    xi = derive_signature([p.gamma_image for p in owner_passports],
                          restored.channel_counts())
    sa = sign_agreement(xi, extract_signature(restored, owner_passports))
    return {
        "attack": "finetune",
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
        "new_task_accuracy": new_task_acc,
        "sa_after_reattach": sa,
    }


def _conv_weights(model):
    return [(name, module) for name, module in model.named_modules()
            if isinstance(module, nn.Conv2d)]


def prune_attack(model: PassportedClassifier, test_set, owner_passports,
                 verification_state=None, strategy: str = "l1",
                 rates=None, seed: int = 0, progress=None) -> dict:
    """Mask a fraction of conv weights (random or globally smallest-magnitude)
    and measure accuracy, sign agreement, and branch AD per rate."""
    if strategy not in ("random", "l1"):
        raise ValueError(f"strategy must be 'random' or 'l1', got {strategy!r}")
    if rates is None:
        rates = [round(0.1 * i, 1) for i in range(11)]
    from .training import extract_verification_state
    if verification_state is None:
        verification_state = extract_verification_state(model)
    xi = derive_signature([p.gamma_image for p in owner_passports],
                          model.channel_counts())

    base = strip_verification(model)
    flat = torch.cat([m.weight.detach().reshape(-1) for _, m in _conv_weights(base)])
    total = flat.numel()
    if strategy == "l1":
        order = torch.argsort(flat.abs())
    else:
        g = torch.Generator().manual_seed(seed)
        order = torch.randperm(total, generator=g)

    rows = []
    for rate in rates:
        pruned = copy.deepcopy(base)
        k = int(round(rate * total))
        if k > 0:
            mask = torch.ones(total, dtype=torch.bool)
            mask[order[:k]] = False
            offset = 0
            with torch.no_grad():
                for _, module in _conv_weights(pruned):
                    n = module.weight.numel()
                    chunk = mask[offset:offset + n].reshape(module.weight.shape)
                    module.weight.mul_(chunk)
                    offset += n
        pruned.eval()
        acc = branch_accuracy(pruned, test_set, "deploy")
        restored = reattach_verification(pruned, verification_state)
        sa = sign_agreement(xi, extract_signature(restored, owner_passports))
        acc_verify = branch_accuracy(restored, test_set, "verify",
                                     passports=owner_passports)
        row = {"rate": rate, "accuracy": acc, "sa": sa,
               "ad": abs(acc - acc_verify)}
        rows.append(row)
        if progress:
            progress(row)
    return {
        "attack": "prune",
        "strategy": strategy,
        "seed": seed,
        "rows": rows,
    }
