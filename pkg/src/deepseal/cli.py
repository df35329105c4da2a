"""Command-line surface tying the modules into the owner's workflow.

Commands: train-isn, train-model, issue-license, verify {owner,license},
attack {erb,forge-passport,forge-key,finetune,prune}, plot. Reports are JSON,
curves CSV, images PNG; verify exit codes are 0 iff the relevant verdict
passes, so the chain is scriptable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np
import torch

from . import archive, attacks, plots, stego, training, verification
from .config import ConfigError, ExperimentConfig, resolve_path
from .models import ModelSpec, build_model, ingest_dataset
from .passport_layer import PassportPair
from .signature import derive_signature, image_digest
from .stego import StegoKey, StegoNetwork, load_image, save_image
from .verification import Thresholds


class CommandError(RuntimeError):
    pass


# ----- shared helpers -------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise CommandError("this command requires --config")
    cfg = ExperimentConfig.load(resolve_path(args.config))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _model_spec(cfg: ExperimentConfig) -> ModelSpec:
    table = dict(cfg.model)
    table.setdefault("architecture", "toy_cnn")
    if "passport_layers" in table:
        entries = table.pop("passport_layers")
        names, overrides = [], {}
        for entry in entries:
            if isinstance(entry, str):
                names.append(entry)
            elif isinstance(entry, dict):
                if "layer_name" not in entry:
                    raise CommandError(
                        "model.passport_layers table entries need layer_name")
                name = entry["layer_name"]
                names.append(name)
                opts = {k: v for k, v in entry.items()
                        if k in ("norm_kind", "activation_kind", "use_tlp")}
                if opts:
                    overrides[name] = opts
            else:
                raise CommandError(
                    "model.passport_layers entries must be site names or tables")
        table["passport_layer_names"] = names
        if overrides:
            table["passport_layer_overrides"] = overrides
    return ModelSpec(**table)


def _load_passports(cfg: ExperimentConfig, resolution: int, side="owner"):
    gammas = [resolve_path(p) for p in cfg.passports.get("gamma", [])]
    betas = [resolve_path(p) for p in cfg.passports.get("beta", [])]
    if not gammas or len(gammas) != len(betas):
        raise CommandError("config must list equally many passports.gamma and "
                           "passports.beta image paths")
    pairs = []
    for i, (g, b) in enumerate(zip(gammas, betas)):
        pairs.append(PassportPair(load_image(g, resolution),
                                  load_image(b, resolution),
                                  side=side, layer_index=i))
    return pairs


def _thresholds(cfg: ExperimentConfig, args) -> Thresholds:
    table = dict(cfg.thresholds)
    for name in ("tau_d", "tau_f", "tau_xi", "tau_p", "tau_r"):
        value = getattr(args, name, None)
        if value is not None:
            table[name] = value
    return Thresholds(**{k: float(v) for k, v in table.items()})


def _stego_pool(cfg: ExperimentConfig, count: int, resolution: int, seed: int):
    source = cfg.stego.get("data", "synthetic")
    if source == "synthetic":
        return stego.synthetic_image_pool(count, resolution, seed=seed)
    root = resolve_path(source)
    paths = sorted(
        os.path.join(root, f) for f in os.listdir(root)
        if f.lower().endswith((".png", ".jpg", ".jpeg")))
    if not paths:
        raise CommandError(f"no images under stego data folder {root}")
    return torch.stack([load_image(p, resolution) for p in paths[:count]])


def _write_json(path, doc):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
    return path


def _write_csv(path, columns: dict):
    keys = list(columns)
    rows = zip(*(columns[k] for k in keys))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        writer.writerows(rows)
    return path


# ----- commands -------------------------------------------------------------


def cmd_train_isn(args) -> int:
    cfg = _load_config(args).validate(need_stego=True)
    scfg = cfg.stego
    resolution = int(scfg.get("resolution", 64))
    steps = int(scfg.get("steps", 3000))
    pool = _stego_pool(cfg, int(scfg.get("pool_size", 16)), resolution, cfg.seed)
    covers, secrets = pool[: len(pool) // 2], pool[len(pool) // 2:]
    if "key" in scfg:
        key = StegoKey.from_file(resolve_path(scfg["key"]), resolution)
    else:
        raise CommandError("config stego.key must point to the key image")

    if args.resume:
        net, payload = archive.load_stego_checkpoint(resolve_path(args.resume))
        print(f"resuming from {args.resume} at step {int(net.steps_trained)}")
    else:
        net = StegoNetwork(num_blocks=int(scfg.get("num_blocks", 4)),
                           clamp=float(scfg.get("clamp", 2.0)),
                           growth=int(scfg.get("growth", 8)))
    net, history = stego.train_isn(
        covers, secrets, key, steps=steps,
        lr=float(scfg.get("lr", 4e-4)),
        batch_size=int(scfg.get("batch_size", 2)),
        network=net, seed=cfg.seed,
        progress=lambda row: print(
            f"  step {row['step']:6d} loss={row['loss']:.3e} "
            f"holdout={row['holdout_loss']:.3e}"))

    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, "stego.ckpt")
    digest = archive.save_stego_checkpoint(ckpt, net, cfg.to_toml(),
                                           extra={"key_digest": key.digest})
    _write_json(os.path.join(cfg.out_dir, "isn_history.json"), history)
    print(f"stego checkpoint: {ckpt} (digest {digest[:16]}..., "
          f"steps {int(net.steps_trained)})")
    return 0


def cmd_train_model(args) -> int:
    cfg = _load_config(args).validate(need_passports=True)
    spec = _model_spec(cfg)
    torch.manual_seed(cfg.seed)
    model = build_model(spec)
    passports = _load_passports(cfg, spec.input_resolution)
    if len(passports) != len(model.passport_sites()):
        raise CommandError(
            f"config lists {len(passports)} passport pairs but the model has "
            f"{len(model.passport_sites())} passport layers")
    xi = derive_signature([p.gamma_image for p in passports],
                          model.channel_counts())

    train_set = ingest_dataset({**cfg.dataset, "seed": cfg.seed}, split="train")
    test_set = ingest_dataset({**cfg.dataset, "seed": cfg.seed}, split="test")
    tcfg = training.TrainConfig(
        epochs=int(cfg.train.get("epochs", 30)),
        lr=float(cfg.train.get("lr", 0.01)),
        batch_size=int(cfg.train.get("batch_size", 64)),
        omega_s=float(cfg.train.get("omega_s", 1.0)),
        omega_b=float(cfg.train.get("omega_b", 1.0)),
        epsilon=float(cfg.train.get("epsilon", 0.1)),
        grad_clip=float(cfg.train.get("grad_clip", 5.0)),
        seed=cfg.seed)

    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "train_metrics.jsonl")
    model, metrics = training.train_dual(
        model, train_set, test_set, passports, xi, tcfg, log_path=log_path,
        progress=lambda r: print(
            f"  epoch {r['epoch']:3d} loss={r['loss']:.3f} "
            f"acc_deploy={r['acc_deploy']:.2f} acc_verify={r['acc_verify']:.2f} "
            f"SA={r['sa']:.4f}"))

    sa, ok = verification.verify_signature_test(model, passports, mode="pre")
    if not ok:
        print(f"finalization refused: pre-deployment SA={sa:.4f} != 1.0",
              file=sys.stderr)
        return 3
    ckpt = os.path.join(cfg.out_dir, "owner_model.ckpt")
    digest = archive.save_model_checkpoint(ckpt, model, cfg.to_toml())
    xi.save(os.path.join(cfg.out_dir, "signature.json"))
    print(f"owner checkpoint: {ckpt} (digest {digest[:16]}..., SA={sa:.4f})")
    return 0


def cmd_issue_license(args) -> int:
    cfg = _load_config(args).validate(need_passports=True, need_stego=True)
    model, model_payload = archive.load_model_checkpoint(resolve_path(args.checkpoint))
    isn, stego_payload = archive.load_stego_checkpoint(resolve_path(args.stego_checkpoint))
    resolution = int(cfg.stego.get("resolution", 64))
    id_image = load_image(resolve_path(args.id_image), resolution)
    key = StegoKey.from_file(resolve_path(cfg.stego["key"]), resolution)
    owner_passports = _load_passports(cfg, resolution)

    out_dir = args.out or os.path.join(cfg.out_dir, "license")
    os.makedirs(out_dir, exist_ok=True)

    deploy_ckpt = os.path.join(out_dir, "deployment.ckpt")
    deploy_digest = archive.save_model_checkpoint(deploy_ckpt, model,
                                                  model_payload["config_snapshot"],
                                                  stripped=True)
    check = archive.load_archive(deploy_ckpt)
    leaked = [k for k in check["entries"] if k.startswith("verify/")]
    if leaked:
        raise CommandError(f"license bundle integrity abort: verification "
                           f"entries present: {leaked[:5]}")

    user_digests = []
    for i, p_o in enumerate(owner_passports):
        p_u = isn.hide(p_o, id_image)
        np.save(os.path.join(out_dir, f"user_passport_{i}_gamma.npy"),
                p_u.gamma_image.numpy())
        np.save(os.path.join(out_dir, f"user_passport_{i}_beta.npy"),
                p_u.beta_image.numpy())
        save_image(p_u.gamma_image,
                   os.path.join(out_dir, f"user_passport_{i}_gamma_preview.png"))
        save_image(p_u.beta_image,
                   os.path.join(out_dir, f"user_passport_{i}_beta_preview.png"))
        user_digests.append({
            "gamma": image_digest(p_u.gamma_image).hex(),
            "beta": image_digest(p_u.beta_image).hex(),
        })

    record = {
        "deployment_digest": deploy_digest,
        "owner_model_digest": model_payload["digest"],
        "stego_digest": stego_payload["digest"],
        "key_digest": key.digest,
        "id_image": os.path.basename(args.id_image),
        "user_passport_digests": user_digests,
        "passport_layers": len(owner_passports),
        "issued_at": time.time(),
    }
    _write_json(os.path.join(out_dir, "license.json"), record)
    print(f"license bundle: {out_dir} (deployment digest {deploy_digest[:16]}...)")
    return 0


def _load_bundle_passports(bundle_dir, count):
    pairs = []
    for i in range(count):
        g = os.path.join(bundle_dir, f"user_passport_{i}_gamma.npy")
        b = os.path.join(bundle_dir, f"user_passport_{i}_beta.npy")
        if not (os.path.exists(g) and os.path.exists(b)):
            raise FileNotFoundError(f"license bundle lacks passports for layer {i}: {g}")
        pairs.append(PassportPair(torch.from_numpy(np.load(g)),
                                  torch.from_numpy(np.load(b)),
                                  side="user", layer_index=i))
    return pairs


def cmd_verify(args) -> int:
    cfg = _load_config(args).validate(need_passports=True)
    deployed, deployed_payload = archive.load_model_checkpoint(
        resolve_path(args.deployed))
    owner_dual, owner_payload = archive.load_model_checkpoint(
        resolve_path(args.owner))
    if owner_payload["kind"] != "dual":
        raise CommandError("--owner must point to the owner's dual-branch checkpoint")
    state = training.extract_verification_state(owner_dual)
    restored = training.reattach_verification(deployed, state)

    spec = restored.spec
    owner_passports = _load_passports(cfg, spec.input_resolution)
    test_set = ingest_dataset({**cfg.dataset, "seed": cfg.seed}, split="test")
    thresholds = _thresholds(cfg, args)
    digests = {"deployed": deployed_payload["digest"],
               "owner": owner_payload["digest"]}

    user_passports = key = id_image = isn = None
    if args.mode == "license":
        if not (args.bundle and args.id_image and args.stego_checkpoint):
            raise CommandError("verify license needs --bundle, --id-image and "
                               "--stego-checkpoint")
        isn, stego_payload = archive.load_stego_checkpoint(
            resolve_path(args.stego_checkpoint))
        resolution = int(cfg.stego.get("resolution", 64))
        stego_owner = _load_passports(cfg, resolution)
        user_passports = _load_bundle_passports(resolve_path(args.bundle),
                                                len(stego_owner))
        key = StegoKey.from_file(resolve_path(cfg.stego["key"]), resolution)
        id_image = load_image(resolve_path(args.id_image), resolution)
        digests["stego"] = stego_payload["digest"]
        digests["key"] = key.digest
        report = verification.run_chain(
            deployed, restored, test_set, owner_passports, thresholds,
            user_passports=user_passports, key=key, id_image=id_image, isn=isn,
            license_owner_passports=stego_owner, digests=digests,
            signature_mode=args.signature_mode)
    else:
        report = verification.run_chain(
            deployed, restored, test_set, owner_passports, thresholds,
            digests=digests, signature_mode=args.signature_mode)

    out = args.report or os.path.join(cfg.out_dir, f"verify_{args.mode}.json")
    report.save(out)
    verdict = report.license_verdict if args.mode == "license" else report.ownership_verdict
    for r in report.records:
        print(f"  {r.name:22s} measured={r.measured:10.4f} "
              f"threshold={r.threshold:8.4f} {'PASS' if r.passed else 'FAIL'}")
    print(f"{args.mode} verdict: {'PASS' if verdict else 'FAIL'} (report: {out})")
    return 0 if verdict else 1


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    kind_slug = args.kind.replace("-", "_")
    out_dir = args.out or os.path.join(cfg.out_dir, f"attack_{kind_slug}")
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.seed

    if args.kind in ("erb", "finetune", "prune"):
        if not args.victim:
            raise CommandError(f"attack {args.kind} requires --victim")
        model, _ = archive.load_model_checkpoint(resolve_path(args.victim))
        spec = model.spec
        owner_passports = _load_passports(cfg, spec.input_resolution)
        test_set = ingest_dataset({**cfg.dataset, "seed": cfg.seed}, split="test")

    if args.kind == "erb":
        train_set = ingest_dataset({**cfg.dataset, "seed": cfg.seed}, split="train")
        g = torch.Generator().manual_seed(seed + 77)
        forged = [PassportPair(torch.rand(p.gamma_image.shape, generator=g),
                               torch.rand(p.beta_image.shape, generator=g),
                               layer_index=p.layer_index)
                  for p in owner_passports]
        report = attacks.erb_attack(model, train_set, test_set, forged,
                                    owner_passports, iters=args.iters,
                                    lr=args.lr, data_fraction=args.data_fraction,
                                    seed=seed)
    elif args.kind == "finetune":
        transfer = dict(cfg.dataset)
        transfer["class_offset"] = int(transfer.get("class_offset", 0)) + 10
        new_train = ingest_dataset({**transfer, "seed": cfg.seed + 1}, split="train")
        new_test = ingest_dataset({**transfer, "seed": cfg.seed + 1}, split="test")
        report = attacks.finetune_attack(model, new_train, new_test,
                                         owner_passports, epochs=args.epochs,
                                         lr=args.lr, seed=seed)
    elif args.kind == "prune":
        report = attacks.prune_attack(model, test_set, owner_passports,
                                      strategy=args.strategy, seed=seed)
        _write_csv(os.path.join(out_dir, "prune_curves.csv"),
                   {k: [r[k] for r in report["rows"]]
                    for k in ("rate", "accuracy", "sa", "ad")})
    elif args.kind in ("forge-passport", "forge-key"):
        if not args.stego_checkpoint:
            raise CommandError(f"attack {args.kind} requires --stego-checkpoint")
        isn, _ = archive.load_stego_checkpoint(resolve_path(args.stego_checkpoint))
        resolution = int(cfg.stego.get("resolution", 64))
        owner_passports = _load_passports(cfg, resolution)
        key = StegoKey.from_file(resolve_path(cfg.stego["key"]), resolution)
        pool = stego.synthetic_image_pool(max(8, args.trials), resolution,
                                          seed=seed + 31)
        if args.kind == "forge-passport":
            attacker_id = stego.synthetic_image_pool(1, resolution, seed=seed + 97)[0]
            report = attacks.forge_user_passport_attack(
                isn, owner_passports, list(pool), attacker_id, key,
                iters=args.iters, lr=args.lr, seed=seed)
            _write_csv(os.path.join(out_dir, "forge_passport_curves.csv"),
                       report["curves"])
        else:
            with torch.no_grad():
                user_passports = [isn.hide(p, pool[i % len(pool)])
                                  for i, p in enumerate(owner_passports)]
            forged_ids = list(stego.synthetic_image_pool(args.trials, resolution,
                                                         seed=seed + 131))
            report = attacks.forge_key_attack(isn, user_passports, forged_ids,
                                              trials=args.trials, iters=args.iters,
                                              lr=args.lr, seed=seed)
            _write_csv(os.path.join(out_dir, "forge_key_curves.csv"),
                       report["curves"])
    else:
        raise CommandError(f"unknown attack kind {args.kind!r}")

    path = _write_json(os.path.join(out_dir, f"{kind_slug}_report.json"), report)
    print(f"attack report: {path}")
    return 0


def cmd_plot(args) -> int:
    written = plots.plot_reports([resolve_path(p) for p in args.reports],
                                 args.out or ".")
    for w in written:
        print(f"wrote {w}")
    return 0


# ----- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepseal",
        description="Passport-sealed model training, steganographic licensing, "
                    "verification, and attack simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (TOML)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output directory")

    p = sub.add_parser("train-isn", help="train the steganographic network")
    common(p)
    p.add_argument("--resume", help="stego checkpoint to continue from")
    p.set_defaults(func=cmd_train_isn)

    p = sub.add_parser("train-model", help="train the dual-branch classifier")
    common(p)
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("issue-license", help="issue a license bundle (no retraining)")
    common(p)
    p.add_argument("--checkpoint", required=True, help="owner dual checkpoint")
    p.add_argument("--stego-checkpoint", required=True)
    p.add_argument("--id-image", required=True, help="licensee ID image (PNG)")
    p.set_defaults(func=cmd_issue_license)

    p = sub.add_parser("verify", help="run the verification chain")
    common(p)
    p.add_argument("mode", choices=["owner", "license"])
    p.add_argument("--deployed", required=True, help="deployed model checkpoint")
    p.add_argument("--owner", required=True, help="owner dual checkpoint")
    p.add_argument("--bundle", help="license bundle directory")
    p.add_argument("--stego-checkpoint")
    p.add_argument("--id-image")
    p.add_argument("--report", help="report output path")
    p.add_argument("--signature-mode", choices=["pre", "post"], default="post")
    for name in ("tau-d", "tau-f", "tau-xi", "tau-p", "tau-r"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="run an attack simulation")
    common(p)
    p.add_argument("kind", choices=["erb", "forge-passport", "forge-key",
                                    "finetune", "prune"])
    p.add_argument("--victim", help="victim model checkpoint")
    p.add_argument("--stego-checkpoint", help="stolen stego checkpoint")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--data-fraction", type=float, default=0.1)
    p.add_argument("--strategy", choices=["random", "l1"], default="l1")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("plot", help="render report curves to PNG")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", help="output directory for images")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (CommandError, ConfigError, archive.ArchiveError,
            verification.VerificationError, plots.PlotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: not found: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
