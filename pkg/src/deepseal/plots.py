"""Render attack-report curves (PSNR trajectories, prune sweeps) to PNG."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class PlotError(ValueError):
    pass


def _load_report(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PlotError(f"{path}: malformed JSON report ({exc})") from exc
    if "attack" not in doc:
        raise PlotError(f"{path}: report lacks the 'attack' field")
    return doc


def plot_report(report_path, out_dir) -> list:
    """One report -> one or more PNGs; returns the written paths."""
    doc = _load_report(report_path)
    kind = doc["attack"]
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.splitext(os.path.basename(report_path))[0]
    out = os.path.join(out_dir, f"{base}.png")

    if kind == "forge_passport":
        curves = doc.get("curves")
        if not curves or "iteration" not in curves:
            raise PlotError(f"{report_path}: forge_passport report lacks curves.iteration")
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(curves["iteration"], curves["reveal_psnr"],
                label="reveal PSNR (forged ID)")
        ax.plot(curves["iteration"], curves["similarity_psnr"],
                label="passport similarity PSNR")
        ax.set_xlabel("iteration")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title("Forged user-side passport attack")
        ax.legend()
    elif kind == "forge_key":
        curves = doc.get("curves")
        if not curves or "reveal_psnr_mean" not in curves:
            raise PlotError(f"{report_path}: forge_key report lacks curves.reveal_psnr_mean")
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = curves["iteration"]
        mean = curves["reveal_psnr_mean"]
        ax.plot(xs, mean, label="reveal PSNR (mean)")
        if doc.get("trials", 1) > 1:
            ci = curves.get("reveal_psnr_ci", [0.0] * len(mean))
            lo = [m - c for m, c in zip(mean, ci)]
            hi = [m + c for m, c in zip(mean, ci)]
            ax.fill_between(xs, lo, hi, alpha=0.3,
                            label=f"{doc.get('z_score', 2.33)}z CI")
        ax.set_xlabel("iteration")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title("Forged steganographic key attack")
        ax.legend()
    elif kind == "prune":
        rows = doc.get("rows")
        if not rows:
            raise PlotError(f"{report_path}: prune report lacks rows")
        fig, ax = plt.subplots(figsize=(6, 4))
        rates = [r["rate"] for r in rows]
        ax.plot(rates, [r["accuracy"] for r in rows], marker="o", label="accuracy (%)")
        ax.plot(rates, [100 * r["sa"] for r in rows], marker="s", label="SA (%)")
        ax.plot(rates, [r["ad"] for r in rows], marker="^", label="AD (pts)")
        ax.set_xlabel("pruning rate")
        ax.set_title(f"Pruning attack ({doc.get('strategy', '?')})")
        ax.legend()
    elif kind == "erb":
        fig, ax = plt.subplots(figsize=(5, 4))
        names = ["acc_deploy", "acc_verify", "ad"]
        ax.bar(names, [doc.get(n, 0.0) for n in names])
        ax.set_ylabel("%")
        ax.set_title(f"ERB attack: FSA={doc.get('fsa', float('nan')):.4f} "
                     f"BDR={doc.get('bdr', float('nan')):.3f}")
    elif kind == "finetune":
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.bar(["new_task_accuracy", "sa_after_reattach x100"],
               [doc.get("new_task_accuracy", 0.0),
                100 * doc.get("sa_after_reattach", 0.0)])
        ax.set_title("Fine-tuning attack")
    else:
        raise PlotError(f"{report_path}: unknown attack kind {kind!r}")

    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return [out]


def plot_reports(report_paths, out_dir) -> list:
    if not report_paths:
        print("plot: no reports given, nothing to do")
        return []
    written = []
    for path in report_paths:
        written += plot_report(path, out_dir)
    return written
