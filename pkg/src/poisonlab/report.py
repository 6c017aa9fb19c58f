"""Report emission: JSON and CSV tables plus rendered figures.

Each run writes into its own directory named by experiment name, config
fingerprint and master seed.  The JSON report carries a content digest over
everything except the timestamp, so two runs of the same config and seed can
be compared by digest alone.  Figures are rendered headlessly next to the
delimited files; they are presentation artifacts and stay outside the digest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import datetime
import hashlib
import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import config as configmod
from . import craft


@dataclass
class ReportPaths:
    run_dir: str
    report: str
    digest: str
    files: list = field(default_factory=list)


def run_directory(cfg: configmod.ExperimentConfig, master: int,
                  out_dir=None) -> str:
    base = out_dir if out_dir is not None else cfg.out_dir
    name = f"{cfg.name}-{configmod.fingerprint(cfg)}-s{master}"
    return os.path.join(base, name)


def _require_fresh(run_dir: str, force: bool) -> None:
    marker = os.path.join(run_dir, "report.json")
    if os.path.exists(marker) and not force:
        raise FileExistsError(
            f"{marker} already exists for this config fingerprint; "
            "pass force to overwrite")


def content_digest(payload: dict) -> str:
    """Digest of the canonical JSON encoding, timestamps excluded."""
    pruned = {k: v for k, v in payload.items()
              if k not in ("created_at", "content_digest")}
    blob = json.dumps(pruned, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _write_json(payload: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(rows: list, header: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


# --- figures --------------------------------------------------------------------

def plot_loss_trace(trace, retrain_steps, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(1, len(trace) + 1), trace, lw=1.2)
    for s in retrain_steps:
        ax.axvline(s, color="tab:red", ls="--", lw=0.8)
    ax.set_xlabel("craft step")
    ax.set_ylabel("matching loss")
    ax.set_title("crafting loss (dashed: surrogate retrains)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_success_by_viewpoint(evaluations, path) -> None:
    """Mean flip rate per target variant across victim repeats."""
    first = evaluations[0]["variants"]
    angles = [row["viewpoint"] for row in first]
    known = [row["known"] for row in first]
    rate = np.zeros(len(first))
    for ev in evaluations:
        rate += [float(row["success"]) for row in ev["variants"]]
    rate /= len(evaluations)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    colors = ["tab:orange" if k else "tab:blue" for k in known]
    ax.bar(angles, rate, width=360 / max(len(angles), 1) * 0.8, color=colors)
    ax.set_xlabel("viewpoint (degrees)")
    ax.set_ylabel("flip rate over repeats")
    ax.set_ylim(0, 1.05)
    ax.set_title("success by viewpoint (orange: known views)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_heatmap(matrix, edges, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix, cmap="viridis", origin="upper")
    bins = matrix.shape[0]
    labels = [f"{edges[i]:.0f}" for i in range(bins)]
    ax.set_xticks(range(bins), labels)
    ax.set_yticks(range(bins), labels)
    ax.set_xlabel("crafting view bin (start angle)")
    ax.set_ylabel("test view bin (start angle)")
    for r in range(bins):
        for c in range(bins):
            ax.text(c, r, str(int(matrix[r, c])), ha="center", va="center",
                    color="white", fontsize=9)
    fig.colorbar(im, ax=ax, label="flipped views")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows, axis, path) -> None:
    good = [r for r in rows if "error" not in r]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if good:
        xs = [r["value"] for r in good]
        ax.plot(xs, [r["mean_sr_heldout"] for r in good], "o-",
                label="held-out flip rate")
        ax.plot(xs, [r["mean_sr_known"] for r in good], "s--",
                label="known flip rate")
        ax.plot(xs, [r["mean_validation_accuracy"] for r in good], "^:",
                label="validation accuracy")
    ax.set_xlabel(axis)
    ax.set_ylabel("mean over repeats")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --- experiment report ------------------------------------------------------------

def write_experiment_report(result, out_dir=None, force: bool = False) -> ReportPaths:
    """Serialize one pipeline result: JSON, CSVs, poison export, figures."""
    cfg = result.config
    run_dir = run_directory(cfg, result.master, out_dir)
    _require_fresh(run_dir, force)
    os.makedirs(run_dir, exist_ok=True)
    files = []

    def path(name):
        p = os.path.join(run_dir, name)
        files.append(p)
        return p

    configmod.save_config(cfg, path("config.json"))

    evaluations = result.evaluations
    payload = {
        "name": cfg.name,
        "fingerprint": configmod.fingerprint(cfg),
        "master_seed": result.master,
        "transfer": cfg.transfer,
        "crafting_enabled": cfg.craft.enabled,
        "defense": cfg.defense.kind,
        "repeats": cfg.repeats,
        "aggregate": result.aggregate,
        "per_repeat": [
            {k: ev[k] for k in ("validation_accuracy", "sr_known",
                                "sr_heldout", "sr_overall")}
            for ev in evaluations
        ],
        "target": {
            "y_adv": result.world.target.y_adv,
            "known_views": len(result.world.target.known),
            "heldout_views": len(result.world.target.heldout),
        },
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if result.craft_result is not None:
        cr = result.craft_result
        payload["craft"] = {
            "loss": cr.config.loss,
            "steps": cr.config.steps,
            "retrain_steps": list(cr.retrain_steps),
            "poison_rows": [int(r) for r in cr.poison.ids],
            "final_matching_loss": float(cr.loss_trace[-1]),
            "min_matching_loss": float(min(cr.loss_trace)),
            "max_abs_delta": float(np.abs(cr.poison.deltas).max()),
        }
    payload["content_digest"] = content_digest(payload)
    _write_json(payload, path("report.json"))

    _write_csv(
        [[i, ev["validation_accuracy"], ev["sr_known"], ev["sr_heldout"],
          ev["sr_overall"]] for i, ev in enumerate(evaluations)],
        ["repeat", "validation_accuracy", "sr_known", "sr_heldout", "sr_overall"],
        path("results.csv"))
    _write_csv(
        [[i, row["id"], row["viewpoint"], row["known"], row["predicted"],
          int(row["success"])]
         for i, ev in enumerate(evaluations) for row in ev["variants"]],
        ["repeat", "variant_id", "viewpoint", "known", "predicted", "success"],
        path("variants.csv"))

    if result.craft_result is not None:
        cr = result.craft_result
        craft.save_poisons(cr.poison, path("poisons.bin"), config=cr.config)
        files.append(os.path.join(run_dir, "poisons.bin.json"))
        _write_csv([[s + 1, v] for s, v in enumerate(cr.loss_trace)],
                   ["step", "matching_loss"], path("loss_trace.csv"))
        plot_loss_trace(cr.loss_trace, cr.retrain_steps, path("loss_trace.png"))
    plot_success_by_viewpoint(evaluations, path("success_by_viewpoint.png"))

    return ReportPaths(run_dir=run_dir, report=os.path.join(run_dir, "report.json"),
                       digest=payload["content_digest"], files=files)


def write_failure_manifest(cfg, master: int, stage: str, error: str,
                           out_dir=None) -> str:
    """Partial-results manifest naming the failed stage."""
    run_dir = run_directory(cfg, master, out_dir)
    os.makedirs(run_dir, exist_ok=True)
    manifest = {
        "name": cfg.name,
        "fingerprint": configmod.fingerprint(cfg),
        "master_seed": master,
        "failed_stage": stage,
        "error": error,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    dest = os.path.join(run_dir, "failure.json")
    _write_json(manifest, dest)
    return dest


# --- heatmap report ---------------------------------------------------------------

def write_heatmap_report(matrix, edges, column_views, cfg, master: int,
                         out_dir=None, force: bool = False) -> ReportPaths:
    run_dir = run_directory(cfg, master, out_dir)
    marker = os.path.join(run_dir, "heatmap.csv")
    if os.path.exists(marker) and not force:
        raise FileExistsError(f"{marker} already exists; pass force to overwrite")
    os.makedirs(run_dir, exist_ok=True)
    files = []

    def path(name):
        p = os.path.join(run_dir, name)
        files.append(p)
        return p

    bins = matrix.shape[0]
    _write_csv([[int(matrix[r, c]) for c in range(bins)] for r in range(bins)],
               [f"craft_bin_{c}" for c in range(bins)], path("heatmap.csv"))
    sidecar = {
        "fingerprint": configmod.fingerprint(cfg),
        "master_seed": master,
        "bin_edges_degrees": [float(e) for e in edges],
        "column_view_ids": [int(v.id) for v in column_views],
        "column_view_angles": [float(v.viewpoint) for v in column_views],
    }
    sidecar["content_digest"] = content_digest(
        dict(sidecar, matrix=[[int(x) for x in row] for row in matrix]))
    _write_json(sidecar, path("heatmap_edges.json"))
    plot_heatmap(matrix, edges, path("heatmap.png"))
    return ReportPaths(run_dir=run_dir, report=marker,
                       digest=sidecar["content_digest"], files=files)


# --- ablation report --------------------------------------------------------------

def write_ablation_report(rows, axis: str, cfg, out_dir=None,
                          force: bool = False) -> ReportPaths:
    run_dir = run_directory(cfg, cfg.seed, out_dir)
    marker = os.path.join(run_dir, f"sweep_{axis}.csv")
    if os.path.exists(marker) and not force:
        raise FileExistsError(f"{marker} already exists; pass force to overwrite")
    os.makedirs(run_dir, exist_ok=True)
    files = []

    def path(name):
        p = os.path.join(run_dir, name)
        files.append(p)
        return p

    header = ["axis", "value", "fingerprint", "mean_validation_accuracy",
              "mean_sr_known", "mean_sr_heldout", "mean_sr_overall", "error"]
    table = []
    for row in rows:
        table.append([row.get("axis"), row.get("value"), row.get("fingerprint"),
                      row.get("mean_validation_accuracy", ""),
                      row.get("mean_sr_known", ""),
                      row.get("mean_sr_heldout", ""),
                      row.get("mean_sr_overall", ""),
                      row.get("error", "")])
    _write_csv(table, header, path(f"sweep_{axis}.csv"))
    digest = content_digest({"rows": [
        {k: row.get(k) for k in ("axis", "value", "fingerprint",
                                 "mean_sr_heldout", "error")}
        for row in rows]})
    plot_sweep(rows, axis, path(f"sweep_{axis}.png"))
    return ReportPaths(run_dir=run_dir, report=marker, digest=digest,
                       files=files)


# --- proposition lab report --------------------------------------------------------

def write_proplab_report(summary: dict, out_dir, force: bool = False) -> str:
    os.makedirs(out_dir, exist_ok=True)
    dest = os.path.join(out_dir, "proplab.json")
    if os.path.exists(dest) and not force:
        raise FileExistsError(f"{dest} already exists; pass force to overwrite")
    payload = dict(summary)
    payload["created_at"] = datetime.datetime.now(
        datetime.timezone.utc).isoformat()
    payload["content_digest"] = content_digest(payload)
    _write_json(payload, dest)
    return dest
