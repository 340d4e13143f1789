"""Command-line entry point: ``ricl simulate | propose | pretrain | finetune | eval | grid``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import click
import numpy as np

from .dataset import (
    dumps_json,
    load_dataset,
    load_pair,
    read_manifest,
    read_reflections,
    sha256_file,
    simulate_pairs,
    verify_manifest,
    write_dataset,
)
from .detector import Detection, DetectorConfig, params_from_arrays
from .experiment import ExperimentPlan, evaluate, ground_truth, labeled_frames, run_experiment_grid
from .finetune import Diverged, FinetuneConfig, finetune, init_for_finetune, subsample_labels
from .metrics import map50
from .pretrain import NonFiniteLoss, PretrainConfig, pretrain_run
from .proposals import FramePair, Metric, Proposal, ProposalConfig, generate_proposals
from .radar import SceneConfig
from .tensor import load_params, save_params

log = logging.getLogger("ricl")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
WORKSPACE_ENV = "RICL_WORKSPACE"


class UsageError(click.ClickException):
    exit_code = EXIT_USAGE


# ---------------------------------------------------------------------------
# workspace bookkeeping


def workspace_root() -> Path:
    return Path(os.environ.get(WORKSPACE_ENV, "ricl-workspace"))


def register_artifact(kind: str, path: Path, config: dict | None = None) -> None:
    """Record an artifact with its content hash in the workspace manifest.

    The manifest carries timestamps, so it is bookkeeping and not itself
    part of any reproducible output.
    """
    root = workspace_root()
    root.mkdir(parents=True, exist_ok=True)
    mpath = root / "workspace.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {"datasets": {}, "checkpoints": {}, "results": {}}
    path = path.resolve()
    target = path / "manifest.json" if path.is_dir() else path
    entry = {
        "path": str(path),
        "sha256": sha256_file(target),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if config is not None:
        entry["config_sha256"] = _config_hash(config)
    manifest.setdefault(kind, {})[entry["sha256"][:16]] = entry
    mpath.write_bytes(dumps_json(manifest))


def check_workspace(root: Path | None = None) -> list[str]:
    """Registered artifacts that are missing or whose content changed."""
    mpath = (root or workspace_root()) / "workspace.json"
    if not mpath.exists():
        return []
    bad = []
    for kind, entries in json.loads(mpath.read_text()).items():
        for key, e in entries.items():
            p = Path(e["path"])
            target = p / "manifest.json" if p.is_dir() else p
            if not target.exists() or sha256_file(target) != e["sha256"]:
                bad.append(f"{kind}/{key}: {e['path']}")
    return bad


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(dumps_json(cfg)).hexdigest()


# ---------------------------------------------------------------------------
# helpers


def _load_json(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except ValueError as exc:
        raise UsageError(f"{what} {p} is not valid JSON: {exc}")


def _merge(cls, file_cfg: dict, **flags):
    """Flag > config file > built-in default."""
    names = {f.name for f in fields(cls)}
    unknown = set(file_cfg) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**file_cfg, **{k: v for k, v in flags.items() if v is not None}}
    try:
        return cls.from_dict(merged) if hasattr(cls, "from_dict") else cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _prepare_file(out: Path, force: bool) -> None:
    if out.exists() and not force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)


def _open_dataset(path: str) -> dict:
    try:
        manifest = read_manifest(path)
    except ValueError as exc:
        raise UsageError(str(exc))
    return manifest


def _verified_dataset(path: str) -> dict:
    manifest = _open_dataset(path)
    bad = verify_manifest(path, manifest)
    if bad:
        raise UsageError(f"dataset {path} fails its content hashes: {', '.join(bad)}")
    return manifest


def _detector_config(path: str | None) -> DetectorConfig:
    return _merge(DetectorConfig, _load_json(path, "detector config"))


def _load_checkpoint(path: str) -> tuple[dict, dict]:
    try:
        return load_params(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}")


def _proposal_dir(dataset: str, proposals: str | None) -> Path:
    return Path(proposals) if proposals else Path(dataset) / "proposals"


def _read_proposals(path: Path) -> tuple[list[Proposal], list[Proposal]]:
    rec = json.loads(path.read_text())
    p_t = [Proposal(tuple(p["box_t"]), p["instance_id"], p.get("cluster_t", -1)) for p in rec["proposals"]]
    p_t1 = [Proposal(tuple(p["box_t1"]), p["instance_id"], p.get("cluster_t1", -1)) for p in rec["proposals"]]
    return p_t, p_t1


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int) -> None:
    """Radar instance contrastive pre-training toolkit."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory to create.")
@click.option("--pairs", "n_pairs", required=True, type=click.IntRange(min=1), help="Number of frame pairs.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--scene-config", type=click.Path(), default=None, help="JSON scene configuration.")
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def simulate(out, n_pairs, seed, scene_config, force):
    """Simulate labelled range-Doppler frame pairs with CFAR reflections."""
    try:
        cfg = SceneConfig.from_dict(_load_json(scene_config, "scene config")) if scene_config else SceneConfig()
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid scene config {scene_config}: {exc}")
    out = Path(out)
    _prepare_out(out, force)
    records = simulate_pairs(n_pairs, cfg, seed)
    manifest = write_dataset(out, records, {"seed": seed, "scene_config": cfg.to_dict()})
    register_artifact("datasets", out, cfg.to_dict())
    click.echo(f"pairs: {manifest['n_pairs']} empty: {manifest['empty_pairs']}")


@main.command()
@click.option("--dataset", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory [dataset/proposals].")
@click.option("--dbscan-eps", default=2.5, show_default=True, type=float)
@click.option("--min-reflections", default=4, show_default=True, type=int,
              help="A cluster needs strictly more reflections than this.")
@click.option("--match-eps", default=4.0, show_default=True, type=float)
@click.option("--metric", type=click.Choice([m.value for m in Metric]), default="euclidean", show_default=True)
@click.option("--force", is_flag=True)
def propose(dataset, out, dbscan_eps, min_reflections, match_eps, metric, force):
    """Cluster reflections, match clusters across each pair and write proposals."""
    manifest = _open_dataset(dataset)
    out = _proposal_dir(dataset, out)
    _prepare_out(out, force)
    bad = set(verify_manifest(dataset, manifest))
    pcfg = ProposalConfig(dbscan_eps, min_reflections, match_eps, metric=Metric(metric))
    shape = tuple(manifest["scene_config"]["radar"][k] for k in ("n_range", "n_doppler"))
    kept, dropped, errors = [], [], []
    for pid in manifest["pair_ids"]:
        d = Path(dataset) / "pairs" / f"{pid:06d}"
        rels = [f"pairs/{pid:06d}/reflections_t.json", f"pairs/{pid:06d}/reflections_t1.json"]
        corrupt = [r for r in rels if r in bad]
        try:
            if corrupt:
                raise ValueError(f"corrupt reflection file {Path(dataset) / corrupt[0]}: content hash mismatch")
            refl_t, refl_t1 = (read_reflections(Path(dataset) / r) for r in rels)
        except ValueError as exc:
            errors.append(str(exc))
            dropped.append(pid)
            continue
        p_t, p_t1 = generate_proposals(refl_t, refl_t1, pcfg, shape)
        if not p_t:
            dropped.append(pid)
            continue
        rec = {
            "pair_id": pid,
            "frame_t_id": json.loads((d / "frame_t.json").read_text())["frame_id"],
            "frame_t1_id": json.loads((d / "frame_t1.json").read_text())["frame_id"],
            "proposals": [
                {"instance_id": a.instance_id, "box_t": list(a.box), "box_t1": list(b.box),
                 "cluster_t": a.source_cluster, "cluster_t1": b.source_cluster}
                for a, b in zip(p_t, p_t1)
            ],
        }
        (out / f"{pid:06d}.json").write_bytes(dumps_json(rec))
        kept.append(pid)
    summary = {
        "dataset_manifest_sha256": sha256_file(Path(dataset) / "manifest.json"),
        "config": {"dbscan_eps": dbscan_eps, "min_reflections": min_reflections, "match_eps": match_eps,
                   "metric": metric},
        "kept": kept,
        "dropped": dropped,
        "errors": errors,
    }
    (out / "summary.json").write_bytes(dumps_json(summary))
    for e in errors:
        click.echo(f"skipped: {e}", err=True)
    click.echo(f"kept: {len(kept)} dropped: {len(dropped)} total: {len(manifest['pair_ids'])}")


def _pretrain_pairs(dataset: str, proposals: str | None) -> list[FramePair]:
    pdir = _proposal_dir(dataset, proposals)
    summary_path = pdir / "summary.json"
    if not summary_path.exists():
        raise UsageError(f"no proposals found at {pdir}; run 'ricl propose' first")
    summary = json.loads(summary_path.read_text())
    if summary["dataset_manifest_sha256"] != sha256_file(Path(dataset) / "manifest.json"):
        raise UsageError(f"proposals in {pdir} were generated from a different dataset")
    pairs = []
    for pid in summary["kept"]:
        rec = load_pair(dataset, pid)
        p_t, p_t1 = _read_proposals(pdir / f"{pid:06d}.json")
        pairs.append(FramePair(rec.frame_t.magnitude, rec.frame_t1.magnitude, p_t, p_t1))
    if not pairs:
        raise UsageError(f"no usable pairs in {pdir}")
    return pairs


@main.command()
@click.option("--dataset", required=True, type=click.Path())
@click.option("--proposals", type=click.Path(), default=None, help="Proposal directory [dataset/proposals].")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint file to write.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON pre-training config.")
@click.option("--detector-config", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--temperature", type=float, default=None)
@click.option("--ema-momentum", type=float, default=None)
@click.option("--flip-prob", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
def pretrain(dataset, proposals, out, config_path, detector_config, epochs, batch_size, lr, weight_decay,
             temperature, ema_momentum, flip_prob, seed, force):
    """Instance-contrastive pre-training on proposal-carrying frame pairs."""
    pcfg = _merge(PretrainConfig, _load_json(config_path, "pre-training config"), epochs=epochs,
                  batch_size=batch_size, lr=lr, weight_decay=weight_decay, temperature=temperature,
                  ema_momentum=ema_momentum, flip_prob=flip_prob, seed=seed)
    dcfg = _detector_config(detector_config)
    _verified_dataset(dataset)
    out = Path(out)
    _prepare_file(out, force)
    pairs = _pretrain_pairs(dataset, proposals)
    meta = {"kind": "pretrained", "detector_config": dcfg.to_dict(), "pretrain_config": asdict(pcfg),
            "dataset_manifest_sha256": sha256_file(Path(dataset) / "manifest.json")}
    log_path = out.with_suffix(".log.jsonl")
    lines: list[bytes] = []

    def on_epoch(entry, state):
        lines.append((json.dumps(asdict(entry), sort_keys=True) + "\n").encode())
        log_path.write_bytes(b"".join(lines))
        click.echo(json.dumps(asdict(entry), sort_keys=True))

    try:
        state, _ = pretrain_run(pairs, dcfg, pcfg, on_epoch=on_epoch)
    except NonFiniteLoss as exc:
        if exc.last_good is not None:
            save_params(out, exc.last_good, {**meta, "aborted": str(exc)})
        click.echo(f"error: {exc}; last finite checkpoint kept at {out}", err=True)
        sys.exit(EXIT_NUMERIC)
    save_params(out, state.online, meta)
    register_artifact("checkpoints", out, meta)
    click.echo(f"checkpoint: {out}")


@main.command("finetune")
@click.option("--dataset", required=True, type=click.Path(), help="Labelled dataset.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--init", "init_path", type=click.Path(), default=None, help="Pre-trained checkpoint; random if omitted.")
@click.option("--fraction", type=float, default=1.0, show_default=True)
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON finetuning config.")
@click.option("--detector-config", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
def finetune_cmd(dataset, out, init_path, fraction, config_path, detector_config, epochs, batch_size, lr, seed, force):
    """Supervised finetuning on a labelled subset."""
    fcfg = _merge(FinetuneConfig, _load_json(config_path, "finetuning config"), epochs=epochs,
                  batch_size=batch_size, lr=lr, seed=seed)
    _verified_dataset(dataset)
    pretrained, dcfg = None, _detector_config(detector_config)
    if init_path is not None:
        pretrained, pmeta = _load_checkpoint(init_path)
        if detector_config is None and "detector_config" in pmeta:
            dcfg = DetectorConfig.from_dict(pmeta["detector_config"])
    out = Path(out)
    _prepare_file(out, force)
    frames = labeled_frames(_load_labelled(dataset))
    try:
        subset = subsample_labels(frames, fraction, fcfg.seed)
        params = init_for_finetune(dcfg, fcfg.seed, pretrained)
    except ValueError as exc:
        raise UsageError(str(exc))
    try:
        params, hist = finetune(params, subset, dcfg, fcfg)
    except Diverged as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    meta = {"kind": "finetuned", "detector_config": dcfg.to_dict(), "finetune_config": fcfg.to_dict(),
            "fraction": fraction, "init": str(init_path) if init_path else "random",
            "init_sha256": sha256_file(init_path) if init_path else None,
            "dataset_manifest_sha256": sha256_file(Path(dataset) / "manifest.json"),
            "final_loss": hist[-1].mean_loss}
    save_params(out, params, meta)
    register_artifact("checkpoints", out, meta)
    click.echo(f"frames: {len(subset)} final loss: {hist[-1].mean_loss:.4f}")
    click.echo(f"checkpoint: {out}")


def _load_labelled(dataset: str):
    try:
        return load_dataset(dataset, with_labels=True)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset {dataset} has no labels: {exc.filename}")


def _read_detections(path: str) -> dict[int, list[Detection]]:
    rec = _load_json(path, "detections file")
    try:
        return {
            int(f["frame_id"]): [Detection(tuple(d["box"]), float(d["score"]), int(d["class_id"])) for d in f["detections"]]
            for f in rec["frames"]
        }
    except (KeyError, TypeError) as exc:
        raise UsageError(f"malformed detections file {path}: {exc}")


@main.command("eval")
@click.option("--dataset", required=True, type=click.Path(), help="Labelled test dataset.")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--detections", type=click.Path(), default=None,
              help="JSON detections {frames: [{frame_id, detections: [{box, score, class_id}]}]} instead of a checkpoint.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Metrics JSON to write.")
def eval_cmd(dataset, checkpoint, detections, out):
    """mAP@0.5 of a checkpoint or a detections file on the first frame of each labelled pair."""
    if (checkpoint is None) == (detections is None):
        raise UsageError("give exactly one of --checkpoint and --detections")
    _verified_dataset(dataset)
    frames = labeled_frames(_load_labelled(dataset))
    if checkpoint is not None:
        arrays, meta = _load_checkpoint(checkpoint)
        dcfg = DetectorConfig.from_dict(meta.get("detector_config", {}))
        per_class, m = evaluate(params_from_arrays(arrays, requires_grad=False), frames, dcfg)
    else:
        per_class, m = map50(_read_detections(detections), ground_truth(frames))
    metrics = {"map50": m, "per_class_ap": {str(k): v for k, v in per_class.items()}, "n_frames": len(frames)}
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(dumps_json(metrics))
    click.echo(f"mAP@0.5 = {m:.4f}")


def _float_list(ctx, param, value):
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")


@main.command()
@click.option("--train", "train_path", required=True, type=click.Path(), help="Labelled training dataset.")
@click.option("--test", "test_path", required=True, type=click.Path(), help="Labelled test dataset.")
@click.option("--pretrained", type=click.Path(), default=None, help="Pre-trained checkpoint.")
@click.option("--fractions", default="1.0,0.5,0.2,0.1,0.05", show_default=True, callback=_float_list)
@click.option("--k", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Fold seeds are seed, seed+1, ...")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON finetuning config.")
@click.option("--detector-config", type=click.Path(), default=None, help="Used when no checkpoint is given.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
def grid(train_path, test_path, pretrained, fractions, k, seed, epochs, batch_size, config_path, detector_config,
         out, force):
    """Random vs pre-trained finetuning over label fractions with k seeded folds."""
    fcfg = _merge(FinetuneConfig, _load_json(config_path, "finetuning config"), epochs=epochs, batch_size=batch_size)
    inits = ("random", "pretrained") if pretrained else ("random",)
    try:
        plan = ExperimentPlan(fractions, k, tuple(range(seed, seed + k)), inits, fcfg)
    except ValueError as exc:
        raise UsageError(str(exc))
    for p in (train_path, test_path):
        _verified_dataset(p)
    arrays, dcfg = None, _detector_config(detector_config)
    if pretrained:
        arrays, meta = _load_checkpoint(pretrained)
        dcfg = DetectorConfig.from_dict(meta.get("detector_config", {}))
    out = Path(out)
    _prepare_out(out, force)
    train = labeled_frames(_load_labelled(train_path))
    test = labeled_frames(_load_labelled(test_path))
    result = run_experiment_grid(plan, train, test, dcfg, arrays, out)
    for s in result.summary:
        click.echo(f"{s['init']:>10} {s['fraction']:>5}: {s['mean']:.4f} +- {s['std']:.4f} (n={s['n']}, nan={s['n_nan']})")
    register_artifact("results", out / "results.csv")
    if any(s["n_nan"] for s in result.summary):
        click.echo("error: some runs diverged", err=True)
        sys.exit(EXIT_NUMERIC)
