"""Persisted synthetic datasets.

Layout of a dataset directory::

    manifest.json
    pairs/<pair_id>/frame_t.bin      float64 little-endian magnitudes (C, H, W)
    pairs/<pair_id>/frame_t.json     height, width, channels, frame_id, time_stamp
    pairs/<pair_id>/frame_t1.{bin,json}
    pairs/<pair_id>/reflections_t.json, reflections_t1.json
    labels/<pair_id>.json            ground-truth boxes and class ids

Only ``labels/`` carries class ids or ground-truth boxes; pre-training reads
``pairs/`` alone.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .radar import (
    RDMap,
    Reflection,
    SceneConfig,
    cfar_detect,
    ground_truth_boxes,
    sample_scene,
    simulate_frame,
    step_scene,
)

log = logging.getLogger(__name__)

FORMAT = "ricl-dataset/1"


@dataclass
class Labels:
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    class_ids: list[int] = field(default_factory=list)


@dataclass
class PairRecord:
    pair_id: int
    frame_t: RDMap
    frame_t1: RDMap
    reflections_t: list[Reflection]
    reflections_t1: list[Reflection]
    labels_t: Labels | None = None
    labels_t1: Labels | None = None


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pair_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def simulate_pair(pair_id: int, seed_seq: np.random.SeedSequence, cfg: SceneConfig) -> PairRecord:
    rng = np.random.default_rng(seed_seq)
    scene = sample_scene(cfg, rng)
    scene1 = step_scene(scene, cfg.dt, cfg.radar)
    noise_t, noise_t1 = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    t0 = 10.0 * pair_id
    f_t = simulate_frame(scene, cfg.radar, noise_t, frame_id=2 * pair_id, time_stamp=t0)
    f_t1 = simulate_frame(scene1, cfg.radar, noise_t1, frame_id=2 * pair_id + 1, time_stamp=t0 + cfg.dt)
    detect = dict(guard=cfg.cfar_guard, train=cfg.cfar_train, pfa=cfg.cfar_pfa)

    def labels(sc):
        gt = ground_truth_boxes(sc, cfg)
        return Labels([b for b, _ in gt], [c for _, c in gt])

    return PairRecord(
        pair_id, f_t, f_t1, cfar_detect(f_t, **detect), cfar_detect(f_t1, **detect), labels(scene), labels(scene1)
    )


def simulate_pairs(n_pairs: int, cfg: SceneConfig, seed: int) -> list[PairRecord]:
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    return [simulate_pair(i, s, cfg) for i, s in enumerate(pair_seeds(seed, n_pairs))]


# ---------------------------------------------------------------------------
# file formats


def _pair_name(pair_id: int) -> str:
    return f"{pair_id:06d}"


def write_rdmap(stem: Path, rd: RDMap) -> list[Path]:
    c, h, w = rd.magnitude.shape
    bin_path, meta_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(rd.magnitude, dtype="<f8").tobytes())
    meta = {"height": h, "width": w, "channels": c, "frame_id": rd.frame_id, "time_stamp": rd.time_stamp}
    meta_path.write_bytes(dumps_json(meta))
    return [bin_path, meta_path]


def read_rdmap(stem: Path) -> RDMap:
    meta = json.loads(stem.with_suffix(".json").read_text())
    shape = (meta["channels"], meta["height"], meta["width"])
    data = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if data.size != np.prod(shape):
        raise ValueError(f"{stem.with_suffix('.bin')}: expected {np.prod(shape)} values, found {data.size}")
    return RDMap(data.reshape(shape).astype(np.float64), meta["frame_id"], meta["time_stamp"])


def write_reflections(path: Path, frame_id: int, refl: list[Reflection]) -> Path:
    path.write_bytes(dumps_json({"frame_id": frame_id, "reflections": [asdict(r) for r in refl]}))
    return path


def read_reflections(path: Path) -> list[Reflection]:
    try:
        rec = json.loads(Path(path).read_text())
        return [Reflection(**r) for r in rec["reflections"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"corrupt reflection file {path}: {exc}") from exc


def write_pair(root: Path, rec: PairRecord) -> list[Path]:
    d = root / "pairs" / _pair_name(rec.pair_id)
    d.mkdir(parents=True, exist_ok=True)
    files = write_rdmap(d / "frame_t", rec.frame_t) + write_rdmap(d / "frame_t1", rec.frame_t1)
    files.append(write_reflections(d / "reflections_t.json", rec.frame_t.frame_id, rec.reflections_t))
    files.append(write_reflections(d / "reflections_t1.json", rec.frame_t1.frame_id, rec.reflections_t1))
    if rec.labels_t is not None:
        (root / "labels").mkdir(exist_ok=True)
        lab = root / "labels" / f"{_pair_name(rec.pair_id)}.json"
        frames = [
            {"frame_id": f.frame_id, "boxes": [list(b) for b in lb.boxes], "class_ids": list(lb.class_ids)}
            for f, lb in ((rec.frame_t, rec.labels_t), (rec.frame_t1, rec.labels_t1))
        ]
        lab.write_bytes(dumps_json({"pair_id": rec.pair_id, "frames": frames}))
        files.append(lab)
    return files


def write_dataset(out: str | Path, records: list[PairRecord], meta: dict) -> dict:
    """Write records and a manifest with per-file SHA-256 hashes; returns the manifest."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for rec in records:
        for f in write_pair(root, rec):
            hashes[f.relative_to(root).as_posix()] = sha256_file(f)
    manifest = {
        "format": FORMAT,
        "n_pairs": len(records),
        "pair_ids": [r.pair_id for r in records],
        "empty_pairs": sum(1 for r in records if not r.reflections_t or not r.reflections_t1),
        **meta,
        "files": hashes,
    }
    (root / "manifest.json").write_bytes(dumps_json(manifest))
    return manifest


def generate_dataset(out: str | Path, n_pairs: int, cfg: SceneConfig, seed: int) -> dict:
    records = simulate_pairs(n_pairs, cfg, seed)
    return write_dataset(out, records, {"seed": seed, "scene_config": cfg.to_dict()})


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read dataset manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} manifest")
    return manifest


def verify_manifest(root: str | Path, manifest: dict | None = None) -> list[str]:
    """Relative paths whose content no longer matches the recorded hash."""
    root = Path(root)
    manifest = manifest or read_manifest(root)
    bad = []
    for rel, digest in manifest["files"].items():
        f = root / rel
        if not f.exists() or sha256_file(f) != digest:
            bad.append(rel)
    return bad


def load_pair(root: str | Path, pair_id: int, with_labels: bool = False) -> PairRecord:
    root = Path(root)
    d = root / "pairs" / _pair_name(pair_id)
    rec = PairRecord(
        pair_id,
        read_rdmap(d / "frame_t"),
        read_rdmap(d / "frame_t1"),
        read_reflections(d / "reflections_t.json"),
        read_reflections(d / "reflections_t1.json"),
    )
    if with_labels:
        lab = json.loads((root / "labels" / f"{_pair_name(pair_id)}.json").read_text())
        rec.labels_t, rec.labels_t1 = (
            Labels([tuple(b) for b in f["boxes"]], list(f["class_ids"])) for f in lab["frames"]
        )
    return rec


def load_dataset(root: str | Path, with_labels: bool = False) -> list[PairRecord]:
    manifest = read_manifest(root)
    return [load_pair(root, i, with_labels) for i in manifest["pair_ids"]]
