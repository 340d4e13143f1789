"""Label-fraction experiments: random vs pre-trained initialisation, k seeded folds per cell."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import PairRecord, dumps_json
from .detector import DetectorConfig, InferenceConfig, detect
from .finetune import Diverged, FinetuneConfig, LabeledFrame, finetune, init_for_finetune, subsample_labels
from .metrics import GroundTruth, map50
from .proposals import FramePair, ProposalConfig, generate_proposals

log = logging.getLogger(__name__)

FRACTION_GRID = (1.0, 0.5, 0.2, 0.1, 0.05)
INIT_MODES = ("random", "pretrained")


@dataclass(frozen=True)
class ExperimentPlan:
    fractions: tuple[float, ...] = FRACTION_GRID
    k: int = 5
    seeds: tuple[int, ...] | None = None
    inits: tuple[str, ...] = INIT_MODES
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        bad = [f for f in self.fractions if f not in FRACTION_GRID]
        if bad:
            raise ValueError(f"fractions {bad} are not in the grid {FRACTION_GRID}")
        if self.seeds is not None and len(self.seeds) != self.k:
            raise ValueError(f"{len(self.seeds)} seeds given for k={self.k}")
        unknown = set(self.inits) - set(INIT_MODES)
        if unknown:
            raise ValueError(f"unknown init modes {sorted(unknown)}")

    @property
    def fold_seeds(self) -> tuple[int, ...]:
        return self.seeds if self.seeds is not None else tuple(range(self.k))


# ---------------------------------------------------------------------------
# dataset conversion


def frame_pairs(records: Sequence[PairRecord], pcfg: ProposalConfig = ProposalConfig(),
                map_shape: tuple[int, int] = (64, 64)) -> tuple[list[FramePair], int]:
    """Proposal-carrying frame pairs and the number of pairs dropped for lacking matched proposals."""
    pairs, dropped = [], 0
    for r in records:
        p_t, p_t1 = generate_proposals(r.reflections_t, r.reflections_t1, pcfg, map_shape)
        if not p_t:
            dropped += 1
            continue
        pairs.append(FramePair(r.frame_t.magnitude, r.frame_t1.magnitude, p_t, p_t1))
    return pairs, dropped


def labeled_frames(records: Sequence[PairRecord]) -> list[LabeledFrame]:
    """The first frame of each labelled pair."""
    out = []
    for r in records:
        if r.labels_t is None:
            raise ValueError(f"pair {r.pair_id} carries no labels")
        out.append(LabeledFrame(r.frame_t.frame_id, r.frame_t.magnitude, list(r.labels_t.boxes), list(r.labels_t.class_ids)))
    return out


def ground_truth(frames: Sequence[LabeledFrame]) -> dict[int, list[GroundTruth]]:
    return {f.frame_id: [GroundTruth(tuple(b), c) for b, c in zip(f.boxes, f.class_ids)] for f in frames}


def evaluate(params, frames: Sequence[LabeledFrame], cfg: DetectorConfig,
             icfg: InferenceConfig = InferenceConfig()) -> tuple[dict[int, float], float]:
    dets = detect(params, np.stack([f.magnitude for f in frames]), cfg, icfg)
    return map50({f.frame_id: d for f, d in zip(frames, dets)}, ground_truth(frames))


# ---------------------------------------------------------------------------
# grid


@dataclass
class GridResult:
    rows: list[dict]  # init, fraction, fold, map50
    summary: list[dict]  # init, fraction, mean, std, n, n_nan

    def cell(self, init: str, fraction: float) -> dict:
        for s in self.summary:
            if s["init"] == init and s["fraction"] == fraction:
                return s
        raise KeyError((init, fraction))


def run_cell(init: str, fraction: float, fold: int, seed: int, train: Sequence[LabeledFrame],
             test: Sequence[LabeledFrame], cfg: DetectorConfig, plan: ExperimentPlan,
             pretrained: Mapping[str, np.ndarray] | None) -> float:
    """One seeded finetune + test evaluation; NaN when training diverges."""
    subset = subsample_labels(train, fraction, seed)
    params = init_for_finetune(cfg, seed, pretrained if init == "pretrained" else None)
    fcfg = FinetuneConfig.from_dict({**plan.finetune.to_dict(), "seed": seed})
    try:
        finetune(params, subset, cfg, fcfg)
    except Diverged as exc:
        log.warning("run %s/%s/fold %d diverged: %s", init, fraction, fold, exc)
        return float("nan")
    _, m = evaluate(params, test, cfg, plan.inference)
    log.info("cell init=%s fraction=%s fold=%d map50=%.4f", init, fraction, fold, m)
    return m


def summarise(rows: Sequence[dict]) -> list[dict]:
    cells: dict[tuple[str, float], list[float]] = {}
    for r in rows:
        cells.setdefault((r["init"], r["fraction"]), []).append(r["map50"])
    out = []
    for (init, frac), vals in cells.items():
        v = np.array(vals, dtype=np.float64)
        n_nan = int((~np.isfinite(v)).sum())
        # a diverged fold poisons the cell rather than being dropped
        mean = float(v.mean())
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0 * mean
        out.append({"init": init, "fraction": frac, "mean": mean, "std": std, "n": len(v), "n_nan": n_nan})
    return out


def run_experiment_grid(plan: ExperimentPlan, train: Sequence[LabeledFrame], test: Sequence[LabeledFrame],
                        cfg: DetectorConfig, pretrained: Mapping[str, np.ndarray] | None = None,
                        out_dir: str | Path | None = None) -> GridResult:
    """Every (init, fraction, fold) run in a fixed order; writes the table, summary and plot when ``out_dir`` is set."""
    if "pretrained" in plan.inits and pretrained is None:
        raise ValueError("the plan requests pretrained runs but no checkpoint was given")
    rows = []
    for init in plan.inits:
        for frac in plan.fractions:
            for fold, seed in enumerate(plan.fold_seeds):
                m = run_cell(init, frac, fold, seed, train, test, cfg, plan, pretrained)
                rows.append({"init": init, "fraction": frac, "fold": fold, "map50": m})
    result = GridResult(rows, summarise(rows))
    if out_dir is not None:
        write_grid(out_dir, result)
    return result


# ---------------------------------------------------------------------------
# outputs


def results_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["init", "fraction", "fold", "map50"])
    for r in rows:
        w.writerow([r["init"], repr(float(r["fraction"])), r["fold"], repr(float(r["map50"]))])
    return buf.getvalue()


def write_grid(out_dir: str | Path, result: GridResult) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "summary": out / "summary.json", "plot": out / "map_vs_fraction.svg"}
    paths["results"].write_text(results_csv(result.rows))
    # json has no NaN; store it as null
    clean = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in s.items()} for s in result.summary]
    paths["summary"].write_bytes(dumps_json({"cells": clean}))
    plot_grid(result.summary, paths["plot"])
    return paths


def plot_grid(summary: Sequence[dict], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for init in INIT_MODES:
        cells = sorted((s for s in summary if s["init"] == init), key=lambda s: s["fraction"])
        if not cells:
            continue
        fr = [100 * s["fraction"] for s in cells]
        mean = np.array([s["mean"] for s in cells], dtype=float)
        std = np.array([s["std"] for s in cells], dtype=float)
        ax.errorbar(fr, 100 * mean, yerr=100 * np.nan_to_num(std), marker="o", capsize=3, label=init)
    ax.set_xscale("log")
    ax.set_xlabel("labelled data (%)")
    ax.set_ylabel("mAP@0.5 (%)")
    ax.legend()
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "ricl"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
