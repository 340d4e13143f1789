"""Acceptance suite. Each test prints one PASS/FAIL line and the session ends with a summary of all of them.

The benchmark test (criterion 8) runs the full desk-scale experiment and takes tens of minutes on one core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from ricl import tensor as T
from ricl.cli import main
from ricl.dataset import simulate_pairs
from ricl.detector import LEVELS, DetectorConfig, clone_params, decode_boxes, encode_targets, init_params, locations
from ricl.experiment import ExperimentPlan, frame_pairs, labeled_frames, run_experiment_grid
from ricl.finetune import FinetuneConfig
from ricl.metrics import GroundTruth, map50
from ricl.detector import Detection
from ricl.optim import AdamW
from ricl.pretrain import ContrastiveBatch, PretrainConfig, PretrainState, contrastive_loss, ema_update, pretrain_loss, pretrain_step
from ricl.proposals import FramePair, Proposal, ProposalConfig, dbscan, generate_proposals, match_clusters
from ricl.radar import Reflection, SceneConfig
from ricl.tensor import Tensor

TINY = DetectorConfig(input_shape=(32, 32), stem_channels=4, stage_channels=(4, 8, 8), fpn_width=8,
                      head_convs=1, embed_dim=4, proj_hidden=8, crop_size=3)


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_c1_pretrain_loss_gradient(verdict):
    params = init_params(TINY, seed=0)
    # box outputs that line up with the proposals but avoid IoU == 1 and integer sample points
    params["head.reg.pred.w"].data[:] = 0.0
    params["head.reg.pred.b"].data[:] = np.log([3.2, 3.35, 2.9, 3.05])
    target = clone_params(params)
    rng = np.random.default_rng(0)
    m_t, m_t1 = rng.rayleigh(size=(1, 1, 32, 32)), rng.rayleigh(size=(1, 1, 32, 32))
    props = [[Proposal((3.0, 3.0, 9.0, 9.0), 1, 0), Proposal((19.0, 19.0, 25.0, 25.0), 2, 1)]]
    pcfg = PretrainConfig()
    parts = pretrain_loss(params, target, m_t, m_t1, props, props, TINY, pcfg)
    assert parts.con > 0 and parts.reg > 0 and parts.n_queries > 0

    t0 = time.perf_counter()
    err = T.grad_check(lambda: pretrain_loss(params, target, m_t, m_t1, props, props, TINY, pcfg).total,
                       list(params.values()), h=1e-5)
    took = time.perf_counter() - t0
    ok = err < 1e-4 and took < 120
    assert verdict("C1 gradient correctness", ok, f"max rel err {err:.2e} over {sum(p.data.size for p in params.values())} "
                   f"params in {took:.0f}s")


# ---------------------------------------------------------------------------
# 2. contrastive loss oracle


def _scalar_infonce(q, q_lab, k, k_lab, k_tgt, tau):
    total = 0.0
    for i in range(len(q)):
        negs = sum(math.exp(sum(a * b for a, b in zip(q[i], k[j])) / tau) for j in range(len(k)) if k_lab[j] != q_lab[i])
        for j in range(len(k)):
            if k_lab[j] == q_lab[i] and k_tgt[j]:
                pos = math.exp(sum(a * b for a, b in zip(q[i], k[j])) / tau)
                total -= math.log(pos / (pos + negs))
    return total


def _unit(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_c2_contrastive_oracle(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n_inst, d = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        ql = rng.integers(1, n_inst + 1, size=int(rng.integers(1, 9)))
        kl = rng.integers(1, n_inst + 1, size=int(rng.integers(1, 9)))
        q, kt = _unit(rng, len(ql), d), _unit(rng, len(kl), d)
        keys, klab = np.concatenate([q, kt]), np.concatenate([ql, kl])
        ktgt = np.concatenate([np.zeros(len(ql), bool), np.ones(len(kl), bool)])
        tau = float(rng.uniform(0.05, 1.0))
        got = float(contrastive_loss(ContrastiveBatch(Tensor(q), ql, Tensor(keys), klab, ktgt), tau).data)
        ref = _scalar_infonce(q.tolist(), ql.tolist(), keys.tolist(), klab.tolist(), ktgt.tolist(), tau)
        worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))

    one = np.array([[1.0, 0.0]])
    no_neg = float(contrastive_loss(ContrastiveBatch(Tensor(one), np.array([1]), Tensor(one), np.array([1]),
                                                     np.array([True])), 0.5).data)
    keys = np.array([[0.6, 0.8], [0.6, -0.8]])
    sym = float(contrastive_loss(ContrastiveBatch(Tensor(one), np.array([1]), Tensor(keys), np.array([1, 2]),
                                                  np.array([True, True])), 0.5).data)
    ok = worst <= 1e-10 and abs(no_neg) <= 1e-12 and abs(sym - math.log(2)) <= 1e-12
    assert verdict("C2 contrastive-loss oracle", ok,
                   f"max err {worst:.1e}; no-negatives {no_neg:.1e}; symmetric - ln2 {sym - math.log(2):.1e}")


# ---------------------------------------------------------------------------
# 3. proposal algorithm oracles


def _refl(points):
    return [Reflection(int(r), int(d), 1.0, 20.0) for r, d in points]


def _dbscan_oracle(points, eps, min_pts, min_members):
    n = len(points)
    if n == 0:
        return []
    d = [[math.dist(points[i], points[j]) for j in range(n)] for i in range(n)]
    core = [sum(d[i][j] <= eps for j in range(n)) >= min_pts for i in range(n)]
    # connected components of the core eps-graph by flood fill
    comp = [-1] * n
    comps = []
    for s in range(n):
        if core[s] and comp[s] < 0:
            stack, members = [s], set()
            comp[s] = len(comps)
            while stack:
                i = stack.pop()
                members.add(i)
                for j in range(n):
                    if core[j] and comp[j] < 0 and d[i][j] <= eps:
                        comp[j] = len(comps)
                        stack.append(j)
            comps.append(members)
    comps.sort(key=lambda c: min(tuple(points[j]) for j in c))
    members = [set(c) for c in comps]
    for p in range(n):
        if not core[p]:
            cands = [(d[p][q], k) for k, c in enumerate(comps) for q in c if d[p][q] <= eps]
            if cands:
                members[min(cands)[1]].add(p)
    return [sorted(m) for m in members if len(m) > min_members]


def _greedy_oracle(a, b, eps):
    pairs = sorted((math.dist(x, y), i, j) for i, x in enumerate(a) for j, y in enumerate(b))
    used_a, used_b, out = set(), set(), []
    for dd, i, j in pairs:
        if dd < eps and i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            out.append((i, j))
    return sorted(out)


def test_c3_proposal_oracles(verdict):
    rng = np.random.default_rng(3)
    db_bad = mt_bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 31))
        pts = [tuple(p) for p in rng.integers(0, int(rng.integers(4, 30)), size=(n, 2))]
        db_bad += [c.member_indices for c in dbscan(_refl(pts), 2.5, 3, 4)] != _dbscan_oracle(pts, 2.5, 3, 4)
        a = rng.uniform(0, 12, size=(int(rng.integers(0, 7)), 4)).round(3)
        b = rng.uniform(0, 12, size=(int(rng.integers(0, 7)), 4)).round(3)
        mt_bad += match_clusters(a, b, 4.0) != _greedy_oracle(a.tolist(), b.tolist(), 4.0)
    blob = _refl([(10, 10), (10, 11), (11, 10), (11, 11), (12, 11), (11, 12)])
    empty_ok = generate_proposals(blob, []) == ([], []) and generate_proposals([], blob) == ([], [])
    ok = db_bad == 0 and mt_bad == 0 and empty_ok
    assert verdict("C3 proposal oracle equivalence", ok,
                   f"dbscan mismatches {db_bad}/1000, match mismatches {mt_bad}/1000, empty side ok={empty_ok}")


# ---------------------------------------------------------------------------
# 4. defaults


def test_c4_defaults(verdict):
    cli = {p.name: p.default for p in main.commands["propose"].params}
    pc = ProposalConfig()
    sched = FinetuneConfig().schedule
    lrs = [sched.lr_at_epoch(e) for e in (1, 16, 20)]
    ok = (cli["dbscan_eps"] == 2.5 and cli["min_reflections"] == 4 and cli["match_eps"] == 4.0
          and (pc.dbscan_eps, pc.min_reflections, pc.match_eps) == (2.5, 4, 4.0)
          and np.allclose(lrs, [1e-2, 1e-3, 1e-4], rtol=1e-12, atol=0))
    assert verdict("C4 parameter defaults", ok, f"propose {cli['dbscan_eps']}/{cli['min_reflections']}/{cli['match_eps']}, "
                   f"lr at epochs 1/16/20 = {lrs}")


# ---------------------------------------------------------------------------
# 5. box encoding


def test_c5_fcos_encoding(verdict):
    cfg = DetectorConfig()
    locs = locations(cfg)
    rng = np.random.default_rng(5)
    # coordinates on a 1/64 grid, the resolution of every box the pipeline produces
    boxes = []
    while len(boxes) < 1000:
        x0, y0 = rng.integers(0, 62 * 64, 2) / 64
        x1, y1 = x0 + rng.integers(64, 40 * 64) / 64, y0 + rng.integers(64, 40 * 64) / 64
        box = (x0, y0, min(x1, 63.0), min(y1, 63.0))
        if encode_targets([box], locs, cfg).valid.any():
            boxes.append(box)
    exact = all(
        np.all(decode_boxes(locs.xy[e.valid], e.reg[e.valid]) == np.array(b))
        for b in boxes for e in [encode_targets([b], locs, cfg)]
    )

    bad_levels = 0
    ranges = [lv.size_range for lv in LEVELS]
    for b in boxes[:300]:
        enc = encode_targets([b], locs, cfg)
        for i, ((x, y), k) in enumerate(zip(locs.xy, locs.level)):
            l, t, r, bt = x - b[0], y - b[1], b[2] - x, b[3] - y
            m = max(l, t, r, bt)
            want = min(l, t, r, bt) > 0 and ranges[k][0] < m <= ranges[k][1]
            bad_levels += bool(enc.valid[i]) != want
    strides = [lv.stride for lv in LEVELS]
    ok = exact and bad_levels == 0 and strides == [4, 8, 16] and ranges == [(0, 16), (16, 32), (32, np.inf)]
    assert verdict("C5 FCOS encoding", ok, f"round trip exact={exact} on 1000 boxes; "
                   f"level mismatches {bad_levels} over 300 boxes x {len(locs.xy)} locations")


# ---------------------------------------------------------------------------
# 6. mAP


def test_c6_map_evaluator(verdict):
    gts = {0: [GroundTruth((1, 1, 5, 5), 0), GroundTruth((10, 10, 20, 20), 1)], 1: [GroundTruth((3, 3, 9, 9), 2)]}
    perfect = map50({f: [Detection(g.box, 0.9, g.class_id) for g in gs] for f, gs in gts.items()}, gts)[1]
    empty = map50({0: [], 1: []}, gts)[1]
    two = {0: [GroundTruth((0, 0, 10, 10), 0), GroundTruth((20, 20, 30, 30), 0)]}
    half = map50({0: [Detection((0, 0, 10, 10), 0.9, 0), Detection((40, 40, 50, 50), 0.8, 0)]}, two)[1]
    ok = perfect == 1.0 and empty == 0.0 and half == 0.5
    assert verdict("C6 mAP evaluator", ok, f"perfect {perfect}, empty {empty}, 2-GT/TP/FP {half}")


# ---------------------------------------------------------------------------
# 7. EMA and target isolation


def test_c7_ema_and_isolation(verdict):
    params = init_params(TINY, seed=0)
    params["head.reg.pred.w"].data[:] = 0.0
    params["head.reg.pred.b"].data[:] = np.log([3.2, 3.35, 2.9, 3.05])
    rng = np.random.default_rng(7)
    props = [Proposal((3.0, 3.0, 9.0, 9.0), 1, 0), Proposal((19.0, 19.0, 25.0, 25.0), 2, 1)]
    pair = FramePair(rng.rayleigh(size=(1, 32, 32)), rng.rayleigh(size=(1, 32, 32)), props, list(props))
    state = PretrainState(params, clone_params(params), AdamW(params, lr=1e-3))
    before = {k: v.data.copy() for k, v in state.target.items()}
    parts = pretrain_step([pair], state, TINY, PretrainConfig(), lr=1e-3)
    zero_grad = parts is not None and all(not v.grad.any() for v in state.target.values())
    ema_err = max(float(np.abs(state.target[k].data - (0.99 * before[k] + 0.01 * params[k].data)).max()) for k in params)

    bound_ok = True
    for m in (0.5, 0.9, 0.99, 0.995):
        for delta in (1e-3, 1.0, 10.0):
            t, o = {"w": Tensor(np.array([delta]))}, {"w": Tensor(np.zeros(1))}
            for _ in range(math.ceil(math.log(1e-6 / delta) / math.log(m))):
                ema_update(t, o, m)
            bound_ok &= abs(t["w"].data[0]) < 1e-6 * (1 + 1e-9)
    ok = zero_grad and ema_err <= 1e-15 and bound_ok
    assert verdict("C7 EMA and target isolation", ok,
                   f"target grads zero={zero_grad}, EMA step err {ema_err:.1e}, convergence bound holds={bound_ok}")


# ---------------------------------------------------------------------------
# 8. desk-scale benchmark


def test_c8_low_label_benchmark(verdict, tmp_path):
    t0 = time.perf_counter()
    scene, cfg = SceneConfig(), DetectorConfig()
    assert len(scene.classes) == 3
    pairs, dropped = frame_pairs(simulate_pairs(2000, scene, 100))
    from ricl.pretrain import pretrain_run

    state, _ = pretrain_run(pairs, cfg, PretrainConfig())
    pretrained = {k: v.data for k, v in state.online.items()}
    train = labeled_frames(simulate_pairs(500, scene, 200))
    test = labeled_frames(simulate_pairs(200, scene, 300))
    plan = ExperimentPlan(fractions=(1.0, 0.2, 0.1), k=5)
    res = run_experiment_grid(plan, train, test, cfg, pretrained, tmp_path / "grid")
    took = time.perf_counter() - t0

    lines, ok = [], took < 2 * 3600
    for frac in (0.1, 0.2):
        p, r = res.cell("pretrained", frac), res.cell("random", frac)
        pooled = math.sqrt((p["std"] ** 2 + r["std"] ** 2) / 2)
        gap = p["mean"] - r["mean"]
        ok &= gap > pooled
        lines.append(f"@{frac}: pretrained {p['mean']:.3f}+-{p['std']:.3f} vs random {r['mean']:.3f}+-{r['std']:.3f} "
                     f"(gap {gap:.3f}, pooled std {pooled:.3f})")
    p2, r1 = res.cell("pretrained", 0.2)["mean"], res.cell("random", 1.0)["mean"]
    ok &= p2 >= r1 - 0.05
    lines.append(f"pretrained@0.2 {p2:.3f} vs random@1.0 {r1:.3f} - 0.05")
    lines.append(f"{len(pairs)} pre-training pairs with proposals ({dropped} dropped), runtime {took / 60:.1f} min")
    assert verdict("C8 low-label benchmark", ok, "; ".join(lines))


# ---------------------------------------------------------------------------
# 9. determinism


def _pipeline(root: Path, monkeypatch) -> dict[str, bytes]:
    root.mkdir()
    monkeypatch.chdir(root)
    monkeypatch.setenv("RICL_WORKSPACE", "ws")
    Path("tiny.json").write_text('{"input_shape": [64, 64], "stem_channels": 4, "stage_channels": [4, 8, 8], '
                                 '"fpn_width": 8, "head_convs": 1, "embed_dim": 4, "proj_hidden": 8, "crop_size": 3}')
    steps = [
        ["simulate", "--out", "data", "--pairs", "16", "--seed", "9"],
        ["simulate", "--out", "test", "--pairs", "6", "--seed", "10"],
        ["propose", "--dataset", "data"],
        ["pretrain", "--dataset", "data", "--out", "pre.bin", "--detector-config", "tiny.json", "--epochs", "2",
         "--batch-size", "4"],
        ["finetune", "--dataset", "data", "--out", "ft.bin", "--init", "pre.bin", "--fraction", "0.5",
         "--epochs", "2", "--batch-size", "4"],
        ["eval", "--dataset", "test", "--checkpoint", "ft.bin", "--out", "metrics.json"],
        ["grid", "--train", "data", "--test", "test", "--pretrained", "pre.bin", "--fractions", "1.0,0.5", "--k", "2",
         "--epochs", "1", "--batch-size", "4", "--out", "grid"],
    ]
    for s in steps:
        r = CliRunner().invoke(main, s, catch_exceptions=False)
        assert r.exit_code == 0, (s, r.output)
    # the workspace manifest records wall-clock time and the plot is a rendering of summary.json
    skip = {"ws/workspace.json", "grid/map_vs_fraction.svg"}
    return {p.as_posix(): p.read_bytes() for p in sorted(Path(".").rglob("*")) if p.is_file() and p.as_posix() not in skip}


def test_c9_determinism(verdict, tmp_path, monkeypatch):
    a = _pipeline(tmp_path / "a", monkeypatch)
    b = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    stages = {"data/manifest.json", "data/proposals/summary.json", "pre.bin", "ft.bin", "metrics.json", "grid/results.csv",
              "grid/summary.json"}
    ok = not differing and stages <= set(a)
    assert verdict("C9 determinism", ok, f"{len(a)} files compared across all stages, {len(differing)} differ"
                   + (f": {differing[:5]}" if differing else ""))
