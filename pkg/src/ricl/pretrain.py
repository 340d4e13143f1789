"""Instance-contrastive pre-training with an online detector and an EMA target detector.

For a pair of consecutive frames the online network sees frame t and the
target network frame t+1.  Predicted boxes are labelled with proposal
instance ids by IoU; the online box embeddings are queries, target-view
embeddings of the same instance are positives, and every differently
labelled embedding of either view in the batch is a negative.  A FCOS IoU
loss toward the proposals keeps the online regression head grounded.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .detector import (
    BACKGROUND,
    DetectorConfig,
    Params,
    assign_phi,
    clone_params,
    decode_boxes,
    decode_boxes_tensor,
    encode_targets,
    extract_box_embeddings,
    flatten_levels,
    forward,
    init_params,
    iou_loss,
    locations,
    preprocess,
)
from .optim import AdamW, cosine_lr, zero_grad
from .proposals import FramePair, Proposal, flip_box
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    temperature: float = 0.5
    ema_momentum: float = 0.99
    lambda_con: float = 1.0
    lambda_reg: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 12
    batch_size: int = 8
    flip_prob: float = 0.5
    iou_thresh: float = 0.5
    keys_per_instance: int = 4
    include_background: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.lambda_con < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# EMA


def ema_update(target: Mapping[str, Tensor], online: Mapping[str, Tensor], m: float) -> None:
    """In place: w_target <- m * w_target + (1 - m) * w_online."""
    if set(target) != set(online):
        raise ValueError(f"parameter names differ: {sorted(set(target) ^ set(online))}")
    for k, t in target.items():
        o = online[k]
        if t.shape != o.shape:
            raise ValueError(f"{k}: target shape {t.shape} != online shape {o.shape}")
        t.data = m * t.data + (1.0 - m) * o.data


# ---------------------------------------------------------------------------
# contrastive loss


@dataclass
class ContrastiveBatch:
    """Queries and the pooled key set they are contrasted against.

    ``key_is_target`` marks keys from the target view; only those can be
    positives.  Keys sharing a query's label but coming from the online view
    are neither positive nor negative.
    """

    queries: Tensor  # (Q, D)
    query_labels: np.ndarray  # (Q,)
    keys: Tensor  # (K, D)
    key_labels: np.ndarray  # (K,)
    key_is_target: np.ndarray  # (K,) bool

    def __post_init__(self):
        if np.any(self.query_labels == BACKGROUND):
            raise ValueError("queries must carry instance labels")

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        same = self.query_labels[:, None] == self.key_labels[None, :]
        pos = same & self.key_is_target[None, :]
        neg = ~same
        return pos, neg


def contrastive_loss(batch: ContrastiveBatch, temperature: float, reduction: str = "sum") -> Tensor:
    """Box-domain InfoNCE summed over every (query, positive) pair.

    Each term is -log(e^{s+} / (e^{s+} + sum_neg e^{s-})) with s = q.k / tau,
    evaluated as softplus(logsumexp(s-) - s+).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = len(batch.query_labels)
    if q == 0 or len(batch.key_labels) == 0:
        return Tensor(0.0)
    pos, neg = batch.masks()
    n_terms = int(pos.sum())
    if n_terms == 0:
        return Tensor(0.0)
    sim = T.matmul(batch.queries, batch.keys.T) * (1.0 / temperature)
    neg_lse = T.log_sum_exp(sim, axis=1, mask=neg, keepdims=True)
    terms = T.softplus(neg_lse - sim) * pos.astype(np.float64)
    loss = terms.sum()
    if reduction == "mean":
        loss = loss * (1.0 / n_terms)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


# ---------------------------------------------------------------------------
# one step


@dataclass
class LossParts:
    total: Tensor
    con: float
    reg: float
    n_queries: int
    n_keys: int
    n_valid: int


def _select(labels: np.ndarray, ious: np.ndarray, boxes: np.ndarray, k: int, include_background: bool) -> np.ndarray:
    """Per instance, the k highest-IoU labelled predictions with non-degenerate boxes."""
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    chosen = []
    for inst in np.unique(labels):
        if inst == BACKGROUND and not include_background:
            continue
        idx = np.flatnonzero((labels == inst) & ok)
        idx = idx[np.lexsort((idx, -ious[idx]))][:k]
        chosen.append(idx)
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=int)


def _batch_views(x: np.ndarray, params: Params, proposals: Sequence[Sequence[Proposal]], dcfg: DetectorConfig,
                 pcfg: PretrainConfig, locs):
    out = forward(params, x, dcfg)
    reg = flatten_levels(out.reg)
    if not np.isfinite(reg.data).all():
        raise FloatingPointError("non-finite box regression")
    n, n_loc = reg.shape[:2]
    flat_idx, labels, batch_idx = [], [], []
    for i in range(n):
        boxes = decode_boxes(locs.xy, reg.data[i], dcfg.extent)
        lab, iou = assign_phi(boxes, proposals[i], pcfg.iou_thresh)
        sel = _select(lab, iou, boxes, pcfg.keys_per_instance, pcfg.include_background)
        flat_idx.append(i * n_loc + sel)
        # instance ids are unique per pair only; offset them by pair so batches pool cleanly
        labels.append(np.where(lab[sel] == BACKGROUND, BACKGROUND, lab[sel] + 1000 * i))
        batch_idx.append(np.full(len(sel), i))
    flat_idx = np.concatenate(flat_idx).astype(int)
    labels = np.concatenate(labels).astype(int)
    batch_idx = np.concatenate(batch_idx).astype(int)
    if len(flat_idx) == 0:
        return out, reg, None, labels
    sel_reg = reg.reshape(n * n_loc, 4)[flat_idx]
    loc_idx = flat_idx % n_loc
    boxes = decode_boxes_tensor(locs.xy[loc_idx], sel_reg, dcfg.extent)
    z = extract_box_embeddings(params, out.features, boxes, batch_idx, locs.level[loc_idx], dcfg)
    return out, reg, z, labels


def pretrain_loss(online: Params, target: Params, maps_t: np.ndarray, maps_t1: np.ndarray,
                  proposals_t: Sequence[Sequence[Proposal]], proposals_t1: Sequence[Sequence[Proposal]],
                  dcfg: DetectorConfig, pcfg: PretrainConfig) -> LossParts:
    """lambda_con * L_con + lambda_reg * L_reg for a batch of frame pairs."""
    locs = locations(dcfg)
    x_t, x_t1 = preprocess(maps_t, dcfg), preprocess(maps_t1, dcfg)
    try:
        _, reg_q, z_q, lab_q = _batch_views(x_t, online, proposals_t, dcfg, pcfg, locs)
        with T.no_grad():
            _, _, z_k, lab_k = _batch_views(x_t1, target, proposals_t1, dcfg, pcfg, locs)
    except FloatingPointError:
        nan = float("nan")
        return LossParts(Tensor(nan), nan, nan, 0, 0, 0)

    con = Tensor(0.0)
    n_q = 0 if z_q is None else int((lab_q != BACKGROUND).sum())
    n_k = 0 if z_k is None else len(lab_k)
    if z_q is not None and z_k is not None:
        is_q = lab_q != BACKGROUND
        queries = z_q[np.flatnonzero(is_q)] if not is_q.all() else z_q
        batch = ContrastiveBatch(
            queries, lab_q[is_q], T.concat([z_q, z_k], axis=0), np.concatenate([lab_q, lab_k]),
            np.concatenate([np.zeros(len(lab_q), bool), np.ones(len(lab_k), bool)]),
        )
        if len(batch.query_labels):
            con = contrastive_loss(batch, pcfg.temperature, reduction="mean")

    n, n_loc = reg_q.shape[:2]
    rows, targets = [], []
    for i, props in enumerate(proposals_t):
        enc = encode_targets([p.box for p in props], locs, dcfg)
        v = np.flatnonzero(enc.valid)
        rows.append(i * n_loc + v)
        targets.append(enc.reg[v])
    rows = np.concatenate(rows).astype(int)
    reg_loss = Tensor(0.0)
    if len(rows):
        reg_loss = iou_loss(reg_q.reshape(n * n_loc, 4)[rows], np.concatenate(targets)).mean()
    total = con * pcfg.lambda_con + reg_loss * pcfg.lambda_reg
    return LossParts(total, float(con.data), float(reg_loss.data), n_q, n_k, len(rows))


# ---------------------------------------------------------------------------
# training loop


class NonFiniteLoss(ArithmeticError):
    def __init__(self, epoch: int, step: int, last_good: dict[str, np.ndarray] | None):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch, self.step, self.last_good = epoch, step, last_good


@dataclass
class PretrainState:
    online: Params
    target: Params
    optimizer: AdamW
    step: int = 0


def flip_pair(pair: FramePair, width: int) -> FramePair:
    """Mirror both frames along Doppler and their proposals with them; instance ids are kept."""
    f_t, f_t1 = (np.ascontiguousarray(f[..., ::-1]) for f in (pair.frame_t, pair.frame_t1))
    flip = lambda ps: [Proposal(flip_box(p.box, width), p.instance_id, p.source_cluster) for p in ps]
    return FramePair(f_t, f_t1, flip(pair.proposals_t), flip(pair.proposals_t1))


def pretrain_step(pairs: Sequence[FramePair], state: PretrainState, dcfg: DetectorConfig, pcfg: PretrainConfig,
                  lr: float) -> LossParts | None:
    """Gradient step on the online network, then EMA of the target; None if every pair was skipped."""
    usable = [p for p in pairs if p.proposals_t and p.proposals_t1]
    if not usable:
        return None
    zero_grad(state.online)
    parts = pretrain_loss(
        state.online, state.target,
        np.stack([p.frame_t for p in usable]), np.stack([p.frame_t1 for p in usable]),
        [p.proposals_t for p in usable], [p.proposals_t1 for p in usable], dcfg, pcfg,
    )
    if not np.isfinite(parts.total.data).all():
        return parts
    if parts.total.requires_grad:
        parts.total.backward()
    state.optimizer.lr = lr
    state.optimizer.step()
    ema_update(state.target, state.online, pcfg.ema_momentum)
    state.step += 1
    return parts


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    mean_con: float
    mean_reg: float
    lr: float
    skipped_pairs: int


def pretrain_run(pairs: Sequence[FramePair], dcfg: DetectorConfig, pcfg: PretrainConfig,
                 init: Params | None = None,
                 on_epoch: Callable[[EpochLog, PretrainState], None] | None = None) -> tuple[PretrainState, list[EpochLog]]:
    """Full pre-training: AdamW, per-step cosine annealing, random Doppler flips, EMA target.

    ``pairs`` hold (C, H, W) magnitude arrays as frames.
    """
    if not pairs:
        raise ValueError("pre-training needs at least one frame pair")
    rng = np.random.default_rng(pcfg.seed)
    online = init if init is not None else init_params(dcfg, seed=pcfg.seed)
    target = clone_params(online)
    state = PretrainState(online, target, AdamW(online, lr=pcfg.lr, weight_decay=pcfg.weight_decay))
    width = dcfg.input_shape[1]
    steps_per_epoch = math.ceil(len(pairs) / pcfg.batch_size)
    total_steps = steps_per_epoch * pcfg.epochs
    history: list[EpochLog] = []
    last_good = {k: v.data.copy() for k, v in online.items()}
    for epoch in range(1, pcfg.epochs + 1):
        order = rng.permutation(len(pairs))
        flips = rng.random(len(pairs)) < pcfg.flip_prob
        sums = np.zeros(3)
        n_steps, skipped = 0, 0
        lr = pcfg.lr
        for s in range(steps_per_epoch):
            idx = order[s * pcfg.batch_size : (s + 1) * pcfg.batch_size]
            batch = [flip_pair(pairs[i], width) if flips[i] else pairs[i] for i in idx]
            skipped += sum(1 for p in batch if not (p.proposals_t and p.proposals_t1))
            lr = cosine_lr(pcfg.lr, state.step, total_steps)
            parts = pretrain_step(batch, state, dcfg, pcfg, lr)
            if parts is None:
                continue
            if not np.isfinite(parts.total.data).all():
                raise NonFiniteLoss(epoch, s, last_good)
            sums += (float(parts.total.data), parts.con, parts.reg)
            n_steps += 1
        means = sums / max(n_steps, 1)
        entry = EpochLog(epoch, *(float(v) for v in means), lr=lr, skipped_pairs=skipped)
        history.append(entry)
        log.info("pretrain %s", asdict(entry))
        last_good = {k: v.data.copy() for k, v in online.items()}
        if on_epoch is not None:
            on_epoch(entry, state)
    return state, history
