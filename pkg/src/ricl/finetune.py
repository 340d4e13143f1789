"""Supervised FCOS finetuning from random or pre-trained initialisation."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .detector import (
    CLS_LOGITS,
    DetectorConfig,
    Params,
    encode_targets,
    flatten_levels,
    forward,
    init_params,
    iou_loss,
    locations,
    preprocess,
)
from .optim import SGD, StepSchedule, clip_grad_norm, zero_grad
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LabeledFrame:
    frame_id: int
    magnitude: np.ndarray  # (C, H, W)
    boxes: list[tuple[float, float, float, float]]
    class_ids: list[int]

    def __post_init__(self):
        if len(self.boxes) != len(self.class_ids):
            raise ValueError(f"frame {self.frame_id}: {len(self.boxes)} boxes but {len(self.class_ids)} class ids")


def subsample_labels(frames: Sequence[LabeledFrame], fraction: float, seed: int) -> list[LabeledFrame]:
    """ceil(fraction * N) frames drawn without replacement; fraction 1.0 keeps canonical order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(frames)
    if fraction == 1.0:
        return list(frames)
    k = math.ceil(fraction * n - 1e-9)
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return [frames[i] for i in np.sort(idx)]


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = (15, 19)
    lr_divisor: float = 10.0
    batch_size: int = 8
    clip_norm: float = 35.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.lr, self.milestones, self.lr_divisor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FinetuneConfig":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


class Diverged(ArithmeticError):
    pass


def init_for_finetune(cfg: DetectorConfig, seed: int, pretrained: Mapping[str, np.ndarray] | None = None) -> Params:
    """Random parameters for ``seed``, with every non-classifier tensor replaced from ``pretrained``.

    The classification logits layer is always the fresh one, so random and
    pre-trained runs with the same seed differ only in the transferred weights.
    """
    params = init_params(cfg, seed=seed)
    if pretrained is None:
        return params
    expected = set(params) - set(CLS_LOGITS)
    given = set(pretrained) - set(CLS_LOGITS)
    if given != expected:
        missing, extra = sorted(expected - given), sorted(given - expected)
        raise ValueError(f"checkpoint does not match the architecture: missing {missing}, unexpected {extra}")
    for k in expected:
        arr = np.asarray(pretrained[k], dtype=np.float64)
        if arr.shape != params[k].shape:
            raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {params[k].shape}")
        params[k].data = arr.copy()
    return params


@dataclass
class FcosTargets:
    cls: np.ndarray  # (N, L, K) one-hot
    reg: np.ndarray  # (N, L, 4)
    ctr: np.ndarray  # (N, L)
    pos: np.ndarray  # (N, L) bool


def build_targets(frames: Sequence[LabeledFrame], cfg: DetectorConfig, locs=None) -> FcosTargets:
    locs = locs if locs is not None else locations(cfg)
    n, n_loc = len(frames), len(locs.xy)
    out = FcosTargets(np.zeros((n, n_loc, cfg.num_classes)), np.zeros((n, n_loc, 4)), np.zeros((n, n_loc)),
                      np.zeros((n, n_loc), bool))
    for i, f in enumerate(frames):
        enc = encode_targets(f.boxes, locs, cfg)
        v = np.flatnonzero(enc.valid)
        out.pos[i] = enc.valid
        out.reg[i] = enc.reg
        out.ctr[i] = enc.centerness
        out.cls[i, v, np.asarray(f.class_ids, dtype=int)[enc.box_index[v]]] = 1.0
    return out


@dataclass
class FcosLoss:
    total: Tensor
    cls: float
    reg: float
    ctr: float
    num_pos: int


def fcos_loss(params: Params, frames: Sequence[LabeledFrame], cfg: DetectorConfig, fcfg: FinetuneConfig,
              locs=None) -> FcosLoss:
    """Focal classification loss over all locations normalised by positives, plus IoU and
    centerness BCE losses averaged over positive locations."""
    tg = build_targets(frames, cfg, locs)
    x = preprocess(np.stack([f.magnitude for f in frames]), cfg)
    out = forward(params, x, cfg, with_cls=True)
    if not all(np.isfinite(t.data).all() for t in out.reg + out.cls + out.ctr):
        raise Diverged("non-finite network outputs")
    n_pos = int(tg.pos.sum())
    cls = flatten_levels(out.cls)
    l_cls = T.sigmoid_focal_loss(cls, tg.cls, fcfg.focal_alpha, fcfg.focal_gamma).sum() * (1.0 / max(n_pos, 1))
    total = l_cls
    l_reg = l_ctr = 0.0
    if n_pos:
        rows = np.flatnonzero(tg.pos.ravel())
        n, n_loc = tg.pos.shape
        reg = flatten_levels(out.reg).reshape(n * n_loc, 4)[rows]
        ctr = flatten_levels(out.ctr).reshape(n * n_loc)[rows]
        reg_loss = iou_loss(reg, tg.reg.reshape(-1, 4)[rows]).mean()
        ctr_loss = T.bce_with_logits(ctr, tg.ctr.ravel()[rows]).mean()
        total = total + reg_loss + ctr_loss
        l_reg, l_ctr = float(reg_loss.data), float(ctr_loss.data)
    return FcosLoss(total, float(l_cls.data), l_reg, l_ctr, n_pos)


@dataclass
class FinetuneEpoch:
    epoch: int
    mean_loss: float
    lr: float


def finetune(params: Params, frames: Sequence[LabeledFrame], cfg: DetectorConfig, fcfg: FinetuneConfig = FinetuneConfig(),
             on_epoch: Callable[[FinetuneEpoch], None] | None = None) -> tuple[Params, list[FinetuneEpoch]]:
    """SGD with step decay over ``fcfg.epochs`` epochs; parameters are updated in place and returned."""
    if not frames:
        raise ValueError("finetuning needs at least one labelled frame")
    bs = fcfg.batch_size
    if len(frames) < bs:
        warnings.warn(f"labelled subset of {len(frames)} frames is smaller than batch size {bs}; using {len(frames)}")
        bs = len(frames)
    rng = np.random.default_rng(fcfg.seed)
    locs = locations(cfg)
    opt = SGD(params, lr=fcfg.lr, momentum=fcfg.momentum, weight_decay=fcfg.weight_decay)
    sched = fcfg.schedule
    history = []
    for epoch in range(1, fcfg.epochs + 1):
        opt.lr = sched.lr_at_epoch(epoch)
        order = rng.permutation(len(frames))
        losses = []
        for s in range(0, len(frames) - bs + 1, bs):
            batch = [frames[i] for i in order[s : s + bs]]
            zero_grad(params)
            loss = fcos_loss(params, batch, cfg, fcfg, locs)
            if not np.isfinite(loss.total.data).all():
                raise Diverged(f"non-finite finetune loss at epoch {epoch}")
            loss.total.backward()
            clip_grad_norm(params, fcfg.clip_norm)
            opt.step()
            losses.append(float(loss.total.data))
        entry = FinetuneEpoch(epoch, float(np.mean(losses)), opt.lr)
        history.append(entry)
        log.debug("finetune %s", asdict(entry))
        if on_epoch is not None:
            on_epoch(entry)
    return params, history
