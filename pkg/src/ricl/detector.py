"""Anchor-free FCOS-style detector on range-Doppler maps.

Backbone (stem + three conv stages giving C2/C3/C4), a top-down FPN giving
P2/P3/P4 at strides 4/8/16, and heads shared across levels:

* regression tower -> exp(scale_level * pred) distances (l, t, r, b), plus centerness
* classification tower -> class logits (finetune); the same tower applied to
  box crops is the contrastive head, followed by the projector MLP

Box coordinates are (x_min, y_min, x_max, y_max) with x along Doppler bins and
y along range bins; bin i is centred on coordinate i.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

BACKGROUND = -1
INF = math.inf


@dataclass(frozen=True)
class LevelSpec:
    name: str
    stride: int
    size_range: tuple[float, float]

    def contains(self, m):
        lo, hi = self.size_range
        return (m > lo) & (m <= hi)


LEVELS = (
    LevelSpec("P2", 4, (0.0, 16.0)),
    LevelSpec("P3", 8, (16.0, 32.0)),
    LevelSpec("P4", 16, (32.0, INF)),
)


@dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 1
    input_shape: tuple[int, int] = (64, 64)  # (H range bins, W doppler bins)
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    fpn_width: int = 32
    head_convs: int = 2
    num_classes: int = 3
    embed_dim: int = 32
    proj_hidden: int = 64
    crop_size: int = 7
    group_size: int = 4
    levels: tuple[LevelSpec, ...] = LEVELS
    # log1p(magnitude) is shifted and scaled by these before the stem
    input_shift: float = 0.7
    input_scale: float = 1.0

    def __post_init__(self):
        h, w = self.input_shape
        if h % 16 or w % 16:
            raise ValueError(f"input dims must be divisible by 16, got {h}x{w}")

    @property
    def extent(self) -> tuple[float, float]:
        """(x_max, y_max) of the image frame."""
        h, w = self.input_shape
        return float(w - 1), float(h - 1)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "levels"}
        d["stage_channels"] = list(self.stage_channels)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectorConfig":
        d = dict(d)
        d.pop("levels", None)
        for k in ("stage_channels", "input_shape"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


Params = dict  # str -> Tensor


# ---------------------------------------------------------------------------
# parameters


def _conv_init(rng, cout, cin, k, std=None):
    if std is None:
        std = math.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, (cout, cin, k, k))


def init_params(cfg: DetectorConfig, seed: int = 0) -> Params:
    """Fresh parameters, He-normal backbone and std-0.01 head convs."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def gn(prefix, c):
        p[prefix + ".g"] = np.ones(c)
        p[prefix + ".b"] = np.zeros(c)

    p["stem.conv.w"] = _conv_init(rng, cfg.stem_channels, cfg.in_channels, 3)
    gn("stem.gn", cfg.stem_channels)
    cin = cfg.stem_channels
    for name, c in zip(("c2", "c3", "c4"), cfg.stage_channels):
        p[f"{name}.conv1.w"] = _conv_init(rng, c, cin, 3)
        gn(f"{name}.gn1", c)
        p[f"{name}.conv2.w"] = _conv_init(rng, c, c, 3)
        gn(f"{name}.gn2", c)
        cin = c
    f = cfg.fpn_width
    for lvl, c in zip((2, 3, 4), cfg.stage_channels):
        p[f"fpn.lat{lvl}.w"] = rng.normal(0.0, math.sqrt(1.0 / c), (f, c, 1, 1))
        p[f"fpn.lat{lvl}.b"] = np.zeros(f)
    for branch in ("reg", "cls"):
        for i in range(1, cfg.head_convs + 1):
            p[f"head.{branch}.conv{i}.w"] = _conv_init(rng, f, f, 3, std=0.01)
            gn(f"head.{branch}.gn{i}", f)
    p["head.reg.pred.w"] = _conv_init(rng, 4, f, 3, std=0.01)
    p["head.reg.pred.b"] = np.zeros(4)
    p["head.ctr.w"] = _conv_init(rng, 1, f, 3, std=0.01)
    p["head.ctr.b"] = np.zeros(1)
    for lvl in cfg.levels:
        p[f"head.scale.{lvl.name}"] = np.ones(1)
    p.update(init_cls_logits(cfg, rng))
    p["proj.fc1.w"] = rng.normal(0.0, math.sqrt(2.0 / f), (cfg.proj_hidden, f))
    p["proj.fc1.b"] = np.zeros(cfg.proj_hidden)
    p["proj.fc2.w"] = rng.normal(0.0, math.sqrt(1.0 / cfg.proj_hidden), (cfg.embed_dim, cfg.proj_hidden))
    p["proj.fc2.b"] = np.zeros(cfg.embed_dim)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


CLS_LOGITS = ("head.cls.logits.w", "head.cls.logits.b")


def init_cls_logits(cfg: DetectorConfig, rng: np.random.Generator, prior: float = 0.01) -> dict[str, np.ndarray]:
    return {
        CLS_LOGITS[0]: _conv_init(rng, cfg.num_classes, cfg.fpn_width, 3, std=0.01),
        CLS_LOGITS[1]: np.full(cfg.num_classes, -math.log((1 - prior) / prior)),
    }


def clone_params(params: Mapping[str, Tensor], requires_grad: bool = True) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


def params_from_arrays(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> Params:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad, name=k) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# forward


def preprocess(magnitude, cfg: DetectorConfig) -> np.ndarray:
    """(C,H,W) or (N,C,H,W) linear magnitudes -> normalised log-magnitudes."""
    x = np.log1p(np.asarray(magnitude, dtype=np.float64))
    return (x - cfg.input_shift) / cfg.input_scale


def _conv_gn_relu(p, x, conv, gn, stride=1, group=4):
    x = T.conv2d(x, p[conv], stride=stride, pad=1)
    return T.relu(T.group_norm(x, p[gn + ".g"], p[gn + ".b"], channels_per_group=group))


@dataclass
class Outputs:
    features: list[Tensor]  # per level (N, F, h, w)
    reg: list[Tensor]  # (N, 4, h, w), strictly positive
    ctr: list[Tensor]  # (N, 1, h, w) logits
    cls: list[Tensor] | None = None  # (N, K, h, w) logits


def backbone_fpn(params: Params, x, cfg: DetectorConfig) -> list[Tensor]:
    g = cfg.group_size
    x = _conv_gn_relu(params, x, "stem.conv.w", "stem.gn", stride=2, group=g)
    cs = []
    for name in ("c2", "c3", "c4"):
        x = _conv_gn_relu(params, x, f"{name}.conv1.w", f"{name}.gn1", stride=2, group=g)
        x = _conv_gn_relu(params, x, f"{name}.conv2.w", f"{name}.gn2", stride=1, group=g)
        cs.append(x)
    lat = [T.conv2d(c, params[f"fpn.lat{i}.w"], params[f"fpn.lat{i}.b"]) for i, c in zip((2, 3, 4), cs)]
    p4 = lat[2]
    p3 = lat[1] + T.upsample_nearest2x(p4)
    p2 = lat[0] + T.upsample_nearest2x(p3)
    return [p2, p3, p4]


def _tower(params, x, branch, cfg):
    for i in range(1, cfg.head_convs + 1):
        x = _conv_gn_relu(params, x, f"head.{branch}.conv{i}.w", f"head.{branch}.gn{i}", group=cfg.group_size)
    return x


def forward(params: Params, x, cfg: DetectorConfig, with_cls: bool = False) -> Outputs:
    """Run the detector on a preprocessed (N, C, H, W) batch."""
    x = T.as_tensor(x)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ValueError(f"input dims must be divisible by 16, got {h}x{w}")
    feats = backbone_fpn(params, x, cfg)
    regs, ctrs, clss = [], [], []
    for lvl, f in zip(cfg.levels, feats):
        t = _tower(params, f, "reg", cfg)
        raw = T.conv2d(t, params["head.reg.pred.w"], params["head.reg.pred.b"], pad=1)
        regs.append(T.exp(raw * params[f"head.scale.{lvl.name}"]))
        ctrs.append(T.conv2d(t, params["head.ctr.w"], params["head.ctr.b"], pad=1))
        if with_cls:
            c = _tower(params, f, "cls", cfg)
            clss.append(T.conv2d(c, params[CLS_LOGITS[0]], params[CLS_LOGITS[1]], pad=1))
    return Outputs(feats, regs, ctrs, clss if with_cls else None)


def flatten_levels(maps: list[Tensor]) -> Tensor:
    """Per-level (N, D, h, w) -> (N, L, D) in level-major, row-major location order."""
    flat = []
    for m in maps:
        n, d, h, w = m.shape
        flat.append(m.transpose(0, 2, 3, 1).reshape(n, h * w, d))
    return T.concat(flat, axis=1)


@dataclass(frozen=True)
class Locations:
    xy: np.ndarray  # (L, 2) input-pixel (x, y)
    level: np.ndarray  # (L,) index into cfg.levels
    stride: np.ndarray  # (L,)


def locations(cfg: DetectorConfig) -> Locations:
    h, w = cfg.input_shape
    xy, level, stride = [], [], []
    for k, lvl in enumerate(cfg.levels):
        s = lvl.stride
        ys, xs = np.meshgrid(np.arange(h // s), np.arange(w // s), indexing="ij")
        pts = np.stack([s * (xs.ravel() + 0.5), s * (ys.ravel() + 0.5)], axis=1)
        xy.append(pts)
        level.append(np.full(len(pts), k))
        stride.append(np.full(len(pts), s))
    return Locations(np.concatenate(xy), np.concatenate(level), np.concatenate(stride))


# ---------------------------------------------------------------------------
# target encoding / decoding


@dataclass
class RegressionTarget:
    reg: np.ndarray  # (L, 4) (l, t, r, b)
    valid: np.ndarray  # (L,) bool
    box_index: np.ndarray  # (L,) int, -1 where invalid
    centerness: np.ndarray  # (L,)


def encode_targets(boxes, locs: Locations, cfg: DetectorConfig) -> RegressionTarget:
    """FCOS targets: a location inside a box is valid on the level whose size range holds max(l,t,r,b).

    Where several boxes qualify, the smallest-area box wins.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n_loc = len(locs.xy)
    out = RegressionTarget(np.zeros((n_loc, 4)), np.zeros(n_loc, bool), np.full(n_loc, -1), np.zeros(n_loc))
    if len(boxes) == 0:
        return out
    x, y = locs.xy[:, 0:1], locs.xy[:, 1:2]
    ltrb = np.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], axis=2)  # (L, B, 4)
    inside = ltrb.min(axis=2) > 0
    m = ltrb.max(axis=2)
    lo = np.array([lv.size_range[0] for lv in cfg.levels])[locs.level][:, None]
    hi = np.array([lv.size_range[1] for lv in cfg.levels])[locs.level][:, None]
    ok = inside & (m > lo) & (m <= hi)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    cost = np.where(ok, area[None, :], np.inf)
    best = cost.argmin(axis=1)
    valid = np.isfinite(cost[np.arange(n_loc), best])
    reg = ltrb[np.arange(n_loc), best]
    out.valid = valid
    out.box_index = np.where(valid, best, -1)
    out.reg = np.where(valid[:, None], reg, 0.0)
    out.centerness = np.where(valid, centerness(out.reg), 0.0)
    return out


def centerness(reg: np.ndarray) -> np.ndarray:
    l, t, r, b = (reg[..., i] for i in range(4))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))
    return np.nan_to_num(c)


def decode_boxes(xy: np.ndarray, reg: np.ndarray, extent: tuple[float, float] | None = None) -> np.ndarray:
    """(x - l, y - t, x + r, y + b), clamped to [0, x_max] x [0, y_max] when ``extent`` is given."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    reg = np.asarray(reg, dtype=np.float64).reshape(-1, 4)
    boxes = np.concatenate([xy - reg[:, :2], xy + reg[:, 2:]], axis=1)
    if extent is not None:
        boxes = np.clip(boxes, 0.0, np.array([extent[0], extent[1], extent[0], extent[1]]))
    return boxes


def decode_boxes_tensor(xy: np.ndarray, reg: Tensor, extent: tuple[float, float]) -> Tensor:
    """Differentiable decode of (M, 4) distances at (M, 2) locations."""
    loc4 = np.concatenate([xy, xy], axis=1)
    sign = np.array([-1.0, -1.0, 1.0, 1.0])
    boxes = reg * sign + loc4
    hi = np.array([extent[0], extent[1], extent[0], extent[1]])
    return T.minimum(T.maximum(boxes, np.zeros(4)), hi)


def box_iou(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def assign_phi(pred_boxes, proposals, iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Label each prediction with the instance id of its max-IoU proposal, or BACKGROUND.

    ``proposals`` is a sequence of objects with ``box`` and ``instance_id``.
    Ties go to the lower instance id.  Returns (labels, best IoU).
    """
    if not 0 < iou_thresh < 1:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0 or len(pred) == 0:
        return np.full(len(pred), BACKGROUND), np.zeros(len(pred))
    props = sorted(proposals, key=lambda p: p.instance_id)
    ious = box_iou(pred, [p.box for p in props])
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(pred)), best]
    ids = np.array([p.instance_id for p in props])
    return np.where(best_iou >= iou_thresh, ids[best], BACKGROUND), best_iou


# ---------------------------------------------------------------------------
# losses and box embeddings


def iou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-row -log IoU of (l, t, r, b) distances sharing one anchor point."""
    target = np.asarray(target, dtype=np.float64)
    cols = [pred[:, i] for i in range(4)]
    l, t, r, b = cols
    tl, tt, tr, tb = (target[:, i] for i in range(4))
    area_p = (l + r) * (t + b)
    area_t = (tl + tr) * (tt + tb)
    wi = T.minimum(l, tl) + T.minimum(r, tr)
    hi = T.minimum(t, tt) + T.minimum(b, tb)
    inter = wi * hi
    union = area_p + area_t - inter
    return -T.log(inter / union)


def extract_box_embeddings(params: Params, features: list[Tensor], boxes, batch_idx, level_idx,
                           cfg: DetectorConfig) -> Tensor:
    """Crop each box from its level, run the contrastive tower and projector, L2-normalise.

    ``boxes`` may be a Tensor (gradients flow into the box corners) or an array.
    """
    boxes = T.as_tensor(boxes)
    batch_idx = np.asarray(batch_idx, dtype=int)
    level_idx = np.asarray(level_idx, dtype=int)
    k = len(batch_idx)
    widths = boxes.data[:, 2] - boxes.data[:, 0]
    heights = boxes.data[:, 3] - boxes.data[:, 1]
    if np.any(widths <= 0) or np.any(heights <= 0):
        raise ValueError("degenerate box passed to extract_box_embeddings")
    crops, order = [], []
    for li, lvl in enumerate(cfg.levels):
        sel = np.flatnonzero(level_idx == li)
        if len(sel) == 0:
            continue
        crops.append(T.roi_align(features[li], boxes[sel], batch_idx[sel], lvl.stride, cfg.crop_size))
        order.append(sel)
    x = T.concat(crops, axis=0) if len(crops) > 1 else crops[0]
    perm = np.concatenate(order)
    if not np.array_equal(perm, np.arange(k)):
        x = x[np.argsort(perm)]
    x = _tower(params, x, "cls", cfg)
    x = x.mean(axis=(2, 3))
    x = T.relu(T.linear(x, params["proj.fc1.w"], params["proj.fc1.b"]))
    x = T.linear(x, params["proj.fc2.w"], params["proj.fc2.b"])
    return T.l2_normalize(x, axis=1)


# ---------------------------------------------------------------------------
# inference


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.5) -> list[int]:
    """Greedy NMS; ties in score keep the lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    boxes = np.asarray(boxes).reshape(-1, 4)
    for i in order:
        if keep and box_iou(boxes[i], boxes[keep]).max() > iou_thresh:
            continue
        keep.append(i)
    return keep


@dataclass(frozen=True)
class InferenceConfig:
    score_thresh: float = 0.05
    pre_nms_top: int = 100
    nms_iou: float = 0.5
    max_detections: int = 20
    min_size: float = 1.0


def detect(params: Params, magnitudes, cfg: DetectorConfig, icfg: InferenceConfig = InferenceConfig(),
           batch_size: int = 16) -> list[list[Detection]]:
    """Scored, NMS-filtered detections per frame for a stack of (C, H, W) magnitude maps."""
    mags = np.asarray(magnitudes)
    if mags.ndim == 3:
        mags = mags[None]
    locs = locations(cfg)
    results = []
    with T.no_grad():
        for s in range(0, len(mags), batch_size):
            x = preprocess(mags[s : s + batch_size], cfg)
            out = forward(params, x, cfg, with_cls=True)
            reg = flatten_levels(out.reg).data
            ctr = flatten_levels(out.ctr).data[..., 0]
            cls = flatten_levels(out.cls).data
            for n in range(len(x)):
                prob = _sigmoid(cls[n]) * _sigmoid(ctr[n])[:, None]
                results.append(_postprocess(prob, reg[n], locs, cfg, icfg))
    return results


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _postprocess(prob, reg, locs, cfg, icfg) -> list[Detection]:
    score = prob.max(axis=1)
    cls = prob.argmax(axis=1)
    cand = np.flatnonzero(score > icfg.score_thresh)
    cand = cand[np.argsort(-score[cand], kind="stable")][: icfg.pre_nms_top]
    if len(cand) == 0:
        return []
    boxes = decode_boxes(locs.xy[cand], reg[cand], cfg.extent)
    big = ((boxes[:, 2] - boxes[:, 0]) >= icfg.min_size) & ((boxes[:, 3] - boxes[:, 1]) >= icfg.min_size)
    cand, boxes = cand[big], boxes[big]
    keep = nms(boxes, score[cand], icfg.nms_iou)[: icfg.max_detections]
    return [Detection(tuple(float(v) for v in boxes[i]), float(score[cand[i]]), int(cls[cand[i]])) for i in keep]


def head_param_names(params: Iterable[str]) -> dict[str, list[str]]:
    """Group parameter names by head, for sharing checks."""
    groups: dict[str, list[str]] = {}
    for name in params:
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("head", "proj") else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


def with_config(cfg: DetectorConfig, **kw) -> DetectorConfig:
    return replace(cfg, **kw)
