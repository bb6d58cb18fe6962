"""Template/search fusion and the anchor-based prediction head.

Depthwise cross-correlation fuses template features into the search map;
two small conv towers emit per-anchor classification logits (2K channels,
background then foreground per anchor) and box deltas (4K channels).
Anchor boxes, delta encoding and IoU follow the usual RPN conventions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor
from .params import ParamStore


@dataclass
class BBox:
    """Axis-aligned box: top-left (x, y) and size (w, h) in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box size must be non-negative, got {self.w}x{self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float) -> "BBox":
        return BBox(cx - w / 2.0, cy - h / 2.0, w, h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    x1 = max(a.x, b.x)
    y1 = max(a.y, b.y)
    x2 = min(a.x + a.w, b.x + b.w)
    y2 = min(a.y + a.h, b.y + b.h)
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


@dataclass
class AnchorConfig:
    ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    scales: list[float] = field(default_factory=lambda: [32.0, 64.0])
    stride: int = 8

    @property
    def num_anchors(self) -> int:
        return len(self.ratios) * len(self.scales)


@dataclass
class AnchorSet:
    ratios: list[float]
    scales: list[float]
    stride: int
    boxes: np.ndarray  # [K, Hr, Wr, 4] as (x, y, w, h)

    @property
    def k(self) -> int:
        return len(self.ratios) * len(self.scales)


def generate_anchors(cfg: AnchorConfig, response_shape: tuple[int, int], origin: float = 0.0) -> AnchorSet:
    """Anchors tiled over the response grid.

    Anchor size is (s*sqrt(r), s/sqrt(r)) per scale s and ratio r; centers
    sit at origin + stride*(i + 0.5) in search-crop pixels.
    """
    if not cfg.ratios or not cfg.scales:
        raise ValueError("anchor config needs at least one ratio and one scale")
    hr, wr = response_shape
    sizes = []
    for r in cfg.ratios:
        for s in cfg.scales:
            sizes.append((s * np.sqrt(r), s / np.sqrt(r)))
    k = len(sizes)
    boxes = np.zeros((k, hr, wr, 4), dtype=np.float64)
    cys = origin + cfg.stride * (np.arange(hr) + 0.5)
    cxs = origin + cfg.stride * (np.arange(wr) + 0.5)
    for ki, (w, h) in enumerate(sizes):
        boxes[ki, :, :, 0] = cxs[None, :] - w / 2.0
        boxes[ki, :, :, 1] = cys[:, None] - h / 2.0
        boxes[ki, :, :, 2] = w
        boxes[ki, :, :, 3] = h
    return AnchorSet(ratios=list(cfg.ratios), scales=list(cfg.scales), stride=cfg.stride, boxes=boxes)


# -- box coding ------------------------------------------------------------------


def encode_boxes(anchors: np.ndarray, gt: BBox) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) from anchors [...,4] to one ground-truth box."""
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError(f"encode needs positive gt size, got {gt.w}x{gt.h}")
    aw, ah = anchors[..., 2], anchors[..., 3]
    acx = anchors[..., 0] + aw / 2.0
    acy = anchors[..., 1] + ah / 2.0
    out = np.empty_like(anchors)
    out[..., 0] = (gt.cx - acx) / aw
    out[..., 1] = (gt.cy - acy) / ah
    out[..., 2] = np.log(gt.w / aw)
    out[..., 3] = np.log(gt.h / ah)
    return out


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; returns (x, y, w, h) arrays."""
    if not np.all(np.isfinite(deltas)):
        raise ValueError("decode requires finite deltas")
    aw, ah = anchors[..., 2], anchors[..., 3]
    acx = anchors[..., 0] + aw / 2.0
    acy = anchors[..., 1] + ah / 2.0
    cx = acx + deltas[..., 0] * aw
    cy = acy + deltas[..., 1] * ah
    w = aw * np.exp(deltas[..., 2])
    h = ah * np.exp(deltas[..., 3])
    out = np.empty_like(deltas)
    out[..., 0] = cx - w / 2.0
    out[..., 1] = cy - h / 2.0
    out[..., 2] = w
    out[..., 3] = h
    return out


def decode_box_tensor(anchor: np.ndarray, deltas: Tensor) -> Tensor:
    """Differentiable decode of one anchor's deltas [4] -> box tensor [4]."""
    ax, ay, aw, ah = (float(v) for v in anchor)
    acx, acy = ax + aw / 2.0, ay + ah / 2.0
    cx = nm.add(nm.mul(deltas[0:1], aw), acx)
    cy = nm.add(nm.mul(deltas[1:2], ah), acy)
    w = nm.mul(nm.exp(deltas[2:3]), aw)
    h = nm.mul(nm.exp(deltas[3:4]), ah)
    x = nm.sub(cx, nm.mul(w, 0.5))
    y = nm.sub(cy, nm.mul(h, 0.5))
    return nm.concat([x, y, w, h], axis=0)


def iou_tensor(box: Tensor, gt: BBox) -> Tensor:
    """Differentiable IoU of a box tensor [4] against a fixed gt box."""
    bx, by, bw, bh = box[0:1], box[1:2], box[2:3], box[3:4]
    x1 = nm.maximum(bx, float(gt.x))
    y1 = nm.maximum(by, float(gt.y))
    x2 = nm.minimum(nm.add(bx, bw), float(gt.x + gt.w))
    y2 = nm.minimum(nm.add(by, bh), float(gt.y + gt.h))
    iw = nm.maximum(nm.sub(x2, x1), 0.0)
    ih = nm.maximum(nm.sub(y2, y1), 0.0)
    inter = nm.mul(iw, ih)
    union = nm.sub(nm.add(nm.mul(bw, bh), float(gt.w * gt.h)), inter)
    return nm.div(inter, nm.maximum(union, 1e-12))


# -- cross-correlation -------------------------------------------------------------


def depthwise_xcorr(z: Tensor, x: Tensor) -> Tensor:
    """Per-channel valid cross-correlation of search ``x`` with template ``z``.

    Accepts [C,h,w] pairs or batched [B,C,h,w] pairs; output spatial size is
    (hx-hz+1, wx-wz+1).
    """
    squeeze = z.ndim == 3
    if squeeze != (x.ndim == 3) or z.ndim not in (3, 4):
        raise ShapeError(f"depthwise_xcorr rank mismatch {z.shape} vs {x.shape}")
    zd = z.data[None] if squeeze else z.data
    xd = x.data[None] if squeeze else x.data
    if zd.shape[0] != xd.shape[0] or zd.shape[1] != xd.shape[1]:
        raise ShapeError(f"depthwise_xcorr channel/batch mismatch {z.shape} vs {x.shape}")
    hz, wz = zd.shape[2], zd.shape[3]
    hx, wx = xd.shape[2], xd.shape[3]
    if hz > hx or wz > wx:
        raise ShapeError(f"template {hz}x{wz} larger than search {hx}x{wx}")
    ho, wo = hx - hz + 1, wx - wz + 1
    out = np.zeros(zd.shape[:2] + (ho, wo), dtype=xd.dtype)
    for i in range(hz):
        for j in range(wz):
            out += zd[:, :, i : i + 1, j : j + 1] * xd[:, :, i : i + ho, j : j + wo]

    def bwd(g):
        gb = g[None] if squeeze else g
        gz = np.zeros_like(zd)
        gx = np.zeros_like(xd)
        for i in range(hz):
            for j in range(wz):
                gz[:, :, i, j] = np.sum(gb * xd[:, :, i : i + ho, j : j + wo], axis=(2, 3))
                gx[:, :, i : i + ho, j : j + wo] += gb * zd[:, :, i : i + 1, j : j + 1]
        if squeeze:
            gz, gx = gz[0], gx[0]
        return (gz, gx)

    return nm.make_op(out[0] if squeeze else out, (z, x), bwd)


# -- RPN head --------------------------------------------------------------------


@dataclass
class HeadParams:
    cls_tower: list[tuple[Tensor, Tensor]]
    reg_tower: list[tuple[Tensor, Tensor]]
    k: int


@dataclass
class HeadOutput:
    cls: Tensor  # [2K,Hr,Wr] or [B,2K,Hr,Wr]
    reg: Tensor  # [4K,Hr,Wr] or [B,4K,Hr,Wr]


def init_head(seed: int, config, store: ParamStore | None = None, dtype=np.float32) -> HeadParams:
    """Two towers of two 3x3 convs each, registered under ``head.``."""
    c = int(config.feat_channels)
    k = AnchorConfig(config.anchor_ratios, config.anchor_scales, config.anchor_stride).num_anchors
    store = store if store is not None else ParamStore()
    rng = np.random.default_rng(seed)

    def conv(name, co, ci, gain):
        bound = np.sqrt(gain / (ci * 9))
        w = store.add(f"head.{name}.w", Tensor(rng.uniform(-bound, bound, size=(co, ci, 3, 3)).astype(dtype), requires_grad=True))
        b = store.add(f"head.{name}.b", Tensor(np.zeros(co, dtype=dtype), requires_grad=True))
        return (w, b)

    # small final convs: predictions start near the anchors and logits near
    # zero, which keeps the first optimizer steps well-conditioned
    return HeadParams(
        cls_tower=[conv("cls1", c, c, 6.0), conv("cls2", 2 * k, c, 0.003)],
        reg_tower=[conv("reg1", c, c, 6.0), conv("reg2", 4 * k, c, 0.003)],
        k=k,
    )


def rpn_forward(fused: Tensor, head_params: HeadParams) -> HeadOutput:
    """Classification and regression maps over the fused response."""
    (w1, b1), (w2, b2) = head_params.cls_tower
    cls = nm.conv2d(nm.relu(nm.conv2d(fused, w1, pad=1, bias=b1)), w2, pad=1, bias=b2)
    (w1, b1), (w2, b2) = head_params.reg_tower
    reg = nm.conv2d(nm.relu(nm.conv2d(fused, w1, pad=1, bias=b1)), w2, pad=1, bias=b2)
    return HeadOutput(cls=cls, reg=reg)


# -- target assignment --------------------------------------------------------------


def assign_targets(anchors: AnchorSet, gt: BBox, hi: float, lo: float) -> tuple[np.ndarray, np.ndarray]:
    """Labels (+1 positive, 0 negative, -1 ignore) and encoded gt deltas.

    IoU >= hi marks positive, IoU < lo negative, the band between is
    ignored; the single highest-IoU anchor is always positive so at least
    one positive exists (ties resolve to the first anchor in scan order).
    """
    if not hi > lo:
        raise ValueError(f"need hi > lo, got {hi} <= {lo}")
    boxes = anchors.boxes
    x1 = np.maximum(boxes[..., 0], gt.x)
    y1 = np.maximum(boxes[..., 1], gt.y)
    x2 = np.minimum(boxes[..., 0] + boxes[..., 2], gt.x + gt.w)
    y2 = np.minimum(boxes[..., 1] + boxes[..., 3], gt.y + gt.h)
    inter = np.maximum(0.0, x2 - x1) * np.maximum(0.0, y2 - y1)
    union = boxes[..., 2] * boxes[..., 3] + gt.w * gt.h - inter
    ious = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    labels = np.full(ious.shape, -1, dtype=np.int8)
    labels[ious >= hi] = 1
    labels[ious < lo] = 0
    labels.reshape(-1)[int(np.argmax(ious))] = 1
    deltas = encode_boxes(boxes, gt)
    return labels, deltas


def cls_cross_entropy(cls: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross-entropy over assigned anchors (training scaffolding).

    ``cls`` is [2K,Hr,Wr] with (bg, fg) channel pairs per anchor; positives
    and negatives each contribute their mean so the two classes stay
    balanced regardless of counts.
    """
    k2 = cls.shape[0]
    k = k2 // 2
    hr, wr = cls.shape[1], cls.shape[2]
    pairs = nm.transpose(nm.reshape(cls, (k, 2, hr, wr)), (0, 2, 3, 1))  # [K,Hr,Wr,2]
    logp = nm.log_softmax(pairs, axis=3)
    pos = (labels == 1).astype(cls.dtype)
    neg = (labels == 0).astype(cls.dtype)
    n_pos = max(1.0, float(pos.sum()))
    n_neg = max(1.0, float(neg.sum()))
    fg = nm.reduce_sum(nm.mul(logp[..., 1], nm.tensor(pos / n_pos, dtype=cls.dtype)))
    bg = nm.reduce_sum(nm.mul(logp[..., 0], nm.tensor(neg / n_neg, dtype=cls.dtype)))
    return nm.mul(nm.add(fg, bg), -0.5)
