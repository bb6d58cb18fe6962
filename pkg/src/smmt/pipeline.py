"""End-to-end tracker and trainer.

Geometry follows the usual Siamese convention: the template crop covers the
target plus a 0.5*(w+h) context margin; the search crop is the same window
scaled by search_size/template_size so template and search share one pixel
scale. Motion features always compare the previous and current frame over
the *same* search window, so the frame difference isolates target motion.

Ablation flags: ``use_smm`` routes features through the motion module (off:
raw 1/8 features), ``use_sps`` shares the deep backbone stages and the
post-scan conv between the H and V paths (off: duplicated copies), and
``use_rfme`` enables the full composite loss (off: plain regression with
alpha = beta = 1 and no edge/feature terms).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nm
from . import loss as losses
from .backbone import BackboneParams, PyramidFeatures, extract_pyramid, init_backbone
from .evalkit import Sequence
from .head import (
    AnchorConfig,
    BBox,
    HeadParams,
    assign_targets,
    cls_cross_entropy,
    decode_box_tensor,
    decode_boxes,
    depthwise_xcorr,
    generate_anchors,
    init_head,
    iou,
    rpn_forward,
)
from .loss import LossWeights, bilinear_patch
from .numerics import Tensor
from .params import ConfigError, ParamStore
from .smm import ScaleThresholds, SMMParams, init_smm, select_scale, smm_forward_batched

CONFIG_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 5.0


@dataclass
class TrackerConfig:
    template_size: int = 64
    search_size: int = 160
    backbone_width: int = 16
    feat_channels: int = 16
    ssm_state_dim: int = 4
    attn_heads: int = 4
    anchor_ratios: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    anchor_scales: list = field(default_factory=lambda: [32.0, 64.0])
    anchor_stride: int = 8
    assign_hi: float = 0.6
    assign_lo: float = 0.3
    t_small: float = 32.0
    t_large: float = 96.0
    scale_emphasis: float = 0.6
    use_smm: bool = True
    use_sps: bool = True
    use_rfme: bool = True
    window_weight: float = 0.3
    scale_penalty_k: float = 0.05
    size_lr: float = 0.3
    patch_size: int = 32
    edge_band: int = 2
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.template_size % 16 or self.search_size % 16:
            raise ConfigError("template_size and search_size must be divisible by 16")
        if self.search_size <= self.template_size:
            raise ConfigError("search_size must exceed template_size")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrackerConfig":
        d = dict(d)
        allowed = {f.name for f in fields(TrackerConfig)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "loss" in d:
            lw = dict(d["loss"])
            lw_allowed = {f.name for f in fields(LossWeights)}
            bad = set(lw) - lw_allowed
            if bad:
                raise ConfigError(f"unknown loss keys: {sorted(bad)}")
            d["loss"] = LossWeights(**lw)
        if "train" in d:
            tr = dict(d["train"])
            tr_allowed = {f.name for f in fields(TrainConfig)}
            bad = set(tr) - tr_allowed
            if bad:
                raise ConfigError(f"unknown train keys: {sorted(bad)}")
            d["train"] = TrainConfig(**tr)
        return TrackerConfig(**d)

    @staticmethod
    def from_file(path: str) -> "TrackerConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if raw.get("format_version") != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"config format_version must be {CONFIG_FORMAT_VERSION}")
        extra = set(raw) - {"format_version", "tracker"}
        if extra:
            raise ConfigError(f"unknown top-level config keys: {sorted(extra)}")
        return TrackerConfig.from_dict(raw.get("tracker", {}))

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"format_version": CONFIG_FORMAT_VERSION, "tracker": self.to_dict()}, f, indent=2, sort_keys=True)
            f.write("\n")

    def thresholds(self) -> ScaleThresholds:
        return ScaleThresholds(self.t_small, self.t_large, self.scale_emphasis)

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(list(self.anchor_ratios), list(self.anchor_scales), self.anchor_stride)


@dataclass
class ModelParams:
    store: ParamStore
    backbone: BackboneParams
    smm: SMMParams
    head: HeadParams
    cfg: TrackerConfig


def build_model(cfg: TrackerConfig, dtype=np.float32) -> ModelParams:
    """Fresh parameter registry for the configured variant (seeded)."""
    store = ParamStore()
    bb = init_backbone(cfg.seed, cfg, store, dtype)
    sm = init_smm(cfg.seed + 1, cfg, store, dtype)
    hd = init_head(cfg.seed + 2, cfg, store, dtype)
    return ModelParams(store=store, backbone=bb, smm=sm, head=hd, cfg=cfg)


# -- crop geometry -------------------------------------------------------------


def _context_side(box: BBox) -> float:
    margin = 0.5 * (box.w + box.h)
    return float(np.sqrt((box.w + margin) * (box.h + margin)))


def _search_rect(box: BBox, cfg: TrackerConfig) -> tuple[float, float, float]:
    side = _context_side(box) * cfg.search_size / cfg.template_size
    return box.cx - side / 2.0, box.cy - side / 2.0, side


def _crop(frame: np.ndarray, rect_xy_side, out_size: int) -> np.ndarray:
    x, y, side = rect_xy_side
    return bilinear_patch(frame.astype(np.float64), (x, y, side, side), out_size).astype(np.float32)


def _to_crop_coords(box: BBox, rect_xy_side, out_size: int) -> BBox:
    x, y, side = rect_xy_side
    s = out_size / side
    return BBox((box.x - x) * s, (box.y - y) * s, box.w * s, box.h * s)


def _to_frame_coords(box: BBox, rect_xy_side, out_size: int) -> BBox:
    x, y, side = rect_xy_side
    s = side / out_size
    return BBox(x + box.x * s, y + box.y * s, box.w * s, box.h * s)


# -- feature extraction ---------------------------------------------------------


def _pyramid_paths(images: Tensor, model: ModelParams) -> dict[str, PyramidFeatures]:
    paths = model.backbone.scan_paths()
    return {p: extract_pyramid(images, model.backbone, p) for p in paths}


def _features_from_paths(prev, curr, model: ModelParams, sel) -> Tensor:
    cfg = model.cfg
    if cfg.use_smm:
        ph, pv = ("", "") if cfg.use_sps else ("h", "v")
        return smm_forward_batched(prev[ph], prev[pv], curr[ph], curr[pv], model.smm, sel)
    first = "" if cfg.use_sps else "h"
    return curr[first].f8


def _template_sel(cfg: TrackerConfig, box: BBox) -> "ScaleWeights":
    scale = cfg.template_size / _context_side(box)
    return select_scale(max(1e-6, float(np.sqrt(box.w * box.h)) * scale), cfg.thresholds())


def _search_sel(cfg: TrackerConfig, box: BBox) -> "ScaleWeights":
    scale = cfg.search_size / _search_rect(box, cfg)[2]
    return select_scale(max(1e-6, float(np.sqrt(box.w * box.h)) * scale), cfg.thresholds())


def template_features(frame: np.ndarray, gt: BBox, model: ModelParams) -> Tensor:
    """Template branch features [1,C,tz,tz]; zero motion (prev = curr)."""
    cfg = model.cfg
    side = _context_side(gt)
    crop = _crop(frame, (gt.cx - side / 2.0, gt.cy - side / 2.0, side), cfg.template_size)
    img = nm.tensor(crop[None, None])
    pyr = _pyramid_paths(img, model)
    return _features_from_paths(pyr, pyr, model, _template_sel(cfg, gt))


# -- tracker state --------------------------------------------------------------


@dataclass
class TrackerState:
    cfg: TrackerConfig
    model: ModelParams
    template_feat: Tensor
    prev_frame: np.ndarray
    bbox: BBox
    frame_index: int
    frame_shape: tuple[int, int]
    anchors: "AnchorSet"
    window: np.ndarray


def _response_geometry(cfg: TrackerConfig):
    tz = cfg.template_size // 8
    sx = cfg.search_size // 8
    r = sx - tz + 1
    origin = cfg.anchor_stride * (tz - 1) / 2.0
    return tz, sx, r, origin


def _scaled_response(tpl_feat: Tensor, search_feat: Tensor, cfg: TrackerConfig) -> Tensor:
    """Correlation response normalized by template area so activation and
    gradient magnitudes stay O(1) regardless of template size."""
    tz = cfg.template_size // 8
    return nm.mul(depthwise_xcorr(tpl_feat, search_feat), 1.0 / (tz * tz))


def make_anchors(cfg: TrackerConfig):
    _, _, r, origin = _response_geometry(cfg)
    return generate_anchors(cfg.anchor_config(), (r, r), origin)


def init_tracker(frame: np.ndarray, gt: BBox, cfg: TrackerConfig, model: ModelParams) -> TrackerState:
    """Template setup on the first frame; gt must lie within the frame."""
    h, w = frame.shape
    if gt.x < 0 or gt.y < 0 or gt.x + gt.w > w or gt.y + gt.h > h:
        raise ValueError(f"gt box {gt} outside frame {w}x{h}")
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError("gt box must have positive size")
    with nm.no_grad():
        tpl = template_features(frame, gt, model)
    _, _, r, _ = _response_geometry(cfg)
    win = np.outer(np.hanning(r), np.hanning(r))
    return TrackerState(
        cfg=cfg,
        model=model,
        template_feat=tpl.detach(),
        prev_frame=frame,
        bbox=gt,
        frame_index=0,
        frame_shape=(h, w),
        anchors=make_anchors(cfg),
        window=win,
    )


def track_frame(state: TrackerState, frame: np.ndarray) -> tuple[BBox, float]:
    """One tracking step; returns the clamped frame-coordinate box and its
    penalized score. Mutates the state."""
    cfg = state.cfg
    model = state.model
    if frame.shape != tuple(state.frame_shape):
        raise ValueError(f"frame shape {frame.shape} changed from {state.frame_shape}")
    rect = _search_rect(state.bbox, cfg)
    s_crop = cfg.search_size / rect[2]
    with nm.no_grad():
        curr = nm.tensor(_crop(frame, rect, cfg.search_size)[None, None])
        prev = nm.tensor(_crop(state.prev_frame, rect, cfg.search_size)[None, None])
        sel = _search_sel(cfg, state.bbox)
        pyr_prev = _pyramid_paths(prev, model)
        pyr_curr = _pyramid_paths(curr, model)
        feat = _features_from_paths(pyr_prev, pyr_curr, model, sel)
        resp = depthwise_xcorr(state.template_feat, feat)
        out = rpn_forward(resp, model.head)
        k = state.anchors.k
        r = out.cls.shape[-1]
        logits = out.cls.data[0].reshape(k, 2, r, r)
        shift = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shift)
        fg = (e[:, 1] / e.sum(axis=1))  # [K,r,r]
        deltas = out.reg.data[0].reshape(k, 4, r, r).transpose(0, 2, 3, 1)
        boxes = decode_boxes(state.anchors.boxes, deltas.astype(np.float64))

    # scale/ratio consistency penalty against the current estimate
    def padded_size(wv, hv):
        p = (wv + hv) / 2.0
        return np.sqrt(np.maximum((wv + p) * (hv + p), 1e-12))

    tw, th = state.bbox.w * s_crop, state.bbox.h * s_crop
    pw, ph = boxes[..., 2], boxes[..., 3]
    s_change = padded_size(pw, ph) / padded_size(tw, th)
    s_change = np.maximum(s_change, 1.0 / s_change)
    r_change = (tw / th) / np.maximum(pw / np.maximum(ph, 1e-9), 1e-9)
    r_change = np.maximum(r_change, 1.0 / r_change)
    penalty = np.exp(-(s_change * r_change - 1.0) * cfg.scale_penalty_k)
    pscore = fg * penalty
    pscore = (1 - cfg.window_weight) * pscore + cfg.window_weight * state.window[None]
    best = np.unravel_index(int(np.argmax(pscore)), pscore.shape)
    raw = boxes[best]
    pred = _to_frame_coords(BBox(raw[0], raw[1], max(raw[2], 1e-6), max(raw[3], 1e-6)), rect, cfg.search_size)

    lr = cfg.size_lr
    new_w = lr * pred.w + (1 - lr) * state.bbox.w
    new_h = lr * pred.h + (1 - lr) * state.bbox.h
    fh, fw = state.frame_shape
    new_w = float(np.clip(new_w, 2.0, fw))
    new_h = float(np.clip(new_h, 2.0, fh))
    cx = float(np.clip(pred.cx, new_w / 2.0, fw - new_w / 2.0))
    cy = float(np.clip(pred.cy, new_h / 2.0, fh - new_h / 2.0))
    state.bbox = BBox.from_center(cx, cy, new_w, new_h)
    state.prev_frame = frame
    state.frame_index += 1
    return state.bbox, float(pscore[best])


def run_sequence(seq: Sequence, cfg: TrackerConfig, model: ModelParams) -> list[tuple[BBox, float]]:
    """Init on frame 0 gt, track the remainder; one (box, score) per frame."""
    if len(seq) < 1 or seq.gt[0] is None:
        raise ValueError("sequence needs ground truth on frame 0")
    state = init_tracker(seq.frames[0], seq.gt[0], cfg, model)
    traj = [(seq.gt[0], 1.0)]
    for t in range(1, len(seq)):
        traj.append(track_frame(state, seq.frames[t]))
    return traj


class Tracker:
    """Stateful adapter exposing init/update for the reset-based protocol."""

    def __init__(self, cfg: TrackerConfig, model: ModelParams):
        self.cfg = cfg
        self.model = model
        self.state = None

    def init(self, frame, gt):
        self.state = init_tracker(frame, gt, self.cfg, self.model)

    def update(self, frame):
        if self.state is None:
            raise ValueError("tracker not initialized")
        return track_frame(self.state, frame)


# -- trajectory files ------------------------------------------------------------


def save_trajectory(traj, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "x", "y", "w", "h", "score"])
        for i, (box, score) in enumerate(traj):
            writer.writerow([i, f"{box.x:.4f}", f"{box.y:.4f}", f"{box.w:.4f}", f"{box.h:.4f}", f"{score:.4f}"])


def load_trajectory(path: str) -> list[tuple[BBox, float]]:
    traj = []
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            traj.append((BBox(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"])), float(row["score"])))
    return traj


# -- training ---------------------------------------------------------------------


@dataclass
class TrainItem:
    template: np.ndarray  # [T,T]
    prev: np.ndarray  # [S,S]
    curr: np.ndarray  # [S,S]
    gt_crop: BBox  # gt of the current frame in search-crop coords
    labels: np.ndarray  # [K,R,R]
    target_deltas: np.ndarray  # [K,R,R,4]
    sel_size: float  # target size in crop pixels, feeds select_scale


def make_train_item(seq: Sequence, t: int, t_template: int, cfg: TrackerConfig, anchors, rng) -> TrainItem:
    """Build one (template, prev window, curr window) triple with targets.

    The search window centers on the previous frame's gt jittered in
    position and scale, imitating an imperfect tracker state.
    """
    gt_prev = seq.gt[t - 1]
    gt_curr = seq.gt[t]
    gt_tpl = seq.gt[t_template]
    jitter_xy = rng.uniform(-0.12, 0.12, size=2) * (gt_prev.w + gt_prev.h) / 2.0
    jitter_s = float(np.exp(rng.uniform(-0.12, 0.12)))
    state_box = BBox.from_center(
        gt_prev.cx + jitter_xy[0], gt_prev.cy + jitter_xy[1], gt_prev.w * jitter_s, gt_prev.h * jitter_s
    )
    rect = _search_rect(state_box, cfg)
    tpl_side = _context_side(gt_tpl)
    template = _crop(seq.frames[t_template], (gt_tpl.cx - tpl_side / 2, gt_tpl.cy - tpl_side / 2, tpl_side), cfg.template_size)
    prev = _crop(seq.frames[t - 1], rect, cfg.search_size)
    curr = _crop(seq.frames[t], rect, cfg.search_size)
    gt_crop = _to_crop_coords(gt_curr, rect, cfg.search_size)
    labels, deltas = assign_targets(anchors, gt_crop, cfg.assign_hi, cfg.assign_lo)
    return TrainItem(
        template=template,
        prev=prev,
        curr=curr,
        gt_crop=gt_crop,
        labels=labels,
        target_deltas=deltas,
        sel_size=float(np.sqrt(max(gt_crop.w * gt_crop.h, 1e-12))),
    )


def sample_batch(sequences: list[Sequence], cfg: TrackerConfig, anchors, rng, size: int) -> list[TrainItem]:
    usable = [s for s in sequences if len(s) >= 2]
    if not usable:
        raise ValueError("training needs sequences with at least 2 frames")
    batch = []
    for _ in range(size):
        seq = usable[int(rng.integers(len(usable)))]
        t = int(rng.integers(1, len(seq)))
        t_template = int(rng.integers(len(seq)))
        batch.append(make_train_item(seq, t, t_template, cfg, anchors, rng))
    return batch


class SGD:
    """Momentum SGD with a global gradient-norm clip."""

    def __init__(self, store: ParamStore, lr: float, momentum: float, grad_clip: float):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> float:
        sq = 0.0
        for _, t in self.store.items():
            if t.grad is not None:
                sq += float(np.sum(t.grad.astype(np.float64) ** 2))
        norm = float(np.sqrt(sq))
        scale = 1.0 if norm <= self.grad_clip or norm == 0 else self.grad_clip / norm
        for name, t in self.store.items():
            g = t.grad
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g * scale
            t.data = t.data - self.lr * v
        return norm


def _positive_indices(labels: np.ndarray, cap: int, rng) -> list[tuple[int, int, int]]:
    pos = np.argwhere(labels == 1)
    if len(pos) > cap:
        sel = rng.choice(len(pos), size=cap, replace=False)
        pos = pos[sel]
    return [tuple(int(v) for v in p) for p in pos]


def _reg_vector(reg_b: Tensor, k: int, r: int, ki: int, i: int, j: int) -> Tensor:
    base = np.arange(4) * (r * r) + (ki * 4) * (r * r) + i * r + j
    return nm.take(reg_b, base)


def train_forward(batch: list[TrainItem], model: ModelParams, rng) -> tuple[Tensor, dict]:
    """Loss over one batch (tape on); returns (total, breakdown floats)."""
    cfg = model.cfg
    w = cfg.loss
    anchors = make_anchors(cfg)
    k = anchors.k
    _, _, r, _ = _response_geometry(cfg)
    tpl = nm.tensor(np.stack([b.template for b in batch])[:, None])
    prev = nm.tensor(np.stack([b.prev for b in batch])[:, None])
    curr = nm.tensor(np.stack([b.curr for b in batch])[:, None])
    sel = select_scale(float(np.mean([b.sel_size for b in batch])), cfg.thresholds())

    tpl_pyr = _pyramid_paths(tpl, model)
    tpl_feat = _features_from_paths(tpl_pyr, tpl_pyr, model, sel)
    prev_pyr = _pyramid_paths(prev, model)
    curr_pyr = _pyramid_paths(curr, model)
    search_feat = _features_from_paths(prev_pyr, curr_pyr, model, sel)
    resp = depthwise_xcorr(tpl_feat, search_feat)
    out = rpn_forward(resp, model.head)

    cls_terms = []
    reg_samples = []
    meg_items = []
    fgl_terms = []
    tz = cfg.template_size // 8
    sxg = cfg.search_size // 8
    for b, item in enumerate(batch):
        cls_terms.append(cls_cross_entropy(out.cls[b], item.labels))
        positives = _positive_indices(item.labels, cap=6, rng=rng)
        best = None
        best_iou = -1.0
        for (ki, i, j) in positives:
            pred_deltas = _reg_vector(out.reg[b], k, r, ki, i, j)
            anchor = anchors.boxes[ki, i, j]
            pred_box = decode_box_tensor(anchor, pred_deltas)
            reg_samples.append((item.gt_crop, pred_box, item.target_deltas[ki, i, j], pred_deltas))
            a_iou = iou(BBox(anchor[0], anchor[1], anchor[2], anchor[3]), item.gt_crop)
            if a_iou > best_iou:
                best_iou = a_iou
                best = pred_box
        if cfg.use_rfme and best is not None:
            gt_box = item.gt_crop
            geom = losses.PatchGeom(gt_box.x, gt_box.y, max(gt_box.w, 1e-3), max(gt_box.h, 1e-3), cfg.patch_size)
            gt_patch = nm.tensor(
                bilinear_patch(item.curr.astype(np.float64), (gt_box.x, gt_box.y, gt_box.w, gt_box.h), cfg.patch_size)[None].astype(np.float32)
            )
            mask = losses.motion_edge_mask(gt_box, geom, cfg.edge_band, dtype=np.float32)
            pred_patch = losses.bilinear_crop(item.curr.astype(np.float32), best, cfg.patch_size)
            meg_items.append(losses.EdgeSupervision(gt_patch, pred_patch, mask))

            # feature crops: gt-centered reference, prediction-centered probe
            def grid_window(cx, cy):
                ci = int(np.clip(round(cx / 8.0 - tz / 2.0), 0, sxg - tz))
                rj = int(np.clip(round(cy / 8.0 - tz / 2.0), 0, sxg - tz))
                return rj, ci

            gr, gc = grid_window(gt_box.cx, gt_box.cy)
            pd = best.data
            pr, pc = grid_window(pd[0] + pd[2] / 2.0, pd[1] + pd[3] / 2.0)
            f_gt = search_feat[b, :, gr : gr + tz, gc : gc + tz]
            f_pred = search_feat[b, :, pr : pr + tz, pc : pc + tz]
            sigma = max(0.5, np.hypot(gt_box.w, gt_box.h) / 2.0 / 8.0)
            win_full = losses.gaussian_window((sxg, sxg), (gt_box.cx / 8.0, gt_box.cy / 8.0), sigma, dtype=np.float32)
            win = win_full[gr : gr + tz, gc : gc + tz]
            e_f, _ = losses.feature_alignment_errors(tpl_feat[b], f_pred, win)
            _, e_w = losses.feature_alignment_errors(f_gt, f_pred, win)
            s_scale = min(1.0, max(1e-3, float(np.sqrt(gt_box.w * gt_box.h)) / cfg.search_size))
            fgl_terms.append(losses.loss_fgl(e_f, e_w, s_scale, w))

    cls_loss = cls_terms[0]
    for t in cls_terms[1:]:
        cls_loss = nm.add(cls_loss, t)
    cls_loss = nm.mul(cls_loss, 1.0 / len(cls_terms))

    if cfg.use_rfme:
        reg = losses.loss_reg(reg_samples, w.alpha, w.beta)
        meg = losses.loss_meg(meg_items, w.u, w.v) if meg_items else nm.tensor(0.0)
        if fgl_terms:
            fgl = fgl_terms[0]
            for t in fgl_terms[1:]:
                fgl = nm.add(fgl, t)
            fgl = nm.mul(fgl, 1.0 / len(fgl_terms))
        else:
            fgl = nm.tensor(0.0)
        rfme, parts = losses.loss_total({"reg": reg, "meg": meg, "fgl": fgl}, w)
    else:
        rfme = losses.loss_reg(reg_samples, 1.0, 1.0)
        parts = {"reg": float(rfme.data), "meg": 0.0, "fgl": 0.0, "total": float(rfme.data)}
    total = nm.add(cls_loss, rfme)
    breakdown = {
        "cls": float(cls_loss.data),
        "reg": parts["reg"],
        "meg": parts["meg"],
        "fgl": parts["fgl"],
        "total": float(total.data),
    }
    return total, breakdown


def train_step(batch: list[TrainItem], model: ModelParams, opt: SGD, rng) -> dict:
    """One forward/backward/SGD update; returns the loss breakdown."""
    if not batch:
        raise ValueError("empty training batch")
    model.store.zero_grads()
    total, breakdown = train_forward(batch, model, rng)
    nm.backward(total)
    breakdown["grad_norm"] = opt.step()
    return breakdown


def train(
    sequences: list[Sequence],
    cfg: TrackerConfig,
    model: ModelParams | None = None,
    log_fn=None,
) -> tuple[ModelParams, list[dict]]:
    """Full training loop over synthetic sequences; deterministic per seed."""
    model = model if model is not None else build_model(cfg)
    anchors = make_anchors(cfg)
    rng = np.random.default_rng(cfg.seed + 17)
    opt = SGD(model.store, cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip)
    history = []
    for step in range(cfg.train.steps):
        batch = sample_batch(sequences, cfg, anchors, rng, cfg.train.batch_size)
        breakdown = train_step(batch, model, opt, rng)
        breakdown["step"] = step
        history.append(breakdown)
        if log_fn is not None:
            log_fn(step, breakdown)
    return model, history


# -- ablation -------------------------------------------------------------------


def ablation_variants(cfg: TrackerConfig) -> list[tuple[str, TrackerConfig]]:
    """The five study rows: everything off, each module addition, all on."""
    rows = [
        ("base", (False, False, False)),
        ("smm", (True, False, False)),
        ("sps", (False, True, False)),
        ("smm_sps", (True, True, False)),
        ("smmt", (True, True, True)),
    ]
    out = []
    for name, (use_smm, use_sps, use_rfme) in rows:
        d = cfg.to_dict()
        d["use_smm"] = use_smm
        d["use_sps"] = use_sps
        d["use_rfme"] = use_rfme
        out.append((name, TrackerConfig.from_dict(d)))
    return out
