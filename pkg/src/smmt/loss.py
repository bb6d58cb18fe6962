"""Composite tracking loss: anchor regression, motion edge supervision on
image patches, and fine-grained feature alignment, combined linearly.

The edge term compares gradients of the ground-truth-box crop against the
predicted-box crop (both resampled to a fixed P x P patch); a binary band
mask around the box boundary focuses the L1 part on edges. The feature
term mixes a pooled-distribution cross-entropy with a windowed L1 between
feature crops, both passed through log(1 + .) with a scale-adjusted weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .head import BBox, iou_tensor
from .numerics import NumericError, ShapeError, Tensor


@dataclass
class LossWeights:
    """Composite-loss coefficients; alpha/beta follow the published sweep
    optimum, the rest balance term magnitudes at this model scale (the edge
    term sums over 2*P^2 patch pixels, so u and v sit near 1/P^2)."""

    lambda_reg: float = 1.0
    lambda_meg: float = 0.5
    lambda_fgl: float = 0.3
    alpha: float = 0.8
    beta: float = 0.5
    u: float = 0.01
    v: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma: float = 0.1

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {val}")


@dataclass
class PatchGeom:
    """Frame-coordinate rectangle a P x P patch resamples."""

    x: float
    y: float
    w: float
    h: float
    size: int


@dataclass
class EdgeSupervision:
    gt_patch: Tensor  # [1,P,P]
    pred_patch: Tensor  # [1,P,P]
    mask: Tensor  # [1,P,P] binary


# -- regression ------------------------------------------------------------------


def loss_reg(samples, alpha: float, beta: float) -> Tensor:
    """Mean over positive samples of alpha*(1 - IoU) + beta*L1 on deltas.

    Each sample is (gt_box, pred_box_tensor[4], gt_deltas[4],
    pred_deltas_tensor[4]); 1 - IoU stands in for the unspecified IoU loss.
    """
    if not samples:
        raise ValueError("loss_reg needs at least one positive sample")
    terms = []
    for gt_box, pred_box, gt_deltas, pred_deltas in samples:
        iou_term = nm.sub(1.0, iou_tensor(pred_box, gt_box))
        l1_term = nm.l1_norm(nm.sub(pred_deltas, nm.tensor(np.asarray(gt_deltas), dtype=pred_deltas.dtype)))
        terms.append(nm.add(nm.mul(iou_term, alpha), nm.mul(l1_term, beta)))
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return nm.reshape(nm.mul(total, 1.0 / len(samples)), ())


# -- patch machinery ---------------------------------------------------------------


def bilinear_patch(img: np.ndarray, rect, size: int) -> np.ndarray:
    """Resample the frame rectangle (x, y, w, h) to a size x size patch.

    Pure numpy forward used for data prep; sample coordinates clamp to the
    image so out-of-frame boxes see replicated borders.
    """
    x, y, w, h = (float(v) for v in rect)
    vals, _, _, _, _ = _bilinear_kernel(img, x, y, w, h, size)
    return vals


def _bilinear_kernel(img, x, y, w, h, size):
    hh, ww = img.shape
    us = x + (np.arange(size) + 0.5) * (w / size)
    vs = y + (np.arange(size) + 0.5) * (h / size)
    uf = us - 0.5
    vf = vs - 0.5
    umask = ((uf > 0) & (uf < ww - 1)).astype(img.dtype)
    vmask = ((vf > 0) & (vf < hh - 1)).astype(img.dtype)
    uf = np.clip(uf, 0, ww - 1)
    vf = np.clip(vf, 0, hh - 1)
    c0 = np.minimum(uf.astype(np.int64), ww - 2)
    r0 = np.minimum(vf.astype(np.int64), hh - 2)
    au = uf - c0
    av = vf - r0
    i00 = img[np.ix_(r0, c0)]
    i01 = img[np.ix_(r0, c0 + 1)]
    i10 = img[np.ix_(r0 + 1, c0)]
    i11 = img[np.ix_(r0 + 1, c0 + 1)]
    avc = av[:, None]
    auc = au[None, :]
    vals = (1 - avc) * ((1 - auc) * i00 + auc * i01) + avc * ((1 - auc) * i10 + auc * i11)
    ddu = ((1 - avc) * (i01 - i00) + avc * (i11 - i10)) * umask[None, :]
    ddv = ((1 - auc) * (i10 - i00) + auc * (i11 - i01)) * vmask[:, None]
    return vals, ddu, ddv, us, vs


def bilinear_crop(img: np.ndarray, box: Tensor, size: int) -> Tensor:
    """Differentiable (w.r.t. the box) P x P crop of a fixed image.

    ``box`` is a tensor [x, y, w, h]; the image itself is data, so no
    gradient flows into pixels. Piecewise-bilinear in the box coordinates.
    """
    if isinstance(img, Tensor):
        if img.requires_grad:
            raise NumericError("bilinear_crop treats the image as data; it cannot require grad")
        img = img.data
    if box.shape != (4,):
        raise ShapeError(f"box tensor must have shape (4,), got {box.shape}")
    x, y, w, h = (float(v) for v in box.data)
    vals, ddu, ddv, _, _ = _bilinear_kernel(img, x, y, w, h, size)
    ju = (np.arange(size) + 0.5) / size
    jv = (np.arange(size) + 0.5) / size

    def bwd(g):
        g2 = g[0]
        gx = float(np.sum(g2 * ddu))
        gw = float(np.sum(g2 * ddu * ju[None, :]))
        gy = float(np.sum(g2 * ddv))
        gh = float(np.sum(g2 * ddv * jv[:, None]))
        return (np.array([gx, gy, gw, gh], dtype=g.dtype),)

    return nm.make_op(vals[None].astype(img.dtype), (box,), bwd)


def image_gradient(img: Tensor) -> Tensor:
    """Central-difference gradients with replicated borders.

    Input [1,P,P]; output [2,P,P] with channel 0 horizontal and channel 1
    vertical.
    """
    if img.ndim != 3 or img.shape[0] != 1:
        raise ShapeError(f"expected [1,P,P] patch, got {img.shape}")
    if img.shape[1] < 2 or img.shape[2] < 2:
        raise ShapeError("image_gradient needs at least 2x2 patches")
    padx = nm.concat([img[:, :, 0:1], img, img[:, :, -1:]], axis=2)
    gx = nm.mul(nm.sub(padx[:, :, 2:], padx[:, :, :-2]), 0.5)
    pady = nm.concat([img[:, 0:1, :], img, img[:, -1:, :]], axis=1)
    gy = nm.mul(nm.sub(pady[:, 2:, :], pady[:, :-2, :]), 0.5)
    return nm.concat([gx, gy], axis=0)


def motion_edge_mask(gt: BBox, geom: PatchGeom, band: int, dtype=np.float64) -> Tensor:
    """Binary mask of patch pixels within ``band`` patch-pixels of the gt
    box boundary (box mapped into patch coordinates); zero for degenerate
    boxes."""
    if band < 1:
        raise ValueError(f"band must be >= 1, got {band}")
    p = geom.size
    if gt.w <= 0 or gt.h <= 0 or geom.w <= 0 or geom.h <= 0:
        return nm.tensor(np.zeros((1, p, p), dtype=dtype))
    sx = p / geom.w
    sy = p / geom.h
    x0 = (gt.x - geom.x) * sx
    x1 = (gt.x + gt.w - geom.x) * sx
    y0 = (gt.y - geom.y) * sy
    y1 = (gt.y + gt.h - geom.y) * sy
    cx = np.arange(p) + 0.5
    cy = np.arange(p) + 0.5
    dx_out = np.maximum(np.maximum(x0 - cx, cx - x1), 0.0)
    dy_out = np.maximum(np.maximum(y0 - cy, cy - y1), 0.0)
    outside = np.sqrt(dx_out[None, :] ** 2 + dy_out[:, None] ** 2)
    inside = np.minimum(
        np.minimum(cx - x0, x1 - cx)[None, :],
        np.minimum(cy - y0, y1 - cy)[:, None],
    )
    dist = np.where(outside > 0, outside, np.maximum(inside, 0.0))
    mask = (dist <= band).astype(dtype)
    return nm.tensor(mask[None])


def loss_meg(batch, u: float, v: float) -> Tensor:
    """Sum over the batch of u*||grad diff||_2^2 + v*||mask . grad diff||_1."""
    if not batch:
        raise ValueError("loss_meg needs a non-empty batch")
    total = None
    for item in batch:
        if item.gt_patch.shape != item.pred_patch.shape:
            raise ShapeError(f"patch shapes differ: {item.gt_patch.shape} vs {item.pred_patch.shape}")
        diff = nm.sub(image_gradient(item.gt_patch), image_gradient(item.pred_patch))
        term = nm.mul(nm.l2_norm_sq(diff), u)
        mask2 = nm.broadcast_to(item.mask.detach(), diff.shape)
        term = nm.add(term, nm.mul(nm.l1_norm(nm.mul(mask2, diff)), v))
        total = term if total is None else nm.add(total, term)
    return nm.reshape(total, ())


# -- feature alignment ---------------------------------------------------------------


def feature_alignment_errors(template_feat: Tensor, pred_feat: Tensor, w_map: Tensor) -> tuple[Tensor, Tensor]:
    """Global and local alignment errors between two feature maps [C,h,w].

    Global: cross-entropy between softmaxed spatially-pooled channel
    vectors (clamped at 1e-12 before the log). Local: L1 of the windowed
    feature difference, ``w_map`` broadcast over channels.
    """
    if template_feat.shape != pred_feat.shape:
        raise ShapeError(f"feature shapes differ: {template_feat.shape} vs {pred_feat.shape}")
    if w_map.shape != template_feat.shape[1:]:
        raise ShapeError(f"window shape {w_map.shape} must match spatial dims {template_feat.shape[1:]}")
    p_vec = nm.softmax(nm.reduce_mean(template_feat, axes=(1, 2)), axis=0)
    q_vec = nm.softmax(nm.reduce_mean(pred_feat, axes=(1, 2)), axis=0)
    e_f = nm.mul(nm.reduce_sum(nm.mul(p_vec, nm.log(nm.maximum(q_vec, 1e-12)))), -1.0)
    win = nm.broadcast_to(nm.reshape(w_map.detach(), (1,) + tuple(w_map.shape)), template_feat.shape)
    e_w = nm.l1_norm(nm.mul(win, nm.sub(template_feat, pred_feat)))
    return nm.reshape(e_f, ()), nm.reshape(e_w, ())


def gaussian_window(shape: tuple[int, int], center: tuple[float, float], sigma: float, dtype=np.float64) -> Tensor:
    """Peak-1 Gaussian over a feature grid, used as the local-error window."""
    h, w = shape
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    d2 = (xs[None, :] - center[0]) ** 2 + (ys[:, None] - center[1]) ** 2
    return nm.tensor(np.exp(-d2 / (2.0 * max(sigma, 1e-6) ** 2)).astype(dtype))


def loss_fgl(e_f, e_w, s: float, w: LossWeights) -> Tensor:
    """(lambda1 + gamma*S) * log(1 + E_F) + lambda2 * log(1 + E_W)."""
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    e_f = e_f if isinstance(e_f, Tensor) else nm.tensor(float(e_f), dtype=np.float64)
    e_w = e_w if isinstance(e_w, Tensor) else nm.tensor(float(e_w), dtype=np.float64)
    if float(e_f.data) < 0 or float(e_w.data) < 0:
        raise ValueError("alignment errors must be non-negative")
    term_f = nm.mul(nm.log1p(e_f), w.lambda1 + w.gamma * s)
    term_w = nm.mul(nm.log1p(e_w), w.lambda2)
    return nm.add(term_f, term_w)


def loss_total(parts: dict, w: LossWeights) -> tuple[Tensor, dict]:
    """Weighted sum of the reg/meg/fgl components plus a breakdown for logs."""
    zero = nm.tensor(0.0, dtype=np.float64)
    reg = parts.get("reg", zero)
    meg = parts.get("meg", zero)
    fgl = parts.get("fgl", zero)

    def as_tensor(x):
        return x if isinstance(x, Tensor) else nm.tensor(float(x), dtype=np.float64)

    reg, meg, fgl = as_tensor(reg), as_tensor(meg), as_tensor(fgl)
    total = nm.add(nm.add(nm.mul(reg, w.lambda_reg), nm.mul(meg, w.lambda_meg)), nm.mul(fgl, w.lambda_fgl))
    breakdown = {
        "reg": float(reg.data),
        "meg": float(meg.data),
        "fgl": float(fgl.data),
        "total": float(total.data),
    }
    return total, breakdown
