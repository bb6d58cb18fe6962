"""Tracking metrics, a synthetic thermal-sequence generator, and sequence IO.

Metrics: center-error precision (thresholds 0..50 px), size-normalized
precision (0..0.5), overlap success with IoU >= tau over 21 thresholds,
and a simplified reset-based accuracy/robustness/EAO protocol (named
``eao_desk``; deliberately not toolkit EAO).

Synthetic sequences are additive Gaussian blobs on a flat background with
optional occluder bars, velocity-aligned box blur and pixel noise; ground
truth is the analytic +-3 sigma box.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .head import BBox, iou


class DataError(ValueError):
    """Raised on unreadable or inconsistent sequence data."""


PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NP_THRESHOLDS = np.round(np.arange(0, 51, dtype=np.float64) * 0.01, 2)
SUCCESS_THRESHOLDS = np.round(np.arange(0, 21, dtype=np.float64) * 0.05, 2)

KNOWN_TAGS = {"occlusion", "fast_motion", "motion_blur", "thermal_crossover", "background_clutter"}


@dataclass
class Sequence:
    frames: list
    gt: list
    tags: set = field(default_factory=set)
    name: str = "unnamed"

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise DataError(f"{self.name}: {len(self.frames)} frames but {len(self.gt)} gt boxes")
        if self.frames:
            shape = self.frames[0].shape
            for f in self.frames:
                if f.shape != shape:
                    raise DataError(f"{self.name}: frame dims vary ({shape} vs {f.shape})")

    def __len__(self):
        return len(self.frames)


@dataclass
class MetricReport:
    precision_at_20: float
    np_auc: float
    success_auc: float
    accuracy: float
    robustness: int
    eao_desk: float
    curves: dict

    def as_dict(self) -> dict:
        return {
            "precision_at_20": self.precision_at_20,
            "np_auc": self.np_auc,
            "success_auc": self.success_auc,
            "accuracy": self.accuracy,
            "robustness": self.robustness,
            "eao_desk": self.eao_desk,
            "curves": self.curves,
        }


# -- curve metrics ----------------------------------------------------------------


def _paired(traj, gt):
    if len(traj) != len(gt):
        raise DataError(f"trajectory length {len(traj)} != gt length {len(gt)}")
    pairs = [(p, g) for p, g in zip(traj, gt) if g is not None and p is not None]
    if not pairs:
        raise DataError("no frames with ground truth to evaluate")
    return pairs


def precision_curve(traj, gt, thresholds=PRECISION_THRESHOLDS) -> np.ndarray:
    """Fraction of frames whose center error is <= tau, per threshold."""
    pairs = _paired(traj, gt)
    err = np.array([np.hypot(p.cx - g.cx, p.cy - g.cy) for p, g in pairs])
    return np.array([(err <= t).mean() for t in thresholds])


def norm_precision_curve(traj, gt, thresholds=NP_THRESHOLDS) -> np.ndarray:
    """Center error normalized per-axis by gt size, fraction <= tau."""
    pairs = _paired(traj, gt)
    for _, g in pairs:
        if g.w <= 0 or g.h <= 0:
            raise DataError("normalized precision needs positive gt sizes")
    err = np.array([np.hypot((p.cx - g.cx) / g.w, (p.cy - g.cy) / g.h) for p, g in pairs])
    return np.array([(err <= t).mean() for t in thresholds])


def success_curve(traj, gt, thresholds=SUCCESS_THRESHOLDS) -> np.ndarray:
    """Fraction of frames with IoU >= tau (perfect tracking scores 1.0)."""
    pairs = _paired(traj, gt)
    ious = np.array([iou(p, g) for p, g in pairs])
    return np.array([(ious >= t).mean() for t in thresholds])


def metric_report(traj, gt) -> MetricReport:
    """Curve metrics plus a trajectory-level reset-free accuracy/robustness
    analog (failures counted as runs of 5 consecutive zero-IoU frames)."""
    p_curve = precision_curve(traj, gt)
    n_curve = norm_precision_curve(traj, gt)
    s_curve = success_curve(traj, gt)
    pairs = _paired(traj, gt)
    ious = np.array([iou(p, g) for p, g in pairs])
    failures = 0
    run = 0
    for v in ious:
        run = run + 1 if v == 0 else 0
        if run == 5:
            failures += 1
            run = 0
    accuracy = float(ious.mean())
    return MetricReport(
        precision_at_20=float(p_curve[20]),
        np_auc=float(n_curve.mean()),
        success_auc=float(s_curve.mean()),
        accuracy=accuracy,
        robustness=failures,
        eao_desk=accuracy / (1 + failures),
        curves={
            "precision": {"thresholds": PRECISION_THRESHOLDS.tolist(), "values": p_curve.tolist()},
            "norm_precision": {"thresholds": NP_THRESHOLDS.tolist(), "values": n_curve.tolist()},
            "success": {"thresholds": SUCCESS_THRESHOLDS.tolist(), "values": s_curve.tolist()},
        },
    )


def vot_desk_eval(tracker, seq: Sequence) -> tuple[float, int, float]:
    """Reset-based protocol: a failure is 5 consecutive zero-IoU frames;
    the tracker re-initializes from gt 5 frames later and the gap frames
    are burn-in. Returns (accuracy, robustness, eao_desk)."""
    if len(seq) < 1 or seq.gt[0] is None:
        raise DataError("sequence needs ground truth on frame 0")
    tracker.init(seq.frames[0], seq.gt[0])
    ious = []
    failures = 0
    zero_run = 0
    t = 1
    while t < len(seq):
        box, _ = tracker.update(seq.frames[t])
        if seq.gt[t] is not None:
            v = iou(box, seq.gt[t])
            ious.append(v)
            zero_run = zero_run + 1 if v == 0 else 0
            if zero_run >= 5:
                failures += 1
                zero_run = 0
                t_reinit = t + 5
                if t_reinit >= len(seq) or seq.gt[t_reinit] is None:
                    break
                tracker.init(seq.frames[t_reinit], seq.gt[t_reinit])
                t = t_reinit + 1
                continue
        t += 1
    accuracy = float(np.mean(ious)) if ious else 0.0
    return accuracy, failures, accuracy / (1 + failures)


# -- synthetic sequences ------------------------------------------------------------


@dataclass
class OccluderSpec:
    times: list  # list of (start, end) frame windows, end exclusive
    coverage: float = 1.0
    intensity: float = 0.7


@dataclass
class SequenceSpec:
    n_frames: int = 30
    size: tuple[int, int] = (128, 128)  # (H, W)
    motion: str = "linear"  # or "sinusoidal"
    speed: float = 1.5  # px/frame along +x
    start: tuple[float, float] | None = None  # (cx, cy)
    amplitude: float = 18.0  # sinusoidal vertical swing
    period: float = 24.0
    target_sigma: float = 4.0
    target_peak: float = 0.8
    occluder: OccluderSpec | None = None
    blur_len: float = 0.0
    noise_sigma: float = 0.01
    background: float = 0.15
    seed: int = 0
    tags: set = field(default_factory=set)
    name: str = "synthetic"


def _center_path(spec: SequenceSpec) -> np.ndarray:
    h, w = spec.size
    margin = 3 * spec.target_sigma + 2
    if spec.start is None:
        start = (margin + 2.0, h / 2.0)
    else:
        start = spec.start
    t = np.arange(spec.n_frames, dtype=np.float64)
    if spec.motion == "linear":
        cx = start[0] + spec.speed * t
        cy = np.full_like(cx, start[1])
    elif spec.motion == "sinusoidal":
        cx = start[0] + spec.speed * t
        cy = start[1] + spec.amplitude * np.sin(2 * np.pi * t / spec.period)
    else:
        raise DataError(f"unknown motion {spec.motion!r}")
    path = np.stack([cx, cy], axis=1)
    if (
        np.any(path[:, 0] < margin)
        or np.any(path[:, 0] > w - margin)
        or np.any(path[:, 1] < margin)
        or np.any(path[:, 1] > h - margin)
    ):
        raise DataError(f"{spec.name}: blob path leaves the frame; shrink speed or n_frames")
    return path


def _shift_clamped(frame: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = frame.shape
    rows = np.clip(np.arange(h) + dy, 0, h - 1)
    cols = np.clip(np.arange(w) + dx, 0, w - 1)
    return frame[np.ix_(rows, cols)]


def gen_synthetic_sequence(spec: SequenceSpec) -> Sequence:
    """Deterministic synthetic sequence per the spec; gt is the +-3 sigma
    blob box. Composition order: blob, occluder, directional blur, noise."""
    h, w = spec.size
    path = _center_path(spec)
    rng = np.random.default_rng(spec.seed)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    occ_windows = spec.occluder.times if spec.occluder else []
    frames = []
    gt = []
    for t in range(spec.n_frames):
        cx, cy = path[t]
        frame = spec.background + spec.target_peak * np.exp(
            -((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * spec.target_sigma**2)
        )
        side = 6 * spec.target_sigma
        box = BBox(cx - side / 2, cy - side / 2, side, side)
        if any(s <= t < e for (s, e) in occ_windows):
            bar_w = spec.occluder.coverage * side
            x0 = int(np.floor(cx - bar_w / 2))
            x1 = int(np.ceil(cx + bar_w / 2))
            frame[:, max(0, x0) : min(w, x1)] = spec.occluder.intensity
        if spec.blur_len >= 1.0 and t > 0:
            vel = path[t] - path[t - 1]
            norm = np.hypot(*vel)
            unit = vel / norm if norm > 0 else np.array([1.0, 0.0])
            k = max(1, int(round(spec.blur_len)))
            acc = np.zeros_like(frame)
            for step in range(k):
                ddx = int(round(step * unit[0]))
                ddy = int(round(step * unit[1]))
                acc += _shift_clamped(frame, ddy, ddx)
            frame = acc / k
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
        gt.append(box)
    return Sequence(frames=frames, gt=gt, tags=set(spec.tags), name=spec.name)


def default_benchmark_specs(base_seed: int = 100) -> list[SequenceSpec]:
    """Six tagged sequences: two each for occlusion, fast motion and blur."""
    specs = []
    for i in range(2):
        specs.append(
            SequenceSpec(
                n_frames=36,
                speed=1.8 + 0.4 * i,
                motion="sinusoidal" if i else "linear",
                occluder=OccluderSpec(times=[(12, 18)], coverage=1.0, intensity=0.65),
                noise_sigma=0.015,
                seed=base_seed + i,
                tags={"occlusion"},
                name=f"occlusion_{i}",
            )
        )
    for i in range(2):
        specs.append(
            SequenceSpec(
                n_frames=30,
                speed=3.2 + 0.5 * i,
                motion="linear",
                noise_sigma=0.015,
                seed=base_seed + 10 + i,
                tags={"fast_motion"},
                name=f"fast_motion_{i}",
            )
        )
    for i in range(2):
        specs.append(
            SequenceSpec(
                n_frames=32,
                speed=2.2 + 0.4 * i,
                motion="sinusoidal" if i else "linear",
                blur_len=5.0,
                noise_sigma=0.015,
                seed=base_seed + 20 + i,
                tags={"motion_blur"},
                name=f"motion_blur_{i}",
            )
        )
    return specs


def training_specs(base_seed: int = 1000, count: int = 10) -> list[SequenceSpec]:
    """Varied clean-to-hard sequences the trainer samples pairs from."""
    specs = []
    for i in range(count):
        hard = i % 3
        specs.append(
            SequenceSpec(
                n_frames=28,
                motion="sinusoidal" if i % 2 else "linear",
                speed=1.0 + 0.35 * (i % 5),
                amplitude=10.0 + 2.0 * (i % 4),
                target_sigma=3.0 + 0.5 * (i % 4),
                target_peak=0.6 + 0.05 * (i % 4),
                occluder=OccluderSpec(times=[(10, 15)], coverage=0.9) if hard == 1 else None,
                blur_len=4.0 if hard == 2 else 0.0,
                noise_sigma=0.01 + 0.005 * (i % 3),
                seed=base_seed + i,
                tags=set(),
                name=f"train_{i:02d}",
            )
        )
    return specs


def easy_eval_specs(base_seed: int = 5000) -> list[SequenceSpec]:
    """Four held-out easy sequences (slow, clean) for the tracking gate."""
    specs = []
    for i in range(4):
        specs.append(
            SequenceSpec(
                n_frames=30,
                motion="linear",
                speed=0.8 + 0.3 * i,
                target_sigma=3.5 + 0.4 * i,
                target_peak=0.75,
                noise_sigma=0.008,
                seed=base_seed + i,
                tags=set(),
                name=f"easy_{i}",
            )
        )
    return specs


# -- disk IO --------------------------------------------------------------------


def save_sequence(seq: Sequence, out_dir: str) -> None:
    """OTB-style layout: img/%04d.png (16-bit), groundtruth_rect.txt, tags.txt."""
    from PIL import Image

    img_dir = os.path.join(out_dir, "img")
    os.makedirs(img_dir, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        arr = np.clip(frame, 0.0, 1.0)
        img = Image.fromarray((arr * 65535.0 + 0.5).astype(np.uint16))
        img.save(os.path.join(img_dir, f"{i:04d}.png"))
    with open(os.path.join(out_dir, "groundtruth_rect.txt"), "w", encoding="utf-8") as f:
        for box in seq.gt:
            if box is None:
                f.write("nan,nan,nan,nan\n")
            else:
                f.write(f"{box.x:.4f},{box.y:.4f},{box.w:.4f},{box.h:.4f}\n")
    if seq.tags:
        with open(os.path.join(out_dir, "tags.txt"), "w", encoding="utf-8") as f:
            for tag in sorted(seq.tags):
                f.write(tag + "\n")


def load_sequence(seq_dir: str, one_based: bool = False) -> Sequence:
    """Read img/%04d.png plus groundtruth_rect.txt; 8- or 16-bit grayscale
    PNGs normalize to [0,1]. ``one_based`` shifts x,y by -1 for data using
    1-based pixel coordinates."""
    from PIL import Image

    img_dir = os.path.join(seq_dir, "img")
    if not os.path.isdir(img_dir):
        raise DataError(f"missing image directory {img_dir}")
    files = sorted(f for f in os.listdir(img_dir) if f.lower().endswith(".png"))
    if not files:
        raise DataError(f"no PNG frames in {img_dir}")
    frames = []
    for fname in files:
        path = os.path.join(img_dir, fname)
        try:
            img = Image.open(path)
            img.load()
        except Exception as e:
            raise DataError(f"unreadable image {path}: {e}") from e
        arr = np.asarray(img)
        if arr.ndim == 3:
            arr = arr[..., 0]
        if arr.dtype == np.uint8:
            frames.append((arr.astype(np.float32) / 255.0))
        elif arr.dtype in (np.uint16, np.int32):
            frames.append((arr.astype(np.float32) / 65535.0))
        else:
            frames.append(arr.astype(np.float32))
    gt_path = os.path.join(seq_dir, "groundtruth_rect.txt")
    if not os.path.isfile(gt_path):
        raise DataError(f"missing {gt_path}")
    gt = []
    with open(gt_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            vals = [v for v in re.split(r"[,\t ]+", line) if v]
            if len(vals) != 4:
                raise DataError(f"bad gt line {line!r}")
            x, y, w, h = (float(v) for v in vals)
            if any(np.isnan([x, y, w, h])):
                gt.append(None)
            else:
                off = 1.0 if one_based else 0.0
                gt.append(BBox(x - off, y - off, w, h))
    if len(gt) != len(frames):
        raise DataError(f"{seq_dir}: {len(frames)} frames but {len(gt)} gt lines")
    tags = set()
    tags_path = os.path.join(seq_dir, "tags.txt")
    if os.path.isfile(tags_path):
        with open(tags_path, "r", encoding="utf-8") as f:
            tags = {line.strip() for line in f if line.strip()}
    return Sequence(frames=frames, gt=gt, tags=tags, name=os.path.basename(os.path.normpath(seq_dir)))
