"""Siamese feature extractor with a three-scale pyramid.

A structurally faithful stand-in for a deep residual backbone: stem conv
(stride 2) plus four stages of two 3x3 convs with strides (2, 1, 2, 2),
giving taps at strides 4, 8 and 16 that 1x1 lateral convs project to a
common channel count. The parameter set splits into a "base" part (stem +
stages 1-2) and a deeper part (stages 3-4); the deeper part is either a
single copy consumed by both scan paths (parameter sharing on) or
duplicated per horizontal/vertical path (sharing off).

Template and search branches always run through the same parameter object;
that is the Siamese weight sharing and it is not a config knob.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor
from .params import ParamStore


@dataclass
class PyramidFeatures:
    """Feature maps at 1/4, 1/8 and 1/16 of the input size, equal channels."""

    f4: Tensor
    f8: Tensor
    f16: Tensor

    def maps(self):
        return (self.f4, self.f8, self.f16)


@dataclass
class BackboneParams:
    width: int
    channels: int
    sps: bool
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def scan_paths(self):
        return ("",) if self.sps else ("h", "v")

    def _stage_key(self, stage: int, conv: int, path: str, leaf: str) -> str:
        if stage >= 3 and not self.sps:
            if path not in ("h", "v"):
                raise ValueError(f"stage {stage} needs a scan path when sharing is off, got {path!r}")
            return f"s{stage}.{path}.c{conv}.{leaf}"
        return f"s{stage}.c{conv}.{leaf}"

    def stage_conv(self, stage: int, conv: int, path: str = "") -> tuple[Tensor, Tensor]:
        return (
            self.tensors[self._stage_key(stage, conv, path, "w")],
            self.tensors[self._stage_key(stage, conv, path, "b")],
        )


_STAGE_STRIDES = (2, 1, 2, 2)


def _conv_names(width: int, channels: int, sps: bool):
    """Yield (name, shape) for every backbone tensor, in definition order."""
    yield "stem.w", (width, 1, 3, 3)
    yield "stem.b", (width,)
    for stage in (1, 2):
        for conv in (1, 2):
            yield f"s{stage}.c{conv}.w", (width, width, 3, 3)
            yield f"s{stage}.c{conv}.b", (width,)
    paths = ("",) if sps else ("h", "v")
    for stage in (3, 4):
        for path in paths:
            seg = f"s{stage}." if sps else f"s{stage}.{path}."
            for conv in (1, 2):
                yield f"{seg}c{conv}.w", (width, width, 3, 3)
                yield f"{seg}c{conv}.b", (width,)
    for scale in (4, 8, 16):
        yield f"lat{scale}.w", (channels, width, 1, 1)
        yield f"lat{scale}.b", (channels,)


def parameter_count(width: int, channels: int, sps: bool = True) -> int:
    """Closed form: stem 9w+w, 3x3 convs 9w^2+w each (8 shared-path convs,
    plus 4 duplicated stage-3/4 convs when sharing is off), laterals
    3(cw+c)."""
    return sum(int(np.prod(shape)) for _, shape in _conv_names(width, channels, sps))


def init_backbone(seed: int, config, store: ParamStore | None = None, dtype=np.float32) -> BackboneParams:
    """Deterministic fan-in-scaled uniform init; biases zero.

    ``config`` supplies ``backbone_width``, ``feat_channels`` and
    ``use_sps``. Tensors register into ``store`` (created if omitted) under
    the ``bb.`` prefix.
    """
    width = int(config.backbone_width)
    channels = int(config.feat_channels)
    sps = bool(config.use_sps)
    store = store if store is not None else ParamStore()
    rng = np.random.default_rng(seed)
    params = BackboneParams(width=width, channels=channels, sps=sps)
    for name, shape in _conv_names(width, channels, sps):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            # gain 2 under the ReLU convs keeps activation variance flat
            # through the stack; the linear laterals use gain 1
            gain = 3.0 if name.startswith("lat") else 6.0
            bound = np.sqrt(gain / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params.tensors[name] = store.add("bb." + name, Tensor(data, requires_grad=True))
    return params


def split_params(params: BackboneParams) -> tuple[list[str], list[str]]:
    """Partition backbone names at the stage-2/3 boundary.

    With sharing off the deep stages are per-path copies, so no name is
    marked shared and downstream paths own their duplicates.
    """
    all_names = list(params.tensors.keys())
    if not params.sps:
        return all_names, []
    shared = [n for n in all_names if n.startswith(("s3.", "s4.", "lat8.", "lat16."))]
    base = [n for n in all_names if n not in set(shared)]
    return base, shared


def _block(x, w, b, stride):
    return nm.relu(nm.conv2d(x, w, stride=stride, pad=1, bias=b))


def extract_pyramid(images: Tensor, params: BackboneParams, path: str = "") -> PyramidFeatures:
    """Batched pyramid for images [B,1,H,W]; ``path`` picks the deep-stage
    copy when sharing is off."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise ShapeError(f"expected [B,1,H,W] images, got {images.shape}")
    h, w = images.shape[2], images.shape[3]
    if h % 16 or w % 16:
        raise ShapeError(f"image dims must be divisible by 16, got {h}x{w}")
    t = params.tensors
    x = _block(images, t["stem.w"], t["stem.b"], 2)
    for stage in (1, 2):
        x = _block(x, *params.stage_conv(stage, 1), _STAGE_STRIDES[stage - 1])
        x = _block(x, *params.stage_conv(stage, 2), 1)
    x4 = x
    x = _block(x4, *params.stage_conv(3, 1, path), _STAGE_STRIDES[2])
    x8 = _block(x, *params.stage_conv(3, 2, path), 1)
    x = _block(x8, *params.stage_conv(4, 1, path), _STAGE_STRIDES[3])
    x16 = _block(x, *params.stage_conv(4, 2, path), 1)
    return PyramidFeatures(
        f4=nm.conv2d(x4, t["lat4.w"], bias=t["lat4.b"]),
        f8=nm.conv2d(x8, t["lat8.w"], bias=t["lat8.b"]),
        f16=nm.conv2d(x16, t["lat16.w"], bias=t["lat16.b"]),
    )


def extract_features(image: Tensor, params: BackboneParams, path: str = "") -> PyramidFeatures:
    """Three-scale features for one grayscale image [1,H,W] in [0,1]."""
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"expected [1,H,W] image, got {image.shape}")
    batched = extract_pyramid(nm.reshape(image, (1,) + tuple(image.shape)), params, path)
    return PyramidFeatures(
        f4=batched.f4[0],
        f8=batched.f8[0],
        f16=batched.f16[0],
    )
