"""Siamese motion module: bidirectional H/V selective state-space scans,
a shared 3x3 conv applied to every scan output, adaptive scale weighting,
and a multi-head self-attention block over the fused 1/8 map.

The scan follows the standard selective recurrence with input-dependent
step, input and output projections: per time step t and channel c,

    dt[c] = softplus(x_t . Wd[:,c] + bd[c])
    h_t[c,i] = exp(dt[c] * A[c,i]) * h_{t-1}[c,i] + dt[c] * B_t[i] * x_t[c]
    y_t[c]   = sum_i C_t[i] * h_t[c,i] + D[c] * x_t[c]

with B_t = x_t . Wb, C_t = x_t . Wc and h_0 = 0. A is stored as -exp(a_log)
so it stays strictly negative and the state transition is non-expansive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .backbone import PyramidFeatures
from .numerics import ShapeError, Tensor
from .params import ConfigError, ParamStore


@dataclass
class SSMParams:
    """One scan direction's parameters; ``n`` states per channel."""

    a_log: Tensor  # [C,n]; A = -exp(a_log)
    w_b: Tensor  # [C,n]
    w_c: Tensor  # [C,n]
    w_delta: Tensor  # [C,C]
    b_delta: Tensor  # [C]
    d: Tensor  # [C]
    n: int


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        c = self.w_q.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ConfigError(f"channels {c} not divisible by heads {self.heads}")


@dataclass
class SMMParams:
    hss: SSMParams
    vss: SSMParams
    # path key -> (weight, bias); {"": ...} when the conv is shared between
    # the H and V paths, {"h": ..., "v": ...} when duplicated.
    shared_conv: dict[str, tuple[Tensor, Tensor]]
    reduce_w: Tensor
    reduce_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    attn: AttentionParams
    sps: bool

    def phi_sh(self, path: str) -> tuple[Tensor, Tensor]:
        return self.shared_conv["" if self.sps else path]


@dataclass
class ScaleThresholds:
    t_small: float
    t_large: float
    emphasis: float

    def __post_init__(self):
        if not (0 < self.t_small < self.t_large):
            raise ConfigError(f"need 0 < t_small < t_large, got {self.t_small}, {self.t_large}")
        if not (1.0 / 3.0 < self.emphasis <= 1.0):
            raise ConfigError(f"emphasis must lie in (1/3, 1], got {self.emphasis}")


@dataclass(frozen=True)
class ScaleWeights:
    w4: float
    w8: float
    w16: float

    def as_tuple(self):
        return (self.w4, self.w8, self.w16)


def select_scale(s_r: float, th: ScaleThresholds) -> ScaleWeights:
    """Adaptive scale weighting by target region size (search-crop pixels).

    Small targets emphasize the 1/16 map, large targets the 1/4 map, the
    mid range and exact threshold ties the default 1/8 map. Weights sum to
    1 exactly; the emphasized scale receives ``emphasis``.
    """
    if not (s_r > 0):
        raise ValueError(f"target region size must be positive, got {s_r}")
    rest = (1.0 - th.emphasis) / 2.0
    top = 1.0 - 2.0 * rest
    if s_r < th.t_small:
        return ScaleWeights(rest, rest, top)
    if s_r > th.t_large:
        return ScaleWeights(top, rest, rest)
    return ScaleWeights(rest, top, rest)


# -- scan engine ---------------------------------------------------------------


def _scan_batched(seq: Tensor, p: SSMParams, reverse: bool) -> Tensor:
    """Selective scan over [N,L,C] sequences (N independent, shared params)."""
    n_seq, length, c = seq.shape
    if length < 1:
        raise ShapeError("selective scan needs at least one element")
    n = p.n
    if reverse:
        seq = nm.flip(seq, axis=1)
    flat = nm.reshape(seq, (n_seq * length, c))
    bias = nm.broadcast_to(nm.reshape(p.b_delta, (1, c)), (n_seq * length, c))
    delta = nm.softplus(nm.add(nm.matmul(flat, p.w_delta), bias))
    b_all = nm.matmul(flat, p.w_b)
    c_all = nm.matmul(flat, p.w_c)
    a = nm.mul(nm.exp(p.a_log), -1.0)
    d3 = nm.broadcast_to(nm.reshape(delta, (n_seq * length, c, 1)), (n_seq * length, c, n))
    a3 = nm.broadcast_to(nm.reshape(a, (1, c, n)), (n_seq * length, c, n))
    abar = nm.reshape(nm.exp(nm.mul(d3, a3)), (n_seq, length, c, n))
    dx = nm.mul(delta, flat)
    dx3 = nm.broadcast_to(nm.reshape(dx, (n_seq * length, c, 1)), (n_seq * length, c, n))
    b3 = nm.broadcast_to(nm.reshape(b_all, (n_seq * length, 1, n)), (n_seq * length, c, n))
    term = nm.reshape(nm.mul(dx3, b3), (n_seq, length, c, n))
    h = None
    states = []
    for t in range(length):
        step = term[:, t]
        h = step if h is None else nm.add(nm.mul(abar[:, t], h), step)
        states.append(h)
    h_all = nm.stack(states, axis=1)
    c3 = nm.broadcast_to(nm.reshape(c_all, (n_seq, length, 1, n)), (n_seq, length, c, n))
    y = nm.reduce_sum(nm.mul(h_all, c3), axes=3)
    d_row = nm.broadcast_to(nm.reshape(p.d, (1, 1, c)), (n_seq, length, c))
    y = nm.add(y, nm.mul(d_row, seq))
    if reverse:
        y = nm.flip(y, axis=1)
    return y


def selective_scan_1d(xs: Tensor, p: SSMParams, direction: str = "forward") -> Tensor:
    """One-directional scan over a single [L,C] sequence."""
    if xs.ndim != 2:
        raise ShapeError(f"expected [L,C] sequence, got {xs.shape}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    out = _scan_batched(nm.reshape(xs, (1,) + tuple(xs.shape)), p, reverse=direction == "backward")
    return out[0]


def _rows_scan_batched(f: Tensor, p: SSMParams) -> Tensor:
    """Bidirectional row-wise scan of [B,C,H,W]: each row is a length-W
    sequence of C-vectors; forward and backward passes are summed."""
    b, c, h, w = f.shape
    seq = nm.reshape(nm.transpose(f, (0, 2, 3, 1)), (b * h, w, c))
    y = nm.add(_scan_batched(seq, p, reverse=False), _scan_batched(seq, p, reverse=True))
    return nm.transpose(nm.reshape(y, (b, h, w, c)), (0, 3, 1, 2))


def _transpose_hw(f: Tensor) -> Tensor:
    axes = (0, 1, 3, 2) if f.ndim == 4 else (0, 2, 1)
    return nm.transpose(f, axes)


def hss_scan(f: Tensor, p: SSMParams) -> Tensor:
    """Horizontal branch: H row sequences per direction over [C,H,W]."""
    if f.ndim != 3:
        raise ShapeError(f"expected [C,H,W] features, got {f.shape}")
    return _rows_scan_batched(nm.reshape(f, (1,) + tuple(f.shape)), p)[0]


def vss_scan(f: Tensor, p: SSMParams) -> Tensor:
    """Vertical branch: W column sequences per direction over [C,H,W]."""
    if f.ndim != 3:
        raise ShapeError(f"expected [C,H,W] features, got {f.shape}")
    fb = nm.reshape(f, (1,) + tuple(f.shape))
    return _transpose_hw(_rows_scan_batched(_transpose_hw(fb), p))[0]


# -- attention -----------------------------------------------------------------


def _attention_batched(x: Tensor, p: AttentionParams) -> Tensor:
    b, length, c = x.shape
    heads = p.heads
    dh = c // heads
    flat = nm.reshape(x, (b * length, c))

    def split_heads(t):
        return nm.reshape(nm.transpose(nm.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3)), (b * heads, length, dh))

    q = split_heads(nm.matmul(flat, p.w_q))
    k = split_heads(nm.matmul(flat, p.w_k))
    v = split_heads(nm.matmul(flat, p.w_v))
    scores = nm.mul(nm.bmm(q, nm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = nm.softmax(scores, axis=2)
    out = nm.bmm(attn, v)
    out = nm.reshape(nm.transpose(nm.reshape(out, (b, heads, length, dh)), (0, 2, 1, 3)), (b * length, c))
    return nm.reshape(nm.matmul(out, p.w_o), (b, length, c))


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head scaled dot-product attention over [L,C] tokens."""
    if x.ndim != 2:
        raise ShapeError(f"expected [L,C] tokens, got {x.shape}")
    if x.shape[1] % p.heads:
        raise ConfigError(f"channels {x.shape[1]} not divisible by heads {p.heads}")
    return _attention_batched(nm.reshape(x, (1,) + tuple(x.shape)), p)[0]


# -- motion module forward -------------------------------------------------------


def _phi_sh(x: Tensor, p: SMMParams, path: str) -> Tensor:
    w, bias = p.phi_sh(path)
    return nm.conv2d(x, w, stride=1, pad=1, bias=bias)


def _motion_map(prev: Tensor, curr: Tensor, p: SMMParams) -> Tensor:
    m = nm.concat([nm.sub(curr, prev), curr], axis=1)
    return nm.conv2d(m, p.reduce_w, bias=p.reduce_b)


def _branch_pair(m_h: Tensor, m_v: Tensor, p: SMMParams) -> tuple[Tensor, Tensor]:
    yh = _phi_sh(_rows_scan_batched(m_h, p.hss), p, "h")
    yv = _phi_sh(_transpose_hw(_rows_scan_batched(_transpose_hw(m_v), p.vss)), p, "v")
    return yh, yv


def _down2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return nm.reduce_mean(nm.reshape(x, (b, c, h // 2, 2, w // 2, 2)), axes=(3, 5))


def _up2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    x6 = nm.reshape(x, (b, c, h, 1, w, 1))
    return nm.reshape(nm.broadcast_to(x6, (b, c, h, 2, w, 2)), (b, c, 2 * h, 2 * w))


def smm_forward_batched(
    prev_h: PyramidFeatures,
    prev_v: PyramidFeatures,
    curr_h: PyramidFeatures,
    curr_v: PyramidFeatures,
    p: SMMParams,
    sel: ScaleWeights,
) -> Tensor:
    """Batched motion features on the 1/8 grid from per-path pyramids.

    Per scale the motion map (frame difference concatenated with current
    features, reduced 1x1) runs through both scans and the shared conv, the
    branch sum goes through the 1x1 fuse conv, scales are resampled onto
    the 1/8 grid (2x2 mean down, nearest up) and combined with ``sel``
    weights, and a residual self-attention block closes the module.
    """
    for a, b in ((prev_h.f8, curr_h.f8), (prev_v.f8, curr_v.f8)):
        if a.shape != b.shape:
            raise ShapeError(f"pyramid shape mismatch {a.shape} vs {b.shape}")
    ys = []
    for ph, pv, ch, cv in (
        (prev_h.f4, prev_v.f4, curr_h.f4, curr_v.f4),
        (prev_h.f8, prev_v.f8, curr_h.f8, curr_v.f8),
        (prev_h.f16, prev_v.f16, curr_h.f16, curr_v.f16),
    ):
        yh, yv = _branch_pair(_motion_map(ph, ch, p), _motion_map(pv, cv, p), p)
        ys.append(nm.conv2d(nm.add(yh, yv), p.fuse_w, bias=p.fuse_b))
    y4, y8, y16 = ys
    combined = nm.add(
        nm.add(nm.mul(_down2(y4), sel.w4), nm.mul(y8, sel.w8)),
        nm.mul(_up2(y16), sel.w16),
    )
    b, c, h8, w8 = combined.shape
    tokens = nm.reshape(nm.transpose(combined, (0, 2, 3, 1)), (b, h8 * w8, c))
    att = _attention_batched(tokens, p.attn)
    att = nm.transpose(nm.reshape(att, (b, h8, w8, c)), (0, 3, 1, 2))
    # residual keeps the spatial response usable before the block trains
    return nm.add(combined, att)


def smm_forward(prev: PyramidFeatures, curr: PyramidFeatures, p: SMMParams, sel: ScaleWeights) -> Tensor:
    """Motion feature map [C,H/8,W/8] for one pyramid pair (shared path)."""

    def batched(pyr):
        return PyramidFeatures(*(nm.reshape(m, (1,) + tuple(m.shape)) for m in pyr.maps()))

    pb, cb = batched(prev), batched(curr)
    return smm_forward_batched(pb, pb, cb, cb, p, sel)[0]


def eq2_outputs(template_map: Tensor, search_map: Tensor, p: SMMParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """The four shared-conv branch outputs (H/V x template/search) used by
    the sharing invariants: perturbing the shared conv must move all four."""
    outs = []
    for m in (template_map, search_map):
        mb = nm.reshape(m, (1,) + tuple(m.shape))
        yh, yv = _branch_pair(mb, mb, p)
        outs.extend([yh[0], yv[0]])
    return tuple(outs)


# -- init ------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, dtype):
    # variance-preserving for the linear projections and convs in this module
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_ssm(rng, c: int, n: int, dtype) -> dict[str, np.ndarray]:
    return {
        "a_log": np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (c, 1)).astype(dtype),
        "w_b": _uniform(rng, (c, n), c, dtype),
        "w_c": _uniform(rng, (c, n), c, dtype),
        "w_delta": _uniform(rng, (c, c), c, dtype),
        # softplus(-2.25) ~ 0.1 keeps the state memory long at init
        "b_delta": np.full(c, -2.25, dtype=dtype),
        "d": np.ones(c, dtype=dtype),
    }


def init_smm(seed: int, config, store: ParamStore | None = None, dtype=np.float32) -> SMMParams:
    """Build and register SMM parameters under the ``smm.`` prefix.

    ``config`` supplies ``feat_channels``, ``ssm_state_dim``, ``attn_heads``
    and ``use_sps``. Exactly one shared-conv copy exists when sharing is on.
    """
    c = int(config.feat_channels)
    n = int(config.ssm_state_dim)
    heads = int(config.attn_heads)
    sps = bool(config.use_sps)
    store = store if store is not None else ParamStore()
    rng = np.random.default_rng(seed)

    def reg(name, data):
        return store.add("smm." + name, Tensor(data, requires_grad=True))

    def ssm(prefix):
        raw = _init_ssm(rng, c, n, dtype)
        return SSMParams(**{k: reg(f"{prefix}.{k}", v) for k, v in raw.items()}, n=n)

    hss = ssm("hss")
    vss = ssm("vss")
    shared = {}
    for path in ("",) if sps else ("h", "v"):
        seg = "shared_conv" if sps else f"shared_conv.{path}"
        shared[path] = (
            reg(f"{seg}.w", _uniform(rng, (c, c, 3, 3), c * 9, dtype)),
            reg(f"{seg}.b", np.zeros(c, dtype=dtype)),
        )
    attn = AttentionParams(
        w_q=reg("attn.wq", _uniform(rng, (c, c), c, dtype)),
        w_k=reg("attn.wk", _uniform(rng, (c, c), c, dtype)),
        w_v=reg("attn.wv", _uniform(rng, (c, c), c, dtype)),
        w_o=reg("attn.wo", _uniform(rng, (c, c), c, dtype)),
        heads=heads,
    )
    return SMMParams(
        hss=hss,
        vss=vss,
        shared_conv=shared,
        reduce_w=reg("reduce.w", _uniform(rng, (c, 2 * c, 1, 1), 2 * c, dtype)),
        reduce_b=reg("reduce.b", np.zeros(c, dtype=dtype)),
        fuse_w=reg("fuse.w", _uniform(rng, (c, c, 1, 1), c, dtype)),
        fuse_b=reg("fuse.b", np.zeros(c, dtype=dtype)),
        attn=attn,
        sps=sps,
    )
