"""Feed-forward path from posed images to triplane inputs.

Stages: a shared 3-level feature pyramid per view, unprojection of the
2-D features onto a voxel grid with frustum masks, mask-weighted view
aggregation through a small 3-D conv stack, axis-aligned average
pooling into three planes, and a hierarchical cross-plane generator
that emits the multi-resolution triplanes.

The generator's cross-plane block: for each target plane, the other two
planes are average-pooled along the coordinate orthogonal to the target
plane, the resulting vectors are duplicated back to 2-D along the
missing axis, concatenated channel-wise with the target, and passed
through a shared 2-D convolution (no activation, so an identity
configuration exists). A residual two-conv refinement follows at every
scale; scales are chained by bilinear x2 upsampling plus a conv.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import project
from .errors import ContractViolation
from .params import ParamBundle
from .triplane import PLANE_AXES, PLANE_KEYS, MultiResTriplanes, TriplaneConfig


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 32          # C: feature/triplane channels
    volume_res: int = 64        # V: unprojection grid resolution
    triplane: TriplaneConfig = field(default_factory=TriplaneConfig)

    def __post_init__(self):
        v = self.volume_res
        if v < 4 or v & (v - 1):
            raise ContractViolation("volume_res must be a power of two >= 4")
        res = self.triplane.resolutions
        if res[0] != v:
            raise ContractViolation(
                f"triplane base resolution {res[0]} must equal volume_res {v}")
        for a, b in zip(res, res[1:]):
            if b != 2 * a:
                raise ContractViolation(
                    "triplane resolutions must double per scale")
        if self.triplane.channels != self.channels:
            raise ContractViolation("triplane channels must equal encoder channels")

    @property
    def pyramid(self):
        return (max(self.channels // 2, 4), self.channels, self.channels)


def coord_grid(v):
    """The (3,V,V,V) tensor of grid-point world coordinates in [-1,1]^3."""
    axis = np.linspace(-1.0, 1.0, v)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([x, y, z], axis=0)


@dataclass
class FeatureVolume:
    """Aggregated voxel features over the scene cube."""

    data: object          # (C,V,V,V) array or Tensor
    res: int

    def __post_init__(self):
        if self.data.shape[1:] != (self.res,) * 3:
            raise ContractViolation("feature volume shape mismatch")


def _conv_init(rng, cout, cin, k):
    std = np.sqrt(2.0 / (cin * k * k))
    return (std * rng.standard_normal((cout, cin, k, k))).astype(np.float32)


def _conv3_init(rng, cout, cin, k):
    std = np.sqrt(2.0 / (cin * k ** 3))
    return (std * rng.standard_normal((cout, cin, k, k, k))).astype(np.float32)


def init_encoder_weights(config, rng):
    """Fresh random weights for extractor + aggregator + generator."""
    c = config.channels
    p0, p1, p2 = config.pyramid
    w = ParamBundle()
    w["feat.c0.w"] = _conv_init(rng, p0, 3, 3)
    w["feat.c0.b"] = np.zeros(p0, np.float32)
    w["feat.c1.w"] = _conv_init(rng, p1, p0, 3)
    w["feat.c1.b"] = np.zeros(p1, np.float32)
    w["feat.c2.w"] = _conv_init(rng, p2, p1, 3)
    w["feat.c2.b"] = np.zeros(p2, np.float32)
    w["feat.top.w"] = _conv_init(rng, c, p2, 1)
    w["feat.lat1.w"] = _conv_init(rng, c, p1, 1)
    w["feat.lat0.w"] = _conv_init(rng, c, p0, 1)
    w["feat.out.w"] = _conv_init(rng, c, c, 3)
    w["feat.out.b"] = np.zeros(c, np.float32)
    w["agg.c0.w"] = _conv3_init(rng, c, c, 3)
    w["agg.c0.b"] = np.zeros(c, np.float32)
    w["agg.c1.w"] = _conv3_init(rng, c, c, 3)
    w["agg.c1.b"] = np.zeros(c, np.float32)
    for s in range(1, config.triplane.n_scales + 1):
        if s > 1:
            w[f"gen.up{s}.w"] = _conv_init(rng, c, c, 3)
            w[f"gen.up{s}.b"] = np.zeros(c, np.float32)
        w[f"gen.s{s}.block.w"] = _conv_init(rng, c, 3 * c, 3)
        w[f"gen.s{s}.block.b"] = np.zeros(c, np.float32)
        w[f"gen.s{s}.ref0.w"] = _conv_init(rng, c, c, 3)
        w[f"gen.s{s}.ref0.b"] = np.zeros(c, np.float32)
        w[f"gen.s{s}.ref1.w"] = _conv_init(rng, c, c, 3)
        w[f"gen.s{s}.ref1.b"] = np.zeros(c, np.float32)
    return w


def _conv_b(x, w, b, stride=1, padding=1):
    y = ad.conv2d(x, w, stride=stride, padding=padding)
    c = y.shape[0]
    return ad.add(y, ad.broadcast(ad.reshape(b, (c, 1, 1)), y.shape))


def _conv3_b(x, w, b, padding=1):
    y = ad.conv3d(x, w, padding=padding)
    c = y.shape[0]
    return ad.add(y, ad.broadcast(ad.reshape(b, (c, 1, 1, 1)), y.shape))


def extract_features(images, bound):
    """Per-view (C,H,W) feature maps from a shared 3-level pyramid.

    ``images`` is a list of (H,W,3) arrays in [0,1]; all views share the
    bound extractor weights.
    """
    if not images:
        raise ContractViolation("extract_features: no input views")
    h, w = np.asarray(images[0]).shape[:2]
    if h % 4 or w % 4:
        raise ContractViolation("image sides must be divisible by 4")
    out = []
    for img in images:
        arr = np.asarray(img, dtype=np.float32)
        if arr.shape[:2] != (h, w):
            raise ContractViolation("inconsistent image sizes across views")
        x = ad.Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        l0 = ad.relu(_conv_b(x, bound["feat.c0.w"], bound["feat.c0.b"]))
        l1 = ad.relu(_conv_b(l0, bound["feat.c1.w"], bound["feat.c1.b"],
                             stride=2))
        l2 = ad.relu(_conv_b(l1, bound["feat.c2.w"], bound["feat.c2.b"],
                             stride=2))
        t2 = ad.conv2d(l2, bound["feat.top.w"])
        t1 = ad.add(ad.conv2d(l1, bound["feat.lat1.w"]),
                    ad.upsample2d(t2, 2, "bilinear"))
        t0 = ad.add(ad.conv2d(l0, bound["feat.lat0.w"]),
                    ad.upsample2d(t1, 2, "bilinear"))
        out.append(_conv_b(t0, bound["feat.out.w"], bound["feat.out.b"]))
    return out


def unproject(feat_map, view, volume_res):
    """Lift one view's feature map onto the voxel grid.

    Every grid point is projected into the view; its feature is
    bilinearly sampled at the projected pixel. Out-of-frustum points get
    zero features and mask 0. Returns (FeatureVolume, mask (V,V,V)).
    """
    v = volume_res
    pts = coord_grid(v).reshape(3, -1).T
    uv, ok = project(pts, view)
    mask = ok.astype(np.float32)
    rowcol = np.stack([uv[:, 1], uv[:, 0]], axis=1)   # gather takes (row, col)
    gathered = ad.bilinear_gather(feat_map, rowcol)   # (V^3, C)
    gathered = ad.mul(gathered, ad.broadcast(
        ad.Tensor(mask[:, None]), gathered.shape))
    c = feat_map.shape[0]
    volume = ad.transpose(ad.reshape(gathered, (v, v, v, c)), (3, 0, 1, 2))
    return FeatureVolume(volume, v), mask.reshape(v, v, v)


def aggregate(items, bound):
    """Mask-weighted mean over views, then the 3-D conv stack.

    ``items`` is a list of (FeatureVolume, mask, view). The mean is
    accumulated in a canonical order (sorted by pose bytes) so any
    permutation of the input views produces bit-identical output.
    """
    if not items:
        raise ContractViolation("aggregate: no views")
    res = items[0][0].res
    order = sorted(range(len(items)),
                   key=lambda i: items[i][2].pose.tobytes())
    total = None
    mask_sum = None
    for i in order:
        vol, mask, _ = items[i]
        total = vol.data if total is None else ad.add(total, vol.data)
        mask_sum = mask if mask_sum is None else mask_sum + mask
    inv = np.where(mask_sum > 0, 1.0 / np.maximum(mask_sum, 1e-12), 0.0)
    pre = ad.mul(total, ad.broadcast(
        ad.Tensor(inv[None].astype(np.float32)), total.shape))
    h = ad.relu(_conv3_b(pre, bound["agg.c0.w"], bound["agg.c0.b"]))
    f3d = _conv3_b(h, bound["agg.c1.w"], bound["agg.c1.b"])
    return FeatureVolume(f3d, res), pre


def axis_pool(volume):
    """(C,Vx,Vy,Vz) -> plane features f_xy, f_yz, f_xz by mean pooling.

    f_xy averages over z, f_yz over x, f_xz over y; plane k is laid out
    (C, V_a, V_b) with (a, b) = the plane's named axes.
    """
    x = volume.data if isinstance(volume, FeatureVolume) else volume
    return {
        "xy": ad.mean_pool_axis(x, 3),
        "yz": ad.mean_pool_axis(x, 1),
        "xz": ad.mean_pool_axis(x, 2),
    }


def _cross_stack(planes, target):
    """(3C, V, V) stack: target plane ++ oriented summaries of the others."""
    a, b = PLANE_AXES[target]
    c, va, vb = planes[target].shape
    parts = [planes[target]]
    for other in PLANE_KEYS:
        if other == target:
            continue
        oc, od = PLANE_AXES[other]
        shared = (({oc, od}) & {a, b}).pop()
        pool_axis = 2 if shared == oc else 1
        pooled = ad.mean_pool_axis(planes[other], pool_axis)   # (C, V_shared)
        if shared == a:
            vec = ad.reshape(pooled, (c, va, 1))
        else:
            vec = ad.reshape(pooled, (c, 1, vb))
        parts.append(ad.broadcast(vec, (c, va, vb)))
    return ad.concat(parts, axis=0)


def generate_triplanes(plane_inputs, bound, config):
    """Hierarchical cross-plane generator -> MultiResTriplanes.

    ``plane_inputs`` maps plane key -> (C,V1,V1) tensor (the upsampled
    code reconstructions).
    """
    tri_cfg = config.triplane
    v1 = tri_cfg.resolutions[0]
    for k in PLANE_KEYS:
        if tuple(plane_inputs[k].shape) != (config.channels, v1, v1):
            raise ContractViolation(
                f"generator input {k} has shape {tuple(plane_inputs[k].shape)}, "
                f"expected {(config.channels, v1, v1)}")
    planes = dict(plane_inputs)
    out = {}
    for s in range(1, tri_cfg.n_scales + 1):
        if s > 1:
            planes = {k: _conv_b(ad.upsample2d(planes[k], 2, "bilinear"),
                                 bound[f"gen.up{s}.w"], bound[f"gen.up{s}.b"])
                      for k in PLANE_KEYS}
        blocked = {k: _conv_b(_cross_stack(planes, k),
                              bound[f"gen.s{s}.block.w"],
                              bound[f"gen.s{s}.block.b"])
                   for k in PLANE_KEYS}
        refined = {}
        for k in PLANE_KEYS:
            h = ad.relu(_conv_b(blocked[k], bound[f"gen.s{s}.ref0.w"],
                                bound[f"gen.s{s}.ref0.b"]))
            refined[k] = ad.add(blocked[k],
                                _conv_b(h, bound[f"gen.s{s}.ref1.w"],
                                        bound[f"gen.s{s}.ref1.b"]))
        for k in PLANE_KEYS:
            out[(k, s)] = refined[k]
        planes = refined
    return MultiResTriplanes(tri_cfg, out)
