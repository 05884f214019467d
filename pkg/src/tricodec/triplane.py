"""Multi-resolution triplane representation.

Three axis-aligned feature planes at three spatial resolutions. A 3-D
point's feature is gathered by projecting onto each plane, bilinearly
interpolating at every scale, concatenating the per-scale features and
summing the three planes, giving a vector of length 3*C.

Texel alignment: world coordinate c in [-1,1] maps to the continuous
texel coordinate (c+1)/2 * V - 0.5, i.e. texel centers sit at the
centers of V equal cells. Points outside the cube clamp to the boundary
texel, so the field is continuous at the faces.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

PLANE_KEYS = ("xy", "yz", "xz")
PLANE_AXES = {"xy": (0, 1), "yz": (1, 2), "xz": (0, 2)}


@dataclass(frozen=True)
class TriplaneConfig:
    channels: int = 32
    resolutions: tuple = (64, 128, 256)

    @property
    def n_scales(self):
        return len(self.resolutions)

    @property
    def feature_dim(self):
        return self.channels * self.n_scales

    def plane_shape(self, scale):
        v = self.resolutions[scale - 1]
        return (self.channels, v, v)

    def keys(self):
        return [(k, s) for k in PLANE_KEYS
                for s in range(1, self.n_scales + 1)]


class MultiResTriplanes:
    """Container of the nine planes; entries are numpy arrays or tape tensors."""

    def __init__(self, config, planes):
        self.config = config
        missing = set(config.keys()) - set(planes)
        if missing:
            raise ContractViolation(f"missing planes: {sorted(missing)}")
        for (k, s), p in planes.items():
            shape = tuple(p.shape)
            if shape != config.plane_shape(s):
                raise ContractViolation(
                    f"plane {k}^{s} has shape {shape}, "
                    f"expected {config.plane_shape(s)}")
        self.planes = dict(planes)

    @staticmethod
    def zeros(config):
        return MultiResTriplanes(config, {
            ks: np.zeros(config.plane_shape(ks[1]), dtype=np.float32)
            for ks in config.keys()})

    @staticmethod
    def random(config, rng, std=0.1):
        return MultiResTriplanes(config, {
            ks: (std * rng.standard_normal(config.plane_shape(ks[1]))).astype(np.float32)
            for ks in config.keys()})

    def data(self, key):
        p = self.planes[key]
        return p.data if isinstance(p, ad.Tensor) else p

    def materialized(self):
        """Plain numpy copy of every plane."""
        return MultiResTriplanes(self.config,
                                 {ks: np.array(self.data(ks)) for ks in self.config.keys()})

    def bind(self, tape, frozen=True, prefix="planes"):
        """Register the planes as tape leaves.

        Returns (bound triplanes, {param name -> leaf tensor}).
        """
        leaves = {}
        planes = {}
        for k, s in self.config.keys():
            t = tape.leaf(self.data((k, s)), frozen=frozen)
            planes[(k, s)] = t
            leaves[f"{prefix}.{k}.{s}"] = t
        return MultiResTriplanes(self.config, planes), leaves


def _texel_coords(coords01, v):
    return np.clip((coords01 + 1.0) * 0.5 * v - 0.5, 0.0, v - 1.0)


def sample_features(tri, points):
    """Gather features at (N,3) world points -> Tensor (N, 3*C)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractViolation(f"points must be (N,3), got {pts.shape}")
    cfg = tri.config
    per_plane = []
    for k in PLANE_KEYS:
        a, b = PLANE_AXES[k]
        scales = []
        for s in range(1, cfg.n_scales + 1):
            v = cfg.resolutions[s - 1]
            uv = np.stack([_texel_coords(pts[:, a], v),
                           _texel_coords(pts[:, b], v)], axis=1)
            scales.append(ad.bilinear_gather(tri.planes[(k, s)], uv))
        per_plane.append(ad.concat(scales, axis=1))
    out = per_plane[0]
    for p in per_plane[1:]:
        out = ad.add(out, p)
    return out


def _diff_matrix(v, dtype=np.float32):
    d = np.zeros((v - 1, v), dtype=dtype)
    idx = np.arange(v - 1)
    d[idx, idx] = -1.0
    d[idx, idx + 1] = 1.0
    return d


def plane_tv_pair_sum(plane):
    """Unnormalized sum of squared neighbor differences of one (C,V,V) plane."""
    c, v, _ = plane.shape
    d_t = ad.Tensor(_diff_matrix(v).T)
    flat = ad.reshape(plane, (c * v, v))
    col = ad.sum_reduce(ad.square(ad.matmul(flat, d_t)))
    flat_r = ad.reshape(ad.transpose(plane, (0, 2, 1)), (c * v, v))
    row = ad.sum_reduce(ad.square(ad.matmul(flat_r, d_t)))
    return ad.add(col, row)


def tv_loss(tri):
    """Mean squared neighbor difference across all planes and scales.

    Normalized by the total feature count 3*C*(V1^2+V2^2+V3^2).
    """
    cfg = tri.config
    total = None
    for ks in cfg.keys():
        term = plane_tv_pair_sum(tri.planes[ks])
        total = term if total is None else ad.add(total, term)
    t_norm = 3 * cfg.channels * sum(v * v for v in cfg.resolutions)
    return ad.scale(total, 1.0 / t_norm)


def compose_with_delta(base, delta):
    """Effective triplanes: base + materialized delta, base untouched.

    ``delta`` is any object with ``materialize(key) -> Tensor`` (the
    bound finetuning factors). Gradients reach the delta factors only;
    the base is typically bound frozen.
    """
    cfg = base.config
    planes = {}
    for ks in cfg.keys():
        planes[ks] = ad.add(base.planes[ks], delta.materialize(ks))
    return MultiResTriplanes(cfg, planes)


# ---------------------------------------------------------------------------
# raw dump: u32 header {C, V1, V2, V3} then float32 planes,
# plane-major order (xy,1),(xy,2),(xy,3),(yz,1),... row-major, little-endian

def dump_triplanes(tri, path):
    cfg = tri.config
    if cfg.n_scales != 3:
        raise ContractViolation("raw dump is defined for 3-scale triplanes")
    with open(path, "wb") as f:
        f.write(struct.pack("<4I", cfg.channels, *cfg.resolutions))
        for k in PLANE_KEYS:
            for s in (1, 2, 3):
                f.write(np.ascontiguousarray(
                    tri.data((k, s)), dtype="<f4").tobytes())


def load_triplanes(path):
    with open(path, "rb") as f:
        c, v1, v2, v3 = struct.unpack("<4I", f.read(16))
        cfg = TriplaneConfig(channels=c, resolutions=(v1, v2, v3))
        planes = {}
        for k in PLANE_KEYS:
            for s in (1, 2, 3):
                shape = cfg.plane_shape(s)
                n = int(np.prod(shape))
                buf = f.read(4 * n)
                if len(buf) != 4 * n:
                    raise ContractViolation("truncated triplane dump")
                planes[(k, s)] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return MultiResTriplanes(cfg, planes)
