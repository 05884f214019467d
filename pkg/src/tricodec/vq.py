"""Plane compression: strided downsampling, vector quantization against
a learned codebook, and upsampling back to full-resolution planes.

The three planes share one down/up CNN pair and one codebook. Training
feeds the continuous codes ``l`` to the upsampler and aligns the
codebook through the quantization loss; at encode/test time the
gathered codebook rows ``e*`` replace ``l``. There is deliberately no
straight-through estimator through the argmin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .params import ParamBundle
from .triplane import PLANE_KEYS


@dataclass(frozen=True)
class VqConfig:
    code_dim: int = 16          # C'
    codebook_size: int = 1024   # K
    reduction: int = 4          # V' = V / reduction (two stride-2 convs)

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ContractViolation("codebook needs at least 2 rows")
        if self.reduction != 4:
            raise ContractViolation("reduction is fixed to 4 (two stride-2 convs)")

    def code_res(self, v):
        if v % self.reduction:
            raise ContractViolation(
                f"plane resolution {v} not divisible by {self.reduction}")
        return v // self.reduction


def init_vq_weights(config, channels, rng):
    cd = config.code_dim
    mid = 2 * cd
    w = ParamBundle()

    def conv(cout, cin, k=3):
        std = np.sqrt(2.0 / (cin * k * k))
        return (std * rng.standard_normal((cout, cin, k, k))).astype(np.float32)

    w["down.c0.w"] = conv(mid, channels)
    w["down.c0.b"] = np.zeros(mid, np.float32)
    w["down.c1.w"] = conv(cd, mid)
    w["down.c1.b"] = np.zeros(cd, np.float32)
    w["up.c0.w"] = conv(mid, cd)
    w["up.c0.b"] = np.zeros(mid, np.float32)
    w["up.c1.w"] = conv(channels, mid)
    w["up.c1.b"] = np.zeros(channels, np.float32)
    w["codebook"] = (0.1 * rng.standard_normal(
        (config.codebook_size, cd))).astype(np.float32)
    return w


def _conv_b(x, w, b, stride=1):
    y = ad.conv2d(x, w, stride=stride, padding=1)
    return ad.add(y, ad.broadcast(ad.reshape(b, (y.shape[0], 1, 1)), y.shape))


def downsample(planes, bound):
    """Full-res planes -> low-res codes, shared weights across planes.

    planes: {key -> (C,V,V)}; returns {key -> Tensor (C',V',V')}.
    """
    out = {}
    for k in PLANE_KEYS:
        h = ad.relu(_conv_b(planes[k], bound["down.c0.w"], bound["down.c0.b"],
                            stride=2))
        out[k] = _conv_b(h, bound["down.c1.w"], bound["down.c1.b"], stride=2)
    return out


def upsample(codes, bound):
    """Low-res codes -> full-res planes: (upsample x2 + conv) twice."""
    out = {}
    for k in PLANE_KEYS:
        h = ad.relu(_conv_b(ad.upsample2d(codes[k], 2, "bilinear"),
                            bound["up.c0.w"], bound["up.c0.b"]))
        out[k] = _conv_b(ad.upsample2d(h, 2, "bilinear"),
                         bound["up.c1.w"], bound["up.c1.b"])
    return out


def nearest_indices(vectors, codebook):
    """Closest codebook row per vector; ties break to the lowest index.

    Distances are accumulated in float64 so the result is deterministic
    and matches a brute-force scan exactly.
    """
    v = np.asarray(vectors, dtype=np.float64)
    e = np.asarray(codebook, dtype=np.float64)
    if v.ndim != 2 or e.ndim != 2 or v.shape[1] != e.shape[1]:
        raise ContractViolation(
            f"nearest_indices: vectors {v.shape} vs codebook {e.shape}")
    if len(e) == 0:
        raise ContractViolation("empty codebook")
    d = ((v[:, None, :] - e[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def _plane_vectors(code):
    """(C',V',V') -> (V'^2, C') position-major vector list."""
    arr = code.data if isinstance(code, ad.Tensor) else np.asarray(code)
    cd = arr.shape[0]
    return arr.reshape(cd, -1).T


def quantize(codes, codebook):
    """Vector-quantize each spatial location of each plane.

    codes: {key -> (C',V',V') tensor or array}; codebook: (K,C') Tensor
    (gradient flows to gathered rows) or array. Returns
    (indices (3,V',V') int array in plane order, {key -> e* Tensor}).
    """
    cb_data = codebook.data if isinstance(codebook, ad.Tensor) else np.asarray(codebook)
    k_size, cd = cb_data.shape
    idx_planes = []
    estar = {}
    for k in PLANE_KEYS:
        vecs = _plane_vectors(codes[k])
        if vecs.shape[1] != cd:
            raise ContractViolation("code dim does not match codebook dim")
        idx = nearest_indices(vecs, cb_data)
        vres = codes[k].shape[1]
        idx_planes.append(idx.reshape(vres, vres))
        onehot = np.zeros((len(idx), k_size), dtype=np.float32)
        onehot[np.arange(len(idx)), idx] = 1.0
        rows = ad.matmul(ad.Tensor(onehot), codebook)      # (P, C')
        estar[k] = ad.transpose(ad.reshape(rows, (vres, vres, cd)), (2, 0, 1))
    return np.stack(idx_planes, axis=0), estar


def gather_codes(indices, codebook):
    """Rebuild {key -> (C',V',V') array} from stored indices (decoder side)."""
    cb = np.asarray(codebook, dtype=np.float32)
    out = {}
    for i, k in enumerate(PLANE_KEYS):
        idx = np.asarray(indices[i])
        rows = cb[idx.reshape(-1)]                         # (P, C')
        vres = idx.shape[0]
        out[k] = np.ascontiguousarray(
            rows.reshape(vres, vres, cb.shape[1]).transpose(2, 0, 1))
    return out


def vq_pair_loss(l, e, commit):
    """sum((sg[l] - e)^2) + commit * sum((sg[e] - l)^2) for one stream."""
    l_const = ad.Tensor(np.array(l.data if isinstance(l, ad.Tensor) else l))
    e_const = ad.Tensor(np.array(e.data if isinstance(e, ad.Tensor) else e))
    t1 = ad.sum_reduce(ad.square(ad.sub(l_const, e)))
    t2 = ad.sum_reduce(ad.square(ad.sub(e_const, l)))
    return ad.add(t1, ad.scale(t2, commit))


def vq_loss(codes, estar, commit=0.25):
    """Codebook + commitment terms with stop-gradients over all planes.

    The first term moves codebook rows only; the second moves the code
    producers only.
    """
    total = None
    for k in PLANE_KEYS:
        term = vq_pair_loss(codes[k], estar[k], commit)
        total = term if total is None else ad.add(total, term)
    return total


def index_entropy_bits(indices, k_size):
    """Empirical entropy of the index payload in bits/symbol."""
    flat = np.asarray(indices).reshape(-1)
    counts = np.bincount(flat, minlength=k_size).astype(np.float64)
    p = counts[counts > 0] / flat.size
    return float(-(p * np.log2(p)).sum())


def reseed_dead_codes(codebook, usage, samples, rng):
    """Replace rows unused since the last check with random encoder outputs.

    codebook: (K,C') array updated in place; usage: (K,) counts;
    samples: (P,C') recent continuous codes. Returns #rows reseeded.
    """
    dead = np.nonzero(usage == 0)[0]
    if len(dead) == 0 or len(samples) == 0:
        return 0
    pick = rng.integers(0, len(samples), size=len(dead))
    codebook[dead] = samples[pick] + 0.01 * rng.standard_normal(
        (len(dead), codebook.shape[1])).astype(np.float32)
    return len(dead)
