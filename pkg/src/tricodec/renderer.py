"""MLP decoder and two-pass hierarchical volume rendering.

The radiance decoder is a relu trunk over (triplane feature ++ raw
position); density comes off the trunk through a softplus head *before*
any view-direction input, so density is view-independent by
construction. The color branch consumes (trunk feature ++ positionally
encoded view direction) through one hidden layer and a sigmoid output.

Rendering runs the vanilla two-pass scheme: stratified coarse samples,
then inverse-CDF importance samples from the coarse weights, merged and
sorted, evaluated by the fine decoder. Both passes composite over a
constant background using the residual transmittance.

Per-ray randomness comes from counter-based streams keyed on
(render key, pixel id), so chunking or parallel schedules cannot change
results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .triplane import sample_features

# hidden width / trunk depth (trunk linears + density head) per profile
MLP_PROFILES = {"shapenet": (256, 6), "objaverse": (512, 8), "desk": (64, 4)}
MLP_PROFILE_IDS = {"shapenet": 0, "objaverse": 1, "desk": 2}
MLP_PROFILE_NAMES = {v: k for k, v in MLP_PROFILE_IDS.items()}


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    near: float = 1.0
    far: float = 4.6
    background: tuple = (1.0, 1.0, 1.0)
    pe_freqs: int = 4
    density_activation: str = "softplus"
    seed: int = 0

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ContractViolation("need n_coarse >= 1 and n_fine >= 0")
        if not self.near < self.far:
            raise ContractViolation("near must be < far")
        if self.density_activation not in ("softplus", "relu"):
            raise ContractViolation(
                f"unsupported density activation {self.density_activation!r}")


def positional_encode(dirs, freqs):
    """(N,3) unit directions -> (N, 3 + 6*freqs) encoding.

    concat(d, sin(2^j pi d), cos(2^j pi d)) for j = 0..freqs-1.
    """
    d = np.asarray(dirs, dtype=np.float64)
    parts = [d]
    for j in range(freqs):
        arg = (2.0 ** j) * np.pi * d
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1).astype(np.float32)


def pe_dim(freqs):
    return 3 + 6 * freqs


class RadianceMlp:
    """Weights of one decoder head (trunk + density + color branch)."""

    def __init__(self, feature_dim, hidden, depth, pe_freqs=4):
        if depth < 2:
            raise ContractViolation("decoder needs at least 2 layers")
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.depth = depth
        self.pe_freqs = pe_freqs
        self.color_hidden = max(hidden // 4, 16)
        self.layer_dims = []
        in_dim = feature_dim + 3
        for i in range(depth - 1):
            self.layer_dims.append((f"trunk{i}", in_dim, hidden))
            in_dim = hidden
        self.layer_dims.append(("density", hidden, 1))
        self.layer_dims.append(("color_h", hidden + pe_dim(pe_freqs),
                                self.color_hidden))
        self.layer_dims.append(("color_out", self.color_hidden, 3))
        self.params = {}
        for name, din, dout in self.layer_dims:
            self.params[f"{name}.w"] = np.zeros((dout, din), dtype=np.float32)
            self.params[f"{name}.b"] = np.zeros(dout, dtype=np.float32)

    @staticmethod
    def from_profile(profile, feature_dim, pe_freqs=4):
        hidden, depth = MLP_PROFILES[profile]
        return RadianceMlp(feature_dim, hidden, depth, pe_freqs)

    def init_random(self, rng):
        for name, din, dout in self.layer_dims:
            std = np.sqrt(2.0 / din)
            self.params[f"{name}.w"] = (std * rng.standard_normal((dout, din))
                                        ).astype(np.float32)
            self.params[f"{name}.b"] = np.zeros(dout, dtype=np.float32)
        # start mostly transparent so empty space clears quickly
        self.params["density.b"] = np.full(1, -1.0, dtype=np.float32)
        return self

    def bind(self, tape, trainable=False, prefix="mlp"):
        leaves = {f"{prefix}.{k}": tape.leaf(v, frozen=not trainable)
                  for k, v in sorted(self.params.items())}
        return BoundMlp(self, {k: leaves[f"{prefix}.{k}"] for k in self.params}), leaves


class BoundMlp:
    """Tape-bound decoder weights; ``tensors`` maps param name -> Tensor."""

    def __init__(self, spec, tensors):
        self.spec = spec
        self.tensors = tensors

    def weight(self, name):
        return self.tensors[f"{name}.w"]

    def bias(self, name):
        return self.tensors[f"{name}.b"]


def _as_bound(mlp):
    if isinstance(mlp, BoundMlp):
        return mlp
    if hasattr(mlp, "as_bound"):
        return mlp.as_bound()
    # off-tape evaluation: wrap the raw arrays as constants
    return BoundMlp(mlp, {k: ad.Tensor(v) for k, v in mlp.params.items()})


def eval_points(mlp, f_tri, points, pe_dirs, density_activation="softplus"):
    """Decode (rgb, sigma) at sample points.

    f_tri: Tensor (N, 3C); points: (N,3) constant; pe_dirs: (N, pe) constant.
    sigma does not depend on pe_dirs (checked architecturally: the
    density head reads the trunk only).
    """
    b = _as_bound(mlp)
    spec = b.spec
    n = f_tri.shape[0]
    h = ad.concat([f_tri, ad.Tensor(np.asarray(points, dtype=np.float32))], axis=1)
    if h.shape[1] != spec.feature_dim + 3:
        raise ContractViolation(
            f"decoder expects feature dim {spec.feature_dim}, got {h.shape[1] - 3}")
    for i in range(spec.depth - 1):
        h = ad.relu(ad.linear(h, b.weight(f"trunk{i}"), b.bias(f"trunk{i}")))
    raw_sigma = ad.linear(h, b.weight("density"), b.bias("density"))
    if density_activation == "softplus":
        sigma = ad.softplus(raw_sigma)
    else:
        sigma = ad.relu(raw_sigma)
    sigma = ad.reshape(sigma, (n,))
    pe = np.asarray(pe_dirs, dtype=np.float32)
    if pe.shape != (n, pe_dim(spec.pe_freqs)):
        raise ContractViolation(
            f"pe_dirs shape {pe.shape} != {(n, pe_dim(spec.pe_freqs))}")
    ch = ad.concat([h, ad.Tensor(pe)], axis=1)
    ch = ad.relu(ad.linear(ch, b.weight("color_h"), b.bias("color_h")))
    rgb = ad.sigmoid(ad.linear(ch, b.weight("color_out"), b.bias("color_out")))
    return rgb, sigma


# ---------------------------------------------------------------------------
# compositing

def _strict_upper(s, dtype=np.float32):
    return np.triu(np.ones((s, s), dtype=dtype), k=1)


def composite_rays(sigma, rgb, ts, far, background):
    """Alpha-composite samples over a constant background.

    sigma: Tensor (B,S); rgb: Tensor (B,S,3); ts: (B,S) constant sample
    depths (sorted); far: scalar. Returns (rgb_out (B,3), weights (B,S),
    t_end (B,)), all Tensors.

    w_i = T_i * (1 - exp(-sigma_i * delta_i)) with
    T_i = exp(-sum_{j<i} sigma_j delta_j) and delta_i the gap to the
    next sample (far for the last). The residual transmittance
    multiplies the background.
    """
    b, s = sigma.shape
    ts = np.asarray(ts, dtype=np.float32)
    deltas = np.concatenate([ts[:, 1:] - ts[:, :-1],
                             np.maximum(far - ts[:, -1:], 0.0)], axis=1)
    tau = ad.mul(sigma, ad.Tensor(deltas))
    cum_excl = ad.matmul(tau, ad.Tensor(_strict_upper(s, tau.data.dtype)))
    trans = ad.exp(ad.neg(cum_excl))
    alpha = ad.sub(ad.broadcast(ad.Tensor(np.ones((), dtype=tau.data.dtype)),
                                (b, s)),
                   ad.exp(ad.neg(tau)))
    weights = ad.mul(trans, alpha)
    w3 = ad.broadcast(ad.reshape(weights, (b, s, 1)), (b, s, 3))
    acc = ad.sum_axis(ad.mul(w3, rgb), 1)
    t_end = ad.exp(ad.neg(ad.sum_axis(tau, 1)))
    bg = ad.broadcast(ad.reshape(ad.Tensor(
        np.asarray(background, dtype=np.float32)), (1, 3)), (b, 3))
    out = ad.add(acc, ad.mul(ad.broadcast(ad.reshape(t_end, (b, 1)), (b, 3)), bg))
    return out, weights, t_end


# ---------------------------------------------------------------------------
# sampling

def ray_streams(key, pixel_ids, n_per_ray):
    """Per-ray uniforms from counter-based streams keyed (key, pixel id)."""
    out = np.empty((len(pixel_ids), n_per_ray), dtype=np.float64)
    for i, pid in enumerate(pixel_ids):
        gen = np.random.Generator(np.random.Philox(key=np.array(
            [key & 0xFFFFFFFFFFFFFFFF, int(pid) & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64)))
        out[i] = gen.random(n_per_ray)
    return out


def stratified_ts(near, far, n, jitter):
    """Stratified depths: one uniform draw inside each of n equal bins."""
    b = jitter.shape[0]
    edges = np.linspace(near, far, n + 1)
    lo = np.broadcast_to(edges[:-1], (b, n))
    width = (far - near) / n
    return lo + jitter * width


def sample_importance(ts, weights, far, u):
    """Inverse-CDF draws from the coarse weight histogram.

    Bins are the intervals [t_i, t_{i+1}) (the last extends to far),
    with mass proportional to w_i. Piecewise-linear within a bin.
    """
    b, s = weights.shape
    w = weights.astype(np.float64) + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((b, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    edges = np.concatenate([ts, np.full((b, 1), far)], axis=1)
    idx = (cdf[:, None, :-1] <= u[:, :, None]).sum(axis=2) - 1
    idx = np.clip(idx, 0, s - 1)
    lo = np.take_along_axis(cdf, idx, axis=1)
    hi = np.take_along_axis(cdf, idx + 1, axis=1)
    e_lo = np.take_along_axis(edges, idx, axis=1)
    e_hi = np.take_along_axis(edges, idx + 1, axis=1)
    denom = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    frac = np.clip((u - lo) / denom, 0.0, 1.0)
    return e_lo + frac * (e_hi - e_lo)


def render_at(origins, dirs, ts, tri, mlp, cfg):
    """Differentiable single-pass render at fixed sample depths.

    Sample positions are treated as constants; this is the shared body
    of both render passes (importance-sampled depths are deliberately
    detached, vanilla two-pass style).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    b, s = ts.shape
    pts = (origins[:, None, :] + dirs[:, None, :] * ts[:, :, None]).reshape(-1, 3)
    feats = sample_features(tri, pts)
    pe = np.repeat(positional_encode(dirs, cfg.pe_freqs), s, axis=0)
    rgb, sigma = eval_points(mlp, feats, pts.astype(np.float32), pe,
                             cfg.density_activation)
    rgb = ad.reshape(rgb, (b, s, 3))
    sigma = ad.reshape(sigma, (b, s))
    return composite_rays(sigma, rgb, ts, cfg.far, cfg.background)


def render_rays(origins, dirs, tri, coarse_mlp, fine_mlp, cfg, key, pixel_ids):
    """Two-pass render of a ray batch.

    Returns a dict with Tensors 'rgb_coarse', 'rgb_fine' (B,3) and
    numpy aux: 'weights_coarse', 'weights_fine', 'ts_fine', 't_end'.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    b = len(origins)
    nc, nf = cfg.n_coarse, cfg.n_fine
    uni = ray_streams(key, pixel_ids, nc + nf)
    ts_c = stratified_ts(cfg.near, cfg.far, nc, uni[:, :nc])

    def run_pass(mlp, ts):
        return render_at(origins, dirs, ts, tri, mlp, cfg)

    rgb_c, w_c, tend_c = run_pass(coarse_mlp, ts_c)
    if nf > 0:
        ts_f = sample_importance(ts_c, w_c.data, cfg.far, uni[:, nc:])
        ts_union = np.sort(np.concatenate([ts_c, ts_f], axis=1), axis=1)
    else:
        ts_union = ts_c
    rgb_f, w_f, tend_f = run_pass(fine_mlp, ts_union)
    return {
        "rgb_coarse": rgb_c, "rgb_fine": rgb_f,
        "weights_coarse": w_c, "weights_fine": w_f,
        "ts_coarse": ts_c, "ts_fine": ts_union,
        "t_end_coarse": tend_c, "t_end_fine": tend_f,
    }


def render_image(view, tri, coarse_mlp, fine_mlp, cfg, key=None, chunk=1024):
    """Full-frame render -> (image (H,W,3) float32, alpha (H,W) float32)."""
    from .camera import generate_rays
    if key is None:
        key = cfg.seed
    h, w = view.height, view.width
    origins, dirs = generate_rays(view, cfg.near, cfg.far)
    img = np.empty((h * w, 3), dtype=np.float32)
    alpha = np.empty(h * w, dtype=np.float32)
    for s in range(0, h * w, chunk):
        pid = np.arange(s, min(s + chunk, h * w))
        out = render_rays(origins[pid], dirs[pid], tri, coarse_mlp, fine_mlp,
                          cfg, key, pid)
        img[pid] = out["rgb_fine"].data
        alpha[pid] = 1.0 - out["t_end_fine"].data
    return img.reshape(h, w, 3), alpha.reshape(h, w)
