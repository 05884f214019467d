"""Training loops, the optimizer, and the loss assembly.

Batch selection and per-ray jitter are stateless functions of
(seed, iteration), so a resumed run replays the identical stream and
checkpoint-resume is bitwise exact. One optimizer instance owns all
mutations; evaluation renders never overlap a step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .camera import generate_rays
from .density import bind_densities, make_noise, rate_loss
from .errors import ContractViolation, NumericError, TricodecError
from .io_utils import load_arrays, save_arrays
from .metrics import ms_ssim, psnr, ssim
from .model import feed_forward, make_render_config
from .peft import FINETUNE_MODES
from .renderer import RenderConfig, render_rays
from .triplane import tv_loss
from .vq import reseed_dead_codes, vq_loss

TRAIN_MODES = ("train-base",) + FINETUNE_MODES


@dataclass
class TrainConfig:
    mode: str = "peft"
    iterations: int = 500
    ray_batch: int = 64
    n_coarse: int = 24
    n_fine: int = 24
    lr_planes: float = 1e-2      # dense planes and delta factors
    lr_mlp: float = 1e-3         # decoder weights and adapters
    lr_net: float = 1e-3         # encoder/compressor/density nets
    lambda_tv: float = 1e-4
    lambda_commit: float = 0.25
    lambda_rate: float = 1e-3
    seed: int = 0
    checkpoints: tuple = (0, 100, 500, 1000, 2000)
    eval_view_cap: int = 2
    reseed_interval: int = 50    # dead-code check cadence (train-base)

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if self.iterations < 0 or self.ray_batch < 1:
            raise ContractViolation("bad iteration/batch settings")
        for lam in (self.lambda_tv, self.lambda_commit, self.lambda_rate):
            if lam < 0:
                raise ContractViolation("loss weights must be >= 0")

    def lr_for(self, name):
        if name.startswith(("planes.", "delta.")):
            return self.lr_planes
        if name.startswith("mlp."):
            return self.lr_mlp
        return self.lr_net


def load_train_config(path):
    """TrainConfig from a TOML file mirroring the dataclass fields."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        data = tomllib.load(f)
    known = {f_.name for f_ in TrainConfig.__dataclass_fields__.values()}
    unknown = set(data) - known
    if unknown:
        raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
    if "checkpoints" in data:
        data["checkpoints"] = tuple(data["checkpoints"])
    return TrainConfig(**data)


@dataclass
class MetricsRow:
    iteration: int
    psnr: float
    ssim: float
    ms_ssim: float
    size_mb: float = 0.0
    seconds: float = 0.0

    CSV_HEADER = "iteration,psnr,ssim,ms_ssim,size_mb,seconds"

    def to_csv(self):
        return (f"{self.iteration},{self.psnr:.6f},{self.ssim:.6f},"
                f"{self.ms_ssim:.6f},{self.size_mb:.6f},{self.seconds:.3f}")


class Adam:
    """Adam with per-name state; updates the backing arrays in place."""

    def __init__(self, lr_fn, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr_fn = lr_fn
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, grads_by_name, arrays_by_name):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name in sorted(grads_by_name):
            g = grads_by_name[name]
            arr = arrays_by_name[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(arr, dtype=np.float32)
                self.v[name] = np.zeros_like(arr, dtype=np.float32)
            v = self.v[name]
            g32 = g.astype(np.float32, copy=False)
            m *= b1
            m += (1 - b1) * g32
            v *= b2
            v += (1 - b2) * np.square(g32)
            update = (self.lr_fn(name) * (m / bias1)
                      / (np.sqrt(v / bias2) + self.eps))
            arr -= update

    def state_arrays(self):
        out = {}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays, t):
        self.t = t
        for name, arr in arrays.items():
            if name.startswith("adam.m."):
                self.m[name[len("adam.m."):]] = arr.astype(np.float32)
            elif name.startswith("adam.v."):
                self.v[name[len("adam.v."):]] = arr.astype(np.float32)


def _iter_key(seed, tag, it):
    return (int(seed) * 0x9E3779B97F4A7C15
            + int(tag) * 0x100000001B3 + int(it)) & 0xFFFFFFFFFFFFFFFF


def _iter_rng(seed, tag, it):
    return np.random.Generator(np.random.Philox(key=np.array(
        [_iter_key(seed, tag, it), int(tag)], dtype=np.uint64)))


class RayPool:
    """Flattened (origin, dir, target, pixel id) table over a view set."""

    def __init__(self, views, near, far):
        origins, dirs, targets, pids = [], [], [], []
        base = 0
        for v in views:
            o, d = generate_rays(v, near, far)
            origins.append(o)
            dirs.append(d)
            targets.append(v.image.reshape(-1, 3))
            pids.append(np.arange(base, base + len(o)))
            base += len(o)
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.targets = np.concatenate(targets).astype(np.float32)
        self.pixel_ids = np.concatenate(pids)

    def batch(self, rng, size):
        idx = rng.integers(0, len(self.origins), size=size)
        return (self.origins[idx], self.dirs[idx], self.targets[idx],
                self.pixel_ids[idx])


def rgb_loss(render_out, targets):
    """Mean squared pixel error, coarse and fine passes summed."""
    t = ad.Tensor(np.asarray(targets, dtype=np.float32))
    coarse = ad.mean(ad.square(ad.sub(render_out["rgb_coarse"], t)))
    fine = ad.mean(ad.square(ad.sub(render_out["rgb_fine"], t)))
    return ad.add(coarse, fine)


def evaluate(codec, scene, rcfg, view_cap=2, key_base=0xE7A1):
    """Mean metrics over (a cap of) the eval views."""
    views = scene.eval_views[:view_cap] if view_cap else scene.eval_views
    if not views:
        raise ContractViolation("scene has no eval views")
    ps, ss, ms = [], [], []
    for i, view in enumerate(views):
        img, _ = codec.render(view, rcfg, key=key_base + i)
        ps.append(psnr(img, view.image))
        ss.append(ssim(img, view.image))
        ms.append(ms_ssim(img, view.image))
    return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(ms))


def optimize(codec, scene, tcfg):
    """Finetune a SceneCodec on the scene's finetune views.

    Returns (metrics rows, wall seconds). ``codec.mode`` selects the
    trainable set; 'wo-ft' performs no steps regardless of iterations.
    """
    if codec.mode not in FINETUNE_MODES:
        raise ContractViolation(f"optimize expects a finetune mode, "
                                f"got {codec.mode!r}")
    rcfg = make_render_config(scene, tcfg.n_coarse, tcfg.n_fine,
                              codec.config.pe_freqs, tcfg.seed)
    pool = RayPool(scene.finetune_views, rcfg.near, rcfg.far)
    rows = []
    t0 = time.perf_counter()
    ckpts = sorted({c for c in tcfg.checkpoints if c <= tcfg.iterations}
                   | {tcfg.iterations})
    steps = 0 if codec.mode == "wo-ft" else tcfg.iterations
    use_rate = codec.mode == "peft++" and tcfg.lambda_rate > 0

    for it in range(steps + 1):
        if it in ckpts:
            p, s, m = evaluate(codec, scene, rcfg, tcfg.eval_view_cap)
            rows.append(MetricsRow(iteration=it, psnr=p, ssim=s, ms_ssim=m,
                                   seconds=time.perf_counter() - t0))
        if it == steps:
            break
        tape = ad.Tape()
        tri, bc, bf, arrays = codec.bind_for_training(tape)
        extra = None
        if use_rate:
            bound_d, d_leaves = bind_densities(codec.densities, tape,
                                               trainable=True)
            for name, t in d_leaves.items():
                key = tuple(name.split(".")[1:4])
                k, s_str, r_str = key
                dkey = (k, int(s_str[1:]), int(r_str[1:]))
                arrays[name] = (t, codec.densities[dkey].bundle.arrays[
                    name.split(".")[-1]])
            m_tensors = {key: tri_m for key, tri_m in _delta_m_tensors(
                codec, tape, arrays).items()}
            noise_rng = _iter_rng(tcfg.seed, 0xA0, it)
            shapes = {key: codec.delta.matrix(*key).shape
                      for key in codec.delta.stream_keys()}
            extra = ad.scale(rate_loss(m_tensors, bound_d,
                                       make_noise(shapes, noise_rng)),
                             tcfg.lambda_rate)
        rng = _iter_rng(tcfg.seed, 0xB0, it)
        origins, dirs, targets, pids = pool.batch(rng, tcfg.ray_batch)
        out = render_rays(origins, dirs, tri, bc, bf, rcfg,
                          key=int(_iter_key(tcfg.seed, 0xC0, it)),
                          pixel_ids=pids)
        loss = rgb_loss(out, targets)
        if tcfg.lambda_tv > 0:
            loss = ad.add(loss, ad.scale(tv_loss(tri), tcfg.lambda_tv))
        if extra is not None:
            loss = ad.add(loss, extra)
        if not np.isfinite(loss.data):
            raise NumericError(f"loss diverged at iteration {it}")
        grads = tape.backward(loss)
        if not hasattr(codec, "_adam") or codec._adam is None:
            codec._adam = Adam(tcfg.lr_for)
        grads_by_name = {}
        arrays_by_name = {}
        for name, (tensor, arr) in arrays.items():
            g = grads.get(tensor.node_id)
            if g is not None:
                grads_by_name[name] = g
                arrays_by_name[name] = arr
        codec._adam.step(grads_by_name, arrays_by_name)
    return rows, time.perf_counter() - t0


def _delta_m_tensors(codec, tape, arrays):
    """The already-bound M leaves, keyed by stream, for the rate term."""
    out = {}
    for key in codec.delta.stream_keys():
        k, s, r = key
        name = f"delta.m.{k}.s{s}.r{r}"
        out[key] = arrays[name][0]
    return out


def save_checkpoint(path, codec, iteration):
    arrays = {f"param.{k}": v for k, v in codec.state_arrays().items()}
    adam = getattr(codec, "_adam", None)
    meta = {"iteration": iteration, "mode": codec.mode,
            "adam_t": adam.t if adam else 0}
    if adam is not None:
        arrays.update(adam.state_arrays())
    save_arrays(path, arrays, meta)


def load_checkpoint(path, codec, tcfg):
    arrays, meta = load_arrays(path)
    state = codec.state_arrays()
    for name, arr in arrays.items():
        if name.startswith("param."):
            key = name[len("param."):]
            if key not in state:
                raise ContractViolation(f"checkpoint has unknown state {key}")
            state[key][...] = arr
    adam = Adam(tcfg.lr_for)
    adam.load_state({k: v for k, v in arrays.items()
                     if k.startswith("adam.")}, meta["adam_t"])
    codec._adam = adam
    return meta["iteration"]


# ---------------------------------------------------------------------------
# base-model training


def train_base(model, scenes, tcfg, log=None):
    """End-to-end training of the shared networks over several scenes.

    Per step: one scene's encoder-input views run the forward pass with
    the continuous codes feeding the upsampler; a ray batch from the
    finetune views is rendered through the generated planes; the loss is
    the rgb error + quantization loss + tv penalty.
    """
    if tcfg.mode != "train-base":
        raise ContractViolation("train_base requires mode 'train-base'")
    adam = Adam(tcfg.lr_for)
    pools = []
    rcfgs = []
    for scene in scenes:
        rcfg = make_render_config(scene, tcfg.n_coarse, tcfg.n_fine,
                                  model.config.pe_freqs, tcfg.seed)
        pools.append(RayPool(scene.finetune_views, rcfg.near, rcfg.far))
        rcfgs.append(rcfg)
    usage = np.zeros(model.config.vq.codebook_size, dtype=np.int64)
    last_codes = None
    t0 = time.perf_counter()
    losses = []
    for it in range(tcfg.iterations):
        sc = it % len(scenes)
        scene, pool, rcfg = scenes[sc], pools[sc], rcfgs[sc]
        tape = ad.Tape()
        bound, leaves = model.bind(tape, trainable=True)
        ff = feed_forward(model, scene.input_views, bound, use_codes=False)
        usage += np.bincount(ff.indices.reshape(-1),
                             minlength=len(usage))
        last_codes = np.concatenate(
            [ff.codes[k].data.reshape(ff.codes[k].shape[0], -1).T
             for k in ff.codes], axis=0)
        rng = _iter_rng(tcfg.seed, 0xD0, it)
        origins, dirs, targets, pids = pool.batch(rng, tcfg.ray_batch)
        bc, bf = bound["mlp_coarse"], bound["mlp_fine"]
        out = render_rays(origins, dirs, ff.tri, bc, bf, rcfg,
                          key=int(_iter_key(tcfg.seed, 0xE0, it)),
                          pixel_ids=pids)
        loss = rgb_loss(out, targets)
        loss = ad.add(loss, vq_loss(ff.codes, ff.estar, tcfg.lambda_commit))
        if tcfg.lambda_tv > 0:
            loss = ad.add(loss, ad.scale(tv_loss(ff.tri), tcfg.lambda_tv))
        if not np.isfinite(loss.data):
            raise NumericError(f"base training diverged at iteration {it}")
        losses.append(loss.item())
        grads = tape.backward(loss)
        params = model.param_arrays()
        grads_by_name = {}
        arrays_by_name = {}
        for name, tensor in leaves.items():
            g = grads.get(tensor.node_id)
            if g is not None:
                grads_by_name[name] = g
                arrays_by_name[name] = params[name]
        adam.step(grads_by_name, arrays_by_name)
        if (it + 1) % tcfg.reseed_interval == 0:
            rng_rs = _iter_rng(tcfg.seed, 0xF0, it)
            reseed_dead_codes(model.vq_weights["codebook"], usage,
                              last_codes.astype(np.float32), rng_rs)
            usage[:] = 0
        if log and (it + 1) % 50 == 0:
            log(f"base iter {it + 1}/{tcfg.iterations} "
                f"loss {np.mean(losses[-50:]):.4f}")
    return losses, time.perf_counter() - t0
