"""Model containers and the feed-forward encode/decode paths.

``CodecModel`` holds the shared pretrained networks (feature extractor,
aggregator, triplane generator, compression CNNs + codebook, and the
two decoder heads). ``SceneCodec`` is the per-scene state either side
holds after encoding/decoding: base planes, decoder weights, and the
finetuning deltas for the current operating mode.

The decoder path from VQ indices to base planes is one shared function
used by both the sender and the receiver, so the two sides are bitwise
identical by construction.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bitstream import CodecLayout
from .encoder import (EncoderConfig, aggregate, axis_pool, extract_features,
                      generate_triplanes, init_encoder_weights, unproject)
from .errors import ContractViolation
from .io_utils import load_arrays, save_arrays
from .params import BoundParams, ParamBundle
from .peft import AdaptedMlp, init_delta, trainable_prefixes, wrap_mlp
from .renderer import RadianceMlp, RenderConfig, render_image
from .triplane import (MultiResTriplanes, PLANE_KEYS, TriplaneConfig,
                       compose_with_delta)
from .vq import (VqConfig, downsample, gather_codes, init_vq_weights,
                 quantize, upsample)


@dataclass(frozen=True)
class ModelConfig:
    enc: EncoderConfig = field(default_factory=EncoderConfig)
    vq: VqConfig = field(default_factory=VqConfig)
    mlp_profile: str = "objaverse"
    pe_freqs: int = 4
    delta_rank: int = 1
    adapter_rank: int = 4

    @staticmethod
    def desk(channels=8, volume_res=16, codebook_size=64, code_dim=8):
        """Small profile for desk-scale experiments and tests."""
        res = (volume_res, 2 * volume_res, 4 * volume_res)
        return ModelConfig(
            enc=EncoderConfig(channels=channels, volume_res=volume_res,
                              triplane=TriplaneConfig(channels, res)),
            vq=VqConfig(code_dim=code_dim, codebook_size=codebook_size),
            mlp_profile="desk", pe_freqs=4, delta_rank=1, adapter_rank=4)

    @property
    def tri_config(self):
        return self.enc.triplane

    def layout(self):
        return CodecLayout(
            channels=self.enc.channels,
            resolutions=tuple(self.tri_config.resolutions),
            code_dim=self.vq.code_dim,
            code_res=self.vq.code_res(self.enc.volume_res),
            codebook_size=self.vq.codebook_size,
            delta_rank=self.delta_rank,
            adapter_rank=self.adapter_rank,
            mlp_profile=self.mlp_profile,
            pe_freqs=self.pe_freqs)

    def make_mlp(self):
        return RadianceMlp.from_profile(self.mlp_profile,
                                        self.tri_config.feature_dim,
                                        self.pe_freqs)

    def to_dict(self):
        return {
            "channels": self.enc.channels,
            "volume_res": self.enc.volume_res,
            "resolutions": list(self.tri_config.resolutions),
            "code_dim": self.vq.code_dim,
            "codebook_size": self.vq.codebook_size,
            "mlp_profile": self.mlp_profile,
            "pe_freqs": self.pe_freqs,
            "delta_rank": self.delta_rank,
            "adapter_rank": self.adapter_rank,
        }

    @staticmethod
    def from_dict(d):
        return ModelConfig(
            enc=EncoderConfig(
                channels=d["channels"], volume_res=d["volume_res"],
                triplane=TriplaneConfig(d["channels"],
                                        tuple(d["resolutions"]))),
            vq=VqConfig(code_dim=d["code_dim"],
                        codebook_size=d["codebook_size"]),
            mlp_profile=d["mlp_profile"], pe_freqs=d["pe_freqs"],
            delta_rank=d["delta_rank"], adapter_rank=d["adapter_rank"])


class CodecModel:
    """Shared pretrained networks (present on sender and receiver)."""

    def __init__(self, config, enc_weights, vq_weights, mlp_coarse, mlp_fine):
        self.config = config
        self.enc_weights = enc_weights
        self.vq_weights = vq_weights
        self.mlp_coarse = mlp_coarse
        self.mlp_fine = mlp_fine

    @staticmethod
    def init(config, seed=0):
        rng = np.random.default_rng(seed)
        enc_w = init_encoder_weights(config.enc, rng)
        vq_w = init_vq_weights(config.vq, config.enc.channels, rng)
        mlp_c = config.make_mlp().init_random(rng)
        mlp_f = config.make_mlp().init_random(rng)
        return CodecModel(config, enc_w, vq_w, mlp_c, mlp_f)

    def bind(self, tape, trainable=False):
        """Bind the network weights; returns (bound dict, leaves dict)."""
        leaves = {}
        leaves.update(self.enc_weights.bind(tape, trainable, prefix="enc"))
        leaves.update(self.vq_weights.bind(tape, trainable, prefix="vq"))
        bc, lc = self.mlp_coarse.bind(tape, trainable, prefix="basemlp.coarse")
        bf, lf = self.mlp_fine.bind(tape, trainable, prefix="basemlp.fine")
        leaves.update(lc)
        leaves.update(lf)
        bound = {
            "enc": BoundParams(leaves, prefix="enc"),
            "vq": BoundParams(leaves, prefix="vq"),
            "codebook": leaves["vq.codebook"],
            "mlp_coarse": bc,
            "mlp_fine": bf,
        }
        return bound, leaves

    def param_arrays(self):
        """{leaf name -> backing array} for the trainer."""
        out = {}
        for name in self.enc_weights.names():
            out[f"enc.{name}"] = self.enc_weights[name]
        for name in self.vq_weights.names():
            out[f"vq.{name}"] = self.vq_weights[name]
        for name, arr in sorted(self.mlp_coarse.params.items()):
            out[f"basemlp.coarse.{name}"] = arr
        for name, arr in sorted(self.mlp_fine.params.items()):
            out[f"basemlp.fine.{name}"] = arr
        return out

    def save(self, path):
        arrays = dict(self.param_arrays())
        save_arrays(path, arrays, meta={"config": self.config.to_dict()})

    @staticmethod
    def load(path):
        arrays, meta = load_arrays(path)
        config = ModelConfig.from_dict(meta["config"])
        model = CodecModel.init(config, seed=0)
        for name, arr in model.param_arrays().items():
            if name not in arrays:
                raise ContractViolation(f"model file missing {name}")
            arr[...] = arrays[name]
        return model


@dataclass
class FeedForwardResult:
    tri: MultiResTriplanes        # tape tensors
    indices: np.ndarray           # (3,V',V') int
    codes: dict                   # {plane -> Tensor l}
    estar: dict                   # {plane -> Tensor e*}
    masks: list


def feed_forward(model, views, bound, use_codes=True):
    """Images + poses -> triplanes, on an existing tape binding.

    ``use_codes=True`` routes the upsampler through the gathered
    codebook rows (the encode/test path); ``False`` feeds the continuous
    codes (the base-training path).
    """
    if not views:
        raise ContractViolation("feed_forward: no input views")
    cfg = model.config
    feats = extract_features([v.image for v in views], bound["enc"])
    items = []
    for f, v in zip(feats, views):
        vol, mask = unproject(f, v, cfg.enc.volume_res)
        items.append((vol, mask, v))
    f3d, _ = aggregate(items, bound["enc"])
    pooled = axis_pool(f3d)
    codes = downsample(pooled, bound["vq"])
    indices, estar = quantize(codes, bound["codebook"])
    up_in = estar if use_codes else codes
    plane_inputs = upsample(up_in, bound["vq"])
    tri = generate_triplanes(plane_inputs, bound["enc"], cfg.enc)
    return FeedForwardResult(tri=tri, indices=indices, codes=codes,
                             estar=estar, masks=[m for _, m, _ in items])


def decode_planes_from_indices(model, indices):
    """Shared indices -> base planes path (bitwise equal on both sides)."""
    tape = ad.Tape()
    bound, _ = model.bind(tape, trainable=False)
    codes = gather_codes(indices, model.vq_weights["codebook"])
    plane_inputs = upsample({k: ad.Tensor(codes[k]) for k in PLANE_KEYS},
                            bound["vq"])
    tri = generate_triplanes(plane_inputs, bound["enc"], model.config.enc)
    return tri.materialized()


def encode_to_indices(model, views):
    """Sender-side feed-forward pass; returns the VQ index grid."""
    tape = ad.Tape()
    bound, _ = model.bind(tape, trainable=False)
    return feed_forward(model, views, bound, use_codes=True).indices


# ---------------------------------------------------------------------------
# per-scene state


class SceneCodec:
    """Decoded per-scene state: base planes + decoders + finetuning deltas."""

    def __init__(self, config, mode, planes, mlp_coarse, mlp_fine,
                 delta=None, lora_coarse=None, lora_fine=None, densities=None,
                 indices=None):
        self.config = config
        self.mode = mode
        self.planes = planes
        self.mlp_coarse = mlp_coarse
        self.mlp_fine = mlp_fine
        self.delta = delta
        self.lora_coarse = lora_coarse
        self.lora_fine = lora_fine
        self.densities = densities
        self.indices = indices
        self._adam = None    # owned by the training loop

    @staticmethod
    def from_base(model, indices, mode, seed=0):
        """Build the state both sides share right after the forward pass."""
        from .density import make_stream_densities
        config = model.config
        planes = decode_planes_from_indices(model, indices)
        mlp_c = copy.deepcopy(model.mlp_coarse)
        mlp_f = copy.deepcopy(model.mlp_fine)
        state = SceneCodec(config, mode, planes, mlp_c, mlp_f, indices=indices)
        if mode in ("peft", "peft++"):
            state.delta = init_delta(config.tri_config, config.delta_rank,
                                     seed=seed)
            state.lora_coarse = wrap_mlp(mlp_c, config.adapter_rank, seed=seed)
            state.lora_fine = wrap_mlp(mlp_f, config.adapter_rank,
                                       seed=seed + 1)
            if mode == "peft++":
                state.densities = make_stream_densities(
                    state.delta.stream_keys())
        return state

    @staticmethod
    def random_scratch(config, seed=0):
        """The from-scratch baseline: random planes + decoders, full-ft."""
        rng = np.random.default_rng(seed)
        planes = MultiResTriplanes.random(config.tri_config, rng, std=0.05)
        mlp_c = config.make_mlp().init_random(rng)
        mlp_f = config.make_mlp().init_random(rng)
        return SceneCodec(config, "full-ft", planes, mlp_c, mlp_f)

    # -- rendering ---------------------------------------------------------

    def effective_planes(self):
        """Base + materialized delta as plain numpy planes."""
        if self.delta is None:
            return self.planes
        cfg = self.config.tri_config
        out = {}
        for k, s in cfg.keys():
            out[(k, s)] = self.planes.data((k, s)) + \
                self.delta.materialize_np((k, s))
        return MultiResTriplanes(cfg, out)

    def decoders(self):
        if self.lora_coarse is not None:
            return self.lora_coarse, self.lora_fine
        return self.mlp_coarse, self.mlp_fine

    def render(self, view, rcfg, key=0):
        mc, mf = self.decoders()
        return render_image(view, self.effective_planes(), mc, mf, rcfg,
                            key=key)

    # -- training binding ----------------------------------------------

    def bind_for_training(self, tape):
        """Bind per-mode trainable state onto a tape.

        Returns (effective tri, bound coarse, bound fine, arrays) where
        ``arrays`` maps each trainable leaf name to (Tensor, backing
        numpy array) for the optimizer.
        """
        prefixes = trainable_prefixes(self.mode)
        arrays = {}
        planes_trainable = "planes." in prefixes
        bound_tri, plane_leaves = self.planes.bind(
            tape, frozen=not planes_trainable, prefix="planes")
        if planes_trainable:
            for name, t in plane_leaves.items():
                k, s = name.split(".")[1], int(name.split(".")[2])
                arrays[name] = (t, self.planes.planes[(k, s)])

        if self.mode in ("peft", "peft++"):
            bound_delta, delta_leaves = self.delta.bind(tape, trainable=True,
                                                        prefix="delta")
            for name, t in delta_leaves.items():
                arrays[name] = (t, self.delta.bundle.arrays[
                    name.split(".", 1)[1]])
            tri = compose_with_delta(bound_tri, bound_delta)
            bc, lc = self.lora_coarse.bind(tape, trainable=True,
                                           prefix="mlp.coarse")
            bf, lf = self.lora_fine.bind(tape, trainable=True,
                                         prefix="mlp.fine")
            for leaves, lora in ((lc, self.lora_coarse),
                                 (lf, self.lora_fine)):
                for name, t in leaves.items():
                    if ".lora." in name:
                        arrays[name] = (t, lora.adapters.arrays[
                            name.split(".lora.", 1)[1]])
        else:
            tri = bound_tri
            mlp_trainable = "mlp.coarse.base." in prefixes
            bc, lc = self.mlp_coarse.bind(tape, trainable=mlp_trainable,
                                          prefix="mlp.coarse.base")
            bf, lf = self.mlp_fine.bind(tape, trainable=mlp_trainable,
                                        prefix="mlp.fine.base")
            if mlp_trainable:
                for leaves, mlp in ((lc, self.mlp_coarse),
                                    (lf, self.mlp_fine)):
                    for name, t in leaves.items():
                        arrays[name] = (t, mlp.params[
                            name.split(".base.", 1)[1]])
        return tri, bc, bf, arrays

    # -- snapshots for determinism / resume checks ------------------------

    def state_arrays(self):
        out = {}
        for k, s in self.config.tri_config.keys():
            out[f"planes.{k}.{s}"] = self.planes.planes[(k, s)]
        for name, arr in sorted(self.mlp_coarse.params.items()):
            out[f"mlp.coarse.base.{name}"] = arr
        for name, arr in sorted(self.mlp_fine.params.items()):
            out[f"mlp.fine.base.{name}"] = arr
        if self.delta is not None:
            for name in self.delta.bundle.names():
                out[f"delta.{name}"] = self.delta.bundle[name]
        for which, lora in (("coarse", self.lora_coarse),
                            ("fine", self.lora_fine)):
            if lora is not None:
                for name in lora.adapters.names():
                    out[f"mlp.{which}.lora.{name}"] = lora.adapters[name]
        if self.densities is not None:
            for key in sorted(self.densities):
                k, s, r = key
                for name in self.densities[key].bundle.names():
                    out[f"density.{k}.s{s}.r{r}.{name}"] = \
                        self.densities[key].bundle[name]
        return out

    def snapshot(self):
        return {k: v.copy() for k, v in self.state_arrays().items()}


def make_render_config(scene, n_coarse=32, n_fine=32, pe_freqs=4, seed=0):
    return RenderConfig(n_coarse=n_coarse, n_fine=n_fine, near=scene.near,
                        far=scene.far, background=tuple(scene.background_rgb),
                        pe_freqs=pe_freqs, seed=seed)
