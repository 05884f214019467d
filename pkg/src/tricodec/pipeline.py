"""Sender/receiver orchestration: encode a scene to a bitstream and
decode a bitstream back to renderable per-scene state.

The sender runs the feed-forward pass, optionally finetunes, then packs
codes + deltas. For entropy-coded matrices the sender's own state is
re-quantized after packing so both sides render from identical numbers.
"""

from __future__ import annotations

import numpy as np

from .bitstream import pack_bitstream, size_report, unpack_bitstream
from .density import quantize_round
from .errors import BitstreamError, ContractViolation
from .model import SceneCodec, decode_planes_from_indices, encode_to_indices
from .peft import FINETUNE_MODES
from .training import optimize


def encode_scene(model, scene, tcfg):
    """Feed-forward encode + per-mode finetuning + container packing.

    Returns (bitstream bytes, sender-side SceneCodec, metrics rows).
    """
    if tcfg.mode not in FINETUNE_MODES:
        raise ContractViolation(f"encode_scene: bad mode {tcfg.mode!r}")
    indices = encode_to_indices(model, scene.input_views)
    codec = SceneCodec.from_base(model, indices, tcfg.mode, seed=tcfg.seed)
    rows, _ = optimize(codec, scene, tcfg)
    data = pack_scene(model, codec)
    if tcfg.mode == "peft++":
        _apply_quantization(codec)
    return data, codec, rows


def pack_scene(model, codec):
    """Container bytes for the codec's current state."""
    layout = model.config.layout()
    mode = codec.mode
    if mode == "wo-ft":
        return pack_bitstream("wo-ft", layout, codec.indices)
    if mode in ("peft", "peft++"):
        kwargs = dict(delta=codec.delta,
                      adapters_coarse=codec.lora_coarse.adapters,
                      adapters_fine=codec.lora_fine.adapters)
        if mode == "peft++":
            kwargs["densities"] = codec.densities
        return pack_bitstream(mode, layout, codec.indices, **kwargs)
    if mode == "full-ft":
        return pack_bitstream("full-ft", layout, codec.indices,
                              planes=codec.planes,
                              mlp_coarse=codec.mlp_coarse.params,
                              mlp_fine=codec.mlp_fine.params)
    raise ContractViolation(f"cannot pack mode {mode!r}")


def _apply_quantization(codec):
    """Replace the sender's matrices with their dequantized values."""
    for key in codec.delta.stream_keys():
        q, _ = quantize_round(codec.delta.matrix(*key))
        codec.delta.set_matrix(*key, q.astype(np.float32))


def decode_scene(model, data):
    """Bitstream -> receiver-side SceneCodec (shared model as side info)."""
    parsed = unpack_bitstream(data)
    expect = model.config.layout()
    if parsed.layout != expect:
        raise BitstreamError(
            f"bitstream layout {parsed.layout} does not match the model "
            f"configuration {expect}")
    mode = parsed.mode
    codec = SceneCodec.from_base(model, parsed.indices, mode, seed=0)
    if mode == "full-ft":
        codec.planes = parsed.planes
        for which, mlp in (("coarse", codec.mlp_coarse),
                           ("fine", codec.mlp_fine)):
            for name, arr in parsed.mlp_dense[which].items():
                mlp.params[name][...] = arr
    elif mode in ("peft", "peft++"):
        ms = parsed.m_dequantized() if mode == "peft++" else parsed.m_raw
        for key in codec.delta.stream_keys():
            codec.delta.set_matrix(*key, ms[key])
        for (s, r), arr in parsed.v.items():
            codec.delta.bundle[f"v.s{s}.r{r}"] = arr
        for which, lora in (("coarse", codec.lora_coarse),
                            ("fine", codec.lora_fine)):
            for name, arr in parsed.adapters[which].items():
                lora.adapters[name] = arr
        if mode == "peft++":
            codec.densities = parsed.densities
    return codec


def report_sizes(data):
    return size_report(data)
