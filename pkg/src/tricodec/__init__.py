"""tricodec: a desk-scale codec for triplane radiance fields.

Pipeline: posed multi-view images -> feed-forward encoder -> vector-
quantized low-resolution codes -> multi-resolution triplane decoder ->
volume renderer, with parameter-efficient finetuning deltas that are
entropy-coded into a bit-exact bitstream.
"""

__version__ = "0.1.0"

from .bitstream import (CodecLayout, pack_bitstream, size_report,
                        unpack_bitstream)
from .camera import CameraView, Ray, generate_rays, project
from .errors import (BitstreamError, ContractViolation, NumericError,
                     SceneFormatError, TricodecError)
from .metrics import ms_ssim, psnr, ssim
from .model import (CodecModel, ModelConfig, SceneCodec,
                    decode_planes_from_indices, encode_to_indices,
                    make_render_config)
from .pipeline import decode_scene, encode_scene, report_sizes
from .renderer import RadianceMlp, RenderConfig, positional_encode
from .scene import Primitive, Scene, SynthSpec, load_scene, save_scene, synth_scene
from .training import MetricsRow, TrainConfig, optimize, train_base
from .triplane import (MultiResTriplanes, TriplaneConfig, compose_with_delta,
                       sample_features, tv_loss)

__all__ = [
    "BitstreamError", "CameraView", "CodecLayout", "CodecModel",
    "ContractViolation", "MetricsRow", "ModelConfig", "MultiResTriplanes",
    "NumericError", "Primitive", "RadianceMlp", "Ray", "RenderConfig",
    "Scene", "SceneCodec", "SceneFormatError", "SynthSpec", "TrainConfig",
    "TricodecError", "TriplaneConfig", "compose_with_delta",
    "decode_planes_from_indices", "decode_scene", "encode_scene",
    "encode_to_indices", "generate_rays", "load_scene", "make_render_config",
    "ms_ssim", "optimize", "pack_bitstream", "positional_encode", "project",
    "psnr", "report_sizes", "sample_features", "save_scene", "size_report",
    "ssim", "synth_scene", "train_base", "tv_loss", "unpack_bitstream",
    "__version__",
]
