"""The transmitted container: header + four payload sections.

Wire format (little-endian):

  magic 43 4E 52 46 ("CNRF") | u8 version=1 | u8 mode |
  u16 C V1 V2 V3 C' V' | u32 K | u16 delta_rank | u16 adapter_rank |
  u8 mlp_profile_id | u8 pe_freqs | u16 n_streams |
  n_streams x (i32 lo, i32 hi) | n_streams x 28 f32 density params |
  4 x u32 section lengths | u32 CRC-32 over the payload |
  sections (a)(b)(c)(d) back to back.

Sections:
  (a) packed VQ indices, ceil(log2 K) bits each, big-endian bit order;
  (b) feature payload: per-mode -- empty (wo-ft), raw f32 matrices
      (peft), per-stream u32 length + range-coded integers (peft++),
      raw f32 dense planes (full-ft);
  (c) raw f32 delta vectors (peft/peft++ only);
  (d) raw f32 adapter factors (peft/peft++) or dense decoder weights
      (full-ft).

The mode byte and pe_freqs travel in the header so a receiver holding
only the shared pretrained model can rebuild every shape. decode(
encode(x)) is bit-exact for all sections.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .density import (DENSITY_PARAM_COUNT, FactorizedDensity, ideal_code_bits,
                      pmf_table, quantize_round)
from .errors import BitstreamError, ContractViolation
from .rangecoder import (cumulative, decode_symbols, encode_symbols, pack_bits,
                         unpack_bits)
from .renderer import MLP_PROFILE_IDS, MLP_PROFILE_NAMES, RadianceMlp
from .triplane import PLANE_KEYS, TriplaneConfig

MAGIC = b"CNRF"
VERSION = 1
MODES = ("wo-ft", "full-ft", "peft", "peft++")
MODE_IDS = {m: i for i, m in enumerate(MODES)}


@dataclass(frozen=True)
class CodecLayout:
    """Shape information shared by sender and receiver."""

    channels: int
    resolutions: tuple
    code_dim: int
    code_res: int
    codebook_size: int
    delta_rank: int = 1
    adapter_rank: int = 4
    mlp_profile: str = "desk"
    pe_freqs: int = 4

    @property
    def tri_config(self):
        return TriplaneConfig(self.channels, tuple(self.resolutions))

    @property
    def index_bits(self):
        return max(1, int(np.ceil(np.log2(self.codebook_size))))

    @property
    def n_indices(self):
        return 3 * self.code_res * self.code_res

    def stream_keys(self):
        return [(k, s, r) for k in PLANE_KEYS
                for s in range(1, len(self.resolutions) + 1)
                for r in range(self.delta_rank)]

    def stream_shape(self, key):
        _, s, _ = key
        v = self.resolutions[s - 1]
        return (v, v)

    def v_keys(self):
        return [(s, r) for s in range(1, len(self.resolutions) + 1)
                for r in range(self.delta_rank)]

    def mlp_spec(self):
        return RadianceMlp.from_profile(self.mlp_profile, 3 * self.channels,
                                        self.pe_freqs)


def _f32_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _take_f32(buf, off, shape):
    n = int(np.prod(shape))
    end = off + 4 * n
    if end > len(buf):
        raise BitstreamError("truncated float payload")
    return (np.frombuffer(buf[off:end], dtype="<f4").reshape(shape).copy(),
            end)


def pack_bitstream(mode, layout, indices, *, delta=None, densities=None,
                   adapters_coarse=None, adapters_fine=None,
                   planes=None, mlp_coarse=None, mlp_fine=None):
    """Assemble the container for one encoded scene."""
    if mode not in MODE_IDS:
        raise ContractViolation(f"unknown mode {mode!r}")
    indices = np.asarray(indices)
    if indices.shape != (3, layout.code_res, layout.code_res):
        raise ContractViolation(
            f"indices shape {indices.shape} does not match layout")
    if indices.min() < 0 or indices.max() >= layout.codebook_size:
        raise ContractViolation("VQ index outside the codebook")

    sec_a = pack_bits(indices.reshape(-1), layout.index_bits)

    bounds = []
    density_blobs = []
    sec_b = b""
    sec_c = b""
    sec_d = b""

    if mode in ("peft", "peft++"):
        if delta is None or adapters_coarse is None or adapters_fine is None:
            raise ContractViolation(f"{mode} needs delta factors and adapters")
        if mode == "peft++":
            if densities is None:
                raise ContractViolation("peft++ needs the density models")
            chunks = []
            for key in layout.stream_keys():
                q, (lo, hi) = quantize_round(delta.matrix(*key))
                bounds.append((lo, hi))
                density_blobs.append(densities[key].to_array())
                freqs = pmf_table(densities[key], lo, hi)
                coded = encode_symbols(q.reshape(-1) - lo, cumulative(freqs))
                chunks.append(struct.pack("<I", len(coded)) + coded)
            sec_b = b"".join(chunks)
        else:
            sec_b = b"".join(_f32_bytes(delta.matrix(*key))
                             for key in layout.stream_keys())
        sec_c = b"".join(_f32_bytes(delta.vector(s, r))
                         for s, r in layout.v_keys())
        spec = layout.mlp_spec()
        parts = []
        for bundle in (adapters_coarse, adapters_fine):
            for name, _, _ in spec.layer_dims:
                parts.append(_f32_bytes(bundle[f"{name}.wa"]))
                parts.append(_f32_bytes(bundle[f"{name}.wb"]))
        sec_d = b"".join(parts)
    elif mode == "full-ft":
        if planes is None or mlp_coarse is None or mlp_fine is None:
            raise ContractViolation("full-ft needs dense planes and decoders")
        tri_cfg = layout.tri_config
        sec_b = b"".join(_f32_bytes(planes.data((k, s)))
                         for k in PLANE_KEYS
                         for s in range(1, tri_cfg.n_scales + 1))
        sec_d = b"".join(
            _f32_bytes(params[name])
            for params in (mlp_coarse, mlp_fine)
            for name in sorted(params))

    payload = sec_a + sec_b + sec_c + sec_d
    crc = zlib.crc32(payload) & 0xFFFFFFFF

    head = bytearray()
    head += MAGIC
    head += struct.pack("<BB", VERSION, MODE_IDS[mode])
    head += struct.pack("<6H", layout.channels, *layout.resolutions,
                        layout.code_dim, layout.code_res)
    head += struct.pack("<I", layout.codebook_size)
    head += struct.pack("<2H", layout.delta_rank, layout.adapter_rank)
    head += struct.pack("<BB", MLP_PROFILE_IDS[layout.mlp_profile],
                        layout.pe_freqs)
    head += struct.pack("<H", len(bounds))
    for lo, hi in bounds:
        head += struct.pack("<2i", lo, hi)
    for blob in density_blobs:
        head += _f32_bytes(blob)
    head += struct.pack("<4I", len(sec_a), len(sec_b), len(sec_c), len(sec_d))
    head += struct.pack("<I", crc)
    return bytes(head) + payload


@dataclass
class ParsedBitstream:
    mode: str
    layout: CodecLayout
    indices: np.ndarray
    header_bytes: int
    section_lengths: tuple
    stream_bounds: list
    densities: dict
    m_int: dict          # peft++: {stream key -> int32 (V,V)}
    m_raw: dict          # peft:   {stream key -> f32 (V,V)}
    v: dict              # {(s, r) -> f32 (C,)}
    adapters: dict       # {"coarse"/"fine" -> {layer.wa/.wb -> array}}
    planes: object       # full-ft: MultiResTriplanes
    mlp_dense: dict      # full-ft: {"coarse"/"fine" -> {param -> array}}

    def m_dequantized(self):
        """Unit-bin dequantization: the integer values as float32."""
        return {k: v.astype(np.float32) for k, v in self.m_int.items()}


def unpack_bitstream(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise BitstreamError("bad magic")
    off = 4
    version, mode_id = struct.unpack_from("<BB", data, off)
    off += 2
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if mode_id >= len(MODES):
        raise BitstreamError(f"unknown mode id {mode_id}")
    mode = MODES[mode_id]
    c, v1, v2, v3, cd, cres = struct.unpack_from("<6H", data, off)
    off += 12
    (k_size,) = struct.unpack_from("<I", data, off)
    off += 4
    rank, arank = struct.unpack_from("<2H", data, off)
    off += 4
    profile_id, pe_freqs = struct.unpack_from("<BB", data, off)
    off += 2
    if profile_id not in MLP_PROFILE_NAMES:
        raise BitstreamError(f"unknown decoder profile id {profile_id}")
    layout = CodecLayout(channels=c, resolutions=(v1, v2, v3), code_dim=cd,
                         code_res=cres, codebook_size=k_size, delta_rank=rank,
                         adapter_rank=arank,
                         mlp_profile=MLP_PROFILE_NAMES[profile_id],
                         pe_freqs=pe_freqs)
    (n_streams,) = struct.unpack_from("<H", data, off)
    off += 2
    bounds = []
    for _ in range(n_streams):
        lo, hi = struct.unpack_from("<2i", data, off)
        off += 8
        bounds.append((lo, hi))
    densities = {}
    if n_streams:
        keys = layout.stream_keys()
        if n_streams != len(keys):
            raise BitstreamError("stream count does not match layout")
        for key in keys:
            blob, off = _take_f32(data, off, (DENSITY_PARAM_COUNT,))
            densities[key] = FactorizedDensity.from_array(blob)
    try:
        lens = struct.unpack_from("<4I", data, off)
        off += 16
        (crc,) = struct.unpack_from("<I", data, off)
        off += 4
    except struct.error:
        raise BitstreamError("truncated header")
    header_bytes = off
    payload = data[off:]
    if len(payload) != sum(lens):
        raise BitstreamError("payload length does not match section table")
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
        raise BitstreamError("checksum mismatch")
    sec = []
    p = 0
    for ln in lens:
        sec.append(payload[p:p + ln])
        p += ln
    sec_a, sec_b, sec_c, sec_d = sec

    idx = unpack_bits(sec_a, layout.n_indices, layout.index_bits)
    if idx.max(initial=0) >= layout.codebook_size:
        raise BitstreamError("decoded VQ index outside the codebook")
    indices = idx.reshape(3, layout.code_res, layout.code_res)

    m_int, m_raw, v, adapters, mlp_dense = {}, {}, {}, {}, {}
    planes = None

    if mode in ("peft", "peft++"):
        if mode == "peft++":
            pos = 0
            for key, (lo, hi) in zip(layout.stream_keys(), bounds):
                if pos + 4 > len(sec_b):
                    raise BitstreamError("truncated coded stream table")
                (ln,) = struct.unpack_from("<I", sec_b, pos)
                pos += 4
                blob = sec_b[pos:pos + ln]
                if len(blob) != ln:
                    raise BitstreamError("truncated coded stream")
                pos += ln
                shape = layout.stream_shape(key)
                freqs = pmf_table(densities[key], lo, hi)
                syms = decode_symbols(blob, int(np.prod(shape)),
                                      cumulative(freqs))
                m_int[key] = (syms + lo).astype(np.int32).reshape(shape)
        else:
            pos = 0
            for key in layout.stream_keys():
                arr, pos = _take_f32(sec_b, pos, layout.stream_shape(key))
                m_raw[key] = arr
        pos = 0
        for s, r in layout.v_keys():
            arr, pos = _take_f32(sec_c, pos, (layout.channels,))
            v[(s, r)] = arr
        spec = layout.mlp_spec()
        pos = 0
        for which in ("coarse", "fine"):
            bundle = {}
            for name, din, dout in spec.layer_dims:
                wa, pos = _take_f32(sec_d, pos, (dout, layout.adapter_rank))
                wb, pos = _take_f32(sec_d, pos, (layout.adapter_rank, din))
                bundle[f"{name}.wa"] = wa
                bundle[f"{name}.wb"] = wb
            adapters[which] = bundle
    elif mode == "full-ft":
        from .triplane import MultiResTriplanes
        tri_cfg = layout.tri_config
        pos = 0
        plane_map = {}
        for k in PLANE_KEYS:
            for s in range(1, tri_cfg.n_scales + 1):
                arr, pos = _take_f32(sec_b, pos, tri_cfg.plane_shape(s))
                plane_map[(k, s)] = arr
        planes = MultiResTriplanes(tri_cfg, plane_map)
        spec = layout.mlp_spec()
        pos = 0
        for which in ("coarse", "fine"):
            params = {}
            for name in sorted(spec.params):
                arr, pos = _take_f32(sec_d, pos, spec.params[name].shape)
                params[name] = arr
            mlp_dense[which] = params

    return ParsedBitstream(mode=mode, layout=layout, indices=indices,
                           header_bytes=header_bytes, section_lengths=tuple(lens),
                           stream_bounds=bounds, densities=densities,
                           m_int=m_int, m_raw=m_raw, v=v, adapters=adapters,
                           planes=planes, mlp_dense=mlp_dense)


def size_report(data):
    """Component byte/MB table mirroring the size-accounting layout.

    'feature' covers the matrix payload plus the raw vectors and, for
    entropy-coded streams, the density parameters and support bounds
    that ride in the header. 'total' is the exact container size; the
    fixed header framing is reported as 'overhead'.
    """
    parsed = unpack_bitstream(data) if isinstance(data, (bytes, bytearray)) \
        else data
    la, lb, lc, ld = parsed.section_lengths
    n_streams = len(parsed.stream_bounds)
    side_info = n_streams * (8 + 4 * DENSITY_PARAM_COUNT)
    total = parsed.header_bytes + la + lb + lc + ld \
        if isinstance(data, ParsedBitstream) else len(data)
    rows = {
        "codes": la,
        "feature": lb + lc + side_info,
        "mlp": ld,
        "overhead": parsed.header_bytes - side_info,
        "total": total,
    }
    return {name: {"bytes": b, "mb": b / 1e6} for name, b in rows.items()}


def size_report_markdown(report, mode):
    lines = [f"| component | {mode} (MB) |", "|---|---|"]
    for name in ("codes", "feature", "mlp", "overhead", "total"):
        lines.append(f"| {name} | {report[name]['mb']:.3f} |")
    return "\n".join(lines)
