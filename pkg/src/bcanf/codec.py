"""Per-frame coding pipelines (I, B, B*) and the ``.bcf`` bitstream container.

The same forward path (:func:`code_intra`, :func:`code_b`, :func:`code_bstar`)
serves training (``mode="train"``: additive-noise quantization, gradients on)
and coding (``mode="infer"``: rounding, followed by entropy coding). The
encoder's reconstruction is computed from the quantized latents exactly as the
decoder recomputes it, so the reference chain never drifts within a build.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from . import gop as gop_mod
from .canf import CanfModel, FrameType, LatentBundle, strip
from .entropy import CodedChunk, DecodeError
from .motion import MotionPredictor, estimate_flow, make_virtual_flow, predict_bidirectional_flows
from .nn import ContractError, ParamStore, load_checkpoint, load_into, save_checkpoint
from .synthesis import SynthNet, synthesize

__all__ = [
    "ModelConfig",
    "CodecModels",
    "CodecConfig",
    "EncodedFrame",
    "Bitstream",
    "encode_i_frame",
    "encode_b_frame",
    "encode_bstar_frame",
    "decode_frame",
    "encode_sequence",
    "decode_sequence",
    "serialize",
    "deserialize",
    "LAMBDAS",
]

MAGIC = b"BCNF"
VERSION = 1
LAMBDAS = (128.0, 512.0, 1024.0, 2048.0)
CHUNKS_PER_TYPE = {FrameType.I: 2, FrameType.REF_B: 4, FrameType.NONREF_B: 4, FrameType.BSTAR: 4}
HYPOTHESES = ("both", "first", "second")


@dataclass
class ModelConfig:
    latent_ch: int = 32
    hidden: int = 32
    hyper_hidden: int = 48
    hyper_ch: int = 16
    kernel: int = 3
    predictor_hidden: int = 16
    synth_features: int = 32
    use_fa: bool = True
    one_step: bool = False
    residual_motion: bool = False
    residual_inter: bool = False

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Reduced widths for desk-scale training runs."""
        base = dict(latent_ch=16, hidden=16, hyper_hidden=24, hyper_ch=8, predictor_hidden=8, synth_features=16)
        base.update(overrides)
        return cls(**base)


class CodecModels(nn.Module):
    """All learned components: intra codec, motion and inter codecs, predictor, synthesis net."""

    def __init__(self, config: ModelConfig | None = None, **overrides):
        super().__init__()
        cfg = dataclasses.replace(config or ModelConfig(), **overrides)
        self.config = cfg
        common = dict(latent_ch=cfg.latent_ch, hidden=cfg.hidden, hyper_hidden=cfg.hyper_hidden,
                      hyper_ch=cfg.hyper_ch, kernel=cfg.kernel)
        self.intra = CanfModel(3, **common, unconditional=True)
        self.motion = CanfModel(4, 4, **common, unconditional=cfg.residual_motion, one_step=cfg.one_step,
                                use_fa=cfg.use_fa)
        self.inter = CanfModel(3, 3, **common, unconditional=cfg.residual_inter, one_step=cfg.one_step,
                               use_fa=cfg.use_fa)
        self.predictor = MotionPredictor(cfg.predictor_hidden)
        self.synth = SynthNet(3, cfg.synth_features)
        self.bstar_hypotheses = "both"

    def b_modules(self) -> dict[str, nn.Module]:
        return {"motion": self.motion, "inter": self.inter, "predictor": self.predictor, "synth": self.synth}

    def param_store(self, include_intra: bool = False) -> ParamStore:
        mods = dict(self.b_modules())
        if include_intra:
            mods = {"intra": self.intra, **mods}
        return ParamStore.from_modules(**mods)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.param_store(include_intra=True))
        Path(str(path) + ".json").write_text(json.dumps(vars(self.config), indent=1))

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "CodecModels":
        meta = Path(str(path) + ".json")
        cfg = ModelConfig(**json.loads(meta.read_text())) if meta.exists() else ModelConfig()
        models = cls(cfg, **overrides)
        models.load_weights(path)
        return models

    def load_weights(self, path: str | Path, only: tuple[str, ...] | None = None) -> None:
        tensors = load_checkpoint(path)
        for name in only or ("intra", "motion", "inter", "predictor", "synth"):
            load_into(getattr(self, name), tensors, prefix=f"{name}.")


# ---------------------------------------------------------------------------
# shared forward paths


def _code_signal(model: CanfModel, signal, cond, m, mode, generator):
    """Run one CANF codec; returns (bundle, reconstruction, y2)."""
    if model.unconditional:
        base = torch.zeros_like(signal) if cond is None else cond
        bundle = model.encode(signal - base, None, m, mode, generator)
        recon = base + model.decode(strip(bundle), None, m)
    else:
        bundle = model.encode(signal, cond, m, mode, generator)
        recon = model.decode(strip(bundle), cond, m)
    return bundle, recon, bundle.y2


def code_intra(x, models: CodecModels, mode="infer", generator=None) -> dict:
    bundle, recon, y2 = _code_signal(models.intra, x, None, None, mode, generator)
    return {"bundles": [bundle], "models": [models.intra], "recon": recon.clamp(0, 1), "y2": y2}


def code_b(x, ref_prev, ref_next, ftype: FrameType, models: CodecModels, mode="infer", generator=None,
           lossless_motion: bool = False) -> dict:
    n = x.shape[0]
    me = estimate_flow(torch.cat([x, x]), torch.cat([ref_prev, ref_next]))
    me = torch.cat([me[:n], me[n:]], dim=1)
    mp = torch.cat(predict_bidirectional_flows(ref_prev, ref_next, models.predictor), dim=1)
    mb, m_hat, _ = _code_signal(models.motion, me, mp, ftype, mode, generator)
    if lossless_motion:
        m_hat = me
    xc = synthesize(ref_prev, ref_next, m_hat[:, :2], m_hat[:, 2:], models.synth)
    ib, recon, y2 = _code_signal(models.inter, x, xc, ftype, mode, generator)
    return {"bundles": [mb, ib], "models": [models.motion, models.inter], "recon": recon.clamp(0, 1),
            "xc": xc, "y2": y2, "flows": m_hat, "me": me, "mp": mp}


def code_bstar(x, ref_prev, models: CodecModels, mode="infer", generator=None, lossless_motion: bool = False,
               hypotheses: str | None = None) -> dict:
    hypotheses = hypotheses or models.bstar_hypotheses
    if hypotheses not in HYPOTHESES:
        raise ValueError(f"hypotheses must be one of {HYPOTHESES}")
    me1 = estimate_flow(x, ref_prev)
    me = torch.cat([me1, make_virtual_flow(me1)], dim=1)
    zero = torch.zeros_like(me)
    mb, m_hat, _ = _code_signal(models.motion, me, zero, FrameType.BSTAR, mode, generator)
    if lossless_motion:
        m_hat = me
    h1 = m_hat[:, :2]
    h2 = make_virtual_flow(m_hat[:, 2:])
    fa, fb = {"both": (h1, h2), "first": (h1, h1), "second": (h2, h2)}[hypotheses]
    xc = synthesize(ref_prev, ref_prev, fa, fb, models.synth)
    ib, recon, y2 = _code_signal(models.inter, x, xc, FrameType.BSTAR, mode, generator)
    return {"bundles": [mb, ib], "models": [models.motion, models.inter], "recon": recon.clamp(0, 1),
            "xc": xc, "y2": y2, "flows": m_hat, "me": me, "h1": h1, "h2": h2}


def rate_bits(out: dict, mode: str = "train") -> list:
    """Estimated bits per chunk stream, in chunk order."""
    bits = []
    for model, bundle in zip(out["models"], out["bundles"]):
        bits.extend(model.rate(bundle, mode))
    return bits


# ---------------------------------------------------------------------------
# frame-level encode / decode


@dataclass
class EncodedFrame:
    display_index: int
    frame_type: FrameType
    chunks: list[CodedChunk]
    checksum: int | None = None
    info: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.frame_type = FrameType(self.frame_type)
        if len(self.chunks) != CHUNKS_PER_TYPE[self.frame_type]:
            raise ContractError(f"{self.frame_type.name} frame needs {CHUNKS_PER_TYPE[self.frame_type]} chunks")

    @property
    def bits(self) -> int:
        return sum(c.bits for c in self.chunks)


def _single(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ContractError(f"expected a single (1, 3, H, W) frame, got {tuple(x.shape)}")
    return x


def _finish(out: dict, ftype: FrameType, display_index: int, checksum: bool) -> tuple[EncodedFrame, torch.Tensor]:
    chunks = []
    for model, bundle in zip(out["models"], out["bundles"]):
        chunks.extend(model.compress(bundle))
    recon = out["recon"]
    info = {"estimated_bits": [float(b) for b in rate_bits(out, "infer")]}
    for key in ("h1", "h2", "y2", "xc", "flows"):
        if key in out:
            info[key] = out[key]
    frame = EncodedFrame(display_index, ftype, chunks, frame_checksum(recon) if checksum else None, info)
    return frame, recon


def frame_checksum(x: torch.Tensor) -> int:
    return zlib.crc32(x.detach().to(torch.float32).contiguous().numpy().tobytes())


@torch.no_grad()
def encode_i_frame(x, models: CodecModels, display_index: int = 0, checksum: bool = False):
    out = code_intra(_single(x), models)
    return _finish(out, FrameType.I, display_index, checksum)


@torch.no_grad()
def encode_b_frame(x, ref_prev, ref_next, frame_type, models: CodecModels, display_index: int = 0,
                   checksum: bool = False, lossless_motion: bool = False):
    frame_type = FrameType(frame_type)
    if frame_type not in (FrameType.REF_B, FrameType.NONREF_B):
        raise ContractError("B-frames are REF_B or NONREF_B")
    out = code_b(_single(x), ref_prev, ref_next, frame_type, models, lossless_motion=lossless_motion)
    return _finish(out, frame_type, display_index, checksum)


@torch.no_grad()
def encode_bstar_frame(x, ref_prev, models: CodecModels, display_index: int = 0, checksum: bool = False,
                       lossless_motion: bool = False, hypotheses: str | None = None):
    out = code_bstar(_single(x), ref_prev, models, lossless_motion=lossless_motion, hypotheses=hypotheses)
    return _finish(out, FrameType.BSTAR, display_index, checksum)


def _decode_signal(model: CanfModel, chunks, shape, cond, m):
    if model.unconditional:
        base = torch.zeros(shape) if cond is None else cond
        bundle = model.decompress(chunks, shape, None, m)
        return base + model.decode(bundle, None, m)
    bundle = model.decompress(chunks, shape, cond, m)
    return model.decode(bundle, cond, m)


@torch.no_grad()
def decode_frame(frame: EncodedFrame, refs, models: CodecModels, height: int, width: int,
                 verify: bool = False) -> torch.Tensor:
    """Reconstruct one frame from its chunks and already-decoded references."""
    refs = [_single(r) for r in refs]
    need = {FrameType.I: 0, FrameType.BSTAR: 1, FrameType.REF_B: 2, FrameType.NONREF_B: 2}[frame.frame_type]
    if len(refs) != need:
        raise ContractError(f"{frame.frame_type.name} frame needs {need} references, got {len(refs)}")
    try:
        if frame.frame_type is FrameType.I:
            recon = _decode_signal(models.intra, frame.chunks, (1, 3, height, width), None, None)
        elif frame.frame_type is FrameType.BSTAR:
            (ref,) = refs
            m_hat = _decode_signal(models.motion, frame.chunks[:2], (1, 4, height, width),
                                   torch.zeros(1, 4, height, width), FrameType.BSTAR)
            h1, h2 = m_hat[:, :2], make_virtual_flow(m_hat[:, 2:])
            fa, fb = {"both": (h1, h2), "first": (h1, h1), "second": (h2, h2)}[models.bstar_hypotheses]
            xc = synthesize(ref, ref, fa, fb, models.synth)
            recon = _decode_signal(models.inter, frame.chunks[2:], (1, 3, height, width), xc, FrameType.BSTAR)
        else:
            prev, nxt = refs
            mp = torch.cat(predict_bidirectional_flows(prev, nxt, models.predictor), dim=1)
            m_hat = _decode_signal(models.motion, frame.chunks[:2], (1, 4, height, width), mp, frame.frame_type)
            xc = synthesize(prev, nxt, m_hat[:, :2], m_hat[:, 2:], models.synth)
            recon = _decode_signal(models.inter, frame.chunks[2:], (1, 3, height, width), xc, frame.frame_type)
    except DecodeError as exc:
        raise DecodeError(f"frame {frame.display_index}: {exc}") from exc
    recon = recon.clamp(0, 1)
    if verify and frame.checksum is not None and frame_checksum(recon) != frame.checksum:
        raise DecodeError(f"frame {frame.display_index}: reconstruction checksum mismatch")
    return recon


# ---------------------------------------------------------------------------
# sequences and the container


@dataclass
class CodecConfig:
    width: int
    height: int
    gop_size: int = 16
    intra_period: int = 32
    lambda_index: int = 3
    checkpoint: str | None = None

    def __post_init__(self):
        if self.intra_period % self.gop_size:
            raise ValueError("gop_size must divide intra_period")
        if not 0 <= self.lambda_index < 256:
            raise ValueError("lambda_index must fit in a byte")


@dataclass
class Bitstream:
    width: int
    height: int
    gop_size: int
    intra_period: int
    frame_count: int
    lambda_index: int
    frames: list[EncodedFrame]

    def __eq__(self, other):
        if not isinstance(other, Bitstream):
            return NotImplemented
        return serialize(self) == serialize(other)

    @property
    def total_bits(self) -> int:
        return sum(f.bits for f in self.frames)


_HEADER = struct.Struct("<4sBHHBHIB")


def serialize(stream: Bitstream) -> bytes:
    out = bytearray(_HEADER.pack(MAGIC, VERSION, stream.width, stream.height, stream.gop_size,
                                 stream.intra_period, stream.frame_count, stream.lambda_index))
    for f in stream.frames:
        flags = 1 if f.checksum is not None else 0
        out += struct.pack("<IBB", f.display_index, int(f.frame_type), flags)
        if flags:
            out += struct.pack("<I", f.checksum)
        for c in f.chunks:
            out += c.to_bytes()
    return bytes(out)


def deserialize(data: bytes) -> Bitstream:
    if len(data) < _HEADER.size:
        raise DecodeError("truncated bitstream header")
    magic, version, width, height, gop, intra, count, lam = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DecodeError("bad magic")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    pos = _HEADER.size
    frames = []
    for _ in range(count):
        if pos + 6 > len(data):
            raise DecodeError("truncated frame header")
        idx, ftype, flags = struct.unpack_from("<IBB", data, pos)
        pos += 6
        try:
            ftype = FrameType(ftype)
        except ValueError as exc:
            raise DecodeError(f"unknown frame type {ftype}") from exc
        checksum = None
        if flags & 1:
            if pos + 4 > len(data):
                raise DecodeError("truncated checksum")
            (checksum,) = struct.unpack_from("<I", data, pos)
            pos += 4
        chunks = []
        for _ in range(CHUNKS_PER_TYPE[ftype]):
            chunk, pos = CodedChunk.from_bytes(data, pos)
            chunks.append(chunk)
        frames.append(EncodedFrame(idx, ftype, chunks, checksum))
    if pos != len(data):
        raise DecodeError("trailing bytes after the last frame")
    return Bitstream(width, height, gop, intra, count, lam, frames)


def _as_frames(video) -> torch.Tensor:
    video = torch.as_tensor(video)
    if video.dim() != 4 or video.shape[1] != 3:
        raise ContractError(f"expected a (T, 3, H, W) video, got {tuple(video.shape)}")
    return video.to(torch.float32)


def _run_waves(gop_plan, work, workers: int):
    waves = gop_plan.levels()
    if workers <= 1:
        for wave in waves:
            for f in wave:
                work(f)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for wave in waves:
            list(pool.map(work, wave))


def encode_sequence(video, models: CodecModels, config: CodecConfig, workers: int = 1,
                    checksum: bool = False) -> tuple[Bitstream, dict[int, torch.Tensor]]:
    """Encode a (T, 3, H, W) video in [0, 1]; returns the bitstream and encoder-side reconstructions."""
    video = _as_frames(video)
    t, _, h, w = video.shape
    if (h, w) != (config.height, config.width):
        raise ContractError("video dims do not match the codec config")
    gop_plan = gop_mod.plan(t, config.gop_size, config.intra_period)
    recon: dict[int, torch.Tensor] = {}
    encoded: dict[int, EncodedFrame] = {}

    def work(f):
        x = video[f.display_index][None]
        refs = [recon[r] for r in f.refs]
        if f.frame_type is FrameType.I:
            ef, xr = encode_i_frame(x, models, f.display_index, checksum)
        elif f.frame_type is FrameType.BSTAR:
            ef, xr = encode_bstar_frame(x, refs[0], models, f.display_index, checksum)
        else:
            ef, xr = encode_b_frame(x, refs[0], refs[1], f.frame_type, models, f.display_index, checksum)
        encoded[f.display_index] = ef
        recon[f.display_index] = xr

    _run_waves(gop_plan, work, workers)
    frames = [encoded[f.display_index] for f in gop_plan]
    stream = Bitstream(w, h, config.gop_size, config.intra_period, t, config.lambda_index, frames)
    return stream, recon


def decode_sequence(stream: Bitstream, models: CodecModels, workers: int = 1, verify: bool = False) -> torch.Tensor:
    """Decode every frame; returns a (T, 3, H, W) tensor in display order."""
    gop_plan = gop_mod.plan(stream.frame_count, stream.gop_size, stream.intra_period)
    if [f.display_index for f in stream.frames] != [f.display_index for f in gop_plan]:
        raise DecodeError("frames are not in the planned coding order")
    by_index = {f.display_index: f for f in stream.frames}
    recon: dict[int, torch.Tensor] = {}

    def work(f):
        ef = by_index[f.display_index]
        if ef.frame_type is not f.frame_type:
            raise DecodeError(f"frame {f.display_index}: type {ef.frame_type.name}, plan says {f.frame_type.name}")
        recon[f.display_index] = decode_frame(ef, [recon[r] for r in f.refs], models, stream.height,
                                              stream.width, verify=verify)

    _run_waves(gop_plan, work, workers)
    return torch.cat([recon[i] for i in range(stream.frame_count)], dim=0)
