"""Video input/output: Y4M 4:2:0, raw interleaved RGB, and PPM frame sequences."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

__all__ = ["VideoSource", "read_video", "write_raw", "read_raw", "write_y4m", "write_ppm_sequence",
           "yuv420_to_rgb", "rgb_to_yuv420", "FORMATS"]

FORMATS = ("y4m-420", "raw-rgb", "ppm-sequence")


class VideoFormatError(ValueError):
    pass


@dataclass
class VideoSource:
    """8-bit RGB frames, (T, H, W, 3) uint8."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise VideoFormatError(f"frames must be (T, H, W, 3), got {f.shape}")
        if f.dtype != np.uint8:
            raise VideoFormatError("frames must be uint8")
        self.frames = f

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def to_tensor(self) -> torch.Tensor:
        """(T, 3, H, W) float32 in [0, 1]."""
        return torch.from_numpy(self.frames.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()

    @classmethod
    def from_tensor(cls, video: torch.Tensor) -> "VideoSource":
        a = video.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy()
        return cls(np.round(a * 255.0).astype(np.uint8))

    def head(self, n: int) -> "VideoSource":
        return VideoSource(self.frames[:n])


# BT.601 full range
_RGB_TO_YUV = np.array([[0.299, 0.587, 0.114],
                        [-0.168736, -0.331264, 0.5],
                        [0.5, -0.418688, -0.081312]])
_YUV_TO_RGB = np.linalg.inv(_RGB_TO_YUV)


def _upsample_chroma(c: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear 2x upsampling with chroma samples centered between luma pairs."""
    ch, cw = c.shape

    def axis_weights(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) / 2 - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis_weights(h, ch)
    x0, x1, fx = axis_weights(w, cw)
    c = c.astype(np.float64)
    rows = c[y0] * (1 - fy)[:, None] + c[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def yuv420_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = y.shape
    yuv = np.stack([y.astype(np.float64), _upsample_chroma(u, h, w) - 128.0, _upsample_chroma(v, h, w) - 128.0],
                   axis=-1)
    rgb = yuv @ _YUV_TO_RGB.T
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def rgb_to_yuv420(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w, _ = rgb.shape
    if h % 2 or w % 2:
        raise VideoFormatError("4:2:0 output needs even dims")
    yuv = rgb.astype(np.float64) @ _RGB_TO_YUV.T
    yuv[..., 1:] += 128.0
    y = yuv[..., 0]
    chroma = yuv[..., 1:].reshape(h // 2, 2, w // 2, 2, 2).mean(axis=(1, 3))
    q = lambda a: np.clip(np.round(a), 0, 255).astype(np.uint8)
    return q(y), q(chroma[..., 0]), q(chroma[..., 1])


def _parse_y4m_header(line: bytes) -> dict:
    tokens = line.decode("ascii", errors="replace").split()
    if not tokens or tokens[0] != "YUV4MPEG2":
        raise VideoFormatError("not a YUV4MPEG2 stream")
    info = {"C": "420"}
    for t in tokens[1:]:
        info[t[0]] = t[1:]
    for key in ("W", "H"):
        if key not in info or not info[key].isdigit():
            raise VideoFormatError(f"y4m header lacks a valid {key} field")
    if not info["C"].startswith("420"):
        raise VideoFormatError(f"unsupported y4m colorspace C{info['C']}; only 4:2:0 is read")
    return info


def _read_y4m(path: Path) -> VideoSource:
    data = path.read_bytes()
    end = data.find(b"\n")
    if end < 0:
        raise VideoFormatError("truncated y4m header")
    info = _parse_y4m_header(data[:end])
    w, h = int(info["W"]), int(info["H"])
    if w % 2 or h % 2:
        raise VideoFormatError("4:2:0 needs even dims")
    ysz, csz = w * h, (w // 2) * (h // 2)
    pos = end + 1
    frames = []
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0 or not data[pos:nl].startswith(b"FRAME"):
            raise VideoFormatError(f"bad frame marker at byte {pos}")
        pos = nl + 1
        if pos + ysz + 2 * csz > len(data):
            raise VideoFormatError(f"truncated frame {len(frames)}")
        plane = lambda off, n, shape: np.frombuffer(data, np.uint8, n, off).reshape(shape)
        y = plane(pos, ysz, (h, w))
        u = plane(pos + ysz, csz, (h // 2, w // 2))
        v = plane(pos + ysz + csz, csz, (h // 2, w // 2))
        frames.append(yuv420_to_rgb(y, u, v))
        pos += ysz + 2 * csz
    if not frames:
        raise VideoFormatError("y4m stream has no frames")
    return VideoSource(np.stack(frames))


def write_y4m(path: str | Path, video: VideoSource, fps: str = "30:1") -> None:
    out = [f"YUV4MPEG2 W{video.width} H{video.height} F{fps} Ip A1:1 C420jpeg\n".encode()]
    for f in video.frames:
        y, u, v = rgb_to_yuv420(f)
        out += [b"FRAME\n", y.tobytes(), u.tobytes(), v.tobytes()]
    Path(path).write_bytes(b"".join(out))


def read_raw(path: str | Path, width: int, height: int) -> VideoSource:
    """Headerless interleaved 8-bit RGB frames."""
    data = Path(path).read_bytes()
    size = width * height * 3
    if width <= 0 or height <= 0:
        raise VideoFormatError("raw video needs positive dims")
    if len(data) == 0 or len(data) % size:
        raise VideoFormatError(f"raw file size {len(data)} is not a multiple of the frame size {size}")
    return VideoSource(np.frombuffer(data, np.uint8).reshape(-1, height, width, 3).copy())


def write_raw(path: str | Path, video: VideoSource) -> None:
    Path(path).write_bytes(np.ascontiguousarray(video.frames).tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    m = _PPM_HEADER.match(data)
    if not m:
        raise VideoFormatError(f"{path.name}: not a binary PPM (P6)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise VideoFormatError(f"{path.name}: only 8-bit PPM is supported")
    body = data[m.end():]
    if len(body) < w * h * 3:
        raise VideoFormatError(f"{path.name}: truncated pixel data")
    return np.frombuffer(body, np.uint8, w * h * 3).reshape(h, w, 3).copy()


def _read_ppm_sequence(path: Path) -> VideoSource:
    files = sorted(path.glob("*.ppm")) if path.is_dir() else [path]
    if not files:
        raise VideoFormatError(f"no .ppm files in {path}")
    frames = [_read_ppm(f) for f in files]
    if len({f.shape for f in frames}) != 1:
        raise VideoFormatError("ppm frames differ in size")
    return VideoSource(np.stack(frames))


def write_ppm_sequence(directory: str | Path, video: VideoSource) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(video.frames):
        p = d / f"frame_{i:05d}.ppm"
        p.write_bytes(f"P6\n{video.width} {video.height}\n255\n".encode() + f.tobytes())
        paths.append(p)
    return paths


def read_video(path: str | Path, fmt: str | None = None, width: int | None = None,
               height: int | None = None) -> VideoSource:
    """Read a video; ``fmt`` defaults from the extension (.y4m, .rgb/.raw, directory or .ppm)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt is None:
        if path.is_dir() or path.suffix == ".ppm":
            fmt = "ppm-sequence"
        elif path.suffix == ".y4m":
            fmt = "y4m-420"
        elif path.suffix in (".rgb", ".raw"):
            fmt = "raw-rgb"
        else:
            raise VideoFormatError(f"cannot infer video format of {path}")
    if fmt == "y4m-420":
        return _read_y4m(path)
    if fmt == "raw-rgb":
        if width is None or height is None:
            raise VideoFormatError("raw-rgb input needs width and height")
        return read_raw(path, width, height)
    if fmt == "ppm-sequence":
        return _read_ppm_sequence(path)
    raise VideoFormatError(f"unknown format {fmt!r}; expected one of {FORMATS}")
