"""Quality and rate metrics: PSNR, bpp, Bjontegaard delta-rate, per-frame profiles."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = ["PSNR_CAP", "psnr", "bpp", "RdCurve", "bd_rate", "profile_report", "FrameRecord", "frame_records",
           "records_to_csv", "aggregate", "parse_profile"]

PSNR_CAP = 99.0


def _array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB over all samples; zero error is capped at 99 dB.

    Inputs are arrays or tensors on the ``[0, peak]`` scale (8-bit by default).
    """
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def bpp(payload_bytes: float, width: int, height: int) -> float:
    if width <= 0 or height <= 0:
        raise ValueError("dims must be positive")
    return 8.0 * payload_bytes / (width * height)


@dataclass(frozen=True)
class RdCurve:
    """Rate-distortion points sorted by rate; both coordinates strictly increasing."""

    points: tuple[tuple[float, float], ...]

    def __init__(self, points: Iterable[tuple[float, float]]):
        pts = tuple(sorted((float(r), float(q)) for r, q in points))
        rates = np.array([p[0] for p in pts])
        quality = np.array([p[1] for p in pts])
        if len(pts) < 2:
            raise ValueError("an RD curve needs at least two points")
        if np.any(rates <= 0):
            raise ValueError("rates must be positive")
        if np.any(np.diff(rates) <= 0):
            raise ValueError("rates must be strictly increasing")
        if np.any(np.diff(quality) <= 0):
            raise ValueError("PSNR must increase strictly with rate")
        object.__setattr__(self, "points", pts)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def scaled(self, factor: float) -> "RdCurve":
        return RdCurve((r * factor, q) for r, q in self.points)


def bd_rate(anchor: RdCurve, test: RdCurve, min_points: int = 4) -> float:
    """Average rate difference (%) of ``test`` against ``anchor`` at equal PSNR.

    Log-rate is interpolated as a monotone cubic (PCHIP) function of PSNR and
    the difference is averaged over the shared PSNR interval.
    """
    for name, c in (("anchor", anchor), ("test", test)):
        if len(c.points) < min_points:
            raise ValueError(f"{name} curve has {len(c.points)} points; need {min_points}")
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if not hi > lo:
        raise ValueError("curves have no overlapping PSNR range")
    fa = PchipInterpolator(anchor.psnrs, np.log(anchor.rates))
    ft = PchipInterpolator(test.psnrs, np.log(test.rates))
    ia = fa.integrate(lo, hi)
    it = ft.integrate(lo, hi)
    mean_diff = (it - ia) / (hi - lo)
    return 100.0 * (math.exp(mean_diff) - 1.0)


@dataclass(frozen=True)
class FrameRecord:
    display_index: int
    frame_type: str
    bits: int
    bpp: float
    psnr: float


def frame_records(frames: Sequence, recon, originals, width: int, height: int) -> list[FrameRecord]:
    """Per-frame bits and 8-bit PSNR for encoded frames (objects with display_index/frame_type/bits).

    ``recon`` and ``originals`` are indexed by display index and hold [0, 1] samples.
    """
    recon, originals = _array(recon), _array(originals)
    scale = 255.0
    out = []
    for f in sorted(frames, key=lambda f: f.display_index):
        i = f.display_index
        q = psnr(np.round(recon[i] * scale), np.round(originals[i] * scale))
        name = getattr(f.frame_type, "name", str(f.frame_type))
        out.append(FrameRecord(i, name, int(f.bits), f.bits / (width * height), q))
    return out


def profile_report(bitstream, reconstructions, originals) -> str:
    """CSV of per-frame type/bits/bpp/PSNR followed by per-type aggregate rows.

    Aggregate rows carry the type in ``frame_type``, ``display_index`` set to
    ``total``, summed bits, and mean bpp and PSNR.
    """
    records = frame_records(bitstream.frames, reconstructions, originals, bitstream.width, bitstream.height)
    return records_to_csv(records)


def records_to_csv(records: Sequence[FrameRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["display_index", "frame_type", "bits", "bpp", "psnr"])
    for r in records:
        w.writerow([r.display_index, r.frame_type, r.bits, repr(r.bpp), repr(r.psnr)])
    for name, group in aggregate(records).items():
        w.writerow(["total", name, group["bits"], repr(group["bpp"]), repr(group["psnr"])])
    return buf.getvalue()


def aggregate(records: Sequence[FrameRecord]) -> dict[str, dict]:
    """Per-type (and ``ALL``) totals: summed bits, mean bpp, mean PSNR, frame count."""
    groups: dict[str, list[FrameRecord]] = {}
    for r in records:
        groups.setdefault(r.frame_type, []).append(r)
    groups["ALL"] = list(records)
    return {name: {"count": len(g), "bits": sum(r.bits for r in g),
                   "bpp": float(np.mean([r.bpp for r in g])), "psnr": float(np.mean([r.psnr for r in g]))}
            for name, g in groups.items() if g}


def parse_profile(text: str) -> tuple[list[FrameRecord], dict[str, dict]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    records, totals = [], {}
    for r in rows:
        if r["display_index"] == "total":
            totals[r["frame_type"]] = {"bits": int(r["bits"]), "bpp": float(r["bpp"]), "psnr": float(r["psnr"])}
        else:
            records.append(FrameRecord(int(r["display_index"]), r["frame_type"], int(r["bits"]),
                                       float(r["bpp"]), float(r["psnr"])))
    return records, totals
