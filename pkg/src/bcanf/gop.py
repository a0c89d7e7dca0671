"""Hierarchical-B GOP planning with B*-frames at GOP boundaries."""
from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass

from .canf import FrameType

__all__ = ["FramePlan", "GopPlan", "plan", "coding_order", "training_schedule", "trim_to_intra_periods"]


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class FramePlan:
    display_index: int
    coding_order: int
    frame_type: FrameType
    refs: tuple[int, ...]
    level: int


class GopPlan(list):
    """FramePlans in coding order."""

    def by_display(self) -> dict[int, FramePlan]:
        return {f.display_index: f for f in self}

    def levels(self) -> list[list[FramePlan]]:
        """Group frames into waves whose members depend only on earlier waves."""
        done: dict[int, int] = {}
        waves: list[list[FramePlan]] = []
        for f in self:
            wave = 1 + max((done[r] for r in f.refs), default=-1)
            done[f.display_index] = wave
            while len(waves) <= wave:
                waves.append([])
            waves[wave].append(f)
        return waves

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["display_index", "coding_order", "type", "ref0", "ref1", "level"])
        for f in sorted(self, key=lambda f: f.display_index):
            refs = list(f.refs) + [""] * (2 - len(f.refs))
            w.writerow([f.display_index, f.coding_order, f.frame_type.name, *refs, f.level])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GopPlan":
        rows = list(csv.DictReader(io.StringIO(text)))
        frames = [FramePlan(int(r["display_index"]), int(r["coding_order"]), FrameType[r["type"]],
                            tuple(int(r[k]) for k in ("ref0", "ref1") if r[k] != ""), int(r["level"]))
                  for r in rows]
        return cls(sorted(frames, key=lambda f: f.coding_order))


def trim_to_intra_periods(num_frames: int, intra_period: int) -> int:
    """Largest ``1 + k * intra_period`` not exceeding ``num_frames``."""
    if num_frames < 1:
        return 0
    return 1 + intra_period * ((num_frames - 1) // intra_period)


def plan(num_frames: int, gop_size: int = 16, intra_period: int = 32) -> GopPlan:
    """Frame types, references and coding order for ``num_frames`` frames.

    I-frames sit at multiples of ``intra_period``, B*-frames at the other
    multiples of ``gop_size``, and the frames in between are hierarchical
    B-frames; the deepest level is non-reference. A trailing remainder shorter
    than a GOP uses the largest power-of-two GOP that fits, repeatedly.
    """
    if not (_is_pow2(gop_size) and _is_pow2(intra_period)):
        raise ValueError("gop_size and intra_period must be powers of two")
    if gop_size > intra_period:
        raise ValueError("gop_size must not exceed intra_period")
    if num_frames < 1:
        raise ValueError("num_frames must be positive")

    out = GopPlan()

    def emit(idx, ftype, refs, level):
        out.append(FramePlan(idx, len(out), ftype, tuple(refs), level))

    def bisect(lo, hi, level):
        if hi - lo < 2:
            return
        mid = (lo + hi) // 2
        ftype = FrameType.NONREF_B if hi - lo == 2 else FrameType.REF_B
        emit(mid, ftype, (lo, hi), level)
        bisect(lo, mid, level + 1)
        bisect(mid, hi, level + 1)

    emit(0, FrameType.I, (), 0)
    anchor = 0
    last = num_frames - 1
    while anchor < last:
        g = gop_size
        if anchor + g > last:
            g = 1 << ((last - anchor).bit_length() - 1)
        nxt = anchor + g
        if nxt % intra_period == 0:
            emit(nxt, FrameType.I, (), 0)
        else:
            emit(nxt, FrameType.BSTAR, (anchor,), 0)
        bisect(anchor, nxt, 1)
        anchor = nxt
    return out


def coding_order(gop_plan: GopPlan) -> list[int]:
    return [f.display_index for f in sorted(gop_plan, key=lambda f: f.coding_order)]


def training_schedule(seq_len: int = 5, rng: random.Random | None = None) -> GopPlan:
    """The 5-frame training plan: x0 I, x4 B*, x2 reference B, and one of x1/x3 non-reference B."""
    if seq_len != 5:
        raise ValueError("training sequences have exactly 5 frames")
    rng = rng or random.Random()
    chosen = 1 if rng.random() < 0.5 else 3
    refs = (0, 2) if chosen == 1 else (2, 4)
    return GopPlan([
        FramePlan(0, 0, FrameType.I, (), 0),
        FramePlan(4, 1, FrameType.BSTAR, (0,), 0),
        FramePlan(2, 2, FrameType.REF_B, (0, 4), 1),
        FramePlan(chosen, 3, FrameType.NONREF_B, refs, 2),
    ])
