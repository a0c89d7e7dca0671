"""Motion estimation, bidirectional motion prediction, and backward warping.

Flow maps are (N, 2, H, W) tensors holding (dx, dy) in pixels. A backward
flow ``f`` for target ``t`` and reference ``r`` satisfies
``warp(r, f) ~= t``, i.e. ``t(p) ~= r(p + f(p))``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nn import ContractError, ConvLayer

__all__ = [
    "estimate_flow",
    "MotionPredictor",
    "predict_bidirectional_flows",
    "linear_flow_fallback",
    "warp",
    "make_virtual_flow",
    "dump_flow",
    "load_flow",
]

MIN_SIZE = 16


def warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp with border replication.

    Implemented with explicit floor/fraction arithmetic (rather than
    normalized sampling grids) so integer displacements hit grid points exactly.
    """
    n, c, h, w = source.shape
    if flow.shape != (n, 2, h, w):
        raise ContractError(f"flow shape {tuple(flow.shape)} does not match source {tuple(source.shape)}")
    ys, xs = torch.meshgrid(torch.arange(h, dtype=flow.dtype), torch.arange(w, dtype=flow.dtype), indexing="ij")
    px = (xs + flow[:, 0]).clamp(0, w - 1)
    py = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = px.detach().floor().clamp(max=max(w - 2, 0))
    y0 = py.detach().floor().clamp(max=max(h - 2, 0))
    fx = (px - x0).unsqueeze(1)
    fy = (py - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = source.reshape(n, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    top = gather(y0, x0) * (1 - fx) + gather(y0, x1) * fx
    bottom = gather(y1, x0) * (1 - fx) + gather(y1, x1) * fx
    return top * (1 - fy) + bottom * fy


def make_virtual_flow(flow: torch.Tensor) -> torch.Tensor:
    return -flow


# ---------------------------------------------------------------------------
# pyramidal block matching


def _luma(frames: torch.Tensor) -> np.ndarray:
    return frames.detach().to(torch.float32).cpu().numpy().mean(axis=1)


def _downsample(img: np.ndarray) -> np.ndarray:
    b, h, w = img.shape
    return img.reshape(b, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _sample(img: np.ndarray, px: np.ndarray, py: np.ndarray, batch: np.ndarray, integer: bool) -> np.ndarray:
    """Bilinear lookup of (B, H, W) images at absolute coordinates with border replication.

    ``px``, ``py`` and the batch index ``batch`` broadcast against each other;
    ``integer=True`` promises whole-pixel coordinates and takes a single gather.
    """
    _, h, w = img.shape
    flat = img.ravel()
    base = batch * (h * w)
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    if integer:
        return flat[base + py.astype(np.int32) * w + px.astype(np.int32)]
    x0 = np.minimum(np.floor(px), max(w - 2, 0))
    y0 = np.minimum(np.floor(py), max(h - 2, 0))
    ax = (px - x0).astype(img.dtype)
    ay = (py - y0).astype(img.dtype)
    x0 = x0.astype(np.int32)
    y0 = y0.astype(np.int32)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = flat[base + y0 * w + x0] * (1 - ax) + flat[base + y0 * w + x1] * ax
    bot = flat[base + y1 * w + x0] * (1 - ax) + flat[base + y1 * w + x1] * ax
    return top * (1 - ay) + bot * ay


def _expand(blocks: np.ndarray, block: int) -> np.ndarray:
    return np.repeat(np.repeat(blocks, block, axis=-2), block, axis=-1)


def _match_level(tgt, ref, init_x, init_y, block, steps, penalty, integer):
    """Refine per-block flow around an initial guess; returns block-level (vx, vy).

    All candidates are evaluated together; on exact cost ties the candidate
    with the smallest step magnitude wins.
    """
    b, h, w = tgt.shape
    bh, bw = h // block, w // block
    dy, dx = np.meshgrid(steps, steps, indexing="ij")
    order = np.argsort(np.abs(dx.ravel()) + np.abs(dy.ravel()), kind="stable")
    dx = dx.ravel()[order].reshape(-1, 1, 1, 1)
    dy = dy.ravel()[order].reshape(-1, 1, 1, 1)
    cx = init_x[None] + dx
    cy = init_y[None] + dy
    # pixels viewed as (bh, block, bw, block) so block displacements broadcast without copies
    k = cx.shape[0]
    yy = np.arange(h, dtype=np.float64).reshape(bh, block, 1, 1)
    xx = np.arange(w, dtype=np.float64).reshape(1, 1, bw, block)
    batch = np.arange(b).reshape(1, b, 1, 1, 1, 1)
    pred = _sample(ref, xx + cx.reshape(k, b, bh, 1, bw, 1), yy + cy.reshape(k, b, bh, 1, bw, 1), batch, integer)
    sad = np.abs(tgt.reshape(1, b, bh, block, bw, block) - pred).sum(axis=(3, 5))
    cost = sad + penalty * (np.abs(cx) + np.abs(cy))
    best = np.argmin(cost, axis=0)[None]
    return np.take_along_axis(cx, best, axis=0)[0], np.take_along_axis(cy, best, axis=0)[0]


def _estimate(tgt: np.ndarray, ref: np.ndarray, levels: int, block: int, search: int,
              half_pel: bool) -> np.ndarray:
    """(B, H, W) luma pairs -> (B, 2, H, W) flow."""
    _, h, w = tgt.shape
    unit = block * 2 ** (levels - 1)
    pad = ((0, 0), (0, -h % unit), (0, -w % unit))
    pyr = [(np.pad(tgt, pad, mode="edge"), np.pad(ref, pad, mode="edge"))]
    for _ in range(levels - 1):
        pyr.append((_downsample(pyr[-1][0]), _downsample(pyr[-1][1])))
    int_steps = np.arange(-search, search + 1, dtype=np.float64)
    penalty = 1e-3 * block * block
    vx = vy = None
    for lvl in range(levels - 1, -1, -1):
        t, r = pyr[lvl]
        if vx is None:
            vx = np.zeros((t.shape[0], t.shape[1] // block, t.shape[2] // block))
            vy = np.zeros_like(vx)
        else:
            vx = 2 * np.repeat(np.repeat(vx, 2, axis=1), 2, axis=2)
            vy = 2 * np.repeat(np.repeat(vy, 2, axis=1), 2, axis=2)
        vx, vy = _match_level(t, r, vx, vy, block, int_steps, penalty, True)
        if lvl == 0 and half_pel:
            vx, vy = _match_level(t, r, vx, vy, block, np.array([0.0, -0.5, 0.5]), penalty, False)
    flow = np.stack([_expand(vx, block), _expand(vy, block)], axis=1)
    return flow[:, :, :h, :w]


def estimate_flow(target: torch.Tensor, reference: torch.Tensor, levels: int = 3, block: int = 8,
                  search: int = 4, half_pel: bool = True) -> torch.Tensor:
    """Backward flow from ``target`` to ``reference`` by 3-level pyramidal block matching.

    Treated as fixed preprocessing: the result carries no gradient.
    """
    if target.shape != reference.shape:
        raise ContractError("target and reference must have equal shapes")
    if target.dim() == 3:
        return estimate_flow(target[None], reference[None], levels, block, search, half_pel)[0]
    h, w = target.shape[-2:]
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ContractError(f"frames must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    flow = _estimate(_luma(target), _luma(reference), levels, block, search, half_pel)
    return torch.from_numpy(flow).to(target.dtype)


def linear_flow_fallback(ref_prev: torch.Tensor, ref_next: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Assume linear motion through the midpoint: (+0.5, -0.5) times the next-to-prev flow."""
    f = estimate_flow(ref_next, ref_prev)
    return 0.5 * f, -0.5 * f


class MotionPredictor(nn.Module):
    """Coarse-to-fine refinement of the linear fallback flows from the two references.

    Each of the three levels (1/4, 1/2, full resolution) sees both references,
    both references warped by the current flows, and the flows themselves, and
    adds a residual flow update. Update heads start at zero, so an untrained
    predictor returns the fallback.
    """

    def __init__(self, hidden: int = 16, levels: int = 3):
        super().__init__()
        self.scales = [2 ** i for i in range(levels - 1, -1, -1)]
        self.nets = nn.ModuleList()
        for _ in self.scales:
            head = ConvLayer(hidden, 4, 3, 1).zero_()
            self.nets.append(nn.Sequential(ConvLayer(16, hidden, 3, 1), nn.LeakyReLU(0.01),
                                           ConvLayer(hidden, hidden, 3, 1), nn.LeakyReLU(0.01), head))

    def forward(self, ref_prev: torch.Tensor, ref_next: torch.Tensor,
                init: tuple[torch.Tensor, torch.Tensor] | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        fp, fn = init if init is not None else linear_flow_fallback(ref_prev, ref_next)
        flows = torch.cat([fp, fn], dim=1)
        for s, net in zip(self.scales, self.nets):
            if s > 1:
                p, n, f = F.avg_pool2d(ref_prev, s), F.avg_pool2d(ref_next, s), F.avg_pool2d(flows, s) / s
            else:
                p, n, f = ref_prev, ref_next, flows
            wp = warp(p, f[:, :2])
            wn = warp(n, f[:, 2:])
            delta = net(torch.cat([p, n, wp, wn, f], dim=1))
            if s > 1:
                delta = F.interpolate(delta * s, scale_factor=s, mode="bilinear", align_corners=False)
            flows = flows + delta
        return flows[:, :2], flows[:, 2:]


def predict_bidirectional_flows(ref_prev: torch.Tensor, ref_next: torch.Tensor,
                                predictor: MotionPredictor | None = None):
    """Predicted flows (to prev, to next) for the frame midway between the references."""
    if ref_prev.shape != ref_next.shape:
        raise ContractError("references must have equal shapes")
    if predictor is None:
        return linear_flow_fallback(ref_prev, ref_next)
    return predictor(ref_prev, ref_next)


def dump_flow(path: str | Path, flow: torch.Tensor) -> None:
    """Write a (2, H, W) or (1, 2, H, W) flow as two little-endian float32 planes."""
    a = flow.detach().reshape(2, *flow.shape[-2:]).to(torch.float32).numpy()
    Path(path).write_bytes(a.astype("<f4").tobytes())


def load_flow(path: str | Path, height: int, width: int) -> torch.Tensor:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != 2 * height * width:
        raise ValueError("flow file size does not match the given dims")
    return torch.from_numpy(data.reshape(1, 2, height, width).copy())
