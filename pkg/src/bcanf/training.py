"""Rate-distortion training: loss, synthetic clips, and the 5-frame training step."""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from scipy import ndimage

from .canf import FrameType
from .codec import CodecModels, code_b, code_bstar, code_intra, rate_bits
from .gop import training_schedule
from .nn import ParamStore, adam_step, backward

__all__ = [
    "LossWeights",
    "FrameTerms",
    "rd_loss",
    "make_clips",
    "train_step",
    "train",
    "pretrain_intra",
    "intra_step",
]


@dataclass
class LossWeights:
    lambda1: float = 2048.0
    lambda2: float | None = None
    alpha_r: float = 1.0
    alpha_nr: float = 2.0

    def __post_init__(self):
        if self.lambda2 is None:
            self.lambda2 = 0.01 * self.lambda1
        if min(self.lambda1, self.lambda2, self.alpha_r, self.alpha_nr) <= 0:
            raise ValueError("loss weights must be positive")

    def frame_weight(self, frame_type: FrameType) -> float:
        if frame_type is FrameType.REF_B:
            return 1.0 / self.alpha_r
        if frame_type is FrameType.NONREF_B:
            return 1.0 / self.alpha_nr
        return 1.0


@dataclass
class FrameTerms:
    """Per-frame distortion (MSE), rate (bpp) and flow-regularization terms."""

    frame_type: FrameType
    d: torch.Tensor | float
    r: torch.Tensor | float
    f: torch.Tensor | float


def rd_loss(terms: Iterable[FrameTerms], weights: LossWeights):
    """``lambda1 * D + R + lambda2 * F`` with B*/reference/non-reference weighting of D and F."""
    dist = rate = reg = 0.0
    for t in terms:
        w = weights.frame_weight(t.frame_type)
        dist = dist + w * t.d
        rate = rate + t.r
        reg = reg + w * t.f
    return weights.lambda1 * dist + rate + weights.lambda2 * reg


# ---------------------------------------------------------------------------
# synthetic data


def _canvas(size: int, rng: np.random.Generator) -> np.ndarray:
    """Noise-and-gradient texture with a few flat shapes, (3, size, size) in [0, 1]."""
    img = np.zeros((3, size, size))
    yy, xx = np.mgrid[0:size, 0:size] / size
    for c in range(3):
        g = rng.uniform(-1, 1, 2)
        img[c] = 0.5 + 0.25 * (g[0] * xx + g[1] * yy)
        for sigma, amp in ((rng.uniform(1.0, 2.5), 0.25), (rng.uniform(4, 8), 0.35)):
            img[c] += amp * ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma) * sigma
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.integers(0, size, 2)
        r = rng.integers(size // 16, size // 5)
        color = rng.uniform(0, 1, 3)
        mask = (yy * size - cy) ** 2 + (xx * size - cx) ** 2 < r * r
        if rng.random() < 0.5:
            mask = (np.abs(yy * size - cy) < r) & (np.abs(xx * size - cx) < r)
        img[:, mask] = color[:, None]
    lo, hi = img.min(axis=(1, 2), keepdims=True), img.max(axis=(1, 2), keepdims=True)
    return (img - lo) / np.maximum(hi - lo, 1e-6)


def make_clips(n: int, frames: int = 5, size: int = 64, max_speed: float = 2.0, max_rotation: float = 1.5,
               seed: int | None = None, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Moving-texture clips: crops of a canvas translating (and slightly rotating) at constant speed.

    Returns an (n, frames, 3, size, size) float32 tensor in [0, 1].
    """
    rng = rng or np.random.default_rng(seed)
    margin = int(math.ceil(max_speed * frames)) + size // 4
    big = size + 2 * margin
    out = np.empty((n, frames, 3, size, size), dtype=np.float32)
    center = (big - 1) / 2
    for i in range(n):
        canvas = _canvas(big, rng)
        v = rng.uniform(-max_speed, max_speed, 2)
        if rng.random() < 0.3:
            v = np.round(v)
        omega = math.radians(rng.uniform(-max_rotation, max_rotation)) if rng.random() < 0.5 else 0.0
        for t in range(frames):
            a = omega * t
            rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
            # output pixel p samples canvas at rot @ (p - c) + c + shift
            shift = np.array([v[1], v[0]]) * t
            offset = center - rot @ np.array([center, center]) + shift
            for c in range(3):
                full = ndimage.affine_transform(canvas[c], rot, offset=offset, order=1, mode="nearest")
                out[i, t, c] = full[margin:margin + size, margin:margin + size]
    return torch.from_numpy(np.clip(out, 0, 1))


# ---------------------------------------------------------------------------
# training steps


def _mse(a, b):
    return torch.mean((a - b) ** 2)


def _check(loss, metrics):
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in metrics.items() if isinstance(v, float))
        raise FloatingPointError(f"non-finite loss ({detail})")


def code_training_clip(batch: torch.Tensor, models: CodecModels, rng: random.Random,
                       generator: torch.Generator | None = None) -> tuple[list[FrameTerms], dict]:
    """Forward pass of the 5-frame schedule; the intra codec runs frozen."""
    n, t, _, h, w = batch.shape
    if t != 5:
        raise ValueError("training clips have 5 frames")
    pixels = n * h * w
    schedule = training_schedule(5, rng)
    with torch.no_grad():
        recon = {0: code_intra(batch[:, 0], models)["recon"]}
    terms, metrics = [], {}
    for f in schedule[1:]:
        x = batch[:, f.display_index]
        refs = [recon[r] for r in f.refs]
        if f.frame_type is FrameType.BSTAR:
            out = code_bstar(x, refs[0], models, "train", generator)
        else:
            out = code_b(x, refs[0], refs[1], f.frame_type, models, "train", generator)
        recon[f.display_index] = out["recon"]
        bits = rate_bits(out, "train")
        term = FrameTerms(f.frame_type, _mse(x, out["recon"]), sum(bits) / pixels, _mse(out["y2"], out["xc"]))
        terms.append(term)
        key = f.frame_type.name
        metrics[f"d_{key}"] = term.d.item()
        metrics[f"r_{key}"] = term.r.item()
        metrics[f"f_{key}"] = term.f.item()
    metrics["chosen"] = schedule[-1].display_index
    return terms, metrics


def train_step(batch: torch.Tensor, models: CodecModels, weights: LossWeights, store: ParamStore,
               lr: float = 1e-4, rng: random.Random | None = None,
               generator: torch.Generator | None = None) -> dict:
    """One optimizer step on a (N, 5, 3, H, W) batch; returns loss and per-frame terms."""
    rng = rng or random.Random()
    terms, metrics = code_training_clip(batch, models, rng, generator)
    loss = rd_loss(terms, weights)
    with torch.no_grad():
        metrics.update(loss=loss.item(), D=float(sum(weights.frame_weight(t.frame_type) * t.d for t in terms)),
                       R=float(sum(t.r for t in terms)),
                       F=float(sum(weights.frame_weight(t.frame_type) * t.f for t in terms)))
    _check(loss, metrics)
    store.zero_grad()
    backward(loss)
    adam_step(store, lr)
    return metrics


def intra_step(batch: torch.Tensor, models: CodecModels, weights: LossWeights, store: ParamStore,
               lr: float = 1e-4, generator: torch.Generator | None = None) -> dict:
    """One step of ``lambda1 * MSE + bpp + lambda2 * |y2|^2`` on single frames (N, 3, H, W)."""
    n, _, h, w = batch.shape
    out = code_intra(batch, models, "train", generator)
    d = _mse(batch, out["recon"])
    r = sum(rate_bits(out, "train")) / (n * h * w)
    f = torch.mean(out["y2"] ** 2)
    loss = weights.lambda1 * d + r + weights.lambda2 * f
    metrics = {"loss": loss.item(), "D": d.item(), "R": r.item(), "F": f.item()}
    _check(loss, metrics)
    store.zero_grad()
    backward(loss)
    adam_step(store, lr)
    return metrics


def _batches(data: torch.Tensor | None, batch_size: int, frames: int, size: int, seed: int, pool: int):
    """Endless random batches from ``data`` or from a regenerated synthetic pool."""
    rng = np.random.default_rng(seed)
    if data is None:
        data = make_clips(pool, frames, size, rng=rng)
    while True:
        idx = rng.choice(len(data), batch_size, replace=len(data) < batch_size)
        yield data[idx]


def pretrain_intra(models: CodecModels, steps: int = 1000, lambda1: float = 2048.0, batch_size: int = 4,
                   lr: float = 1e-3, data: torch.Tensor | None = None, size: int = 64, seed: int = 0,
                   log: Callable[[int, dict], None] | None = None) -> CodecModels:
    """Train the unconditional intra codec; it stays frozen during B-frame training."""
    torch.manual_seed(seed)
    weights = LossWeights(lambda1)
    store = ParamStore.from_modules(intra=models.intra)
    gen = torch.Generator().manual_seed(seed)
    frames = None if data is None else data.reshape(-1, *data.shape[-3:])
    batches = _batches(frames[:, None] if frames is not None else None, batch_size, 1, size, seed,
                       pool=max(64, 4 * batch_size))
    for step in range(steps):
        metrics = intra_step(next(batches)[:, 0], models, weights, store, lr, gen)
        if log:
            log(step, metrics)
    return models


def train(models: CodecModels, steps: int = 2000, lambda1: float = 2048.0, batch_size: int = 4,
          lr: float = 1e-3, data: torch.Tensor | None = None, size: int = 64, seed: int = 0,
          weights: LossWeights | None = None, progress: str | Path | None = None, pool: int = 256,
          log: Callable[[int, dict], None] | None = None) -> list[dict]:
    """B/B*-frame training loop; writes ``step,loss,D,R,F`` rows to ``progress`` if given."""
    torch.manual_seed(seed)
    weights = weights or LossWeights(lambda1)
    store = models.param_store()
    rng = random.Random(seed)
    gen = torch.Generator().manual_seed(seed)
    batches = _batches(data, batch_size, 5, size, seed, pool)
    history = []
    writer = fh = None
    if progress is not None:
        fh = open(progress, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "D", "R", "F"])
    try:
        for step in range(steps):
            m = train_step(next(batches), models, weights, store, lr, rng, gen)
            history.append(m)
            if writer:
                writer.writerow([step, m["loss"], m["D"], m["R"], m["F"]])
            if log:
                log(step, m)
    finally:
        if fh:
            fh.close()
    return history
