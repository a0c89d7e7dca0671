"""Frame synthesis: fuse two motion-compensated references into a predicted frame."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .motion import warp
from .nn import ContractError, ConvLayer

__all__ = ["SynthNet", "synthesize"]


def _act(x):
    return F.leaky_relu(x, 0.01)


class SynthNet(nn.Module):
    """Two-scale U-shaped fusion net with an identity bypass.

    The output is ``0.5 * (warped_prev + warped_next) + residual``; the
    residual head starts at zero so an untrained net is plain bi-prediction.
    """

    def __init__(self, channels: int = 3, features: int = 32):
        super().__init__()
        f = features
        self.ext1 = ConvLayer(channels, f, 3, 1)
        self.ext2 = ConvLayer(f, f, 3, 1)
        self.ext_down = ConvLayer(f, f, 3, 2)
        self.half_fuse = ConvLayer(2 * f, f, 3, 1)
        self.up = ConvLayer(f, f, 3, 2, transposed=True)
        self.fuse1 = ConvLayer(2 * channels + 3 * f, f, 3, 1)
        self.fuse2 = ConvLayer(f, f, 3, 1)
        self.head = ConvLayer(f, channels, 3, 1).zero_()

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f1 = _act(self.ext2(_act(self.ext1(x))))
        return f1, _act(self.ext_down(f1))

    def forward(self, ref_prev, ref_next, flow_prev, flow_next) -> torch.Tensor:
        return synthesize(ref_prev, ref_next, flow_prev, flow_next, self)


def _half_flow(flow: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(flow, 2) / 2


def synthesize(ref_prev: torch.Tensor, ref_next: torch.Tensor, flow_prev: torch.Tensor,
               flow_next: torch.Tensor, net: SynthNet | None = None) -> torch.Tensor:
    """Predicted frame from two references and their backward flows.

    With ``net=None`` only the bypass (average of the warped references) is used.
    """
    if not (ref_prev.shape == ref_next.shape and flow_prev.shape == flow_next.shape
            and ref_prev.shape[-2:] == flow_prev.shape[-2:]):
        raise ContractError("references and flows must share spatial dims")
    wp = warp(ref_prev, flow_prev)
    wn = warp(ref_next, flow_next)
    base = 0.5 * (wp + wn)
    if net is None:
        return base
    p1, p2 = net.features(ref_prev)
    n1, n2 = net.features(ref_next)
    hp, hn = _half_flow(flow_prev), _half_flow(flow_next)
    half = _act(net.half_fuse(torch.cat([warp(p2, hp), warp(n2, hn)], dim=1)))
    up = _act(net.up(half))
    x = torch.cat([wp, wn, warp(p1, flow_prev), warp(n1, flow_next), up], dim=1)
    x = _act(net.fuse2(_act(net.fuse1(x))))
    return base + net.head(x)
