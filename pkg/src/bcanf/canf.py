"""Two-step conditional augmented normalizing flow (CANF) codec core.

Encoding a signal ``x`` given a condition ``c`` (a predicted frame, or the
predicted flows for the motion codec) runs two additive autoencoding
transforms::

    z1 = 0  + mu_A1(x, c)          y1 = x  - mu_S1(z1)
    z2 = z1 + mu_A2(y1, c)         y2 = y1 - mu_S2(z2_hat)

The hyper branch codes ``h = H_a(z2)`` with a factorized prior and predicts
the Gaussian ``(mu, sigma)`` of ``z2`` from ``(h_hat, H_p(c))``. Decoding
starts the signal lane at ``c`` (zero for the unconditional intra codec) and
runs the couplings backwards.

Every convolution is followed by a frame-type adaptation (FA) module: a
per-frame-type channel-wise affine map selected by a one-hot code.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .entropy import (
    SIGMA_MIN,
    CodedChunk,
    FactorizedModel,
    GaussianConditional,
    estimate_rate,
    pmf_to_cdf,
    rc_decode,
    rc_encode,
)
from .nn import ContractError, ConvLayer, GdnLayer

__all__ = [
    "FrameType",
    "one_hot",
    "FaModule",
    "fa_apply",
    "CouplingPair",
    "CanfModel",
    "LatentBundle",
    "quantize",
    "analysis_step",
    "synthesis_step",
    "canf_encode",
    "canf_decode",
]

NUM_FA_TYPES = 3
TAIL_SIGMAS = 5.0


class FrameType(enum.IntEnum):
    I = 0
    REF_B = 1
    NONREF_B = 2
    BSTAR = 3

    @property
    def fa_index(self) -> int:
        if self is FrameType.I:
            raise ContractError("I-frames carry no frame-type code")
        return int(self) - 1


def one_hot(frame_type: FrameType) -> torch.Tensor:
    code = torch.zeros(NUM_FA_TYPES)
    code[FrameType(frame_type).fa_index] = 1.0
    return code


def _fa_index(m) -> int:
    """Accept a FrameType, an FA row index, or a one-hot vector."""
    if isinstance(m, FrameType):
        return m.fa_index
    if isinstance(m, torch.Tensor):
        if m.numel() != NUM_FA_TYPES or int((m == 1).sum()) != 1 or int((m != 0).sum()) != 1:
            raise ContractError("frame-type code must be one-hot of length 3")
        return int(torch.argmax(m))
    m = int(m)
    if not 0 <= m < NUM_FA_TYPES:
        raise ContractError(f"FA index {m} out of range")
    return m


class FaModule(nn.Module):
    """Per-frame-type channel-wise scale and shift, stored as two 3 x C tables."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.gamma = nn.Parameter(torch.ones(NUM_FA_TYPES, channels))
        self.beta = nn.Parameter(torch.zeros(NUM_FA_TYPES, channels))

    def forward(self, x: torch.Tensor, m) -> torch.Tensor:
        return fa_apply(x, m, self)


def fa_apply(x: torch.Tensor, m, fa: FaModule) -> torch.Tensor:
    if x.shape[1] != fa.channels:
        raise ContractError(f"FA expects {fa.channels} channels, got {x.shape[1]}")
    i = _fa_index(m)
    return x * fa.gamma[i].view(1, -1, 1, 1) + fa.beta[i].view(1, -1, 1, 1)


def _leaky(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.01)


class ConvStack(nn.Module):
    """conv -> FA -> activation, repeated; the last layer has no activation."""

    def __init__(self, specs, use_fa: bool, activation: str):
        super().__init__()
        self.convs = nn.ModuleList()
        self.fas = nn.ModuleList() if use_fa else None
        self.acts = nn.ModuleList()
        for i, (cin, cout, k, s, transposed) in enumerate(specs):
            pad = k // 2
            self.convs.append(ConvLayer(cin, cout, k, s, pad, transposed=transposed))
            if use_fa:
                self.fas.append(FaModule(cout))
            last = i == len(specs) - 1
            if last:
                self.acts.append(nn.Identity())
            elif activation == "gdn":
                self.acts.append(GdnLayer(cout, inverse=False))
            elif activation == "igdn":
                self.acts.append(GdnLayer(cout, inverse=True))
            else:
                self.acts.append(nn.LeakyReLU(0.01))

    @property
    def last(self) -> ConvLayer:
        return self.convs[-1]

    def forward(self, x: torch.Tensor, m=None) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.fas is not None:
                x = self.fas[i](x, m)
            x = self.acts[i](x)
        return x


def _down_specs(cin, hidden, cout, k, n):
    specs = [(cin, hidden, k, 2, False)]
    specs += [(hidden, hidden, k, 2, False) for _ in range(n - 2)]
    specs.append((hidden, cout, k, 2, False))
    return specs


def _up_specs(cin, hidden, cout, k, n):
    specs = [(cin, hidden, k, 2, True)]
    specs += [(hidden, hidden, k, 2, True) for _ in range(n - 2)]
    specs.append((hidden, cout, k, 2, True))
    return specs


class CouplingPair(nn.Module):
    """Analysis net (signal+condition -> latent update) and synthesis net (latent -> signal update).

    The synthesis net's last layer starts at zero, so a fresh pair leaves the
    signal lane untouched.
    """

    def __init__(self, in_ch: int, cond_ch: int, latent_ch: int, hidden: int, kernel: int = 3,
                 levels: int = 4, use_fa: bool = True):
        super().__init__()
        self.in_ch = in_ch
        self.cond_ch = cond_ch
        self.latent_ch = latent_ch
        self.analysis = ConvStack(_down_specs(in_ch + cond_ch, hidden, latent_ch, kernel, levels), use_fa, "gdn")
        self.synthesis = ConvStack(_up_specs(latent_ch, hidden, in_ch, kernel, levels), use_fa, "igdn")
        self.synthesis.last.zero_()

    def mu_a(self, x, cond, m):
        return self.analysis(torch.cat([x, cond], dim=1), m)

    def mu_s(self, z, m):
        return self.synthesis(z, m)


def analysis_step(x: torch.Tensor, z: torch.Tensor, cond: torch.Tensor, m, pair: CouplingPair) -> torch.Tensor:
    if x.shape[-2:] != cond.shape[-2:]:
        raise ContractError("signal and condition must share spatial dims")
    update = pair.mu_a(x, cond, m)
    if update.shape != z.shape:
        raise ContractError(f"latent lane has shape {tuple(z.shape)}, update {tuple(update.shape)}")
    return z + update


def synthesis_step(x: torch.Tensor, z: torch.Tensor, m, pair: CouplingPair) -> torch.Tensor:
    update = pair.mu_s(z, m)
    if update.shape != x.shape:
        raise ContractError(f"signal lane has shape {tuple(x.shape)}, update {tuple(update.shape)}")
    return x - update


class HyperPrior(nn.Module):
    """H_a / H_s with the temporal-prior branch H_p feeding the mean/scale head."""

    def __init__(self, latent_ch: int, cond_ch: int, hidden: int, hyper_ch: int, use_fa: bool,
                 conditional: bool):
        super().__init__()
        self.analysis = ConvStack([(latent_ch, hidden, 3, 1, False), (hidden, hidden, 3, 2, False),
                                   (hidden, hyper_ch, 3, 2, False)], use_fa, "leaky")
        self.synthesis = ConvStack([(hyper_ch, hidden, 3, 2, True), (hidden, hidden, 3, 2, True)],
                                   use_fa, "leaky")
        self.temporal = None
        if conditional:
            self.temporal = ConvStack([(cond_ch, hidden, 5, 4, False), (hidden, hidden, 5, 4, False)],
                                      use_fa, "leaky")
        head_in = hidden * (2 if conditional else 1)
        self.head = ConvStack([(head_in, hidden, 3, 1, False), (hidden, 2 * latent_ch, 3, 1, False)],
                              use_fa, "leaky")

    def params(self, h_hat: torch.Tensor, cond: torch.Tensor | None, m) -> tuple[torch.Tensor, torch.Tensor]:
        feats = _leaky(self.synthesis(h_hat, m))
        if self.temporal is not None:
            feats = torch.cat([feats, _leaky(self.temporal(cond, m))], dim=1)
        mu, s = self.head(feats, m).chunk(2, dim=1)
        sigma = SIGMA_MIN + F.softplus(s)
        return mu, sigma


@dataclass
class LatentBundle:
    """Everything the encoder produces for one CANF call."""

    z2_hat: torch.Tensor
    h2_hat: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    y2: torch.Tensor | None = None
    z2: torch.Tensor | None = None
    h2: torch.Tensor | None = None
    residual: torch.Tensor | None = None
    extras: dict = field(default_factory=dict, repr=False)


def quantize(z2: torch.Tensor, mu: torch.Tensor, mode: str = "infer",
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean-centred quantization; returns ``(z2_hat, residual)``.

    ``infer`` rounds ``z2 - mu`` (the residual is what gets coded), ``train``
    replaces rounding by additive U(-0.5, 0.5) noise, ``bypass`` is identity.
    """
    if z2.shape != mu.shape:
        raise ContractError("z2 and mu must share a shape")
    d = z2 - mu
    if mode == "infer":
        r = torch.round(d)
    elif mode == "train":
        r = d + torch.rand(d.shape, generator=generator, dtype=d.dtype) - 0.5
    elif mode == "bypass":
        r = d
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    return r + mu, r


def _quantize_hyper(h: torch.Tensor, mode: str, support: int, generator) -> torch.Tensor:
    if mode == "infer":
        return torch.round(h).clamp(-support, support)
    if mode == "train":
        return h + torch.rand(h.shape, generator=generator, dtype=h.dtype) - 0.5
    return h


class CanfModel(nn.Module):
    """Conditional ANF codec for one signal type (frames or stacked flows).

    ``unconditional=True`` gives the intra (ANF) variant: the condition is an
    all-zero tensor and FA is bypassed. ``one_step=True`` skips the first
    autoencoding transform. ``use_fa=False`` removes FA everywhere.
    """

    def __init__(self, in_ch: int = 3, cond_ch: int | None = None, latent_ch: int = 32, hidden: int = 32,
                 hyper_hidden: int = 48, hyper_ch: int = 16, kernel: int = 3, unconditional: bool = False,
                 one_step: bool = False, use_fa: bool = True, support: int = 32):
        super().__init__()
        cond_ch = in_ch if cond_ch is None else cond_ch
        use_fa = use_fa and not unconditional
        self.in_ch = in_ch
        self.cond_ch = cond_ch
        self.latent_ch = latent_ch
        self.hyper_ch = hyper_ch
        self.unconditional = unconditional
        self.one_step = one_step
        self.use_fa = use_fa
        self.pair1 = CouplingPair(in_ch, cond_ch, latent_ch, hidden, kernel, use_fa=use_fa)
        self.pair2 = CouplingPair(in_ch, cond_ch, latent_ch, hidden, kernel, use_fa=use_fa)
        self.hyper = HyperPrior(latent_ch, cond_ch, hyper_hidden, hyper_ch, use_fa, not unconditional)
        self.prior = FactorizedModel(hyper_ch, support)

    latent_stride = 16
    hyper_stride = 64

    def config(self) -> dict:
        return dict(in_ch=self.in_ch, cond_ch=self.cond_ch, latent_ch=self.latent_ch,
                    hidden=self.pair1.analysis.convs[0].out_ch,
                    hyper_hidden=self.hyper.analysis.convs[0].out_ch, hyper_ch=self.hyper_ch,
                    kernel=self.pair1.analysis.convs[0].kernel_size, unconditional=self.unconditional,
                    one_step=self.one_step, use_fa=self.use_fa, support=self.prior.support)

    def _check(self, x: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_ch:
            raise ContractError(f"expected (N, {self.in_ch}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.hyper_stride or w % self.hyper_stride:
            raise ContractError(f"spatial dims must be multiples of {self.hyper_stride}, got {(h, w)}")
        return self._condition(cond, x.shape)

    def _condition(self, cond, shape) -> torch.Tensor:
        n, _, h, w = shape
        zeros = torch.zeros(n, self.cond_ch, h, w, dtype=self.pair1.analysis.convs[0].weight.dtype)
        if self.unconditional or cond is None:
            return zeros
        if cond.shape != zeros.shape:
            raise ContractError(f"condition must have shape {tuple(zeros.shape)}, got {tuple(cond.shape)}")
        return cond

    def _m(self, m):
        return None if not self.use_fa else m

    def latent_shape(self, n: int, h: int, w: int) -> tuple[int, int, int, int]:
        return n, self.latent_ch, h // self.latent_stride, w // self.latent_stride

    def hyper_shape(self, n: int, h: int, w: int) -> tuple[int, int, int, int]:
        return n, self.hyper_ch, h // self.hyper_stride, w // self.hyper_stride

    def encode(self, x, cond=None, m=None, mode="infer", generator=None) -> LatentBundle:
        cond = self._check(x, cond)
        m = self._m(m)
        n, _, h, w = x.shape
        z = torch.zeros(self.latent_shape(n, h, w), dtype=x.dtype)
        y = x
        if not self.one_step:
            z = analysis_step(y, z, cond, m, self.pair1)
            y = synthesis_step(y, z, m, self.pair1)
        z2 = analysis_step(y, z, cond, m, self.pair2)
        h2 = self.hyper.analysis(z2, m)
        h2_hat = _quantize_hyper(h2, mode, self.prior.support, generator)
        mu, sigma = self.hyper.params(h2_hat, None if self.unconditional else cond, m)
        z2_hat, residual = quantize(z2, mu, mode, generator)
        y2 = synthesis_step(y, z2_hat, m, self.pair2)
        return LatentBundle(z2_hat=z2_hat, h2_hat=h2_hat, mu=mu, sigma=sigma, y2=y2, z2=z2, h2=h2,
                            residual=residual)

    def decode(self, bundle: LatentBundle, cond=None, m=None, y2=None, return_ez: bool = False):
        n, _, hl, wl = bundle.z2_hat.shape
        shape = (n, self.in_ch, hl * self.latent_stride, wl * self.latent_stride)
        cond = self._condition(cond, shape)
        m = self._m(m)
        if y2 is None:
            y2 = cond if not self.unconditional else torch.zeros(shape, dtype=bundle.z2_hat.dtype)
        elif y2.shape != shape:
            raise ContractError(f"y2 lane must have shape {shape}")
        z = bundle.z2_hat
        y = y2 + self.pair2.mu_s(z, m)
        z = z - self.pair2.mu_a(y, cond, m)
        if not self.one_step:
            y = y + self.pair1.mu_s(z, m)
            z = z - self.pair1.mu_a(y, cond, m)
        return (y, z) if return_ez else y

    # -- rate and entropy coding ------------------------------------------

    def rate(self, bundle: LatentBundle, mode: str = "train") -> tuple:
        """(hyper bits, latent bits) of a bundle."""
        rh = estimate_rate(bundle.h2_hat, self.prior, mode)
        if mode == "train":
            rz = estimate_rate(bundle.z2_hat, GaussianConditional(bundle.mu, bundle.sigma), mode)
        else:
            rz = estimate_rate(bundle.residual, GaussianConditional(torch.zeros_like(bundle.mu), bundle.sigma),
                               mode)
        return rh, rz

    @torch.no_grad()
    def compress(self, bundle: LatentBundle) -> list[CodedChunk]:
        """Entropy-code ``[hyper, latent]``; the bundle must come from an ``infer`` encode."""
        h = bundle.h2_hat.round().long()
        n, c, hh, wh = h.shape
        # full support: folding tails into a narrow measured range would make the
        # actual rate drift away from the estimate
        hmin, hmax = -self.prior.support, self.prior.support
        cdf = self.prior.cdf_table(hmin, hmax)
        rows = np.broadcast_to(np.arange(c)[None, :, None, None], h.shape)
        hyper = rc_encode(h.numpy(), cdf, hmin, rows=rows)
        r = bundle.residual.round().long()
        # widen the measured range to the Gaussian bulk so the folded tail mass stays negligible
        bulk = int(np.ceil(TAIL_SIGMAS * float(bundle.sigma.max())))
        rmin, rmax = min(int(r.min()), -bulk), max(int(r.max()), bulk)
        if rmin < -16384 or rmax > 16383:
            raise ContractError("latent residual exceeds the 16-bit chunk range")
        cdfs = pmf_to_cdf(GaussianConditional(bundle.mu, bundle.sigma).pmf_table(rmin, rmax))
        latent = rc_encode(r.numpy(), cdfs, rmin)
        return [hyper, latent]

    @torch.no_grad()
    def decompress(self, chunks: list[CodedChunk], shape, cond=None, m=None) -> LatentBundle:
        """Rebuild the quantized latents from ``[hyper, latent]`` chunks for a signal of ``shape``."""
        if len(chunks) != 2:
            raise ContractError("expected hyper and latent chunks")
        n, _, h, w = shape
        cond = self._condition(cond, (n, self.in_ch, h, w))
        hs = self.hyper_shape(n, h, w)
        hyper, latent = chunks
        if hyper.symbol_min < -self.prior.support or hyper.symbol_max > self.prior.support:
            raise ContractError("hyper chunk range exceeds the factorized support")
        cdf = self.prior.cdf_table(hyper.symbol_min, hyper.symbol_max)
        rows = np.broadcast_to(np.arange(hs[1])[None, :, None, None], hs)
        dtype = self.pair1.analysis.convs[0].weight.dtype
        h_hat = torch.from_numpy(rc_decode(hyper, cdf, rows=rows).reshape(hs)).to(dtype)
        mu, sigma = self.hyper.params(h_hat, None if self.unconditional else cond, self._m(m))
        cdfs = pmf_to_cdf(GaussianConditional(mu, sigma).pmf_table(latent.symbol_min, latent.symbol_max))
        r = torch.from_numpy(rc_decode(latent, cdfs).reshape(mu.shape)).to(dtype)
        return LatentBundle(z2_hat=r + mu, h2_hat=h_hat, mu=mu, sigma=sigma, residual=r)


def canf_encode(x, cond, m, model: CanfModel, mode: str = "infer", generator=None):
    """Functional form of :meth:`CanfModel.encode`; returns ``(bundle, y2)``."""
    bundle = model.encode(x, cond, m, mode, generator)
    return bundle, bundle.y2


def canf_decode(bundle: LatentBundle, cond, m, model: CanfModel, y2=None):
    return model.decode(bundle, cond, m, y2=y2)


def strip(bundle: LatentBundle) -> LatentBundle:
    """Drop encoder-only tensors, leaving what a decoder would hold."""
    return replace(bundle, y2=None, z2=None, h2=None)
