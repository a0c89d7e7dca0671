"""Probability models, rate estimation and a byte-oriented range coder.

Two model families are used by the codec:

* ``FactorizedModel`` - learned per-channel pmf over integers ``[-S, S]`` for
  the hyper latent.
* ``GaussianConditional`` - per-element Gaussian with mean ``mu`` and scale
  ``sigma`` for the main latent.

Both produce 16-bit quantized CDF tables (every bin gets at least one count)
that the range coder consumes. The coder is the LZMA-style carry-propagating
design: 32-bit range, 33-bit low, one delayed byte plus a run of 0xFF bytes.
"""
from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtr
from torch import nn

from .nn import ContractError

PRECISION = 16
TOTAL = 1 << PRECISION
P_MIN = 2.0 ** -PRECISION
SIGMA_MIN = 0.11

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class DecodeError(ValueError):
    """Raised for truncated or corrupt coded payloads."""


# ---------------------------------------------------------------------------
# probability models


def gaussian_bin_prob(mu, sigma, k):
    """Gaussian mass of ``[k - 0.5, k + 0.5]``; sigma is clamped at ``SIGMA_MIN``."""
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    d = np.asarray(k, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    # evaluate on the negative side for accuracy in the upper tail
    d = -np.abs(d)
    p = ndtr((d + 0.5) / sigma) - ndtr((d - 0.5) / sigma)
    return p if np.ndim(p) else float(p)


def gaussian_pmf_table(mu, sigma, symbol_min: int, symbol_max: int) -> np.ndarray:
    """Per-element pmf rows over ``[symbol_min, symbol_max]`` with tails folded into the edge bins."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), SIGMA_MIN)
    ks = np.arange(symbol_min, symbol_max + 1, dtype=np.float64)[None, :]
    upper = ndtr((ks + 0.5 - mu) / sigma)
    lower = ndtr((ks - 0.5 - mu) / sigma)
    upper[:, -1] = 1.0
    lower[:, 0] = 0.0
    return np.clip(upper - lower, 0.0, 1.0)


def pmf_to_cdf(pmf: np.ndarray) -> np.ndarray:
    """Quantize pmf rows to integer CDFs summing to ``TOTAL`` with a floor of one count per bin."""
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    nbins = pmf.shape[1]
    if nbins < 1 or nbins > TOTAL // 2:
        raise ContractError(f"cannot build a {PRECISION}-bit table with {nbins} bins")
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    counts = np.floor(pmf * (TOTAL - nbins)).astype(np.int64) + 1
    deficit = TOTAL - counts.sum(axis=1)
    rows = np.arange(pmf.shape[0])
    counts[rows, np.argmax(pmf, axis=1)] += deficit
    cdf = np.zeros((pmf.shape[0], nbins + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cdf[:, 1:])
    return cdf


def _standard_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (0.5 ** 0.5))


class GaussianConditional:
    """Conditional Gaussian entropy model for one latent tensor."""

    def __init__(self, mu: torch.Tensor, sigma: torch.Tensor):
        if mu.shape != sigma.shape:
            raise ContractError("mu and sigma must share a shape")
        self.mu = mu
        self.sigma = sigma

    def likelihood(self, values: torch.Tensor) -> torch.Tensor:
        """Bin mass around each (possibly noisy) value; differentiable in all inputs."""
        sigma = self.sigma.clamp_min(SIGMA_MIN)
        d = -(values - self.mu).abs()
        p = _standard_cdf((d + 0.5) / sigma) - _standard_cdf((d - 0.5) / sigma)
        return p

    def pmf_table(self, symbol_min: int, symbol_max: int, centered: bool = True) -> np.ndarray:
        """Pmf rows for each element; ``centered`` models residuals ``round(z - mu)``."""
        sigma = self.sigma.detach().double().cpu().numpy()
        mu = np.zeros_like(sigma) if centered else self.mu.detach().double().cpu().numpy()
        return gaussian_pmf_table(mu, sigma, symbol_min, symbol_max)


class FactorizedModel(nn.Module):
    """Learned per-channel pmf over the integer support ``[-support, support]``.

    Non-integer (noisy) values get a likelihood by linear interpolation between
    the two neighbouring bins, which keeps the rate differentiable with
    respect to the values during training.
    """

    def __init__(self, channels: int, support: int = 32, init_scale: float = 4.0):
        super().__init__()
        self.channels = channels
        self.support = support
        ks = torch.arange(-support, support + 1, dtype=torch.float32)
        # start from a discretized Laplacian so early rates are sensible
        init = -ks.abs() / init_scale
        self.logits = nn.Parameter(init.repeat(channels, 1))

    def pmf(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=1)

    def likelihood(self, values: torch.Tensor) -> torch.Tensor:
        if values.shape[1] != self.channels:
            raise ContractError(f"expected {self.channels} channels, got {values.shape[1]}")
        s = self.support
        pmf = self.pmf()
        v = values.clamp(-s, s) + s
        # NaN must not reach the index; it still propagates through ``frac``
        lo = torch.nan_to_num(v.detach()).floor().clamp(0, 2 * s - 1)
        frac = v - lo
        lo = lo.long()
        n, c, h, w = values.shape
        ch = torch.arange(c, device=values.device).view(1, c, 1, 1).expand(n, c, h, w)
        p_lo = pmf[ch, lo]
        p_hi = pmf[ch, lo + 1]
        return (1 - frac) * p_lo + frac * p_hi

    def cdf_table(self, symbol_min: int, symbol_max: int) -> np.ndarray:
        """One CDF per channel over ``[symbol_min, symbol_max]`` (a sub-range of the support)."""
        s = self.support
        if symbol_min < -s or symbol_max > s:
            raise ContractError("symbol range exceeds the factorized support")
        pmf = self.pmf().detach().double().cpu().numpy()
        sub = pmf[:, symbol_min + s:symbol_max + s + 1].copy()
        # fold the mass outside the sub-range into its edges
        sub[:, 0] += pmf[:, :symbol_min + s].sum(axis=1)
        sub[:, -1] += pmf[:, symbol_max + s + 1:].sum(axis=1)
        return pmf_to_cdf(sub)


def estimate_rate(symbols: torch.Tensor, model, mode: str = "infer"):
    """Total bits ``sum(-log2 p)`` of ``symbols`` under ``model``.

    ``mode="train"`` evaluates the (differentiable) likelihood of noisy samples
    and returns a tensor; ``mode="infer"`` evaluates the bin mass of integer
    symbols and returns a float. Probabilities are floored at ``P_MIN``.
    """
    if symbols.numel() == 0:
        return symbols.new_zeros(()) if mode == "train" else 0.0
    if mode == "train":
        p = model.likelihood(symbols)
        return -torch.log2(p.clamp_min(P_MIN)).sum()
    if mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    with torch.no_grad():
        if isinstance(model, FactorizedModel):
            s = model.support
            idx = symbols.round().long().clamp(-s, s) + s
            pmf = model.pmf().double()
            n, c, h, w = symbols.shape
            ch = torch.arange(c).view(1, c, 1, 1).expand(n, c, h, w)
            p = pmf[ch, idx].cpu().numpy()
        else:
            p = gaussian_bin_prob(model.mu.detach().double().cpu().numpy(),
                                  model.sigma.detach().double().cpu().numpy(),
                                  symbols.detach().double().round().cpu().numpy())
        return float(-np.log2(np.maximum(p, P_MIN)).sum())


# ---------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("payload truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, cdf: list[int]) -> int:
        """Decode one symbol index given a CDF list of length nbins + 1."""
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise DecodeError("corrupt payload")
        s = bisect.bisect_right(cdf, v) - 1
        start = cdf[s]
        self.code -= r * start
        self.range = r * (cdf[s + 1] - start)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8
        return s


@dataclass
class CodedChunk:
    """Entropy-coded payload with the symbol range its CDF tables were built over."""

    symbol_min: int
    symbol_max: int
    payload: bytes = field(repr=False)

    HEADER = struct.Struct("<hhI")

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        return self.HEADER.pack(self.symbol_min, self.symbol_max, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["CodedChunk", int]:
        if offset + cls.HEADER.size > len(data):
            raise DecodeError("truncated chunk header")
        smin, smax, n = cls.HEADER.unpack_from(data, offset)
        offset += cls.HEADER.size
        if offset + n > len(data):
            raise DecodeError("truncated chunk payload")
        return cls(smin, smax, bytes(data[offset:offset + n])), offset + n


def _as_tables(cdfs, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (tables, row index per symbol); a single 1-D CDF is shared by all symbols."""
    cdfs = np.asarray(cdfs, dtype=np.int64)
    if cdfs.ndim == 1:
        return cdfs[None, :], np.zeros(n, dtype=np.int64)
    if cdfs.shape[0] != n:
        raise ContractError(f"{cdfs.shape[0]} CDF rows for {n} symbols")
    return cdfs, np.arange(n)


def rc_encode(symbols, cdfs, symbol_min: int = 0, rows=None) -> CodedChunk:
    """Range-code integer symbols; ``cdfs[row][s - symbol_min]`` is the start of symbol ``s``.

    ``rows`` optionally maps every symbol to a CDF row (e.g. its channel);
    otherwise a 2-D table must hold one row per symbol.
    """
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    tables, idx = _as_tables(cdfs, len(symbols)) if rows is None else (np.asarray(cdfs, np.int64),
                                                                       np.asarray(rows, np.int64).ravel())
    if tables.shape[1] < 2 or np.any(tables[:, -1] != TOTAL):
        raise ContractError(f"CDF rows must end at {TOTAL}")
    nbins = tables.shape[1] - 1
    symbol_max = symbol_min + nbins - 1
    k = symbols - symbol_min
    if np.any(k < 0) or np.any(k >= nbins):
        raise ContractError(f"symbol outside [{symbol_min}, {symbol_max}]")
    starts = tables[idx, k]
    freqs = tables[idx, k + 1] - starts
    if np.any(freqs <= 0):
        raise ContractError("zero-frequency symbol")
    enc = RangeEncoder()
    for start, freq in zip(starts.tolist(), freqs.tolist()):
        enc.encode(start, freq)
    return CodedChunk(symbol_min, symbol_max, enc.finish())


def rc_decode(chunk: CodedChunk, cdfs, count: int | None = None, rows=None) -> np.ndarray:
    """Inverse of :func:`rc_encode`; ``count`` defaults to the number of CDF rows."""
    if rows is not None:
        tables = np.asarray(cdfs, np.int64)
        idx = np.asarray(rows, np.int64).ravel()
        count = len(idx)
    else:
        tables = np.asarray(cdfs, dtype=np.int64)
        if tables.ndim == 1:
            if count is None:
                raise ContractError("count is required with a shared CDF")
            tables = tables[None, :]
            idx = np.zeros(count, dtype=np.int64)
        else:
            count = tables.shape[0] if count is None else count
            idx = np.arange(count)
    nbins = tables.shape[1] - 1
    if chunk.symbol_min + nbins - 1 != chunk.symbol_max:
        raise DecodeError("chunk symbol range does not match the CDF tables")
    dec = RangeDecoder(chunk.payload)
    lists = [row.tolist() for row in tables]
    out = np.empty(count, dtype=np.int64)
    for i, r in enumerate(idx.tolist()):
        out[i] = dec.decode(lists[r])
    return out + chunk.symbol_min
