"""scikit-learn style wrapper around the codec: ``fit`` trains, ``transform`` round-trips."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .codec import LAMBDAS, CodecConfig, CodecModels, ModelConfig, decode_sequence, encode_sequence
from .gop import trim_to_intra_periods
from .metrics import psnr
from .training import make_clips, pretrain_intra, train

__all__ = ["BCanfCodec", "check_video", "clips_from_video"]

DIM_MULTIPLE = 64


def check_video(video, *, min_frames: int = 1, multiple: int = DIM_MULTIPLE) -> torch.Tensor:
    """Validate and convert a video to a (T, 3, H, W) float32 tensor in [0, 1].

    Accepts (T, 3, H, W) float arrays/tensors in [0, 1] or (T, H, W, 3) uint8
    arrays. Spatial dims must be multiples of ``multiple``.
    """
    if isinstance(video, torch.Tensor):
        arr = video.detach()
    else:
        a = np.asarray(video)
        if a.dtype == np.uint8:
            if a.ndim != 4 or a.shape[-1] != 3:
                raise ValueError(f"uint8 video must be (T, H, W, 3), got {a.shape}")
            a = np.moveaxis(a, -1, 1).astype(np.float32) / 255.0
        elif a.dtype == object or not np.issubdtype(a.dtype, np.number):
            raise ValueError(f"unsupported video dtype {a.dtype}")
        arr = torch.from_numpy(np.ascontiguousarray(a))
    if arr.dim() != 4 or arr.shape[1] != 3:
        raise ValueError(f"video must be (T, 3, H, W), got {tuple(arr.shape)}")
    arr = arr.to(torch.float32)
    if arr.shape[0] < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {arr.shape[0]}")
    h, w = arr.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(f"frame dims must be multiples of {multiple}, got {h}x{w}")
    if not torch.isfinite(arr).all():
        raise ValueError("video contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("float video samples must lie in [0, 1]")
    return arr


def clips_from_video(video: torch.Tensor, count: int, size: int = 64, frames: int = 5,
                     rng: np.random.Generator | None = None) -> torch.Tensor:
    """Random ``frames``-long, ``size``-square crops of a (T, 3, H, W) video."""
    rng = rng or np.random.default_rng()
    t, _, h, w = video.shape
    if t < frames or h < size or w < size:
        raise ValueError("video too small for the requested clips")
    out = torch.empty(count, frames, 3, size, size)
    for i in range(count):
        s = rng.integers(0, t - frames + 1)
        y = rng.integers(0, h - size + 1)
        x = rng.integers(0, w - size + 1)
        out[i] = video[s:s + frames, :, y:y + size, x:x + size]
    return out


class BCanfCodec(BaseEstimator, TransformerMixin):
    """Learned B-frame video codec with an estimator interface.

    ``fit`` pre-trains the intra codec and then trains the B/B* codecs on 5-frame
    clips cropped from the given videos (synthetic clips when ``X`` is None).
    ``transform`` returns the decoded reconstruction, ``encode``/``decode``
    expose the bitstream, and ``score`` is the mean PSNR of the reconstruction.
    """

    def __init__(self, lambda_index=3, gop_size=16, intra_period=32, steps=2000, intra_steps=600,
                 batch_size=4, intra_batch_size=4, lr=1e-3, patch_size=64, model_size="toy", use_fa=True,
                 trim_to_intra_periods=True, workers=1, random_state=0):
        self.lambda_index = lambda_index
        self.gop_size = gop_size
        self.intra_period = intra_period
        self.steps = steps
        self.intra_steps = intra_steps
        self.batch_size = batch_size
        self.intra_batch_size = intra_batch_size
        self.lr = lr
        self.patch_size = patch_size
        self.model_size = model_size
        self.use_fa = use_fa
        self.trim_to_intra_periods = trim_to_intra_periods
        self.workers = workers
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        if self.model_size == "toy":
            return ModelConfig.toy(use_fa=self.use_fa)
        if self.model_size == "default":
            return ModelConfig(use_fa=self.use_fa)
        raise ValueError(f"model_size must be 'toy' or 'default', got {self.model_size!r}")

    def _check_params(self):
        if not 0 <= self.lambda_index < len(LAMBDAS):
            raise ValueError(f"lambda_index must be in [0, {len(LAMBDAS)})")
        CodecConfig(DIM_MULTIPLE, DIM_MULTIPLE, self.gop_size, self.intra_period, self.lambda_index)
        for name in ("steps", "intra_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.intra_batch_size < 1:
            raise ValueError("batch sizes must be positive")

    @property
    def lambda1(self) -> float:
        return LAMBDAS[self.lambda_index]

    def fit(self, X=None, y=None, log=None):
        self._check_params()
        torch.manual_seed(self.random_state)
        rng = np.random.default_rng(self.random_state)
        if X is None:
            data = make_clips(256, 5, self.patch_size, rng=rng)
        else:
            videos = X if isinstance(X, (list, tuple)) else [X]
            videos = [check_video(v, min_frames=5) for v in videos]
            per = max(1, 256 // len(videos))
            data = torch.cat([clips_from_video(v, per, self.patch_size, rng=rng) for v in videos])
        self.models_ = CodecModels(self._model_config())
        pretrain_intra(self.models_, self.intra_steps, self.lambda1, self.intra_batch_size, self.lr, data=data,
                       size=self.patch_size, seed=self.random_state,
                       log=(lambda s, m: log("intra", s, m)) if log else None)
        self.history_ = train(self.models_, self.steps, self.lambda1, self.batch_size, self.lr, data=data,
                              size=self.patch_size, seed=self.random_state,
                              log=(lambda s, m: log("inter", s, m)) if log else None)
        return self

    @classmethod
    def from_models(cls, models: CodecModels, **params) -> "BCanfCodec":
        est = cls(**params)
        est.models_ = models
        return est

    def _fitted(self) -> CodecModels:
        if not hasattr(self, "models_"):
            raise NotFittedError("BCanfCodec is not fitted; call fit() or from_models()")
        return self.models_

    def _prepare(self, X) -> torch.Tensor:
        video = check_video(X)
        if self.trim_to_intra_periods:
            video = video[:trim_to_intra_periods(video.shape[0], self.intra_period)]
        return video

    def encode(self, X, checksum: bool = False):
        self._check_params()
        models = self._fitted()
        video = self._prepare(X)
        cfg = CodecConfig(video.shape[-1], video.shape[-2], self.gop_size, self.intra_period, self.lambda_index)
        stream, _ = encode_sequence(video, models, cfg, workers=self.workers, checksum=checksum)
        return stream

    def decode(self, stream, verify: bool = False) -> torch.Tensor:
        return decode_sequence(stream, self._fitted(), workers=self.workers, verify=verify)

    def transform(self, X) -> torch.Tensor:
        return self.decode(self.encode(X))

    def score(self, X, y=None) -> float:
        """Mean per-frame 8-bit PSNR of the round-tripped video."""
        video = self._prepare(X)
        recon = self.transform(X)
        q = lambda v: torch.round(v * 255.0)
        return float(np.mean([psnr(q(a), q(b)) for a, b in zip(recon, video)]))
