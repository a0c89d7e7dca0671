import random

import numpy as np
import pytest
import torch

from bcanf.codec import CodecModels, ModelConfig

TINY = ModelConfig(latent_ch=8, hidden=8, hyper_hidden=8, hyper_ch=4, predictor_hidden=4, synth_features=4)


@pytest.fixture(autouse=True)
def _seed():
    random.seed(0)
    np.random.seed(0)
    torch.manual_seed(0)


def randomize(module: torch.nn.Module, scale: float = 0.1, seed: int = 0) -> torch.nn.Module:
    """Overwrite every parameter with small random values (zero-initialized heads included)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("gamma_raw") or name.endswith("beta_raw"):
                continue
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def random_parameters(module: torch.nn.Module, seed: int = 0) -> torch.nn.Module:
    """Draw every parameter at initialization-like scale, including zero-initialized heads.

    Conv weights ~ U(-1, 1) / sqrt(fan_in), GDN beta in [0.5, 2] and gamma in [0, 0.2],
    FA scales in [0.5, 1.5] and shifts in [-0.2, 0.2].
    """
    from bcanf.canf import FaModule
    from bcanf.nn import ConvLayer, GdnLayer

    g = torch.Generator().manual_seed(seed)
    u = lambda shape, lo, hi: lo + (hi - lo) * torch.rand(shape, generator=g)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, ConvLayer):
                fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                bound = 1.0 / fan_in ** 0.5
                m.weight.copy_(u(m.weight.shape, -bound, bound))
                m.bias.copy_(u(m.bias.shape, -bound, bound))
            elif isinstance(m, GdnLayer):
                c = m.channels
                m.set_parameters(u((c,), 0.5, 2.0), u((c, c), 0.0, 0.2))
            elif isinstance(m, FaModule):
                m.gamma.copy_(u(m.gamma.shape, 0.5, 1.5))
                m.beta.copy_(u(m.beta.shape, -0.2, 0.2))
    return module


@pytest.fixture
def tiny_models():
    return randomize(CodecModels(TINY), 0.05)


def smooth_video(frames: int = 5, size: int = 64, shift: int = 1, seed: int = 0) -> torch.Tensor:
    """A smooth random texture translating ``shift`` px per frame, (T, 3, size, size)."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    big = gaussian_filter(rng.random((3, size + shift * frames + 8, size + shift * frames + 8)), (0, 2, 2))
    big = (big - big.min()) / (big.max() - big.min())
    out = np.stack([big[:, 4:4 + size, 4 + t * shift:4 + t * shift + size] for t in range(frames)])
    return torch.from_numpy(out).float()


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
