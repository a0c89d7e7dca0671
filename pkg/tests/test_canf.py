import numpy as np
import pytest
import torch

from bcanf.canf import (
    SIGMA_MIN,
    CanfModel,
    CouplingPair,
    FaModule,
    FrameType,
    analysis_step,
    canf_decode,
    canf_encode,
    fa_apply,
    one_hot,
    quantize,
    strip,
    synthesis_step,
)
from bcanf.nn import ContractError, ParamStore, backward

from conftest import random_parameters, randomize

SMALL = dict(latent_ch=6, hidden=6, hyper_hidden=6, hyper_ch=4)


class TestFrameType:
    def test_one_hot(self):
        assert one_hot(FrameType.REF_B).tolist() == [1, 0, 0]
        assert one_hot(FrameType.BSTAR).tolist() == [0, 0, 1]
        with pytest.raises(ContractError):
            one_hot(FrameType.I)


class TestFa:
    def test_identity_rows(self):
        fa = FaModule(4)
        x = torch.randn(2, 4, 3, 3)
        assert torch.equal(fa_apply(x, FrameType.REF_B, fa), x)

    def test_selection_transparency(self):
        fa = FaModule(3)
        with torch.no_grad():
            fa.gamma[0] = fa.gamma[1] = torch.tensor([2.0, 3.0, 4.0])
            fa.beta[0] = fa.beta[1] = torch.tensor([1.0, 0.0, -1.0])
        x = torch.randn(1, 3, 2, 2)
        assert torch.equal(fa_apply(x, 0, fa), fa_apply(x, 1, fa))

    def test_hand_value(self):
        fa = FaModule(2)
        with torch.no_grad():
            fa.gamma[2] = torch.tensor([2.0, 0.5])
            fa.beta[2] = torch.tensor([-1.0, 1.0])
        x = torch.tensor([1.0, 2.0]).view(1, 2, 1, 1)
        out = fa_apply(x, one_hot(FrameType.BSTAR), fa).flatten().tolist()
        assert out == [1.0, 2.0]

    def test_shape_and_code_checks(self):
        fa = FaModule(2)
        with pytest.raises(ContractError):
            fa_apply(torch.zeros(1, 3, 2, 2), 0, fa)
        with pytest.raises(ContractError):
            fa_apply(torch.zeros(1, 2, 2, 2), torch.tensor([1.0, 1.0, 0.0]), fa)
        with pytest.raises(ContractError):
            fa_apply(torch.zeros(1, 2, 2, 2), 3, fa)


class TestCoupling:
    def setup_method(self):
        self.pair = randomize(CouplingPair(3, 3, 6, 6), 0.1, seed=1)
        self.x = torch.rand(1, 3, 64, 64)
        self.c = torch.rand(1, 3, 64, 64)
        self.z = torch.randn(1, 6, 4, 4)

    def test_zero_analysis_is_identity(self):
        pair = CouplingPair(3, 3, 6, 6)
        pair.analysis.last.zero_()
        assert torch.equal(analysis_step(self.x, self.z, self.c, FrameType.REF_B, pair), self.z)

    def test_analysis_from_zero(self):
        m = FrameType.NONREF_B
        z1 = analysis_step(self.x, torch.zeros_like(self.z), self.c, m, self.pair)
        assert torch.equal(z1, self.pair.mu_a(self.x, self.c, m))

    def test_analysis_inverse(self):
        m = FrameType.REF_B
        z1 = analysis_step(self.x, self.z, self.c, m, self.pair)
        back = z1 - self.pair.mu_a(self.x, self.c, m)
        assert torch.max(torch.abs(back - self.z)) <= 1e-6

    def test_zero_synthesis_is_identity(self):
        pair = CouplingPair(3, 3, 6, 6)  # synthesis head starts at zero
        assert torch.equal(synthesis_step(self.x, self.z, FrameType.REF_B, pair), self.x)

    def test_synthesis_inverse_and_cancellation(self):
        m = FrameType.BSTAR
        y = synthesis_step(self.x, self.z, m, self.pair)
        assert torch.max(torch.abs(y + self.pair.mu_s(self.z, m) - self.x)) <= 1e-6
        target = self.pair.mu_s(self.z, m)
        assert torch.count_nonzero(synthesis_step(target, self.z, m, self.pair)) == 0

    def test_shape_errors(self):
        with pytest.raises(ContractError):
            analysis_step(self.x, torch.zeros(1, 6, 8, 8), self.c, 0, self.pair)
        with pytest.raises(ContractError):
            analysis_step(self.x, self.z, self.c[..., :32], 0, self.pair)
        with pytest.raises(ContractError):
            synthesis_step(self.x[..., :32, :32], self.z, 0, self.pair)


class TestQuantize:
    def test_cases(self):
        mu = torch.tensor([0.3, -1.7, 2.2])
        for offset, expect in ((0.0, 0.0), (0.4, 0.0), (0.6, 1.0)):
            z_hat, r = quantize(mu + offset, mu)
            assert torch.all(r == expect)
            assert torch.allclose(z_hat, mu + expect)

    def test_train_noise_bounds(self):
        mu = torch.zeros(10000)
        g = torch.Generator().manual_seed(0)
        z_hat, r = quantize(mu + 0.25, mu, "train", g)
        d = r - 0.25
        assert d.min() >= -0.5 and d.max() <= 0.5
        assert abs(d.mean().item()) < 0.02


class TestCanf:
    def test_zero_init_unconditional(self):
        model = CanfModel(3, unconditional=True, **SMALL)
        for pair in (model.pair1, model.pair2):
            pair.analysis.last.zero_()
        with torch.no_grad():
            model.hyper.analysis.last.zero_()
        x = torch.rand(1, 3, 64, 64)
        bundle, y2 = canf_encode(x, None, None, model)
        assert torch.count_nonzero(bundle.z2_hat) == 0
        assert torch.equal(y2, x)

    def test_zero_init_decode_returns_condition(self):
        model = CanfModel(3, 3, **SMALL)
        x, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        bundle, _ = canf_encode(x, c, FrameType.REF_B, model)
        assert torch.equal(canf_decode(strip(bundle), c, FrameType.REF_B, model), c)

    @pytest.mark.parametrize("kind", ["conditional", "unconditional", "one_step"])
    def test_invertible_without_quantization(self, kind):
        opts = dict(unconditional=kind == "unconditional", one_step=kind == "one_step")
        model = random_parameters(CanfModel(3, 3, **SMALL, **opts), seed=2)
        x, c = torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)
        m = FrameType.NONREF_B
        bundle = model.encode(x, c, m, mode="bypass")
        x_hat = model.decode(bundle, c, m, y2=bundle.y2)
        assert torch.max(torch.abs(x_hat - x)) <= 1e-4

    def test_train_infer_diverge_only_at_quantization(self):
        model = randomize(CanfModel(3, 3, **SMALL), 0.1, seed=3)
        x, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        a = model.encode(x, c, 0, "infer")
        b = model.encode(x, c, 0, "train", torch.Generator().manual_seed(0))
        assert torch.equal(a.z2, b.z2) and torch.equal(a.h2, b.h2)
        assert not torch.equal(a.h2_hat, b.h2_hat)

    def test_encode_deterministic(self):
        model = randomize(CanfModel(3, 3, **SMALL), 0.1, seed=4)
        x, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        a, b = model.encode(x, c, 1), model.encode(x, c, 1)
        for f in ("z2_hat", "h2_hat", "mu", "sigma", "y2"):
            assert torch.equal(getattr(a, f), getattr(b, f))

    def test_encoder_decoder_reconstructions_identical(self):
        model = randomize(CanfModel(3, 3, **SMALL), 0.1, seed=5)
        x, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        bundle = model.encode(x, c, 2)
        enc_side = model.decode(strip(bundle), c, 2)
        rebuilt = model.decompress(model.compress(bundle), x.shape, c, 2)
        assert torch.equal(rebuilt.z2_hat, bundle.z2_hat)
        assert torch.equal(model.decode(rebuilt, c, 2), enc_side)

    def test_sigma_floor(self):
        model = random_parameters(CanfModel(3, 3, **SMALL), seed=6)
        bundle = model.encode(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64), 0)
        assert bundle.sigma.min() >= SIGMA_MIN

    def test_lane_shapes(self):
        model = CanfModel(4, 4, **SMALL)
        bundle = model.encode(torch.rand(1, 4, 128, 64), torch.rand(1, 4, 128, 64), 0)
        assert bundle.z2_hat.shape == (1, 6, 8, 4)
        assert bundle.h2_hat.shape == (1, 4, 2, 1)

    def test_fa_identity_rows_make_type_irrelevant(self):
        model = randomize(CanfModel(3, 3, **SMALL), 0.1, seed=7)
        for mod in model.modules():
            if isinstance(mod, FaModule):
                with torch.no_grad():
                    mod.gamma.fill_(1.0)
                    mod.beta.zero_()
        x, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        outs = [model.encode(x, c, ft) for ft in (FrameType.REF_B, FrameType.NONREF_B, FrameType.BSTAR)]
        for o in outs[1:]:
            assert torch.equal(o.z2_hat, outs[0].z2_hat) and torch.equal(o.y2, outs[0].y2)

    def test_fa_rows_change_output(self):
        model = randomize(CanfModel(3, 3, **SMALL), 0.1, seed=8)
        x, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        a = model.encode(x, c, FrameType.REF_B, "bypass")
        b = model.encode(x, c, FrameType.BSTAR, "bypass")
        assert not torch.equal(a.z2, b.z2)

    def test_unconditional_bypasses_fa_and_condition(self):
        model = CanfModel(3, unconditional=True, **SMALL)
        assert not any(isinstance(m, FaModule) for m in model.modules())
        x = torch.rand(1, 3, 64, 64)
        a = model.encode(x, torch.rand(1, 3, 64, 64))
        b = model.encode(x, None)
        assert torch.equal(a.z2_hat, b.z2_hat)

    def test_one_step_first_pair_has_no_gradient(self):
        model = randomize(CanfModel(3, 3, one_step=True, **SMALL), 0.1)
        store = ParamStore.from_modules(canf=model)
        x, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        b = model.encode(x, c, 0, "train", torch.Generator().manual_seed(0))
        rh, rz = model.rate(b, "train")
        backward(rh + rz + (b.y2 ** 2).sum())
        grads = store.grads()
        for name, g in grads.items():
            if name.startswith("canf.pair1."):
                assert torch.count_nonzero(g) == 0, name
        assert any(torch.count_nonzero(g) > 0 for n, g in grads.items() if n.startswith("canf.pair2."))

    def test_dim_checks(self):
        model = CanfModel(3, 3, **SMALL)
        with pytest.raises(ContractError):
            model.encode(torch.rand(1, 3, 48, 64), torch.rand(1, 3, 48, 64), 0)
        with pytest.raises(ContractError):
            model.encode(torch.rand(1, 4, 64, 64), torch.rand(1, 3, 64, 64), 0)
        with pytest.raises(ContractError):
            model.encode(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 128, 64), 0)

    def test_infer_rate_matches_coded_bits(self):
        model = randomize(CanfModel(3, 3, **SMALL), 0.1, seed=9)
        bundle = model.encode(torch.rand(1, 3, 128, 128), torch.rand(1, 3, 128, 128), 0)
        est = model.rate(bundle, "infer")
        chunks = model.compress(bundle)
        for e, c in zip(est, chunks):
            assert abs(c.bits - e) <= 0.01 * e + 256
