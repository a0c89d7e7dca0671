"""End-to-end acceptance checks; each test records one PASS/FAIL line for the terminal summary.

The trained-model checks (7, 8, 9 and the codec runs of 1, 2, 10) share toy models
trained once per session through the estimator API.
"""
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from bcanf.canf import CanfModel, FrameType
from bcanf.codec import (
    CodecConfig,
    decode_sequence,
    deserialize,
    encode_bstar_frame,
    encode_i_frame,
    encode_sequence,
    serialize,
)
from bcanf.estimator import BCanfCodec
from bcanf.gop import plan, trim_to_intra_periods
from bcanf.metrics import RdCurve, aggregate, bd_rate, frame_records
from bcanf.motion import estimate_flow
from bcanf.synthesis import SynthNet, synthesize
from bcanf.training import FrameTerms, LossWeights, make_clips, rd_loss

from conftest import random_parameters, record

pytestmark = pytest.mark.slow

TRAIN = dict(steps=2000, intra_steps=600, batch_size=1, intra_batch_size=4, lr=1e-3, model_size="toy",
             random_state=0)
FA_LAMBDA_INDEX = 0
HELD_OUT_SEED = 90210
TRAINING_LIKE_SEED = 4242


class Trained:
    """Lazily trained toy models, keyed by (lambda_index, use_fa), with wall-clock training times."""

    def __init__(self):
        self.models, self.seconds = {}, {}

    def get(self, lambda_index: int, use_fa: bool = True) -> BCanfCodec:
        key = (lambda_index, use_fa)
        if key not in self.models:
            t = time.perf_counter()
            est = BCanfCodec(lambda_index=lambda_index, use_fa=use_fa, **TRAIN).fit()
            self.seconds[key] = time.perf_counter() - t
            self.models[key] = est
        return self.models[key]


@pytest.fixture(scope="session")
def trained():
    return Trained()


@pytest.fixture(scope="session")
def sequence33():
    return make_clips(1, frames=33, size=64, seed=HELD_OUT_SEED + 1)[0]


@pytest.fixture(scope="session")
def coded33(trained, sequence33):
    models = trained.get(3).models_
    t = time.perf_counter()
    stream, recon = encode_sequence(sequence33, models, CodecConfig(64, 64, 16, 32), checksum=True)
    data = serialize(stream)
    decoded = decode_sequence(deserialize(data), models, verify=True)
    return stream, recon, decoded, data, time.perf_counter() - t


def test_1_bit_exact_pipeline(coded33):
    stream, recon, decoded, _, seconds = coded33
    exact = [torch.equal(decoded[i], recon[i][0]) for i in range(33)]
    ok = all(exact) and len(stream.frames) == 33 and seconds < 300
    record(1, ok, f"{sum(exact)}/33 frames bit-identical, encode+decode {seconds:.1f} s (< 300 s)")
    assert all(exact)
    assert seconds < 300


def test_2_rate_accuracy(coded33):
    stream = coded33[0]
    worst, count, violations = 0.0, 0, 0
    for f in stream.frames:
        for chunk, est in zip(f.chunks, f.info["estimated_bits"]):
            slack = abs(chunk.bits - est) - (0.01 * est + 256)
            worst = max(worst, slack)
            violations += slack > 0
            count += 1
    record(2, violations == 0, f"{count} chunks, {violations} outside 1% + 256 bits (worst margin {worst:+.1f})")
    assert violations == 0


def test_3_flow_invertibility():
    kinds = [dict(in_ch=3, cond_ch=None, unconditional=True), dict(in_ch=3, cond_ch=3), dict(in_ch=4, cond_ch=4),
             dict(in_ch=3, cond_ch=3, one_step=True)]
    frame_types = [FrameType.BSTAR, FrameType.REF_B, FrameType.NONREF_B]
    worst = 0.0
    g = torch.Generator().manual_seed(3)
    for draw in range(100):
        kind = dict(kinds[draw % len(kinds)])
        in_ch, cond_ch = kind.pop("in_ch"), kind.pop("cond_ch")
        model = random_parameters(CanfModel(in_ch, cond_ch, latent_ch=16, hidden=16, hyper_hidden=24, hyper_ch=8,
                                            **kind), seed=draw)
        x = torch.rand(1, in_ch, 64, 64, generator=g) * (1 if in_ch == 3 else 8) - (0 if in_ch == 3 else 4)
        cond = None if kind.get("unconditional") else torch.rand(1, in_ch, 64, 64, generator=g)
        m = frame_types[draw % 3]
        with torch.no_grad():
            bundle = model.encode(x, cond, m, mode="bypass")
            x_hat = model.decode(bundle, cond, m, y2=bundle.y2)
        worst = max(worst, (x_hat - x).abs().max().item())
    record(3, worst <= 1e-4, f"100 draws, max |x - decode(encode(x))| = {worst:.2e} (<= 1e-4)")
    assert worst <= 1e-4


def test_4_gradient_fidelity():
    canf = random_parameters(CanfModel(3, 3, latent_ch=1, hidden=1, hyper_hidden=1, hyper_ch=1, kernel=1), 1).double()
    synth = random_parameters(SynthNet(3, 1), seed=2).double()
    named = [(f"inter.{n}", p) for n, p in canf.named_parameters()] + \
            [(f"synth.{n}", p) for n, p in synth.named_parameters()]
    n_params = sum(p.numel() for _, p in named)
    clip = make_clips(1, 5, 64, seed=3)[0]
    plan5 = [(FrameType.BSTAR, 4, 0, 0), (FrameType.REF_B, 2, 0, 4), (FrameType.NONREF_B, 1, 0, 2)]
    flows = {x: (estimate_flow(clip[x][None], clip[a][None]).double(), estimate_flow(clip[x][None], clip[b][None])
                 .double()) for _, x, a, b in plan5}
    clip = clip.double()
    weights = LossWeights(64.0)

    def loss():
        gen = torch.Generator().manual_seed(0)
        terms = []
        for ftype, x, a, b in plan5:
            xc = synthesize(clip[a][None], clip[b][None], *flows[x], synth)
            bundle = canf.encode(clip[x][None], xc, ftype, "train", gen)
            recon = canf.decode(bundle, xc, ftype)
            rate = sum(canf.rate(bundle, "train")) / (64 * 64)
            terms.append(FrameTerms(ftype, torch.mean((recon - clip[x][None]) ** 2), rate,
                                    torch.mean((bundle.y2 - xc) ** 2)))
        return rd_loss(terms, weights)

    loss().backward()
    h = 1e-6
    analytic, numeric = [], []
    with torch.no_grad():
        for _, p in named:
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
            analytic.append(p.grad.view(-1))
    a, n = torch.cat(analytic), torch.tensor(numeric, dtype=torch.float64)
    rel = ((a - n).norm() / n.norm()).item()
    entry_ok = bool(torch.all((a - n).abs() <= 1e-3 * n.abs() + 1e-6))
    ok = n_params <= 1000 and rel <= 1e-3 and entry_ok
    record(4, ok, f"{n_params} params, float64, relative gradient error {rel:.2e} (<= 1e-3), "
                  f"max entry error {(a - n).abs().max().item():.1e}")
    assert n_params <= 1000
    assert rel <= 1e-3
    assert entry_ok


def test_5_gop_golden_plan():
    p = plan(33, 16, 32)
    types = {f.display_index: f.frame_type for f in p}
    expected = {i: FrameType.REF_B if i % 2 == 0 else FrameType.NONREF_B for i in range(33)}
    expected.update({0: FrameType.I, 32: FrameType.I, 16: FrameType.BSTAR})
    count_rule = trim_to_intra_periods(600, 32)
    ok = types == expected and count_rule == 577
    record(5, ok, f"plan(33, 16, 32) {'matches' if types == expected else 'differs from'} the golden types; "
                  f"600 frames -> {count_rule}")
    assert types == expected
    assert count_rule == 577


def test_6_bd_rate_oracle():
    anchor = RdCurve([(0.05, 28.0), (0.1, 31.0), (0.2, 34.0), (0.4, 36.5), (0.8, 39.0)])
    same = bd_rate(anchor, anchor)
    up = bd_rate(anchor, anchor.scaled(1.10))
    down = bd_rate(anchor, anchor.scaled(0.5))
    ok = abs(same) < 5e-4 and abs(up - 10.0) <= 1e-6 and abs(down + 50.0) <= 1e-6
    record(6, ok, f"identical {same:.3f}%, x1.10 {up:+.9f}%, x0.5 {down:+.9f}%")
    assert round(same, 3) == 0
    assert up == pytest.approx(10.0, abs=1e-6)
    assert down == pytest.approx(-50.0, abs=1e-6)


def _held_out_quality(est: BCanfCodec) -> tuple[float, float]:
    clip = make_clips(1, frames=9, size=64, seed=HELD_OUT_SEED)[0]
    stream, recon = encode_sequence(clip, est.models_, CodecConfig(64, 64, 4, 8))
    video = torch.cat([recon[i] for i in range(9)])
    total = aggregate(frame_records(stream.frames, video, clip, 64, 64))["ALL"]
    return total["psnr"], total["bpp"]


def test_7_rd_ordering(trained):
    low, high = trained.get(0), trained.get(3)
    minutes = (trained.seconds[(0, True)] + trained.seconds[(3, True)]) / 60
    p_low, r_low = _held_out_quality(low)
    p_high, r_high = _held_out_quality(high)
    ok = p_high > p_low and r_high > r_low and minutes < 30
    record(7, ok, f"lambda 128: {p_low:.2f} dB @ {r_low:.4f} bpp; lambda 2048: {p_high:.2f} dB @ {r_high:.4f} bpp; "
                  f"training {minutes:.1f} min (< 30)")
    assert p_high > p_low
    assert r_high > r_low
    assert minutes < 30


def _per_type(est: BCanfCodec, clips) -> dict[str, tuple[float, float]]:
    bits, quality = {}, {}
    for clip in clips:
        stream, recon = encode_sequence(clip, est.models_, CodecConfig(64, 64, 4, 8))
        video = torch.cat([recon[i] for i in range(clip.shape[0])])
        for r in frame_records(stream.frames, video, clip, 64, 64):
            bits.setdefault(r.frame_type, []).append(r.bits)
            quality.setdefault(r.frame_type, []).append(r.psnr)
    return {k: (float(np.mean(bits[k])), float(np.mean(quality[k]))) for k in bits}


def test_8_frame_type_adaptation(trained):
    clips = make_clips(16, frames=9, size=64, seed=TRAINING_LIKE_SEED)
    on = _per_type(trained.get(FA_LAMBDA_INDEX, True), clips)
    tied = _per_type(trained.get(FA_LAMBDA_INDEX, False), clips)
    gap_on = on["REF_B"][1] - on["NONREF_B"][1]
    gap_tied = tied["REF_B"][1] - tied["NONREF_B"][1]
    psnr_ok = on["REF_B"][1] >= on["NONREF_B"][1]
    bits_ok = on["NONREF_B"][0] <= on["REF_B"][0]
    record(8, psnr_ok and bits_ok and gap_on > gap_tied,
           f"FA on: REF_B {on['REF_B'][1]:.2f} dB / {on['REF_B'][0]:.0f} bits, NONREF_B {on['NONREF_B'][1]:.2f} dB / "
           f"{on['NONREF_B'][0]:.0f} bits; gap on {gap_on:+.3f} dB vs tied {gap_tied:+.3f} dB")
    assert psnr_ok
    assert bits_ok
    assert gap_on > gap_tied


def test_9_bstar_hypotheses(trained):
    models = trained.get(3).models_
    clips = make_clips(8, frames=5, size=64, seed=HELD_OUT_SEED + 2)
    cosines, diffs, lossless_equal = [], [], True
    for clip in clips:
        stream, _ = encode_sequence(clip, models, CodecConfig(64, 64, 4, 8))
        bstar = next(f for f in stream.frames if f.frame_type is FrameType.BSTAR)
        h1, h2 = bstar.info["h1"], bstar.info["h2"]
        cosines.append(F.cosine_similarity(h1.flatten(), h2.flatten(), dim=0).item())
        diffs.append((h1 - h2).abs().mean().item())
        ref = encode_i_frame(clip[0], models)[1]
        exact, _ = encode_bstar_frame(clip[4], ref, models, display_index=4, lossless_motion=True)
        lossless_equal &= torch.equal(exact.info["h1"], exact.info["h2"])
    ok = min(diffs) > 0 and min(cosines) > 0.9 and lossless_equal
    record(9, ok, f"lossy: mean |h1 - h2| min {min(diffs):.3f} (> 0), cosine min {min(cosines):.3f} (> 0.9); "
                  f"lossless hook equal: {lossless_equal}")
    assert min(diffs) > 0
    assert min(cosines) > 0.9
    assert lossless_equal


def test_10_parallel_determinism(trained, sequence33, coded33):
    models = trained.get(3).models_
    torch.manual_seed(0)
    serial = serialize(encode_sequence(sequence33, models, CodecConfig(64, 64, 16, 32), workers=1)[0])
    torch.manual_seed(0)
    parallel = serialize(encode_sequence(sequence33, models, CodecConfig(64, 64, 16, 32), workers=4)[0])
    ok = serial == parallel
    record(10, ok, f"serial {len(serial)} bytes, 4 workers {len(parallel)} bytes, identical: {ok}")
    assert serial == parallel
