"""Command-line interface: ``bcanf {plan,train,encode,decode,eval,bdrate}``.

Options can also come from a ``key = value`` file given with ``--config``;
command-line flags override file values. Exit codes are categorized:

    0  success
    2  usage / configuration error
    3  input error (missing or malformed video, CSV, data folder)
    4  bitstream error (corrupt, truncated or mismatched stream)
    5  model error (bad checkpoint or model configuration)
    6  numerical failure during training
    1  unexpected internal error
"""
from __future__ import annotations

import argparse
import csv
import io
import random
import sys
from pathlib import Path

import numpy as np
import torch

from . import gop
from .codec import LAMBDAS, CodecConfig, CodecModels, ModelConfig, decode_sequence, deserialize, encode_sequence, serialize
from .entropy import DecodeError
from .estimator import check_video, clips_from_video
from .metrics import RdCurve, aggregate, bd_rate, frame_records, records_to_csv
from .motion import dump_flow
from .nn import ContractError
from .training import pretrain_intra, train
from .video_io import FORMATS, VideoFormatError, VideoSource, read_video, write_ppm_sequence, write_raw, write_y4m

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_BITSTREAM, EXIT_MODEL, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def parse_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys use dashes or underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}", EXIT_USAGE) from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value", EXIT_USAGE)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise CliError(f"{path}:{n}: empty key", EXIT_USAGE)
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("help", "config"):
            raise CliError(f"unknown config key {key!r}", EXIT_USAGE)
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise CliError(f"config key {key!r} expects a boolean", EXIT_USAGE)
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad value for config key {key!r}: {raw!r}", EXIT_USAGE) from exc
        if action.choices is not None and value not in action.choices:
            raise CliError(f"config key {key!r} must be one of {list(action.choices)}", EXIT_USAGE)
        defaults[key] = value
    parser.set_defaults(**defaults)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# shared option groups


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with defaults for this command")
    p.add_argument("--seed", type=int, default=0, help="seed for all stochastic behavior")


def _add_gop(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gop-size", type=int, default=16)
    p.add_argument("--intra-period", type=int, default=32)
    p.add_argument("--trim-to-intra-periods", dest="trim_to_intra_periods", action="store_true", default=True,
                   help="drop trailing frames beyond the last whole intra-period (default)")
    p.add_argument("--no-trim", dest="trim_to_intra_periods", action="store_false",
                   help="plan trailing partial intra-periods with shorter GOPs")


def _add_video(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", "-i", required=True, help="video file or PPM directory")
    p.add_argument("--format", choices=FORMATS, default=None, help="input format (default: from extension)")
    p.add_argument("--width", type=int, default=None, help="frame width for raw-rgb input")
    p.add_argument("--height", type=int, default=None, help="frame height for raw-rgb input")
    p.add_argument("--frames", type=int, default=None, help="use at most this many frames")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", "-c", required=True, help="BCNP model checkpoint")
    p.add_argument("--workers", type=int, default=1, help="threads for frames of the same hierarchy level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcanf", description="Learned hierarchical B-frame video codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print the GOP plan as CSV")
    _add_common(p)
    p.add_argument("--frames", type=int, required=True)
    _add_gop(p)
    p.add_argument("--output", "-o", help="write CSV here instead of stdout")

    p = sub.add_parser("train", help="pre-train the intra codec and train the B/B* codecs")
    _add_common(p)
    p.add_argument("--lambda-index", type=int, default=3, choices=range(len(LAMBDAS)))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--intra-steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--intra-batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--model-size", choices=("toy", "default"), default="toy")
    p.add_argument("--no-fa", dest="use_fa", action="store_false", default=True,
                   help="disable frame-type adaptation")
    p.add_argument("--data", help="folder of training videos (.y4m files or PPM sub-folders); synthetic if omitted")
    p.add_argument("--init", help="start from this checkpoint instead of random weights")
    p.add_argument("--skip-intra", action="store_true", help="keep the intra codec from --init as is")
    p.add_argument("--checkpoint", "-o", required=True, help="output checkpoint path")
    p.add_argument("--progress", help="progress CSV (step, loss, D, R, F)")

    p = sub.add_parser("encode", help="encode a video to a .bcf bitstream")
    _add_common(p)
    _add_video(p)
    _add_model(p)
    _add_gop(p)
    p.add_argument("--lambda-index", type=int, default=3, choices=range(len(LAMBDAS)))
    p.add_argument("--output", "-o", required=True, help=".bcf output path")
    p.add_argument("--checksum", action="store_true", help="embed per-frame reconstruction checksums")
    p.add_argument("--dump-flows", help="directory for decoded flow maps (2-plane float32 files)")

    p = sub.add_parser("decode", help="decode a .bcf bitstream")
    _add_common(p)
    p.add_argument("--input", "-i", required=True)
    _add_model(p)
    p.add_argument("--output", "-o", required=True, help=".y4m, .rgb or a directory for PPM frames")
    p.add_argument("--verify", action="store_true", help="check embedded reconstruction checksums")

    p = sub.add_parser("eval", help="encode + decode a video and write a per-frame profile CSV")
    _add_common(p)
    _add_video(p)
    _add_model(p)
    _add_gop(p)
    p.add_argument("--lambda-index", type=int, default=3, choices=range(len(LAMBDAS)))
    p.add_argument("--output", "-o", help="profile CSV path (default: stdout)")
    p.add_argument("--bitstream", help="also write the .bcf here")

    p = sub.add_parser("bdrate", help="BD-rate of a test RD curve against an anchor")
    _add_common(p)
    p.add_argument("--anchor", required=True, help="CSV with bpp and psnr columns")
    p.add_argument("--test", required=True, help="CSV with bpp and psnr columns")
    return parser


# ---------------------------------------------------------------------------
# commands


def _out(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _load_models(path: str) -> CodecModels:
    try:
        return CodecModels.load(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {path}", EXIT_MODEL) from exc
    except (KeyError, ValueError, TypeError, RuntimeError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_MODEL) from exc


def _load_video(args) -> torch.Tensor:
    src = read_video(args.input, args.format, args.width, args.height)
    if args.frames is not None:
        src = src.head(args.frames)
    try:
        video = check_video(src.to_tensor())
    except ValueError as exc:
        raise CliError(f"{args.input}: {exc}", EXIT_INPUT) from exc
    if args.trim_to_intra_periods:
        video = video[:gop.trim_to_intra_periods(video.shape[0], args.intra_period)]
    return video


def cmd_plan(args) -> int:
    n = gop.trim_to_intra_periods(args.frames, args.intra_period) if args.trim_to_intra_periods else args.frames
    _out(gop.plan(n, args.gop_size, args.intra_period).to_csv(), args.output)
    return EXIT_OK


def _training_data(folder: str, size: int, rng: np.random.Generator) -> torch.Tensor:
    root = Path(folder)
    if not root.is_dir():
        raise CliError(f"data folder not found: {folder}", EXIT_INPUT)
    sources = sorted(root.glob("*.y4m")) + sorted(d for d in root.iterdir() if d.is_dir())
    if not sources:
        raise CliError(f"no .y4m files or PPM folders in {folder}", EXIT_INPUT)
    videos = [check_video(read_video(s).to_tensor(), min_frames=5, multiple=1) for s in sources]
    per = max(1, 256 // len(videos))
    return torch.cat([clips_from_video(v, per, size, rng=rng) for v in videos])


def cmd_train(args) -> int:
    lam = LAMBDAS[args.lambda_index]
    rng = np.random.default_rng(args.seed)
    data = _training_data(args.data, args.patch_size, rng) if args.data else None
    if args.init:
        models = _load_models(args.init)
    else:
        cfg = ModelConfig.toy(use_fa=args.use_fa) if args.model_size == "toy" else ModelConfig(use_fa=args.use_fa)
        models = CodecModels(cfg)
    log = lambda tag: (lambda s, m: print(f"{tag} step {s}: loss {m['loss']:.4f}", file=sys.stderr)
                       if s % 100 == 0 else None)
    if not args.skip_intra:
        pretrain_intra(models, args.intra_steps, lam, args.intra_batch_size, args.lr, data=data,
                       size=args.patch_size, seed=args.seed, log=log("intra"))
    train(models, args.steps, lam, args.batch_size, args.lr, data=data, size=args.patch_size, seed=args.seed,
          progress=args.progress, log=log("inter"))
    models.save(args.checkpoint)
    return EXIT_OK


def _config(args, video) -> CodecConfig:
    try:
        return CodecConfig(video.shape[-1], video.shape[-2], args.gop_size, args.intra_period, args.lambda_index,
                           args.checkpoint)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def cmd_encode(args) -> int:
    video = _load_video(args)
    models = _load_models(args.checkpoint)
    stream, _ = encode_sequence(video, models, _config(args, video), workers=args.workers, checksum=args.checksum)
    Path(args.output).write_bytes(serialize(stream))
    if args.dump_flows:
        d = Path(args.dump_flows)
        d.mkdir(parents=True, exist_ok=True)
        for f in stream.frames:
            flows = f.info.get("flows")
            if flows is not None:
                dump_flow(d / f"frame_{f.display_index:05d}_prev.f32", flows[:, :2])
                dump_flow(d / f"frame_{f.display_index:05d}_next.f32", flows[:, 2:])
    print(f"{len(stream.frames)} frames, {stream.total_bits} bits", file=sys.stderr)
    return EXIT_OK


def cmd_decode(args) -> int:
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read bitstream: {exc}", EXIT_INPUT) from exc
    stream = deserialize(data)
    models = _load_models(args.checkpoint)
    video = VideoSource.from_tensor(decode_sequence(stream, models, workers=args.workers, verify=args.verify))
    out = Path(args.output)
    if out.suffix == ".y4m":
        write_y4m(out, video)
    elif out.suffix in (".rgb", ".raw"):
        write_raw(out, video)
    else:
        write_ppm_sequence(out, video)
    return EXIT_OK


def cmd_eval(args) -> int:
    video = _load_video(args)
    models = _load_models(args.checkpoint)
    stream, _ = encode_sequence(video, models, _config(args, video), workers=args.workers)
    data = serialize(stream)
    if args.bitstream:
        Path(args.bitstream).write_bytes(data)
    recon = decode_sequence(deserialize(data), models, workers=args.workers)
    records = frame_records(stream.frames, recon, video, stream.width, stream.height)
    _out(records_to_csv(records), args.output)
    total = aggregate(records)["ALL"]
    print(f"mean psnr {total['psnr']:.3f} dB, mean bpp {total['bpp']:.4f}", file=sys.stderr)
    return EXIT_OK


def read_rd_csv(path: str) -> RdCurve:
    try:
        rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_INPUT) from exc
    try:
        return RdCurve((float(r["bpp"]), float(r["psnr"])) for r in rows)
    except KeyError as exc:
        raise CliError(f"{path}: missing column {exc}", EXIT_INPUT) from exc
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from exc


def cmd_bdrate(args) -> int:
    anchor, test = read_rd_csv(args.anchor), read_rd_csv(args.test)
    try:
        value = bd_rate(anchor, test)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    print(f"{value:.6f}")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode,
            "eval": cmd_eval, "bdrate": cmd_bdrate}


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, parse_config_file(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except CliError as exc:
        print(f"bcanf: usage error: {exc}", file=sys.stderr)
        return exc.code
    seed_everything(args.seed)
    categories = [
        (CliError, None, "error"),
        (DecodeError, EXIT_BITSTREAM, "bitstream error"),
        ((VideoFormatError, FileNotFoundError), EXIT_INPUT, "input error"),
        (FloatingPointError, EXIT_NUMERIC, "numerical error"),
        (ContractError, EXIT_INPUT, "input error"),
        (ValueError, EXIT_USAGE, "usage error"),
    ]
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit categories below
        for kinds, code, label in categories:
            if isinstance(exc, kinds):
                code = code if code is not None else exc.code
                print(f"bcanf: {label}: {exc}", file=sys.stderr)
                return code
        print(f"bcanf: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
