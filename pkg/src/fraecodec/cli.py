"""Command-line driver for the codec experiment lifecycle.

Subcommands: train, encode, decode, eval, sweep, synth-data, gl-decode.
Every command is deterministic given its seed; outputs are CSV/JSON-friendly
single lines with floats at 6 significant digits. Exit codes: 0 ok,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import bitstream, dsp, nn, schemes, training
from .prior import PRIOR_NAMES, PriorKind, prior_name
from .schemes import CodecModel, SchemeId, scheme_name
from .training import TrainConfig, format_float

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class CliError(RuntimeError):
    """Runtime failure with a single-line reason."""


class _Parser(argparse.ArgumentParser):
    # The interface contract reserves exit code 1 for usage errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fmt(value: float) -> str:
    return format_float(float(value))


# ---------------------------------------------------------------------------
# Input helpers

def _read_frames(path: str) -> np.ndarray:
    """Raw-domain frames from a .wav (dB spectrogram) or .spec dump."""
    if path.endswith(".wav"):
        return dsp.spectrogram(dsp.wav_read(path))
    return dsp.read_spec(path)


def _load_model(path: str) -> CodecModel:
    try:
        return CodecModel.load(path)
    except FileNotFoundError:
        raise CliError(f"model file not found: {path}")
    except nn.ParamFormatError as exc:
        raise CliError(f"bad model file {path}: {exc}")


def _parse_betas(spec: str) -> list[float]:
    parts = spec.split(":")
    if len(parts) == 1:
        return [float(parts[0])]
    if len(parts) != 3:
        raise CliError(f"bad --betas {spec!r}; expected start:stop:step")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise CliError(f"bad --betas {spec!r}; need step > 0 and stop >= start")
    count = int(round((stop - start) / step)) + 1
    return [start + i * step for i in range(count)]


def _parse_priors(spec: str) -> list[PriorKind]:
    if spec == "all":
        return [PriorKind.TIME_INVARIANT, PriorKind.COND_PREV_LATENT,
                PriorKind.COND_DECODER_STATE]
    out = []
    for name in spec.split(","):
        key = name.strip().lower()
        if key not in PRIOR_NAMES:
            raise CliError(f"unknown prior {name!r}; expected one of {sorted(PRIOR_NAMES)}")
        out.append(PRIOR_NAMES[key])
    return out


# ---------------------------------------------------------------------------
# Subcommands

def cmd_train(args) -> int:
    try:
        config = training.load_config(args.config)
    except FileNotFoundError:
        raise CliError(f"config file not found: {args.config}")
    if args.data:
        config.data_path = args.data
        if config.data_kind not in ("wav", "spec"):
            config.data_kind = "spec" if not args.data.endswith(".wav") else "wav"
    model = None
    start_epoch = 0
    if args.resume:
        model, start_epoch = training.load_checkpoint(args.resume)
    checkpoint = args.checkpoint or (args.out + ".ckpt")
    try:
        model, log = training.train(config, model=model, start_epoch=start_epoch,
                                    checkpoint_path=checkpoint)
    except training.TrainingDiverged as exc:
        exc.model.save(args.out)
        if args.log:
            training.write_log(args.log, exc.log)
        raise CliError(f"training diverged: {exc}; last checkpoint kept at {args.out}")
    model.save(args.out)
    if args.log:
        training.write_log(args.log, log)
    final = [r for r in log if r["split"] == "val"] or log
    tail = final[-1] if final else {"mel_mse": float("nan"), "bits_per_frame": 0.0}
    print(f"trained scheme={scheme_name(model.scheme)} epochs={config.epochs} "
          f"val_mel_mse={_fmt(tail['mel_mse'])} bits_per_frame={_fmt(tail['bits_per_frame'])} "
          f"model={args.out}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    utts = training.synth_dataset(args.kind, args.length, args.seed,
                                  utterances=args.utterances,
                                  channels=args.channels, rho=args.rho)
    os.makedirs(args.out, exist_ok=True)
    for i, utt in enumerate(utts):
        dsp.write_spec(os.path.join(args.out, f"utt{i:04d}.spec"), utt)
    print(f"wrote {len(utts)} utterances of {args.length} frames x "
          f"{args.channels} channels to {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    frames = _read_frames(args.infile)
    if frames.shape[0] < 1:
        raise CliError(f"no frames in {args.infile}")
    if frames.shape[1] != model.frame_dim:
        raise CliError(f"input has {frames.shape[1]} bins but the model expects "
                       f"{model.frame_dim}")
    latents, _ = training.code_utterance(model, frames)
    mode = bitstream.MODE_FIXED if args.mode == "fixed" else bitstream.MODE_ARITH
    data, stats = bitstream.encode_latents(model, latents, mode)
    with open(args.out, "wb") as fh:
        fh.write(data)
    frames_n = latents.shape[0]
    bits = (stats.bit_count if stats is not None
            else bitstream.fixed_stream_bits(frames_n, model.bottleneck, model.levels))
    seconds = frames_n / 100.0
    kbps = bits / seconds / 1000.0 if seconds > 0 else 0.0
    print(f"encoded frames={frames_n} bits={bits} seconds={_fmt(seconds)} "
          f"kbps={_fmt(kbps)} mode={args.mode} out={args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    with open(args.infile, "rb") as fh:
        data = fh.read()
    header, latents = bitstream.decode_latents(model, data)
    dec_state = schemes.initial_state(model)
    recon = np.empty((header.frame_count, model.frame_dim))
    for t in range(header.frame_count):
        x_hat, dec_state = schemes.decode_step(model, dec_state, latents[t])
        recon[t] = x_hat.data[0]
    recon = model.denormalize(recon)
    dsp.write_spec(args.out, recon)
    outputs = [args.out]
    if args.wav:
        if model.frame_dim != dsp.N_BINS:
            raise CliError(f"waveform synthesis needs {dsp.N_BINS}-bin spectrograms, "
                           f"model has {model.frame_dim}")
        samples = dsp.griffin_lim(recon, iters=args.gl_iters, seed=args.seed)
        dsp.wav_write(args.wav, samples)
        outputs.append(args.wav)
    seconds = header.frame_count / 100.0
    print(f"decoded frames={header.frame_count} seconds={_fmt(seconds)} "
          f"mode={'fixed' if header.mode == bitstream.MODE_FIXED else 'arith'} "
          f"out={','.join(outputs)}")
    return EXIT_OK


EVAL_COLUMNS = ("scheme", "model", "mel_mse", "spectral_snr",
                "bits_per_frame", "bitrate_bps")


def cmd_eval(args) -> int:
    config = TrainConfig(data_kind="spec", data_path=args.data)
    if args.data.endswith(".wav") or _is_wav_dir(args.data):
        config.data_kind = "wav"
    utts = training.load_dataset(config)
    lines = [",".join(EVAL_COLUMNS)]
    for path in args.model:
        model = _load_model(path)
        metrics = training.evaluate(model, utts)
        lines.append(",".join([
            scheme_name(model.scheme), os.path.basename(path),
            _fmt(metrics["mel_mse"]), _fmt(metrics["spectral_snr"]),
            _fmt(metrics["bits_per_frame"]), _fmt(metrics["bitrate_bps"]),
        ]))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def _is_wav_dir(path: str) -> bool:
    return os.path.isdir(path) and any(n.endswith(".wav") for n in os.listdir(path))


SWEEP_COLUMNS = ("scheme", "prior", "beta", "seed", "bitrate_bps",
                 "mel_mse", "bits_per_frame")


def sweep_grid(betas: list[float], priors: list[PriorKind],
               baseline_dims: list[int]) -> list[dict]:
    """The (prior, beta) grid plus uniform fixed-rate baselines, in the
    deterministic order results are reported."""
    cells = [{"prior": prior, "beta": beta, "baseline_dim": None}
             for prior in priors for beta in betas]
    cells.extend({"prior": PriorKind.UNIFORM, "beta": 0.0, "baseline_dim": dim}
                 for dim in baseline_dims)
    return cells


def cmd_sweep(args) -> int:
    config = training.load_config(args.config)
    betas = _parse_betas(args.betas)
    priors = _parse_priors(args.priors)
    baseline_dims = ([int(d) for d in args.baseline_dims.split(",") if d]
                     if args.baseline_dims else [])
    cells = sweep_grid(betas, priors, baseline_dims)
    dataset = training.load_dataset(config)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        fh.flush()
        for cell in cells:
            cell_config = dataclasses.replace(config, prior=cell["prior"],
                                              beta=cell["beta"])
            if cell["baseline_dim"] is not None:
                cell_config.bottleneck = cell["baseline_dim"]
            model, _ = training.train(cell_config, dataset)
            _, val = training.split_dataset(dataset, cell_config.val_fraction,
                                            cell_config.seed)
            metrics = training.evaluate(model, val, frame_rate=cell_config.frame_rate)
            fh.write(",".join([
                scheme_name(model.scheme), prior_name(cell["prior"]),
                _fmt(cell["beta"]), str(cell_config.seed),
                _fmt(metrics["bitrate_bps"]), _fmt(metrics["mel_mse"]),
                _fmt(metrics["bits_per_frame"]),
            ]) + "\n")
            fh.flush()  # partial results survive a failing later cell
    print(f"sweep wrote {len(cells)} rows to {args.out}")
    return EXIT_OK


def cmd_gl_decode(args) -> int:
    frames = dsp.read_spec(args.infile)
    if frames.shape[1] != dsp.N_BINS:
        raise CliError(f"waveform synthesis needs {dsp.N_BINS}-bin spectrograms, "
                       f"got {frames.shape[1]}")
    samples = dsp.griffin_lim(frames, iters=args.iters, seed=args.seed)
    dsp.wav_write(args.out, samples)
    print(f"synthesized {samples.shape[0]} samples ({_fmt(samples.shape[0] / dsp.SAMPLE_RATE)} s) "
          f"to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly

def build_parser() -> _Parser:
    parser = _Parser(prog="fraecodec",
                     description="Recurrent autoencoder codec for frame sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="override the config's data path")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--log", default=None, help="training log CSV")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default <out>.ckpt)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synth-data", help="write a synthetic dataset as .spec files")
    p.add_argument("--kind", choices=("ar1", "noisy_sines"), default="ar1")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, default=32)
    p.add_argument("--length", type=int, default=240)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--rho", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("encode", help="encode a wav/spec file to a latent bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("fixed", "arith"), default="fixed")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="decode a latent bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True, help="reconstructed .spec dump")
    p.add_argument("--wav", default=None, help="also synthesize a waveform here")
    p.add_argument("--gl-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="closed-loop metrics for one or more models")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="rate-distortion grid over priors and betas")
    p.add_argument("--config", required=True)
    p.add_argument("--betas", default="0.001:0.007:0.001")
    p.add_argument("--priors", default="all")
    p.add_argument("--baseline-dims", default="8,16,32,36")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gl-decode", help="waveform from a spectrogram dump")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gl_decode)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, training.ConfigError, training.TrainingDiverged,
            bitstream.BitstreamError, dsp.DspError, dsp.WavFormatError,
            nn.ParamFormatError, nn.OptimizerError, schemes.StateError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
