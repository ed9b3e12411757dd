"""Rate-distortion training with truncated BPTT, dataset handling, and the
scheme-comparison evaluation harness.

The objective per window is  distortion + beta * rate_nats, both averaged
per frame; beta = 0 recovers plain fixed-rate autoencoder training.
Recurrent state carries across truncation boundaries within an utterance
(values only, no gradient flow).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from . import dsp, nn, schemes
from .autodiff import Tape, Tensor
from .prior import PriorKind, PriorModel, prior_name, PRIOR_NAMES
from .schemes import CodecModel, SchemeId, scheme_from_name, scheme_name


class ConfigError(ValueError):
    """Bad training configuration (with a line number when parsed from file)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite-epoch checkpoint."""

    def __init__(self, message: str, model: CodecModel, log: list[dict]):
        super().__init__(message)
        self.model = model
        self.log = log


@dataclass
class TrainConfig:
    scheme: SchemeId = SchemeId.FRAE
    bottleneck: int = 8
    levels: int = 4
    beta: float = 0.0
    prior: PriorKind = PriorKind.UNIFORM
    learning_rate: float = 1e-3
    lr_decay: float = 1.0   # per-epoch multiplicative decay
    batch_size: int = 8
    tbptt: int = 32
    epochs: int = 20
    seed: int = 0
    hidden: int = 128
    prior_hidden: int = 64
    clip_norm: float = 5.0
    frame_rate: float = 100.0
    val_fraction: float = 0.1
    mel_weighted: bool = False
    data_kind: str = "ar1"   # ar1 | noisy_sines | wav | spec
    data_path: str = ""
    utterances: int = 32
    utterance_len: int = 240
    channels: int = 3
    rho: float = 0.95

    def validate(self) -> None:
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.beta < 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.tbptt < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("tbptt and batch_size must be >= 1, epochs >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.data_kind not in ("ar1", "noisy_sines", "wav", "spec"):
            raise ConfigError(f"unknown data_kind {self.data_kind!r}")
        if self.data_kind in ("wav", "spec") and not self.data_path:
            raise ConfigError(f"data_kind {self.data_kind!r} needs data_path")


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _coerce(name: str, kind, raw: str, line_no: int):
    try:
        if kind is SchemeId:
            return scheme_from_name(raw)
        if kind is PriorKind:
            key = raw.strip().lower()
            if key in PRIOR_NAMES:
                return PRIOR_NAMES[key]
            return PriorKind(int(key))
        if kind is bool:
            return _BOOL_WORDS[raw.strip().lower()]
        return kind(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"line {line_no}: bad value {raw!r} for {name}: {exc}") from None


def parse_config(text: str) -> TrainConfig:
    """Parse the flat key=value config format ('#' starts a comment)."""
    types = {"scheme": SchemeId, "prior": PriorKind}
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        if f.name not in types:
            types[f.name] = type(getattr(defaults, f.name))
    known = set(types)
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected key=value, got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _coerce(key, types[key], raw, line_no)
    config = replace(defaults, **values)
    config.validate()
    return config


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def write_config(path, config: TrainConfig) -> None:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, SchemeId):
            value = scheme_name(value)
        elif isinstance(value, PriorKind):
            value = prior_name(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Datasets

def synth_dataset(kind: str, length: int, seed: int, *,
                  utterances: int = 32, channels: int = 3,
                  rho: float = 0.95) -> list[np.ndarray]:
    """Synthetic frame sequences: `utterances` arrays of shape [length, channels].

    ar1:         x_t = rho * x_{t-1} + eps_t per channel, started from the
                 stationary distribution.
    noisy_sines: two random-frequency sinusoids per channel plus noise.
    """
    if length <= 0:
        raise ConfigError(f"utterance length must be positive, got {length}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(utterances):
        if kind == "ar1":
            eps = rng.standard_normal((length, channels))
            x = np.empty((length, channels))
            scale = 1.0 / math.sqrt(max(1.0 - rho * rho, 1e-12)) if abs(rho) < 1 else 1.0
            x[0] = eps[0] * scale
            for t in range(1, length):
                x[t] = rho * x[t - 1] + eps[t]
            out.append(x)
        elif kind == "noisy_sines":
            t_axis = np.arange(length)[:, None]
            x = np.zeros((length, channels))
            for _ in range(2):
                amp = rng.uniform(0.5, 1.5, size=channels)
                freq = rng.uniform(0.02, 0.3, size=channels)
                phase = rng.uniform(0.0, 2.0 * np.pi, size=channels)
                x += amp * np.sin(freq * t_axis + phase)
            x += 0.1 * rng.standard_normal((length, channels))
            out.append(x)
        else:
            raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    return out


def load_dataset(config: TrainConfig) -> list[np.ndarray]:
    """Materialize the utterance list the config describes."""
    if config.data_kind in ("ar1", "noisy_sines"):
        return synth_dataset(config.data_kind, config.utterance_len, config.seed,
                             utterances=config.utterances, channels=config.channels,
                             rho=config.rho)
    import os

    path = config.data_path
    if os.path.isdir(path):
        names = sorted(os.listdir(path))
        paths = [os.path.join(path, n) for n in names
                 if n.endswith(".wav" if config.data_kind == "wav" else ".spec")]
    else:
        paths = [path]
    if not paths:
        raise ConfigError(f"no {config.data_kind} files found under {path!r}")
    utts = []
    for p in paths:
        if config.data_kind == "wav":
            utts.append(dsp.spectrogram(dsp.wav_read(p)))
        else:
            utts.append(dsp.read_spec(p))
    return utts


def split_dataset(utts: list[np.ndarray], val_fraction: float, seed: int
                  ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Split by utterance (disjoint), deterministic in the seed."""
    if not utts:
        raise ConfigError("dataset is empty")
    order = np.random.default_rng(seed).permutation(len(utts))
    n_val = max(1, int(round(len(utts) * val_fraction))) if len(utts) > 1 else 0
    val_ids = set(order[:n_val].tolist())
    train = [utts[i] for i in range(len(utts)) if i not in val_ids]
    val = [utts[i] for i in range(len(utts)) if i in val_ids]
    return train, val


def normalization_stats(utts: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate(utts, axis=0)
    return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-6)


def metric_weights(model: CodecModel) -> np.ndarray:
    return dsp.mel_weights(model.frame_dim) if model.mel_weighted else np.ones(model.frame_dim)


# ---------------------------------------------------------------------------
# Objective

def rd_loss(distortion: Tensor, rate_nats: Tensor | None, beta: float) -> Tensor:
    """distortion + beta * rate_nats (both already per-frame averages)."""
    if beta == 0.0 or rate_nats is None:
        return distortion
    return ad.add(distortion, ad.mul(rate_nats, beta))


def fixed_bitrate(bottleneck: int, levels: int, frame_rate: float = 100.0) -> float:
    """bits/second of fixed-length index packing."""
    return nn.fixed_bits_per_frame(bottleneck, levels) * frame_rate


# ---------------------------------------------------------------------------
# Evaluation (closed loop: decode sees only the transmitted indices)

def evaluate(model: CodecModel, utts: list[np.ndarray], *,
             frame_rate: float = 100.0) -> dict[str, float]:
    """Teacher-free metrics over raw-domain utterances."""
    weights = metric_weights(model)
    mse_num = 0.0
    snr_vals = []
    nll_bits_total = 0.0
    frames_total = 0
    priced = model.prior.kind != PriorKind.UNIFORM
    for utt in utts:
        latents, recon_norm = code_utterance(model, utt)
        recon = model.denormalize(recon_norm)
        mse_num += dsp.mel_mse(utt, recon, weights) * utt.shape[0]
        snr_vals.append(dsp.spectral_snr(utt, recon))
        frames_total += utt.shape[0]
        if priced:
            conditioner = schemes.LatentConditioner(model)
            for row in latents:
                nll_bits_total += model.prior.nll_bits(row, conditioner.conditioning())
                conditioner.advance(row)
    fixed_bits = nn.fixed_bits_per_frame(model.bottleneck, model.levels)
    bits_per_frame = nll_bits_total / frames_total if priced else fixed_bits
    return {
        "mel_mse": mse_num / frames_total,
        "spectral_snr": float(np.mean(snr_vals)),
        "bits_per_frame_fixed": fixed_bits,
        "bits_per_frame": bits_per_frame,
        "bitrate_bps": bits_per_frame * frame_rate,
    }


def code_utterance(model: CodecModel, utt: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Encode then decode one raw utterance; returns (latents, normalized
    reconstruction). Decoding uses only the transmitted indices."""
    frames = model.normalize(np.asarray(utt, dtype=np.float64))
    enc_state = schemes.initial_state(model)
    rows = []
    for t in range(frames.shape[0]):
        indices, enc_state, _ = schemes.encode_step(model, enc_state, Tensor(frames[t:t + 1]))
        rows.append(indices[0])
    latents = np.stack(rows)
    dec_state = schemes.initial_state(model)
    recon = np.empty_like(frames)
    for t in range(latents.shape[0]):
        x_hat, dec_state = schemes.decode_step(model, dec_state, latents[t])
        recon[t] = x_hat.data[0]
    return latents, recon


# ---------------------------------------------------------------------------
# Training loop

def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # Epoch order is a pure function of (seed, epoch): resuming from a
    # checkpoint replays the identical remaining schedule.
    return np.random.default_rng(np.random.SeedSequence((seed, epoch)))


def train(config: TrainConfig, dataset: list[np.ndarray] | None = None, *,
          model: CodecModel | None = None, start_epoch: int = 0,
          checkpoint_path=None) -> tuple[CodecModel, list[dict]]:
    """Run the configured training; returns (model, log rows).

    Log rows: epoch, split ('train' or 'val'), mel_mse, bits_per_frame,
    loss. Train rows report the optimized (normalized-domain) quantities;
    val rows report closed-loop raw-domain Mel-MSE.
    """
    config.validate()
    utts = dataset if dataset is not None else load_dataset(config)
    train_utts, val_utts = split_dataset(utts, config.val_fraction, config.seed)
    if not train_utts:
        raise ConfigError("training split is empty")
    frame_dim = train_utts[0].shape[1]
    if model is None:
        model = CodecModel.new(config.scheme, frame_dim, config.bottleneck,
                               hidden=config.hidden, levels=config.levels,
                               prior_kind=config.prior, prior_hidden=config.prior_hidden,
                               mel_weighted=config.mel_weighted, seed=config.seed)
        mean, std = normalization_stats(train_utts)
        model.set_normalization(mean, std)
    weights = metric_weights(model)
    prior = model.prior if config.beta > 0.0 else None
    norm_train = [model.normalize(u) for u in train_utts]
    log: list[dict] = []
    last_good = model.to_entries()
    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(len(norm_train))
        lr_epoch = config.learning_rate * (config.lr_decay ** epoch)
        dist_sum = 0.0
        rate_sum = 0.0
        loss_sum = 0.0
        n_windows = 0
        for lo in range(0, len(order), config.batch_size):
            group = [norm_train[i] for i in order[lo:lo + config.batch_size]]
            usable = (min(u.shape[0] for u in group) // config.tbptt) * config.tbptt
            if usable == 0:
                continue
            state = schemes.initial_state(model, batch=len(group))
            for w0 in range(0, usable, config.tbptt):
                block = np.stack([u[w0:w0 + config.tbptt] for u in group], axis=1)
                with Tape() as tape:
                    result = schemes.unroll(model, block, prior=prior,
                                            weights=weights, state=state)
                    loss = rd_loss(result.distortion, result.rate_nats, config.beta)
                    loss_val = loss.item()
                    if not math.isfinite(loss_val):
                        raise TrainingDiverged(
                            f"loss diverged at epoch {epoch} "
                            f"(scheme {scheme_name(model.scheme)})",
                            CodecModel.from_entries(last_good), log)
                    tape.backward(loss)
                nn.clip_global_norm(model.params, config.clip_norm)
                nn.adam_step(model.params, lr_epoch)
                state = schemes.detach_state(result.state)
                dist_sum += result.distortion.item()
                if result.rate_nats is not None:
                    rate_sum += result.rate_nats.item()
                loss_sum += loss_val
                n_windows += 1
        if n_windows == 0:
            raise ConfigError("no usable training windows; utterances shorter than tbptt")
        train_bits = (rate_sum / n_windows / math.log(2.0) if prior is not None
                      else nn.fixed_bits_per_frame(config.bottleneck, config.levels))
        log.append({"epoch": epoch, "split": "train",
                    "mel_mse": dist_sum / n_windows,
                    "bits_per_frame": train_bits,
                    "loss": loss_sum / n_windows})
        if val_utts:
            metrics = evaluate(model, val_utts, frame_rate=config.frame_rate)
            val_rate_nats = metrics["bits_per_frame"] * math.log(2.0)
            log.append({"epoch": epoch, "split": "val",
                        "mel_mse": metrics["mel_mse"],
                        "bits_per_frame": metrics["bits_per_frame"],
                        "loss": metrics["mel_mse"] + config.beta * val_rate_nats})
        last_good = model.to_entries()
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, epoch)
    return model, log


# ---------------------------------------------------------------------------
# Checkpoints (model entries plus optimizer state and the epoch counter)

def save_checkpoint(path, model: CodecModel, epoch: int) -> None:
    entries = model.to_entries()
    entries["train.epoch"] = np.array([float(epoch)])
    entries["train.step"] = np.array([float(model.params.step)])
    for name, _ in model.params.items():
        m, v = model.params.moments(name)
        entries[f"adam.m.{name}"] = m
        entries[f"adam.v.{name}"] = v
    nn.save_params(path, entries)


def load_checkpoint(path) -> tuple[CodecModel, int]:
    """Returns (model with optimizer state, next epoch to run)."""
    entries = nn.load_params(path)
    model_entries = {k: v for k, v in entries.items()
                     if not k.startswith(("adam.", "train."))}
    model = CodecModel.from_entries(model_entries)
    if "train.epoch" not in entries:
        raise ConfigError(f"{path} is a plain model file, not a checkpoint")
    model.params.step = int(entries["train.step"][0])
    for name, _ in model.params.items():
        m = entries.get(f"adam.m.{name}")
        v = entries.get(f"adam.v.{name}")
        if m is not None and v is not None:
            model.params.set_moments(name, m, v)
    return model, int(entries["train.epoch"][0]) + 1


# ---------------------------------------------------------------------------
# Log CSV

LOG_COLUMNS = ("epoch", "split", "mel_mse", "bits_per_frame", "loss")


def format_float(value: float) -> str:
    return f"{value:.6g}"


def log_to_csv(rows: list[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            str(row[c]) if c in ("epoch", "split") else format_float(row[c])
            for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(log_to_csv(rows))
