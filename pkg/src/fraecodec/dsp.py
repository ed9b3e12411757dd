"""Audio front-end: WAV I/O, STFT/ISTFT, dB spectrograms, Mel-frequency
weighting, Griffin-Lim phase recovery, and evaluation metrics.

Fixed analysis grid: 16 kHz mono audio, square-root Hann window of 320
samples (20 ms, same as the FFT size), hop 160 (10 ms), i.e. a 100 Hz frame
rate with 161 one-sided bins of 50 Hz each. The analysis and synthesis
windows are both the square-root Hann, whose product is the Hann window and
therefore overlap-adds to a constant at this hop.
"""

from __future__ import annotations

import math
import struct

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN = 320
HOP = 160
N_BINS = FRAME_LEN // 2 + 1
FRAME_RATE = SAMPLE_RATE / HOP  # 100 Hz

DB_FLOOR_MAG = 1e-5  # magnitudes are floored here before the log (-100 dB)

SPEC_MAGIC = b"FRAESPEC"


class DspError(ValueError):
    """Invalid signal or spectrogram input."""


class WavFormatError(ValueError):
    """Malformed or unsupported WAV file."""


# ---------------------------------------------------------------------------
# FFT: recursive radix-2 decimation with a direct-DFT odd base case, enough
# for the fixed transform size 320 = 2**6 * 5 (and any other even-composite
# length). Vectorized over leading axes.

_DFT_CACHE: dict[int, np.ndarray] = {}
_TW_CACHE: dict[int, np.ndarray] = {}


def _dft_matrix(n: int) -> np.ndarray:
    mat = _DFT_CACHE.get(n)
    if mat is None:
        k = np.arange(n)
        mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
        _DFT_CACHE[n] = mat
    return mat


def _twiddles(n: int) -> np.ndarray:
    tw = _TW_CACHE.get(n)
    if tw is None:
        tw = np.exp(-2j * np.pi * np.arange(n // 2) / n)
        _TW_CACHE[n] = tw
    return tw


def _fft_rec(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n % 2 or n <= 4:
        return x @ _dft_matrix(n)
    even = _fft_rec(x[..., 0::2])
    odd = _fft_rec(x[..., 1::2]) * _twiddles(n)
    return np.concatenate([even + odd, even - odd], axis=-1)


def fft(x: np.ndarray) -> np.ndarray:
    """Complex DFT along the last axis."""
    return _fft_rec(np.asarray(x, dtype=np.complex128))


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse complex DFT along the last axis."""
    arr = np.asarray(x, dtype=np.complex128)
    return np.conj(_fft_rec(np.conj(arr))) / arr.shape[-1]


def _rfft(frames: np.ndarray) -> np.ndarray:
    return fft(frames)[..., :frames.shape[-1] // 2 + 1]


def _irfft(spec: np.ndarray, n: int) -> np.ndarray:
    full = np.concatenate([spec, np.conj(spec[..., -2:0:-1])], axis=-1)
    if full.shape[-1] != n:
        raise DspError(f"one-sided spectrum width {spec.shape[-1]} does not invert to length {n}")
    return ifft(full).real


# ---------------------------------------------------------------------------
# STFT / ISTFT

def sqrt_hann_window(n: int = FRAME_LEN) -> np.ndarray:
    # Periodic Hann: adjacent half-overlapping copies sum to exactly 1.
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return np.sqrt(hann)


def frame_count(num_samples: int) -> int:
    if num_samples < FRAME_LEN:
        raise DspError(f"need at least {FRAME_LEN} samples, got {num_samples}")
    return (num_samples - FRAME_LEN) // HOP + 1


def stft(samples: np.ndarray) -> np.ndarray:
    """Complex [T, 161] spectrogram of a mono signal (at least one frame)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise DspError(f"expected a mono 1-d signal, got shape {x.shape}")
    t_len = frame_count(x.shape[0])
    window = sqrt_hann_window()
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::HOP][:t_len]
    return _rfft(frames * window)


def istft(spec: np.ndarray) -> np.ndarray:
    """Overlap-add inverse of :func:`stft`.

    Synthesis applies the square-root Hann window and divides by the summed
    window energy, which is 1 on the fully-overlapped interior and handles
    the partially-covered edges as the least-squares signal estimate.
    """
    spec = np.asarray(spec, dtype=np.complex128)
    if spec.ndim != 2 or spec.shape[1] != N_BINS:
        raise DspError(f"expected a [T, {N_BINS}] spectrogram, got shape {spec.shape}")
    t_len = spec.shape[0]
    window = sqrt_hann_window()
    frames = _irfft(spec, FRAME_LEN) * window
    out_len = (t_len - 1) * HOP + FRAME_LEN
    num = np.zeros(out_len)
    env = np.zeros(out_len)
    w2 = window * window
    for t in range(t_len):
        start = t * HOP
        num[start:start + FRAME_LEN] += frames[t]
        env[start:start + FRAME_LEN] += w2
    return num / np.maximum(env, 1e-12)


# ---------------------------------------------------------------------------
# dB scale and Mel-frequency weighting

def to_db(magnitudes: np.ndarray) -> np.ndarray:
    m = np.asarray(magnitudes, dtype=np.float64)
    if np.any(m < 0):
        raise DspError("magnitudes must be nonnegative")
    return 20.0 * np.log10(np.maximum(m, DB_FLOOR_MAG))


def from_db(values: np.ndarray) -> np.ndarray:
    return np.power(10.0, np.asarray(values, dtype=np.float64) / 20.0)


def mel_weights(n_bins: int = N_BINS, sample_rate: int = SAMPLE_RATE,
                fft_size: int = FRAME_LEN) -> np.ndarray:
    """Perceptual bin weights: 1 up to 1 kHz, then 969.672/f above."""
    freqs = np.arange(n_bins) * (sample_rate / fft_size)
    w = np.ones(n_bins)
    high = freqs > 1000.0
    w[high] = 969.672 / freqs[high]
    return w


def mel_mse(x: np.ndarray, x_hat: np.ndarray,
            weights: np.ndarray | None = None) -> float:
    """Weight-normalized squared error, averaged over frames.

    mean_t sum_f w[f] (x - x_hat)^2 / sum_f w[f]; the default weights are
    the Mel-frequency weights for the standard 161-bin grid.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise DspError(f"spectrogram shapes {a.shape} and {b.shape} differ")
    w = mel_weights(a.shape[-1]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (a.shape[-1],):
        raise DspError(f"weight shape {w.shape} does not match {a.shape[-1]} bins")
    sq = (a - b) ** 2
    return float((sq @ w).mean() / w.sum())


def spectral_snr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """10 log10(signal/error) over dB-domain frames, clipped to +/-99 dB."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise DspError(f"spectrogram shapes {a.shape} and {b.shape} differ")
    err = float(((a - b) ** 2).sum())
    sig = float((a * a).sum())
    if err == 0.0:
        return 99.0
    if sig == 0.0:
        return -99.0
    return float(np.clip(10.0 * np.log10(sig / err), -99.0, 99.0))


# ---------------------------------------------------------------------------
# Griffin-Lim phase recovery

def griffin_lim(spec_db: np.ndarray, iters: int = 100, seed: int = 0) -> np.ndarray:
    """Recover a waveform whose STFT magnitude approaches the target.

    Classic alternating projection from a seeded random phase: synthesize,
    re-analyze, keep the new phase, restore the target magnitude. With the
    least-squares ISTFT above, the consistency error is non-increasing.
    """
    if iters < 0:
        raise DspError("iters must be >= 0")
    target = from_db(spec_db)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, size=target.shape)
    spec = target * np.exp(1j * phase)
    for _ in range(iters):
        resynth = stft(istft(spec))
        spec = target * np.exp(1j * np.angle(resynth))
    return istft(spec)


def gl_consistency(spec_db: np.ndarray, samples: np.ndarray) -> float:
    """Frobenius distance between the target magnitude and the magnitude of
    the analyzed waveform (the quantity Griffin-Lim drives down)."""
    target = from_db(spec_db)
    achieved = np.abs(stft(samples))
    return float(np.linalg.norm(target - achieved))


def spectrogram(samples: np.ndarray) -> np.ndarray:
    """dB-scale magnitude spectrogram of a mono waveform."""
    return to_db(np.abs(stft(samples)))


# ---------------------------------------------------------------------------
# WAV I/O (PCM16 mono at the fixed sample rate)

def wav_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if len(body) != chunk_size:
            raise WavFormatError(f"truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavFormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned
    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")
    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1:
        raise WavFormatError(f"unsupported encoding {audio_format} (PCM required)")
    if channels != 1:
        raise WavFormatError(f"expected mono audio, got {channels} channels")
    if bits != 16:
        raise WavFormatError(f"expected 16-bit samples, got {bits}")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"expected {SAMPLE_RATE} Hz, got {rate}")
    if len(payload) % 2:
        raise WavFormatError("data chunk holds a partial sample")
    ints = np.frombuffer(payload, dtype="<i2")
    return ints.astype(np.float64) / 32768.0


def wav_write(path, samples: np.ndarray) -> None:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise WavFormatError(f"expected a mono 1-d signal, got shape {x.shape}")
    ints = np.rint(np.clip(x, -1.0, 1.0 - 1.0 / 32768.0) * 32768.0).astype("<i2")
    payload = ints.tobytes()
    header = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, 1, 1, SAMPLE_RATE,
                             SAMPLE_RATE * 2, 2, 16),
        b"data", struct.pack("<I", len(payload)),
    ])
    with open(path, "wb") as fh:
        fh.write(header + payload)


# ---------------------------------------------------------------------------
# Spectrogram dump container (also used for synthetic frame sequences)

def write_spec(path, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.atleast_2d(frames), dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_spec(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != SPEC_MAGIC:
        raise DspError("not a spectrogram dump (bad magic)")
    t_len, f_len = struct.unpack_from("<II", data, 8)
    body = data[16:]
    if len(body) != 4 * t_len * f_len:
        raise DspError("spectrogram dump payload size mismatch")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(t_len, f_len)
