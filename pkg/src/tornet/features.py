"""Audio loading and the 3 x 40 x 512 log-Mel / delta / delta-delta input tensor.

Pipeline for one clip (16 kHz mono):

1. tile or truncate to exactly 10 s (160000 samples);
2. 1024-sample Hann frames every 256 samples, no centre padding (622 frames);
3. power spectrum -> 40-band HTK Mel filterbank (0-8 kHz) -> ``log(x + 1e-6)``;
4. keep frames ``[0, 512)``, append regression deltas and delta-deltas.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import DataError, FormatError

SAMPLE_RATE = 16000
TARGET_SECONDS = 10.0
N_FFT = 1024
HOP = 256
N_MELS = 40
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-6
DELTA_WIDTH = 2
N_FRAMES = 512


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_path: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"audio must be mono, got array of shape {self.samples.shape}")

    def __len__(self) -> int:
        return self.samples.size


# --------------------------------------------------------------------------
# WAV I/O


def read_wav(source: Union[str, Path, bytes], target_rate: int = SAMPLE_RATE, name: Optional[str] = None) -> AudioClip:
    """Load a RIFF/WAVE file as mono float in [-1, 1], resampled to ``target_rate``.

    Accepts PCM16, PCM24/32 and float32 payloads; multichannel audio is
    averaged to mono.
    """
    if name is None:
        name = "<bytes>" if isinstance(source, bytes) else str(source)
    handle = io.BytesIO(source) if isinstance(source, bytes) else source
    try:
        rate, data = wavfile.read(handle)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{name}: not a readable WAV file ({exc})") from None
    if data.dtype == np.int16:
        audio = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-aligns 24-bit samples in int32
        audio = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        audio = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype.kind == "f":
        audio = data.astype(np.float64)
    else:
        raise FormatError(f"{name}: unsupported sample type {data.dtype}")
    if audio.ndim == 2:
        audio = audio.mean(axis=1)
    if rate != target_rate:
        g = gcd(int(rate), int(target_rate))
        audio = resample_poly(audio, target_rate // g, rate // g)
    return AudioClip(audio, target_rate, name)


def write_wav(path: Union[str, Path], samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write mono PCM16 with the same 1/32768 scale :func:`read_wav` uses."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), rate, pcm)


# --------------------------------------------------------------------------
# feature steps


def standardize_length(clip: AudioClip, target_s: float = TARGET_SECONDS) -> AudioClip:
    """Tile short clips by whole repetitions, then cut to exactly ``target_s``."""
    n = int(round(target_s * clip.sample_rate))
    if len(clip) == 0:
        raise DataError(f"empty audio clip {clip.source_path!r}")
    reps = -(-n // len(clip))
    samples = np.tile(clip.samples, reps)[:n] if reps > 1 else clip.samples[:n]
    return AudioClip(samples.copy(), clip.sample_rate, clip.source_path)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE, f_min: float = F_MIN, f_max: float = F_MAX
) -> np.ndarray:
    """Triangular HTK-scale filters with unit peak, shape ``[n_mels, n_fft // 2 + 1]``."""
    bins = np.linspace(0.0, sr / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


_FILTERBANK = mel_filterbank()
_WINDOW = get_window("hann", N_FFT, fftbins=True)


def frame_count(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return 1 + (n_samples - n_fft) // hop


def mel_power(clip: AudioClip) -> np.ndarray:
    """Linear Mel-band energies ``[40, n_frames]`` (before the log)."""
    x = clip.samples
    if x.size < N_FFT:
        raise DataError(f"clip shorter than one {N_FFT}-sample frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, N_FFT)[::HOP]
    spec = np.abs(np.fft.rfft(frames * _WINDOW, axis=1)) ** 2
    return _FILTERBANK @ spec.T


def log_mel(clip: AudioClip) -> np.ndarray:
    """``log(mel energy + 1e-6)``, shape ``[40, n_frames]``."""
    return np.log(mel_power(clip) + LOG_FLOOR)


def deltas(x: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas along the last axis with edge frames replicated.

    ``d[t] = sum_n n * (x[t+n] - x[t-n]) / (2 * sum_n n^2)`` for ``n = 1..width``.
    """
    T = x.shape[-1]
    if T <= 2 * width:
        raise DataError(f"deltas need more than {2 * width} frames, got {T}")
    pad = [(0, 0)] * (x.ndim - 1) + [(width, width)]
    xp = np.pad(x, pad, mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(x, dtype=np.float64)
    for n in range(1, width + 1):
        out += n * (xp[..., width + n:width + n + T] - xp[..., width - n:width - n + T])
    return out / denom


def assemble(clip: AudioClip, n_frames: int = N_FRAMES, crop_offset: int = 0) -> np.ndarray:
    """Full pipeline: ``[3, 40, n_frames]`` float32 (log-Mel, delta, delta-delta).

    ``crop_offset`` selects the first kept frame; the default keeps the
    leading ``n_frames`` frames.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise DataError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz")
    lm = log_mel(standardize_length(clip))
    if crop_offset < 0 or crop_offset + n_frames > lm.shape[1]:
        raise DataError(f"crop [{crop_offset}, {crop_offset + n_frames}) outside {lm.shape[1]} frames")
    lm = lm[:, crop_offset:crop_offset + n_frames]
    d1 = deltas(lm)
    d2 = deltas(d1)
    return np.stack([lm, d1, d2]).astype(np.float32)


def random_crop_offset(rng: np.random.Generator, total_frames: int = 622, n_frames: int = N_FRAMES) -> int:
    """Optional augmentation: uniform crop start (off by default everywhere)."""
    return int(rng.integers(0, total_frames - n_frames + 1))


def feature_key(raw: bytes, n_frames: int = N_FRAMES, crop_offset: int = 0) -> str:
    """Content hash identifying a clip's features in the on-disk cache."""
    h = hashlib.sha256(raw)
    h.update(f"|logmel{N_MELS}|fft{N_FFT}|hop{HOP}|frames{n_frames}|crop{crop_offset}".encode())
    return h.hexdigest()


def extract_file(path: Union[str, Path], cache_dir: Optional[Union[str, Path]] = None) -> np.ndarray:
    """Features for one WAV file, reading/writing the content-addressed cache if given."""
    from .checkpoint import load_tensor_file, save_tensor_file

    raw = Path(path).read_bytes()
    cached = None
    if cache_dir is not None:
        cached = Path(cache_dir) / f"{feature_key(raw)}.feat"
        if cached.exists():
            return load_tensor_file(cached)["features"]
    feats = assemble(read_wav(raw, name=str(path)))
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        save_tensor_file(cached, {"features": feats})
    return feats
