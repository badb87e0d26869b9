"""Log-mel filter-bank features and the four training augmentations."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

SAMPLE_RATE = 16000
WINDOW = 400  # 25 ms
HOP = 160  # 10 ms
N_FFT = 512
N_MELS = 80
F_MIN = 20.0
LOG_FLOOR = 1e-10

FEAT_MAGIC = b"AASVFEAT"
FEAT_VERSION = 1


@dataclass(frozen=True)
class AugmentConfig:
    snr_db_range: tuple[float, float] = (5.0, 20.0)
    rir_decay_ms: float = 150.0
    freq_mask_max: int = 10
    time_mask_max: int = 20

    def __post_init__(self):
        lo, hi = self.snr_db_range
        if not lo <= hi:
            raise ValueError("snr_db_range must be [min, max]")
        if self.rir_decay_ms <= 0:
            raise ValueError("rir_decay_ms must be positive")
        if self.freq_mask_max < 1 or self.time_mask_max < 1:
            raise ValueError("mask maxima must be >= 1")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   f_min: float = F_MIN, f_max: float | None = None) -> np.ndarray:
    """Triangular filters, shape (n_fft // 2 + 1, n_mels), equally spaced on the mel scale."""
    f_max = sample_rate / 2 if f_max is None else f_max
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb.T


def mel_band_edges(sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(sample_rate / 2), n_mels + 2))


def n_frames(n_samples: int, window: int = WINDOW, hop: int = HOP) -> int:
    return 1 + (n_samples - window) // hop


def logmel(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(frames, 80) natural-log mel energies of a mono waveform."""
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size < WINDOW:
        raise ValueError(f"waveform too short: need >= {WINDOW} samples, got {x.size}")
    nf = n_frames(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW)[::HOP][:nf]
    spec = np.fft.rfft(frames * np.hamming(WINDOW), n=N_FFT, axis=1)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank()
    return np.log(energies + LOG_FLOOR).astype(np.float32)


def crop_or_pad(feats: np.ndarray, target_frames: int, rng: np.random.Generator) -> np.ndarray:
    if target_frames <= 0:
        raise ValueError("target_frames must be positive")
    t = feats.shape[0]
    if t == 0:
        raise ValueError("empty feature matrix")
    if t == target_frames:
        return feats
    if t < target_frames:
        reps = -(-target_frames // t)
        return np.concatenate([feats] * reps, axis=0)[:target_frames]
    start = int(rng.integers(0, t - target_frames + 1))
    return feats[start : start + target_frames]


def add_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise at the given SNR (``inf`` means no noise)."""
    x = np.asarray(samples, dtype=np.float64)
    if np.isinf(snr_db) and snr_db > 0:
        return np.asarray(samples).copy()
    signal_power = np.mean(x**2)
    noise = rng.standard_normal(x.size)
    noise *= np.sqrt(signal_power / 10 ** (snr_db / 10) / np.mean(noise**2))
    return (x + noise).astype(np.float32)


def synthetic_rir(decay_ms: float, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit direct path followed by an exponentially decaying noise tail."""
    n = max(2, int(round(3 * decay_ms * sample_rate / 1000)))
    t = np.arange(n) / sample_rate
    tail = rng.standard_normal(n) * np.exp(-t / (decay_ms / 1000)) * 0.3
    tail[0] = 1.0
    return tail


def reverberate(samples: np.ndarray, decay_ms: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    y = fftconvolve(x, synthetic_rir(decay_ms, rng))[: x.size]
    peak = np.max(np.abs(y))
    if peak > 0:
        y *= np.max(np.abs(x)) / peak
    return y.astype(np.float32)


def mask_value(feats: np.ndarray) -> np.float32:
    """Masked cells take the utterance's mean log energy (0 after level normalisation)."""
    return np.float32(feats.mean())


def freq_mask(feats: np.ndarray, max_width: int, rng: np.random.Generator) -> np.ndarray:
    """Fill one random band of 1..max_width contiguous mel bins."""
    width = int(rng.integers(1, min(max_width, feats.shape[1]) + 1))
    start = int(rng.integers(0, feats.shape[1] - width + 1))
    out = feats.copy()
    out[:, start : start + width] = mask_value(feats)
    return out


def time_mask(feats: np.ndarray, max_width: int, rng: np.random.Generator) -> np.ndarray:
    """Fill one random span of 1..max_width contiguous frames."""
    width = int(rng.integers(1, min(max_width, feats.shape[0]) + 1))
    start = int(rng.integers(0, feats.shape[0] - width + 1))
    out = feats.copy()
    out[start : start + width, :] = mask_value(feats)
    return out


AUGMENTATIONS = ("noise", "reverb", "freq_mask", "time_mask")
WAVEFORM_AUGMENTATIONS = ("noise", "reverb")


def augment(samples: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            kind: str | None = None) -> tuple[str, np.ndarray]:
    """Apply one augmentation, picked uniformly unless ``kind`` is given.

    Returns ``(kind, result)``; waveform augmentations return a waveform,
    masking augmentations return the (masked) log-mel matrix.
    """
    if kind is None:
        kind = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
    if kind == "noise":
        return kind, add_noise(samples, float(rng.uniform(*cfg.snr_db_range)), rng)
    if kind == "reverb":
        return kind, reverberate(samples, cfg.rir_decay_ms, rng)
    feats = logmel(samples)
    if kind == "freq_mask":
        return kind, freq_mask(feats, cfg.freq_mask_max, rng)
    if kind == "time_mask":
        return kind, time_mask(feats, cfg.time_mask_max, rng)
    raise ValueError(f"unknown augmentation {kind!r}")


def cmn(feats: np.ndarray) -> np.ndarray:
    """Per-utterance mean normalisation of each mel bin."""
    if feats.shape[0] < 1:
        raise ValueError("cmn needs at least one frame")
    return (feats - feats.mean(axis=0, keepdims=True)).astype(feats.dtype)


def level_norm(feats: np.ndarray) -> np.ndarray:
    """Subtract the utterance's overall mean log energy; keeps the spectral envelope."""
    if feats.shape[0] < 1:
        raise ValueError("level_norm needs at least one frame")
    return (feats - feats.mean()).astype(feats.dtype)


NORMALIZERS = {"cmn": cmn, "level": level_norm, "none": lambda f: f}


def normalize(feats: np.ndarray, mode: str = "level") -> np.ndarray:
    try:
        return NORMALIZERS[mode](feats)
    except KeyError:
        raise ValueError(f"unknown normalisation {mode!r}") from None


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM or 32-bit float WAV -> float32 samples in [-1, 1]."""
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected single-channel audio, got {data.shape[1]} channels")
    if sr != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {sr} Hz is not supported (need {SAMPLE_RATE} Hz; resample first)")
    if data.dtype == np.int16:
        return (data.astype(np.float32) / 32768.0), sr
    if data.dtype == np.float32:
        return data, sr
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


_FEAT_HEADER = struct.Struct("<8sIII")


def write_feature_cache(path: str | Path, feats: np.ndarray) -> None:
    frames, mels = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, frames, mels))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_feature_cache(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, frames, mels = _FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=_FEAT_HEADER.size)
    if body.size != frames * mels:
        raise ValueError(f"{path}: truncated feature cache")
    return body.reshape(frames, mels).astype(np.float32)
