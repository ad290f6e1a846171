"""Audio loading, length normalisation and log-mel features."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000


class AudioFormatError(ValueError):
    """The file is not a readable PCM WAV."""


class UnsupportedRateError(AudioFormatError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    target_samples: int = 96000
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    n_mels: int = 128
    n_frames: int = 512
    fmin: float = 20.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    resample: bool = False
    downmix: bool = True


def load_audio(path, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Read a PCM WAV as float32 samples in [-1, 1] at ``cfg.sample_rate``.

    Multi-channel audio is averaged when ``cfg.downmix`` is set. Other sample
    rates raise ``UnsupportedRateError`` unless ``cfg.resample`` is true, in
    which case the signal is linearly interpolated onto the target grid.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError/EOFError/struct.error
        raise AudioFormatError(f"{path}: cannot parse WAV ({exc})") from exc

    if data.dtype == np.uint8:
        samples = (data.astype(np.float32) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float32)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")

    if samples.ndim == 2:
        if samples.shape[1] == 1:
            samples = samples[:, 0]
        elif cfg.downmix:
            samples = samples.mean(axis=1, dtype=np.float64).astype(np.float32)
        else:
            raise AudioFormatError(f"{path}: {samples.shape[1]} channels and downmix disabled")

    if rate != cfg.sample_rate:
        if not cfg.resample:
            raise UnsupportedRateError(
                f"{path}: sample rate {rate} Hz, expected {cfg.sample_rate} Hz "
                "(enable resampling to convert)"
            )
        samples = linear_resample(samples, rate, cfg.sample_rate)
    if not np.isfinite(samples).all():
        raise AudioFormatError(f"{path}: non-finite samples")
    return np.clip(samples, -1.0, 1.0)


def linear_resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    n_out = int(round(len(x) * rate_out / rate_in))
    t = np.arange(n_out) * (rate_in / rate_out)
    return np.interp(t, np.arange(len(x)), x).astype(np.float32)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.round(np.clip(samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    wavfile.write(path, sample_rate, pcm)


def fit_length(x: np.ndarray, target_samples: int = 96000) -> np.ndarray:
    """Cut or repeat-pad to exactly ``target_samples``.

    Short inputs are padded by cycling ``x, reverse(x), x, reverse(x), ...``.
    """
    x = np.asarray(x)
    n = len(x)
    if n == 0:
        raise ValueError("cannot fit the length of an empty waveform")
    if n >= target_samples:
        return x[:target_samples].copy()
    period = np.concatenate([x, x[::-1]])
    reps = -(-target_samples // len(period))
    return np.tile(period, reps)[:target_samples]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1).

    Triangles are evaluated in the mel domain at each FFT bin centre. A
    filter narrower than the bin spacing can miss every bin; such a filter
    gets unit weight on the bin nearest its centre so no band is empty.
    """
    n_bins = cfg.n_fft // 2 + 1
    bin_mel = hz_to_mel(np.arange(n_bins) * cfg.sample_rate / cfg.n_fft)
    edges = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (centre - left)
    down = (right - bin_mel) / (right - centre)
    fb = np.maximum(0.0, np.minimum(up, down))
    for m in np.flatnonzero(fb.sum(axis=1) == 0):
        fb[m, np.argmin(np.abs(bin_mel - centre[m, 0]))] = 1.0
    return fb


def mel_centers_hz(cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    edges = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(edges[1:-1])


_FB_CACHE: dict[FrontendConfig, np.ndarray] = {}


def _cached_filterbank(cfg: FrontendConfig) -> np.ndarray:
    fb = _FB_CACHE.get(cfg)
    if fb is None:
        fb = _FB_CACHE[cfg] = mel_filterbank(cfg)
    return fb


def mel_power(x: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Pre-log mel energies, shape (n_mels, n_frames_available)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < cfg.win_length:
        raise ValueError(f"need at least {cfg.win_length} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    window = np.hanning(cfg.win_length)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1)
    power = spec.real**2 + spec.imag**2
    return _cached_filterbank(cfg) @ power.T


def log_mel(x: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """(n_mels, n_frames) float32 log-mel matrix of a ``target_samples`` waveform.

    Frames use a symmetric Hann window of ``win_length`` samples every
    ``hop_length`` samples without edge padding; extra frames are dropped
    and missing ones are filled with ``log(log_floor)``.
    """
    if len(x) != cfg.target_samples:
        raise ValueError(
            f"log_mel expects {cfg.target_samples} samples, got {len(x)}; run fit_length first"
        )
    mel = np.log(np.maximum(mel_power(x, cfg), cfg.log_floor))
    out = np.full((cfg.n_mels, cfg.n_frames), np.log(cfg.log_floor))
    t = min(cfg.n_frames, mel.shape[1])
    out[:, :t] = mel[:, :t]
    return out.astype(np.float32)


def waveform_to_features(x: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Clip, fit to length and compute the log-mel matrix."""
    x = np.clip(np.asarray(x, dtype=np.float32), -1.0, 1.0)
    return log_mel(fit_length(x, cfg.target_samples), cfg)


def config_digest(cfg: FrontendConfig) -> str:
    return hashlib.sha256(repr(dataclasses.astuple(cfg)).encode()).hexdigest()[:16]


class FeatureCache:
    """On-disk log-mel cache keyed by waveform content hash and frontend config.

    Entries use the checkpoint container format with a single ``logmel`` tensor.
    """

    def __init__(self, root, cfg: FrontendConfig = FrontendConfig()):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)

    def key(self, x: np.ndarray) -> str:
        h = hashlib.sha256(np.ascontiguousarray(x, dtype=np.float32).tobytes())
        h.update(config_digest(self.cfg).encode())
        return h.hexdigest()

    def get(self, x: np.ndarray) -> np.ndarray:
        from .checkpoint import read_container, write_container

        path = self.root / f"{self.key(x)}.feat"
        if path.exists():
            return read_container(path).tensors["logmel"]
        feats = waveform_to_features(x, self.cfg)
        write_container(path, {"logmel": feats}, {"kind": "logmel"})
        return feats
