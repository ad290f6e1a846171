"""On-the-fly waveform and spectrogram augmentations.

Waveform-domain: pitch shift, time stretch, RawBoost-style convolutive noise
and impulsive signal-dependent additive noise, narrowband (telephony) FIR.
Spectrogram-domain: time and frequency masking.

Every random choice goes through a ``numpy.random.Generator``; use
:func:`rng_stream` to get one keyed by ``(seed, stream ids...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import signal

from .frontend import SAMPLE_RATE, FrontendConfig, waveform_to_features

HEADROOM = 1.5


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream...)``; same key, same draws."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass(frozen=True)
class AugmentConfig:
    p_x1: float = 0.8
    p_stage2: float = 0.8
    pitch_semitones: tuple[float, float] = (-2.0, 2.0)
    stretch_rate: tuple[float, float] = (0.9, 1.1)
    time_mask_max: int = 64
    freq_mask_max: int = 16
    notch_count: int = 5
    notch_width_hz: tuple[float, float] = (10.0, 100.0)
    notch_depth_db: tuple[float, float] = (5.0, 25.0)
    nonlinear_orders: tuple[int, ...] = (1, 2, 3)
    notch_taps: int = 1025
    isd_snr_db: tuple[float, float] = (10.0, 40.0)
    isd_fraction: float = 0.1
    fir_low_hz: tuple[float, float] = (100.0, 400.0)
    fir_high_hz: tuple[float, float] = (3000.0, 4000.0)
    fir_taps: int = 65
    order: tuple[str, ...] = (
        "pitch_shift", "time_stretch", "rawboost_convolutive",
        "rawboost_isd_additive", "narrowband_fir", "time_mask", "freq_mask",
    )

    def __post_init__(self):
        for name in ("p_x1", "p_stage2"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("pitch_semitones", "stretch_rate", "notch_width_hz", "notch_depth_db",
                     "isd_snr_db", "fir_low_hz", "fir_high_hz"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is reversed: ({lo}, {hi})")
        if self.stretch_rate[0] <= 0:
            raise ValueError("stretch_rate must be positive")
        unknown = [n for n in self.order if n not in AUGMENTATIONS]
        if unknown:
            raise ValueError(f"unknown augmentations {unknown}; valid: {sorted(AUGMENTATIONS)}")


# -- time-scale and pitch --------------------------------------------------------


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def time_stretch(x: np.ndarray, rate: float, rng: np.random.Generator | None = None,
                 win: int = 512, tolerance: int = 160) -> np.ndarray:
    """Change tempo by ``rate`` keeping pitch (WSOLA overlap-add).

    Output has ``round(len(x) / rate)`` samples. Each synthesis frame is
    taken from near its nominal input position, shifted by up to
    ``tolerance`` samples to best match the natural continuation of the
    previous frame.
    """
    if rate <= 0:
        raise ValueError(f"stretch rate must be positive, got {rate}")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    n_out = int(round(n / rate))
    if rate == 1.0 or n == 0:
        return x.astype(np.float32)
    hop = win // 2
    half = win // 2
    w = _periodic_hann(win)
    pad = tolerance + win + hop
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + int(hop * rate) + win)])
    n_frames = (n_out + half) // hop + 1
    out = np.zeros(n_frames * hop + win)
    prev = None
    for k in range(n_frames):
        nominal = int(round(k * hop * rate)) - half + pad
        if prev is None:
            pos = nominal
        else:
            template = xp[prev + hop: prev + hop + win]
            lo = max(nominal - tolerance, 0)
            region = xp[lo: nominal + tolerance + win]
            cands = np.lib.stride_tricks.sliding_window_view(region, win)
            corr = cands @ template
            if corr.max() == corr.min():
                pos = nominal
            else:
                pos = lo + int(np.argmax(corr))
        out[k * hop: k * hop + win] += w * xp[pos: pos + win]
        prev = pos
    return out[half: half + n_out].astype(np.float32)


def pitch_shift(x: np.ndarray, semitones: float,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Shift pitch by ``semitones`` keeping the sample count.

    Stretches by the pitch factor, then band-limited resampling squeezes the
    result back to the original length.
    """
    x = np.asarray(x, dtype=np.float32)
    if semitones == 0 or len(x) == 0:
        return x.copy()
    factor = 2.0 ** (semitones / 12.0)
    longer = time_stretch(x, 1.0 / factor)
    return signal.resample(longer.astype(np.float64), len(x)).astype(np.float32)


# -- filters ---------------------------------------------------------------------


def apply_fir(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Same-length convolution, centred on the filter's middle tap."""
    x = np.asarray(x, dtype=np.float64)
    full = signal.fftconvolve(x, taps, mode="full")
    start = (len(taps) - 1) // 2
    return full[start: start + len(x)]


def bandpass_fir(low_hz: float, high_hz: float, numtaps: int = 65,
                 sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Hamming-windowed sinc band-pass, unit gain at the band centre."""
    if not 0 < low_hz < high_hz < sample_rate / 2:
        raise ValueError(f"invalid band ({low_hz}, {high_hz}) Hz")
    return signal.firwin(numtaps, [low_hz, high_hz], pass_zero=False, fs=sample_rate,
                         window="hamming", scale=True)


def multi_notch_fir(centers_hz, widths_hz, depths_db, numtaps: int = 1025,
                    sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Linear-phase FIR whose magnitude has a Gaussian notch at each centre.

    Each notch reaches ``-depth`` dB at its centre with full width at half
    depth equal to its width.
    """
    freqs = np.linspace(0.0, sample_rate / 2, 4097)
    gain = np.ones_like(freqs)
    for f0, bw, depth in zip(centers_hz, widths_hz, depths_db):
        sigma = bw / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        floor = 10.0 ** (-depth / 20.0)
        gain *= 1.0 - (1.0 - floor) * np.exp(-0.5 * ((freqs - f0) / sigma) ** 2)
    return signal.firwin2(numtaps, freqs, gain, fs=sample_rate)


def _draw(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def rawboost_convolutive(x: np.ndarray, rng: np.random.Generator,
                         cfg: "AugmentConfig | None" = None) -> np.ndarray:
    """Linear and non-linear convolutive noise.

    ``y = sum_k h_k * x**k`` over the configured orders, each ``h_k`` a fresh
    random multi-notch filter, then rescaled to the input's peak.
    """
    cfg = cfg or AugmentConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros_like(x)
    nyq = SAMPLE_RATE / 2
    for order in cfg.nonlinear_orders:
        centers = rng.uniform(50.0, nyq - 50.0, cfg.notch_count)
        widths = rng.uniform(*cfg.notch_width_hz, cfg.notch_count)
        depths = rng.uniform(*cfg.notch_depth_db, cfg.notch_count)
        taps = multi_notch_fir(centers, widths, depths, cfg.notch_taps)
        y += apply_fir(x ** order, taps)
    peak_in, peak_out = np.abs(x).max(initial=0.0), np.abs(y).max(initial=0.0)
    if peak_out == 0.0:
        return np.zeros(len(x), dtype=np.float32)
    return (y * (peak_in / peak_out)).astype(np.float32)


def isd_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator,
              fraction: float = 0.1) -> np.ndarray:
    """Add impulsive noise at a random ``fraction`` of positions at exactly ``snr_db``.

    The impulse at sample ``i`` is ``x[i] * u`` with ``u ~ U(-1, 1)``, then
    all impulses are scaled together to hit the requested SNR.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    count = max(1, int(round(fraction * n))) if n else 0
    idx = rng.choice(n, size=count, replace=False) if count else np.array([], dtype=int)
    noise = np.zeros_like(x)
    noise[idx] = x[idx] * rng.uniform(-1.0, 1.0, count)
    p_noise = float(np.sum(noise ** 2))
    if p_noise == 0.0:
        return x.astype(np.float32)
    p_sig = float(np.sum(x ** 2))
    gain = math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return (x + gain * noise).astype(np.float32)


def rawboost_isd_additive(x: np.ndarray, rng: np.random.Generator,
                          cfg: "AugmentConfig | None" = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    return isd_noise(x, _draw(rng, cfg.isd_snr_db), rng, cfg.isd_fraction)


def narrowband_fir(x: np.ndarray, rng: np.random.Generator,
                   cfg: "AugmentConfig | None" = None) -> np.ndarray:
    """Telephony band-limiting with random cut-offs."""
    cfg = cfg or AugmentConfig()
    taps = bandpass_fir(_draw(rng, cfg.fir_low_hz), _draw(rng, cfg.fir_high_hz), cfg.fir_taps)
    return apply_fir(x, taps).astype(np.float32)


# -- spectrogram masks -------------------------------------------------------------


def mask_block(spec: np.ndarray, axis: int, start: int, width: int, value: float) -> np.ndarray:
    out = np.array(spec, copy=True)
    index = [slice(None)] * out.ndim
    index[axis] = slice(start, start + width)
    out[tuple(index)] = value
    return out


def _random_mask(spec: np.ndarray, axis: int, max_width: int, rng: np.random.Generator):
    size = spec.shape[axis]
    if max_width > size:
        raise ValueError(f"mask width {max_width} exceeds axis size {size}")
    width = int(rng.integers(0, max_width + 1)) if max_width > 0 else 0
    if width == 0:
        return np.array(spec, copy=True)
    start = int(rng.integers(0, size - width + 1))
    return mask_block(spec, axis, start, width, float(spec.mean()))


def time_mask(spec: np.ndarray, max_width: int, rng: np.random.Generator) -> np.ndarray:
    """Fill a random run of up to ``max_width`` frames with the spectrogram mean."""
    return _random_mask(spec, 1, max_width, rng)


def freq_mask(spec: np.ndarray, max_bands: int, rng: np.random.Generator) -> np.ndarray:
    """Fill a random run of up to ``max_bands`` mel bins with the spectrogram mean."""
    return _random_mask(spec, 0, max_bands, rng)


# -- registry and policies -----------------------------------------------------------


@dataclass(frozen=True)
class Augmentation:
    name: str
    domain: str  # "wave" or "spec"
    fn: Callable[[np.ndarray, np.random.Generator, AugmentConfig], np.ndarray]


AUGMENTATIONS: dict[str, Augmentation] = {
    a.name: a
    for a in [
        Augmentation("pitch_shift", "wave",
                     lambda x, rng, c: pitch_shift(x, _draw(rng, c.pitch_semitones))),
        Augmentation("time_stretch", "wave",
                     lambda x, rng, c: time_stretch(x, _draw(rng, c.stretch_rate))),
        Augmentation("rawboost_convolutive", "wave", rawboost_convolutive),
        Augmentation("rawboost_isd_additive", "wave", rawboost_isd_additive),
        Augmentation("narrowband_fir", "wave", narrowband_fir),
        Augmentation("time_mask", "spec", lambda s, rng, c: time_mask(s, c.time_mask_max, rng)),
        Augmentation("freq_mask", "spec", lambda s, rng, c: freq_mask(s, c.freq_mask_max, rng)),
    ]
}


def apply_wave(name: str, x: np.ndarray, rng: np.random.Generator,
               cfg: AugmentConfig) -> np.ndarray:
    """One waveform augmentation followed by the +-1.5 headroom clip."""
    return np.clip(AUGMENTATIONS[name].fn(x, rng, cfg), -HEADROOM, HEADROOM)


def choose_augmentations(cfg: AugmentConfig, rng: np.random.Generator, mode: str) -> list[str]:
    """Pick which augmentations to run, in declared order.

    ``x1``: each independently with ``p_x1``. ``stage2``: each with
    ``p_stage2``. ``x2``: a subset drawn uniformly from all ``2**k`` subsets.
    ``none``: nothing.
    """
    if mode == "none":
        return []
    p = {"x1": cfg.p_x1, "stage2": cfg.p_stage2, "x2": 0.5}.get(mode)
    if p is None:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    draws = rng.random(len(cfg.order))
    return [name for name, u in zip(cfg.order, draws) if u < p]


def augmented_features(wave: np.ndarray, cfg: AugmentConfig, frontend: FrontendConfig,
                       rng: np.random.Generator, mode: str) -> tuple[np.ndarray, list[str]]:
    """Run a policy on one waveform and return (log-mel, names applied).

    Waveform augmentations run before feature extraction and spectrogram
    ones after, each group in declared order.
    """
    chosen = choose_augmentations(cfg, rng, mode)
    x = np.asarray(wave, dtype=np.float32)
    for name in chosen:
        if AUGMENTATIONS[name].domain == "wave":
            x = apply_wave(name, x, rng, cfg)
    spec = waveform_to_features(x, frontend)
    for name in chosen:
        aug = AUGMENTATIONS[name]
        if aug.domain == "spec":
            spec = aug.fn(spec, rng, cfg)
    return spec, chosen


def apply_policy_x1(wave, cfg: AugmentConfig, frontend: FrontendConfig, rng):
    return augmented_features(wave, cfg, frontend, rng, "x1")


def apply_policy_x2(wave, cfg: AugmentConfig, frontend: FrontendConfig, rng):
    return augmented_features(wave, cfg, frontend, rng, "x2")


def parse_aug_spec(spec: str) -> tuple[str, list[float]]:
    """``"pitch_shift:12"`` -> ``("pitch_shift", [12.0])``."""
    name, _, rest = spec.partition(":")
    if name not in AUGMENTATIONS:
        raise KeyError(name)
    args = [float(v) for v in rest.split(",") if v.strip()] if rest else []
    return name, args


def apply_named(name: str, args: list[float], data: np.ndarray, rng: np.random.Generator,
                cfg: AugmentConfig | None = None) -> np.ndarray:
    """Run one augmentation with optional explicit arguments (CLI preview)."""
    cfg = cfg or AugmentConfig()
    if name == "pitch_shift" and args:
        return pitch_shift(data, args[0])
    if name == "time_stretch" and args:
        return time_stretch(data, args[0])
    if name == "rawboost_isd_additive" and args:
        return isd_noise(data, args[0], rng, cfg.isd_fraction)
    if name == "narrowband_fir" and len(args) >= 2:
        return apply_fir(data, bandpass_fir(args[0], args[1], cfg.fir_taps)).astype(np.float32)
    if name == "time_mask" and args:
        return time_mask(data, int(args[0]), rng)
    if name == "freq_mask" and args:
        return freq_mask(data, int(args[0]), rng)
    return AUGMENTATIONS[name].fn(data, rng, cfg)
