"""Deterministic toy corpus: band-limited noise whose spectral envelope encodes the class.

Bonafide utterances concentrate energy around 500-900 Hz. Spoofed ones sit
higher, with TTS and VC on two neighbouring sub-bands. The bands stay
inside the pass band of the telephony filter and far enough apart that a
few semitones of pitch shift cannot make the classes overlap.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .augment import rng_stream
from .frontend import SAMPLE_RATE, write_wav
from .manifest import ManifestEntry, write_manifest

# (label, subtype) -> band centre range in Hz
BANDS = {
    ("bonafide", None): (550.0, 850.0),
    ("spoof", "TTS"): (1900.0, 2200.0),
    ("spoof", "VC"): (2500.0, 2800.0),
}
BANDWIDTH_HZ = 300.0
SPLITS = ("train", "val", "test")
SYNTH_STREAM = 7


def band_noise(n: int, center_hz: float, width_hz: float, rng: np.random.Generator,
               sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Gaussian noise shaped by a raised-cosine bump in the spectrum, peak 0.5."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    d = np.abs(f - center_hz) / (width_hz / 2)
    env = np.where(d < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(d, 1.0))), 0.0)
    x = np.fft.irfft(spec * env, n)
    return (0.5 * x / np.max(np.abs(x))).astype(np.float32)


def _kinds(count: int) -> list[tuple[str, str | None]]:
    """Half bonafide, a quarter each TTS and VC, interleaved so that any
    consecutive run of a few utterances holds both classes."""
    cycle = [("bonafide", None), ("spoof", "TTS"), ("bonafide", None), ("spoof", "VC")]
    return [cycle[i % 4] for i in range(count)]


def make_synthetic(out_dir, seed: int = 0, sizes: dict[str, int] | None = None,
                   seconds: float = 2.0) -> dict[str, Path]:
    """Write WAVs plus ``{train,val,test}.tsv`` manifests; returns manifest paths."""
    sizes = sizes or {"train": 400, "val": 100, "test": 100}
    out_dir = Path(out_dir)
    n = int(round(seconds * SAMPLE_RATE))
    manifests = {}
    for split_id, split in enumerate(SPLITS):
        audio_dir = out_dir / split
        audio_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (label, subtype) in enumerate(_kinds(sizes.get(split, 0))):
            rng = rng_stream(seed, SYNTH_STREAM, split_id, i)
            lo, hi = BANDS[(label, subtype)]
            wave = band_noise(n, rng.uniform(lo, hi), BANDWIDTH_HZ, rng)
            utt = f"{split}_{i:04d}"
            path = audio_dir / f"{utt}.wav"
            write_wav(path, wave)
            entries.append(ManifestEntry(utt, str(path), label, subtype))
        manifests[split] = out_dir / f"{split}.tsv"
        write_manifest(manifests[split], entries)
    return manifests
