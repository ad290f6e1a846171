"""Waveform cache and the (optionally parallel) feature-building pipeline.

Each job carries its own RNG key, so results do not depend on how many
worker processes run the jobs or in which order they finish.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, augmented_features, rng_stream
from .frontend import FrontendConfig, load_audio, waveform_to_features
from .manifest import ManifestEntry


class WaveformStore:
    """Loads each manifest entry's audio once and keeps it in memory."""

    def __init__(self, frontend: FrontendConfig):
        self.frontend = frontend
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, entry: ManifestEntry) -> np.ndarray:
        wave = self._cache.get(entry.path)
        if wave is None:
            wave = self._cache[entry.path] = load_audio(entry.path, self.frontend)
        return wave


@dataclass(frozen=True)
class FeatureJob:
    wave: np.ndarray
    mode: str  # augmentation mode: "x1", "x2", "stage2" or "none"
    key: tuple[int, ...]


def _run_job(args) -> np.ndarray:
    job, aug, frontend = args
    if job.mode == "none":
        return waveform_to_features(job.wave, frontend)
    feats, _ = augmented_features(job.wave, aug, frontend, rng_stream(*job.key), job.mode)
    return feats


class FeaturePipeline:
    def __init__(self, aug: AugmentConfig, frontend: FrontendConfig, workers: int = 1):
        self.aug = aug
        self.frontend = frontend
        self.workers = workers
        self._pool = ProcessPoolExecutor(workers) if workers > 1 else None

    def run(self, jobs: Sequence[FeatureJob]) -> np.ndarray:
        """Stacked (len(jobs), mels, frames) float32 features, in job order."""
        args = [(job, self.aug, self.frontend) for job in jobs]
        if self._pool is None:
            feats = [_run_job(a) for a in args]
        else:
            feats = list(self._pool.map(_run_job, args, chunksize=4))
        return np.stack(feats).astype(np.float32, copy=False)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
