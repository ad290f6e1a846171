"""Equal error rate, DET points, score files and embedding export.

Scores follow one convention throughout: higher means more spoof-like, and
the detector flags an utterance as spoof when ``score >= threshold``.
False acceptance is a bonafide utterance flagged as spoof; false rejection
is a spoof utterance let through.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCORE_HEADER = "# score=p(spoof)"


class ScoreFileError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    score: float
    label: str

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"{self.utt_id}: non-finite score {self.score}")


def _split(records) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([r.score for r in records], dtype=np.float64)
    spoof = np.array([r.label == "spoof" for r in records], dtype=bool)
    return scores, spoof


def det_curve(scores, is_spoof) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Operating points as the threshold rises past each distinct score.

    Returns ``(thresholds, far, frr)``; point ``i`` uses the decision rule
    ``score >= thresholds[i]``. The first threshold is ``-inf`` (everything
    flagged) and the last ``+inf`` (nothing flagged).
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_spoof = np.asarray(is_spoof, dtype=bool)
    n_spoof = int(is_spoof.sum())
    n_bona = len(scores) - n_spoof
    if n_spoof == 0 or n_bona == 0:
        raise ValueError("EER needs at least one bonafide and one spoof score")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    sp = is_spoof[order]
    uniq, first = np.unique(s, return_index=True)
    # counts strictly below each distinct score
    spoof_below = np.concatenate([[0], np.cumsum(sp)])[first]
    bona_below = np.concatenate([[0], np.cumsum(~sp)])[first]
    far = np.concatenate([(n_bona - bona_below) / n_bona, [0.0]])
    frr = np.concatenate([spoof_below / n_spoof, [1.0]])
    thresholds = np.concatenate([[-np.inf], uniq[1:], [np.inf]])
    return thresholds, far, frr


def eer_from_curve(far: np.ndarray, frr: np.ndarray) -> float:
    """Interpolate the FAR = FRR crossing between adjacent operating points."""
    diff = far - frr
    i = int(np.argmax(diff <= 0))
    if i == 0:
        return float(far[0])
    d0, d1 = diff[i - 1], diff[i]
    lam = d0 / (d0 - d1)
    return float(far[i - 1] + lam * (far[i] - far[i - 1]))


def compute_eer(records: Sequence[ScoreRecord]) -> float:
    scores, spoof = _split(records)
    _, far, frr = det_curve(scores, spoof)
    return eer_from_curve(far, frr)


def eer_from_arrays(scores, is_spoof) -> float:
    _, far, frr = det_curve(scores, is_spoof)
    return eer_from_curve(far, frr)


def write_scores(records: Iterable[ScoreRecord], path) -> None:
    lines = [SCORE_HEADER]
    for r in records:
        lines.append(f"{r.utt_id}\t{r.score!r}\t{r.label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path) -> list[ScoreRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ScoreFileError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            records.append(ScoreRecord(fields[0], float(fields[1]), fields[2]))
        except ValueError as exc:
            raise ScoreFileError(f"{path}:{lineno}: {exc}") from None
    return records


def write_embeddings(path, rows: Iterable[tuple[str, str, np.ndarray]]) -> int:
    """CSV with ``utt_id,label,e0..e{d-1}``; returns the number of data rows."""
    rows = list(rows)
    dim = len(rows[0][2]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utt_id", "label", *(f"e{i}" for i in range(dim))])
        for utt, label, vec in rows:
            writer.writerow([utt, label, *(repr(float(v)) for v in vec)])
    return len(rows)
