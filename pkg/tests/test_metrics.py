import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spoofcl.metrics import (
    SCORE_HEADER,
    ScoreFileError,
    ScoreRecord,
    compute_eer,
    det_curve,
    eer_from_arrays,
    read_scores,
    write_embeddings,
    write_scores,
)


def brute_force_eer(scores, is_spoof):
    """Direct counting at every midpoint threshold, then linear interpolation
    at the first point where FAR no longer exceeds FRR."""
    scores = [float(s) for s in scores]
    bona = [s for s, y in zip(scores, is_spoof) if not y]
    spoof = [s for s, y in zip(scores, is_spoof) if y]
    uniq = sorted(set(scores))
    cuts = [-np.inf] + [(a + b) / 2 for a, b in zip(uniq, uniq[1:])] + [np.inf]
    pts = []
    for t in cuts:
        far = sum(s >= t for s in bona) / len(bona)
        frr = sum(s < t for s in spoof) / len(spoof)
        pts.append((far, frr))
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        if f1 - r1 <= 0:
            if f0 - r0 <= 0:
                return f0
            lam = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + lam * (f1 - f0)
    raise AssertionError("curve never crosses")


def records(bona, spoof):
    return ([ScoreRecord(f"b{i}", s, "bonafide") for i, s in enumerate(bona)]
            + [ScoreRecord(f"s{i}", s, "spoof") for i, s in enumerate(spoof)])


class TestComputeEER:
    def test_perfect_separation(self):
        assert compute_eer(records([0.0] * 5, [1.0] * 7)) == 0.0

    def test_inversion(self):
        assert compute_eer(records([1.0] * 5, [0.0] * 7)) == 1.0

    def test_interleaved_example(self):
        recs = records([0.2, 0.4], [0.3, 0.5])
        assert compute_eer(recs) == pytest.approx(0.5, abs=1e-12)
        assert brute_force_eer([0.2, 0.4, 0.3, 0.5], [0, 0, 1, 1]) == pytest.approx(0.5, abs=1e-12)

    def test_all_tied(self):
        assert compute_eer(records([0.5, 0.5], [0.5, 0.5])) == pytest.approx(0.5)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            compute_eer(records([0.1, 0.2], []))

    def test_matches_oracle_on_500_sets(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for k in range(500):
            n = int(rng.integers(2, 1001))
            y = rng.random(n) < rng.uniform(0.1, 0.9)
            y[0], y[1] = True, False
            s = rng.normal(size=n) + y * rng.uniform(0, 3)
            if k % 3 == 0:
                s = np.round(s, 1)  # heavy ties
            got = eer_from_arrays(s, y)
            assert 0.0 <= got <= 1.0
            worst = max(worst, abs(got - brute_force_eer(s, y)))
        assert worst <= 1e-9

    def test_monotone_transform_invariant(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=300)
        y = rng.random(300) < 0.4
        base = eer_from_arrays(s, y)
        assert eer_from_arrays(np.exp(s), y) == pytest.approx(base, abs=1e-12)
        assert eer_from_arrays(3 * s + 7, y) == pytest.approx(base, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.booleans()), min_size=2, max_size=60))
    def test_label_swap_symmetry(self, pairs):
        s = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        if y.all() or not y.any() or len(np.unique(s)) != len(s):
            return
        assert eer_from_arrays(-s, ~y) == pytest.approx(eer_from_arrays(s, y), abs=1e-12)


class TestDetCurve:
    def test_monotone(self):
        rng = np.random.default_rng(2)
        s = np.round(rng.normal(size=200), 1)
        y = rng.random(200) < 0.5
        t, far, frr = det_curve(s, y)
        assert np.all(np.diff(far) <= 0) and np.all(np.diff(frr) >= 0)
        assert (far[0], frr[0], far[-1], frr[-1]) == (1.0, 0.0, 0.0, 1.0)
        assert t[0] == -np.inf and t[-1] == np.inf


class TestScoreFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        recs = [ScoreRecord(f"u{i}", float(v), "spoof" if i % 2 else "bonafide")
                for i, v in enumerate(rng.random(50))]
        write_scores(recs, tmp_path / "s.tsv")
        assert read_scores(tmp_path / "s.tsv") == recs

    def test_header(self, tmp_path):
        write_scores(records([0.1], [0.9, 0.8]), tmp_path / "s.tsv")
        lines = (tmp_path / "s.tsv").read_text().splitlines()
        assert lines[0] == SCORE_HEADER == "# score=p(spoof)"
        assert len(lines) == 4

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.tsv").write_text("")
        assert read_scores(tmp_path / "e.tsv") == []

    def test_malformed_line_number(self, tmp_path):
        (tmp_path / "m.tsv").write_text(f"{SCORE_HEADER}\na\t0.1\tspoof\nb\tnope\tspoof\n")
        with pytest.raises(ScoreFileError, match=":3:"):
            read_scores(tmp_path / "m.tsv")

    def test_wrong_field_count(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a\t0.1\n")
        with pytest.raises(ScoreFileError, match=":1:"):
            read_scores(tmp_path / "m.tsv")

    def test_non_finite_score(self):
        with pytest.raises(ValueError):
            ScoreRecord("x", float("nan"), "spoof")


class TestEmbeddings:
    def test_rows_and_width(self, tmp_path):
        rng = np.random.default_rng(4)
        rows = [(f"u{i}", "bonafide", rng.normal(size=192)) for i in range(5)]
        assert write_embeddings(tmp_path / "e.csv", rows) == 5
        with open(tmp_path / "e.csv", newline="") as fh:
            table = list(csv.reader(fh))
        assert len(table) == 6
        assert all(len(r) == 2 + 192 for r in table)
        assert table[0][:3] == ["utt_id", "label", "e0"]
        np.testing.assert_array_equal(np.array(table[3][2:], float), rows[2][2])

    def test_deterministic(self, tmp_path):
        rows = [("a", "spoof", np.arange(3.0))]
        write_embeddings(tmp_path / "1.csv", rows)
        write_embeddings(tmp_path / "2.csv", rows)
        assert (tmp_path / "1.csv").read_bytes() == (tmp_path / "2.csv").read_bytes()
