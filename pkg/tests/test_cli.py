import csv

import numpy as np
import pytest

from spoofcl.cli import main
from spoofcl.frontend import load_audio, write_wav
from spoofcl.manifest import read_manifest
from spoofcl.metrics import read_scores

from conftest import TINY


def sets(data, extra=()):
    out = []
    for item in TINY + [f"data.train_manifest={data['train']}",
                        f"data.val_manifest={data['val']}"] + list(extra):
        out += ["--set", item]
    return out


def run(capsys, argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def stage1(tiny_data, tmp_path, capsys):
    code, out, _ = run(capsys, ["train-stage1", *sets(tiny_data), "--out", tmp_path / "s1"])
    assert code == 0
    return tmp_path / "s1", out.strip()


@pytest.fixture
def stage2(tiny_data, stage1, tmp_path, capsys):
    code, out, _ = run(capsys, ["train-stage2", *sets(tiny_data), "--backbone", stage1[1],
                                "--out", tmp_path / "s2"])
    assert code == 0
    return tmp_path / "s2", out.strip()


class TestTraining:
    def test_missing_manifest(self, tmp_path, capsys):
        missing = tmp_path / "absent.tsv"
        code, _, err = run(capsys, ["train-stage1", "--set", f"data.train_manifest={missing}",
                                    "--set", f"data.val_manifest={missing}"])
        assert code == 2
        assert str(missing) in err

    def test_unset_manifest(self, capsys):
        code, _, err = run(capsys, ["train-stage1"])
        assert code == 2 and "data.train_manifest" in err

    def test_bad_config_key(self, tiny_data, capsys):
        code, _, err = run(capsys, ["train-stage1", *sets(tiny_data, ["stage1.bogus=1"])])
        assert code == 2 and "bogus" in err

    def test_stage1_outputs(self, stage1):
        out_dir, printed = stage1
        assert printed.endswith("stage1_epoch000.ckpt")
        from spoofcl.stage1 import load_contrastive_model
        load_contrastive_model(printed)
        log = (out_dir / "run.log").read_text()
        assert "seed 0" in log and '"alpha": 0.2' in log
        assert (out_dir / "config.json").is_file()

    def test_stage1_repeatable(self, tiny_data, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, ["train-stage1", *sets(tiny_data), "--out", tmp_path / name])[0] == 0
        for f in ("run.log", "stage1_log.tsv", "stage1_epoch000.ckpt", "config.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f

    def test_stage2_outputs(self, stage2):
        out_dir, printed = stage2
        assert "stage2_epoch" in printed
        assert (out_dir / "stage2_log.tsv").read_text().startswith("epoch\tlr\ttrain_loss\tval_eer")

    def test_stage2_missing_backbone(self, tiny_data, tmp_path, capsys):
        code, _, err = run(capsys, ["train-stage2", *sets(tiny_data), "--backbone",
                                    tmp_path / "none.ckpt"])
        assert code == 2 and "none.ckpt" in err

    def test_stage2_random_backbone(self, tiny_data, tmp_path, capsys):
        code, _, _ = run(capsys, ["train-stage2", *sets(tiny_data, ["stage2.epochs=1"]),
                                  "--backbone", "none", "--out", tmp_path / "s2"])
        assert code == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tiny_data, tmp_path, capsys):
        code, _, err = run(capsys, ["train-stage1", *sets(tiny_data, ["stage1.lr=1e30"]),
                                    "--out", tmp_path / "s1"])
        assert code == 3 and "diverged" in err

    def test_workers_flag(self, tiny_data, stage1, tmp_path, capsys):
        code, out, _ = run(capsys, ["train-stage1", *sets(tiny_data), "--workers", "2",
                                    "--out", tmp_path / "w"])
        assert code == 0
        from spoofcl.checkpoint import read_container
        a = read_container(stage1[1]).tensors
        b = read_container(out.strip()).tensors
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestEvaluate:
    def test_scores_and_eer(self, stage2, tiny_data, tmp_path, capsys):
        code, out, _ = run(capsys, ["evaluate", "--model", stage2[1], "--manifest",
                                    tiny_data["test"], "--scores", tmp_path / "s.tsv"])
        assert code == 0
        label, value = out.strip().split("\t")
        assert label == "EER" and len(value.split(".")[1]) == 4
        assert 0.0 <= float(value) <= 1.0
        recs = read_scores(tmp_path / "s.tsv")
        assert [r.utt_id for r in recs] == [e.utt_id for e in read_manifest(tiny_data["test"])]

    def test_repeatable(self, stage2, tiny_data, tmp_path, capsys):
        for name in ("a.tsv", "b.tsv"):
            run(capsys, ["evaluate", "--model", stage2[1], "--manifest", tiny_data["test"],
                         "--scores", tmp_path / name])
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_bad_checkpoint(self, tiny_data, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        code, _, _ = run(capsys, ["evaluate", "--model", tmp_path / "x.ckpt", "--manifest",
                                  tiny_data["test"], "--scores", tmp_path / "s.tsv"])
        assert code == 2


class TestExportEmbeddings:
    @pytest.mark.parametrize("which", ["stage1", "stage2"])
    def test_rows_and_width(self, which, stage1, stage2, tiny_data, tmp_path, capsys):
        ckpt = stage1[1] if which == "stage1" else stage2[1]
        code, _, _ = run(capsys, ["export-embeddings", "--model", ckpt, "--manifest",
                                  tiny_data["test"], "--out", tmp_path / "e.csv"])
        assert code == 0
        with open(tmp_path / "e.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == len(read_manifest(tiny_data["test"])) + 1
        assert {len(r) for r in rows} == {2 + 16}

    def test_deterministic(self, stage1, tiny_data, tmp_path, capsys):
        for name in ("a.csv", "b.csv"):
            run(capsys, ["export-embeddings", "--model", stage1[1], "--manifest",
                         tiny_data["test"], "--out", tmp_path / name])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.fixture
def sine(tmp_path):
    t = np.arange(96000) / 16000
    path = tmp_path / "sine.wav"
    write_wav(path, 0.5 * np.sin(2 * np.pi * 440.0 * t))
    return path


def peak_hz(x, sr=16000):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.argmax(spec) * sr / len(x)


class TestAugment:
    def test_octave_up(self, sine, tmp_path, capsys):
        code, _, _ = run(capsys, ["augment", sine, tmp_path / "o.wav", "--aug", "pitch_shift:12"])
        assert code == 0
        y = load_audio(tmp_path / "o.wav")
        assert len(y) == 96000
        assert abs(peak_hz(y) - 880.0) <= 0.03 * 880.0

    def test_same_seed_same_bytes(self, sine, tmp_path, capsys):
        for name in ("a.wav", "b.wav"):
            run(capsys, ["augment", sine, tmp_path / name, "--aug", "rawboost_isd_additive",
                         "--seed", "5"])
        assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()

    def test_seed_matters(self, sine, tmp_path, capsys):
        run(capsys, ["augment", sine, tmp_path / "a.wav", "--aug",
                     "rawboost_isd_additive", "--seed", "1"])
        run(capsys, ["augment", sine, tmp_path / "b.wav", "--aug",
                     "rawboost_isd_additive", "--seed", "2"])
        assert (tmp_path / "a.wav").read_bytes() != (tmp_path / "b.wav").read_bytes()

    def test_unknown_name(self, sine, tmp_path, capsys):
        code, _, err = run(capsys, ["augment", sine, tmp_path / "o.wav", "--aug", "reverb"])
        assert code == 2
        assert "pitch_shift" in err and "rawboost_convolutive" in err

    def test_spectrogram_aug(self, sine, tmp_path, capsys):
        code, _, _ = run(capsys, ["augment", sine, tmp_path / "m.npy", "--aug", "time_mask"])
        assert code == 0
        assert np.load(tmp_path / "m.npy").shape == (128, 512)

    def test_missing_input(self, tmp_path, capsys):
        code, _, _ = run(capsys, ["augment", tmp_path / "x.wav", tmp_path / "o.wav",
                                  "--aug", "pitch_shift:1"])
        assert code == 2


class TestMakeSynthetic:
    def test_splits(self, tmp_path, capsys):
        code, out, _ = run(capsys, ["make-synthetic", tmp_path / "d", "--train", "8", "--val", "4",
                                    "--test", "4", "--seconds", "0.25"])
        assert code == 0
        splits = [line.split("\t")[0] for line in out.strip().splitlines()]
        assert splits == ["train", "val", "test"]
        entries = read_manifest(tmp_path / "d" / "train.tsv")
        assert [e.label for e in entries[:4]] == ["bonafide", "spoof", "bonafide", "spoof"]
        assert {e.subtype for e in entries if e.label == "spoof"} == {"TTS", "VC"}

    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, ["make-synthetic", tmp_path / name, "--train", "4", "--val", "2",
                         "--test", "2", "--seconds", "0.25"])
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                       if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_hidden_from_help(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        assert "make-synthetic" not in capsys.readouterr().out
