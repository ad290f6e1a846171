"""Command-line entry point: ``spoofcl <command> ...``.

Exit codes: 0 success, 2 bad input (config, manifest, checkpoint, audio,
unknown augmentation), 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AUGMENTATIONS, apply_named, parse_aug_spec, rng_stream
from .backbone import Encoder
from .checkpoint import read_container
from .config import RunConfig, load_config
from .frontend import FrontendConfig, load_audio, waveform_to_features, write_wav
from .manifest import read_manifest
from .metrics import ScoreRecord, compute_eer, write_embeddings, write_scores
from .stage1 import TrainingDivergedError, run_stage1
from .stage2 import load_classifier, run_stage2, score_features
from .synthetic import make_synthetic

log = logging.getLogger("spoofcl")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
AUGMENT_STREAM = 11
PUBLIC_COMMANDS = "train-stage1,train-stage2,evaluate,export-embeddings,augment"


class UsageError(Exception):
    pass


def _setup_logging(log_file: Path | None = None) -> None:
    # no timestamps, so repeated runs write identical logs
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    root = logging.getLogger("spoofcl")
    root.handlers.clear()
    root.setLevel(logging.INFO)
    root.propagate = False
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(fmt)
    root.addHandler(err)
    if log_file is not None:
        fh = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _close_logging() -> None:
    root = logging.getLogger("spoofcl")
    for h in list(root.handlers):
        h.close()
        root.removeHandler(h)


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return load_config(args.config, overrides)


def _need(value, key: str) -> str:
    if not value:
        raise UsageError(f"config key {key} is not set")
    return value


def _prepare_run(cfg: RunConfig, out: str | None, default_sub: str) -> Path:
    out_dir = Path(out) if out else Path(cfg.data.output_dir) / default_sub
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    _setup_logging(out_dir / "run.log")
    _log_config(cfg)
    return out_dir


def _log_config(cfg: RunConfig, seed: int | None = None) -> None:
    log.info("seed %d", cfg.seed if seed is None else seed)
    log.info("resolved config:\n%s", cfg.to_json().rstrip())


def cmd_train_stage1(args) -> int:
    cfg = _run_config(args)
    train = read_manifest(_need(cfg.data.train_manifest, "data.train_manifest"))
    val = read_manifest(_need(cfg.data.val_manifest, "data.val_manifest"))
    out_dir = _prepare_run(cfg, args.out, "stage1")
    result = run_stage1(cfg, train, val, out_dir)
    log.info("selected epoch %d", result.best_epoch)
    print(result.best_path)
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _run_config(args)
    train = read_manifest(_need(cfg.data.train_manifest, "data.train_manifest"))
    val = read_manifest(_need(cfg.data.val_manifest, "data.val_manifest"))
    backbone = None if args.backbone in (None, "none") else Path(args.backbone)
    if backbone is not None and not backbone.is_file():
        raise FileNotFoundError(f"backbone checkpoint not found: {backbone}")
    out_dir = _prepare_run(cfg, args.out, "stage2")
    log.info("backbone %s", backbone if backbone is not None else "random init")
    result = run_stage2(cfg, backbone, train, val, out_dir)
    log.info("selected epoch %d", result.best_epoch)
    print(result.best_path)
    return EXIT_OK


def _features(entries, frontend: FrontendConfig) -> np.ndarray:
    return np.stack([waveform_to_features(load_audio(e.path, frontend), frontend)
                     for e in entries])


def cmd_evaluate(args) -> int:
    _setup_logging()
    model, cfg = load_classifier(args.model)
    _log_config(cfg)
    entries = read_manifest(args.manifest)
    scores = score_features(model, _features(entries, cfg.frontend), cfg.stage2.micro_batch)
    records = [ScoreRecord(e.utt_id, float(s), e.label) for e, s in zip(entries, scores)]
    write_scores(records, args.scores)
    print(f"EER\t{compute_eer(records):.4f}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    """Pre-projection self-attention representations; accepts either stage's checkpoint."""
    _setup_logging()
    box = read_container(args.model)
    cfg = RunConfig.from_dict(box.meta["config"])
    _log_config(cfg)
    encoder = Encoder(cfg.backbone, np.random.default_rng(cfg.seed))
    encoder.load_state_dict({k[len("encoder."):]: v for k, v in box.tensors.items()
                             if k.startswith("encoder.")})
    entries = read_manifest(args.manifest)
    feats = _features(entries, cfg.frontend)
    with ad.no_grad():
        reps = np.concatenate([encoder.encode_self(feats[i:i + 8]).data
                               for i in range(0, len(feats), 8)])
    n = write_embeddings(args.out, [(e.utt_id, e.label, r) for e, r in zip(entries, reps)])
    log.info("wrote %d embeddings of width %d to %s", n, reps.shape[1], args.out)
    return EXIT_OK


def cmd_augment(args) -> int:
    _setup_logging()
    try:
        name, params = parse_aug_spec(args.aug)
    except KeyError:
        raise UsageError(f"unknown augmentation {args.aug.partition(':')[0]!r}; "
                         f"valid names: {', '.join(AUGMENTATIONS)}") from None
    except ValueError as exc:
        raise UsageError(f"bad augmentation arguments in {args.aug!r}: {exc}") from None
    cfg = load_config(args.config, list(args.set or []))
    _log_config(cfg, args.seed)
    wave = load_audio(args.input, cfg.frontend)
    rng = rng_stream(args.seed, AUGMENT_STREAM)
    if AUGMENTATIONS[name].domain == "wave":
        write_wav(args.output, apply_named(name, params, wave, rng, cfg.augment),
                  cfg.frontend.sample_rate)
    else:
        spec = apply_named(name, params, waveform_to_features(wave, cfg.frontend), rng, cfg.augment)
        with open(args.output, "wb") as fh:
            np.save(fh, spec.astype(np.float32))
    log.info("applied %s%s", name, f" {params}" if params else "")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    _setup_logging()
    paths = make_synthetic(args.out, seed=args.seed,
                           sizes={"train": args.train, "val": args.val, "test": args.test},
                           seconds=args.seconds)
    for split, path in paths.items():
        print(f"{split}\t{path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spoofcl",
                                     description="Two-stage contrastive spoofing detector.")
    sub = parser.add_subparsers(dest="command", required=True, metavar=f"{{{PUBLIC_COMMANDS}}}")

    def with_config(p, workers=True):
        p.add_argument("--config", help="run config JSON (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. stage1.epochs=10 (repeatable)")
        if workers:
            p.add_argument("--workers", type=int, help="feature/augmentation worker processes")

    p = sub.add_parser("train-stage1", help="contrastive representation learning")
    with_config(p)
    p.add_argument("--out", help="output folder (default: <data.output_dir>/stage1)")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="classifier head with weighted cross-entropy")
    with_config(p)
    p.add_argument("--backbone", help="stage-1 checkpoint, or 'none' for a random encoder")
    p.add_argument("--out", help="output folder (default: <data.output_dir>/stage2)")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("evaluate", help="score a manifest and print the EER")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scores", required=True, help="output score TSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="write representations as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("augment", help="apply one augmentation to a WAV file")
    p.add_argument("input")
    p.add_argument("output", help="WAV for waveform augmentations, .npy for spectrogram ones")
    p.add_argument("--aug", required=True, metavar="NAME[:ARGS]", help="e.g. pitch_shift:12")
    p.add_argument("--seed", type=int, default=0)
    with_config(p, workers=False)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("make-synthetic")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=400)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, OSError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        _close_logging()


if __name__ == "__main__":
    sys.exit(main())
