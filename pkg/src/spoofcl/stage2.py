"""Classifier stage: an MLP head on the (usually frozen) encoder, weighted cross-entropy."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import rng_stream
from .autodiff import BatchNorm1d, Linear, Module
from .autodiff.tensor import DEFAULT_DTYPE
from .backbone import BackboneConfig, Encoder
from .checkpoint import read_container, write_container
from .config import RunConfig
from .manifest import ManifestEntry
from .metrics import eer_from_arrays
from .pipeline import FeatureJob, FeaturePipeline, WaveformStore
from .stage1 import TrainingDivergedError, lr_at, select_best

log = logging.getLogger(__name__)

STAGE2_STREAM = 3
PROB_FLOOR = 1e-12


class ClassifierHead(Module):
    """Linear -> BatchNorm -> ReLU -> Linear, giving two logits (bonafide, spoof)."""

    def __init__(self, in_dim: int = 192, hidden: int = 128, rng=None, std: float = 0.02,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(2)
        self.fc1 = Linear(in_dim, hidden, rng, std, dtype)
        self.bn = BatchNorm1d(hidden, dtype=dtype)
        self.fc2 = Linear(hidden, 2, rng, std, dtype)

    def __call__(self, r: ad.Tensor) -> ad.Tensor:
        return self.fc2(ad.relu(self.bn(self.fc1(r))))


class SpoofClassifier(Module):
    def __init__(self, cfg: BackboneConfig, hidden: int = 128, seed: int = 0, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, dtype)
        self.head = ClassifierHead(cfg.embed_dim, hidden, rng, cfg.init_std, dtype)

    def logits(self, r: ad.Tensor) -> ad.Tensor:
        return self.head(r)


def classify(spec, encoder: Encoder, head: ClassifierHead) -> np.ndarray:
    """Eval-mode ``[p(bonafide), p(spoof)]`` for one spectrogram or a batch."""
    spec = np.asarray(spec)
    single = spec.ndim == 2
    was_training = head.training
    head.eval()
    try:
        with ad.no_grad():
            r = encoder.encode_self(spec[None] if single else spec)
            probs = ad.softmax(head(r)).data
    finally:
        head.train(was_training)
    return probs[0] if single else probs


def weighted_ce(probs, label: int, weights=(1.0, 1.0)) -> float:
    """``-w[label] * log p[label]`` with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    return float(-weights[label] * math.log(max(probs[label], PROB_FLOOR)))


def weighted_ce_loss(logits: ad.Tensor, labels: np.ndarray, weights) -> ad.Tensor:
    """Batch loss ``sum_i w[y_i] * nll_i / sum_i w[y_i]``."""
    labels = np.asarray(labels, dtype=int)
    probs = ad.clamp(ad.softmax(logits), PROB_FLOOR, None)
    onehot = np.eye(2, dtype=logits.dtype)[labels]
    w = np.asarray(weights, dtype=logits.dtype)[labels]
    nll = -(ad.log(probs) * onehot).sum(axis=1)
    return (nll * w).sum() * (1.0 / float(w.sum()))


def tensor_digest(module: Module) -> str:
    h = hashlib.sha256()
    for name, arr in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def load_encoder_state(path) -> dict[str, np.ndarray]:
    box = read_container(path)
    enc = {k[len("encoder."):]: v for k, v in box.tensors.items() if k.startswith("encoder.")}
    if not enc:
        raise KeyError(f"{path}: no encoder tensors")
    return enc


def load_classifier(path) -> tuple[SpoofClassifier, RunConfig]:
    box = read_container(path)
    cfg = RunConfig.from_dict(box.meta["config"])
    model = SpoofClassifier(cfg.backbone, cfg.stage2.hidden, seed=cfg.seed)
    model.load_state_dict(box.tensors)
    model.eval()
    return model, cfg


def _batches(n: int, size: int) -> list[range]:
    """Consecutive batches; a trailing single sample joins the previous batch
    (batch normalisation cannot train on one sample)."""
    out = [range(s, min(s + size, n)) for s in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = range(out[-1].start, last.stop)
    return out


def _representations(encoder: Encoder, feats: np.ndarray, micro: int) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([encoder.encode_self(feats[s:s + micro]).data
                               for s in range(0, len(feats), micro)])


def train_step(model: SpoofClassifier, opt: ad.Adam, feats: np.ndarray, labels: np.ndarray,
               weights, lr: float, freeze_backbone: bool, micro: int = 8) -> float:
    """One update. With a trainable encoder the gradient w.r.t. the pooled
    representations is pushed back micro-batch by micro-batch (recomputing
    activations), which is exact and bounds memory."""
    if len(feats) < 2:
        raise ValueError("batch normalisation needs at least two samples per batch")
    model.head.train()
    r_np = _representations(model.encoder, feats, micro)
    r = ad.Tensor(r_np, requires_grad=not freeze_backbone)
    model.zero_grad()
    try:
        loss = weighted_ce_loss(model.logits(r), labels, weights)
        loss.backward()
        if not freeze_backbone:
            for s in range(0, len(feats), micro):
                rs = model.encoder.encode_self(feats[s:s + micro])
                rs.backward(r.grad[s:s + micro])
    except ad.NonFiniteError as exc:
        raise TrainingDivergedError(str(exc)) from exc
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite classifier loss {value}")
    opt.step(lr)
    return value


def score_features(model: SpoofClassifier, feats: np.ndarray, micro: int = 8) -> np.ndarray:
    """p(spoof) per row, eval mode."""
    model.head.eval()
    r = _representations(model.encoder, feats, micro)
    with ad.no_grad():
        return ad.softmax(model.logits(ad.Tensor(r))).data[:, 1].astype(np.float64)


@dataclass
class Stage2Result:
    best_path: Path
    best_epoch: int
    val_eers: list[float]
    checkpoints: list[Path]


LOG_HEADER = "epoch\tlr\ttrain_loss\tval_eer"


def run_stage2(cfg: RunConfig, backbone_path, train: Sequence[ManifestEntry],
               val: Sequence[ManifestEntry], out_dir) -> Stage2Result:
    """Fit the classifier head; keep the epoch with the smallest validation EER.

    ``backbone_path`` may be a representation-learning checkpoint or None
    (random encoder, useful for the plain cross-entropy baseline with
    ``freeze_backbone`` off).
    """
    s2 = cfg.stage2
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = SpoofClassifier(cfg.backbone, s2.hidden, seed=cfg.seed)
    if backbone_path is not None:
        model.encoder.load_state_dict(load_encoder_state(backbone_path))
    params = model.head.parameters() if s2.freeze_backbone else model.parameters()
    opt = ad.Adam(params, lr=s2.lr)
    frozen_digest = tensor_digest(model.encoder)
    store = WaveformStore(cfg.frontend)
    labels = np.array([e.target for e in train])
    val_labels = np.array([e.target for e in val])
    if len(set(val_labels.tolist())) < 2:
        raise ValueError("validation manifest needs both bonafide and spoof entries")

    rows = [LOG_HEADER]
    eers: list[float] = []
    paths: list[Path] = []
    with FeaturePipeline(cfg.augment, cfg.frontend, cfg.workers) as pipe:
        vmode = "stage2" if s2.val_augment else "none"
        val_feats = pipe.run([FeatureJob(store[e], vmode, (cfg.seed, STAGE2_STREAM, 10**6, i))
                              for i, e in enumerate(val)])
        for epoch in range(s2.epochs):
            lr = lr_at(epoch, base_lr=s2.lr, gamma=s2.lr_gamma, step=s2.lr_step_epochs)
            order = np.arange(len(train))
            if s2.shuffle:
                rng_stream(cfg.seed, STAGE2_STREAM, epoch).shuffle(order)
            total = 0.0
            for batch in _batches(len(train), s2.batch_size):
                idx = order[batch.start:batch.stop]
                feats = pipe.run([FeatureJob(store[train[i]], "stage2",
                                             (cfg.seed, STAGE2_STREAM, epoch, int(i)))
                                  for i in idx])
                loss = train_step(model, opt, feats, labels[idx], s2.class_weights, lr,
                                  s2.freeze_backbone, s2.micro_batch)
                total += loss * len(idx)
            scores = score_features(model, val_feats, s2.micro_batch)
            eer = eer_from_arrays(scores, val_labels == 1)
            eers.append(eer)
            path = out_dir / f"stage2_epoch{epoch:03d}.ckpt"
            write_container(path, model.state_dict(),
                            {"kind": "stage2", "epoch": epoch, "val_eer": eer,
                             "config": cfg.to_dict()})
            paths.append(path)
            rows.append(f"{epoch}\t{lr!r}\t{total / len(train)!r}\t{eer!r}")
            log.info("stage2 epoch %d lr %.3g train loss %.5f val EER %.4f",
                     epoch, lr, total / len(train), eer)
    if s2.freeze_backbone and tensor_digest(model.encoder) != frozen_digest:
        raise RuntimeError("frozen encoder weights changed during classifier training")
    (out_dir / "stage2_log.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    best = select_best(eers)
    return Stage2Result(paths[best], best, eers, paths)
