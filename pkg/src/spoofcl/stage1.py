"""Representation learning: pair sampling, the contrastive loss and its training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import rng_stream
from .backbone import ContrastiveModel
from .checkpoint import read_container, write_container
from .config import RunConfig, Stage1Config
from .manifest import ManifestEntry
from .pipeline import FeatureJob, FeaturePipeline, WaveformStore

log = logging.getLogger(__name__)

# stream ids separating the RNG uses of one seed
TRAIN_STREAM = 1
VAL_STREAM = 2


class SamplingError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    l_sa: float
    l_ca: float
    l_con: float
    alpha: float
    clipped: bool = False


def cosine_sim(a, b, eps: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine_sim: shapes {a.shape} and {b.shape} differ")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), eps))


def _pair_term(cos: ad.Tensor, same: np.ndarray, clamp: float) -> ad.Tensor:
    """Per-pair ``-log(cos)`` for same-class pairs, ``-log(1 - cos)`` otherwise."""
    c = ad.clamp(cos, clamp, 1.0 - clamp)
    same = np.asarray(same, dtype=cos.dtype)
    return -(ad.log(c) * same + ad.log(1.0 - c) * (1.0 - same))


def contrastive_terms(z1: ad.Tensor, z2: ad.Tensor, z12: ad.Tensor | None, same,
                      eps: float = 1e-8, clamp: float = 1e-7):
    """Per-pair (l_sa, l_ca) tensors from projected embeddings; l_ca is None without z12."""
    l_sa = _pair_term(ad.cosine_similarity(z1, z2, eps), same, clamp)
    l_ca = None
    if z12 is not None:
        l_ca = _pair_term(ad.cosine_similarity(z1, z12, eps), same, clamp)
    return l_sa, l_ca


def contrastive_loss(z1, z2, z12, same_class, alpha: float = 0.2,
                     eps: float = 1e-8, clamp: float = 1e-7) -> tuple[ad.Tensor, LossBreakdown]:
    """Batch-mean ``l_sa + alpha * l_ca`` and its float breakdown.

    ``z1``, ``z2``, ``z12`` are projected embeddings (vectors or (B, d)
    batches) of the x1 self-attention, x2 self-attention and cross-attention
    branches. Cosines are clamped into ``[clamp, 1 - clamp]`` before the log.
    """
    z1, z2 = _as_t(z1), _as_t(z2)
    z12 = None if z12 is None else _as_t(z12)
    same = np.asarray(same_class, dtype=bool)
    l_sa, l_ca = contrastive_terms(z1, z2, z12, same, eps, clamp)
    sa = l_sa.mean()
    if l_ca is None:
        total = sa
        ca_value = 0.0
    else:
        ca = l_ca.mean()
        total = sa + ca * alpha
        ca_value = ca.item()
    return total, LossBreakdown(sa.item(), ca_value, total.item(), alpha)


def _as_t(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def lr_at(epoch: int, cfg: Stage1Config | None = None, base_lr: float | None = None,
          gamma: float | None = None, step: int | None = None) -> float:
    """Step-decayed rate: ``lr * gamma ** (epoch // step)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    cfg = cfg or Stage1Config()
    base_lr = cfg.lr if base_lr is None else base_lr
    gamma = cfg.lr_gamma if gamma is None else gamma
    step = cfg.lr_step_epochs if step is None else step
    return base_lr * gamma ** (epoch // step)


class PairSampler:
    """Chooses the partner x2 for a given x1.

    Positive and negative partners are equally likely. A spoof partner is
    drawn from the TTS or VC pool with equal probability, then uniformly
    within that pool.
    """

    def __init__(self, entries: Sequence[ManifestEntry]):
        self.entries = list(entries)
        self.bonafide = [e for e in self.entries if e.label == "bonafide"]
        self.spoof = {
            sub: [e for e in self.entries if e.label == "spoof" and e.subtype == sub]
            for sub in ("TTS", "VC")
        }

    def partner(self, x1: ManifestEntry,
                rng: np.random.Generator) -> tuple[ManifestEntry, bool, str | None]:
        """Return (partner, same_class, spoof subtype drawn or None)."""
        positive = bool(rng.random() < 0.5)
        want = x1.label if positive else ("spoof" if x1.label == "bonafide" else "bonafide")
        subtype = None
        if want == "spoof":
            subtype = "TTS" if rng.random() < 0.5 else "VC"
            pool = self.spoof[subtype]
        else:
            pool = self.bonafide
        if not pool:
            raise SamplingError(
                f"no {want}{'/' + subtype if subtype else ''} entries to pair with {x1.utt_id}"
            )
        return pool[int(rng.integers(len(pool)))], positive, subtype


def sample_pair(sampler: PairSampler, index: int, rng: np.random.Generator):
    """x1 is the ``index``-th entry (sequential epoch coverage); x2 from the sampler."""
    x1 = sampler.entries[index % len(sampler.entries)]
    x2, same, _ = sampler.partner(x1, rng)
    return x1, x2, same


def _branches(model: ContrastiveModel, x1, x2, cross_branch: bool):
    r1, r2, r12 = model.encoder.encode_triplet(x1, x2, with_cross=cross_branch)
    z12 = model.project(r12) if r12 is not None else None
    return model.project(r1), model.project(r2), z12


def train_step(model: ContrastiveModel, opt: ad.Adam, x1: np.ndarray, x2: np.ndarray,
               same: np.ndarray, cfg: Stage1Config, lr: float,
               cross_branch: bool = True) -> LossBreakdown:
    """One optimiser update on a batch of pairs; returns batch-mean losses.

    The batch is processed in micro-batches whose gradients accumulate, which
    is exact because nothing in the encoder couples samples.
    """
    n = len(x1)
    if n == 0:
        raise ValueError("empty batch")
    same = np.asarray(same, dtype=bool)
    model.zero_grad()
    sums = np.zeros(2)
    try:
        for start in range(0, n, cfg.micro_batch):
            sl = slice(start, start + cfg.micro_batch)
            z1, z2, z12 = _branches(model, x1[sl], x2[sl], cross_branch)
            l_sa, l_ca = contrastive_terms(z1, z2, z12, same[sl], cfg.cos_eps, cfg.sim_clamp)
            loss = l_sa.sum()
            sums[0] += float(l_sa.data.astype(np.float64).sum())
            if l_ca is not None:
                loss = loss + l_ca.sum() * cfg.alpha
                sums[1] += float(l_ca.data.astype(np.float64).sum())
            (loss * (1.0 / n)).backward()
    except ad.NonFiniteError as exc:
        raise TrainingDivergedError(str(exc)) from exc
    l_sa_m, l_ca_m = sums / n
    l_con = l_sa_m + cfg.alpha * l_ca_m
    if not math.isfinite(l_con):
        raise TrainingDivergedError(f"non-finite contrastive loss {l_con}")
    norm = ad.clip_grad_norm(model.parameters(), cfg.grad_clip)
    if not math.isfinite(norm):
        raise TrainingDivergedError("non-finite gradient norm")
    if norm > cfg.grad_clip:
        log.debug("gradient norm %.4g clipped to %.4g", norm, cfg.grad_clip)
    opt.step(lr)
    return LossBreakdown(float(l_sa_m), float(l_ca_m), float(l_con), cfg.alpha,
                         bool(norm > cfg.grad_clip))


def evaluate_loss(model: ContrastiveModel, x1, x2, same, cfg: Stage1Config) -> LossBreakdown:
    """Mean losses without updating anything."""
    same = np.asarray(same, dtype=bool)
    sums = np.zeros(2)
    with ad.no_grad():
        for start in range(0, len(x1), cfg.micro_batch):
            sl = slice(start, start + cfg.micro_batch)
            z1, z2, z12 = _branches(model, x1[sl], x2[sl], True)
            l_sa, l_ca = contrastive_terms(z1, z2, z12, same[sl], cfg.cos_eps, cfg.sim_clamp)
            sums += [l_sa.data.astype(np.float64).sum(), l_ca.data.astype(np.float64).sum()]
    l_sa_m, l_ca_m = sums / len(x1)
    l_con = l_sa_m + cfg.alpha * l_ca_m
    return LossBreakdown(float(l_sa_m), float(l_ca_m), float(l_con), cfg.alpha)


def select_best(values: Sequence[float]) -> int:
    """Index of the smallest value; earliest wins ties."""
    if not values:
        raise ValueError("no epochs to choose from")
    return int(np.argmin(np.asarray(values, dtype=np.float64)))


def save_model(path, model, meta: dict) -> Path:
    return write_container(path, model.state_dict(), meta)


def load_contrastive_model(path, cfg: RunConfig | None = None) -> ContrastiveModel:
    box = read_container(path)
    run = cfg or RunConfig.from_dict(box.meta["config"])
    model = ContrastiveModel(run.backbone, seed=run.seed)
    model.load_state_dict(box.tensors)
    return model


@dataclass
class Stage1Result:
    best_path: Path
    best_epoch: int
    val_losses: list[float]
    checkpoints: list[Path]


LOG_HEADER = "epoch\tlr\ttrain_l_sa\ttrain_l_ca\ttrain_l_con\tval_l_con"


def run_stage1(cfg: RunConfig, train: Sequence[ManifestEntry], val: Sequence[ManifestEntry],
               out_dir) -> Stage1Result:
    """Train the encoder for ``cfg.stage1.epochs`` epochs; keep the lowest-val-loss epoch.

    Writes ``stage1_epochNNN.ckpt`` per epoch and ``stage1_log.tsv``.
    """
    s1 = cfg.stage1
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = ContrastiveModel(cfg.backbone, seed=cfg.seed)
    if s1.init_checkpoint:
        box = read_container(s1.init_checkpoint)
        enc = {k[len("encoder."):]: v for k, v in box.tensors.items() if k.startswith("encoder.")}
        model.encoder.load_state_dict(enc)
        log.info("encoder initialised from %s", s1.init_checkpoint)
    opt = ad.Adam(model.parameters(), lr=s1.lr)
    store = WaveformStore(cfg.frontend)
    train_sampler = PairSampler(train)
    val_sampler = PairSampler(val)

    rows = [LOG_HEADER]
    val_losses: list[float] = []
    paths: list[Path] = []
    with FeaturePipeline(cfg.augment, cfg.frontend, cfg.workers) as pipe:
        # validation pairs: fixed seed, identical every epoch
        vpairs = [sample_pair(val_sampler, i, rng_stream(cfg.seed, VAL_STREAM, i))
                  for i in range(len(val))]
        vmode = ("x1", "x2") if s1.val_augment else ("none", "none")
        vx1 = pipe.run([FeatureJob(store[a], vmode[0], (cfg.seed, VAL_STREAM, i, 1))
                        for i, (a, _, _) in enumerate(vpairs)])
        vx2 = pipe.run([FeatureJob(store[b], vmode[1], (cfg.seed, VAL_STREAM, i, 2))
                        for i, (_, b, _) in enumerate(vpairs)])
        vsame = np.array([s for _, _, s in vpairs])

        for epoch in range(s1.epochs):
            lr = lr_at(epoch, s1)
            totals = np.zeros(3)
            clipped = 0
            for start in range(0, len(train), s1.batch_size):
                idx = range(start, min(start + s1.batch_size, len(train)))
                pairs = [sample_pair(train_sampler, i, rng_stream(cfg.seed, TRAIN_STREAM, epoch, i))
                         for i in idx]
                x1 = pipe.run([FeatureJob(store[a], "x1", (cfg.seed, TRAIN_STREAM, epoch, i, 1))
                               for i, (a, _, _) in zip(idx, pairs)])
                x2 = pipe.run([FeatureJob(store[b], "x2", (cfg.seed, TRAIN_STREAM, epoch, i, 2))
                               for i, (_, b, _) in zip(idx, pairs)])
                same = np.array([s for _, _, s in pairs])
                bd = train_step(model, opt, x1, x2, same, s1, lr)
                totals += np.array([bd.l_sa, bd.l_ca, bd.l_con]) * len(idx)
                clipped += bd.clipped
            train_mean = totals / len(train)
            vl = evaluate_loss(model, vx1, vx2, vsame, s1).l_con
            if not math.isfinite(vl):
                raise TrainingDivergedError(f"epoch {epoch}: non-finite validation loss")
            val_losses.append(vl)
            path = out_dir / f"stage1_epoch{epoch:03d}.ckpt"
            save_model(path, model, {"kind": "stage1", "epoch": epoch, "val_l_con": vl,
                                     "config": cfg.to_dict()})
            paths.append(path)
            rows.append("\t".join([str(epoch), repr(lr), *(repr(float(v)) for v in train_mean),
                                   repr(vl)]))
            log.info("stage1 epoch %d lr %.3g train l_con %.5f val l_con %.5f",
                     epoch, lr, train_mean[2], vl)
            if clipped:
                log.info("stage1 epoch %d: gradient norm clipped on %d step(s)", epoch, clipped)
    (out_dir / "stage1_log.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    best = select_best(val_losses)
    return Stage1Result(paths[best], best, val_losses, paths)
