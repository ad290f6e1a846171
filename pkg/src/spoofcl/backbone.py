"""Patch-based transformer encoder with self- and cross-attention modes.

The same weights serve three branches: self-attention on x1, self-attention
on x2, and a cross-attention branch whose blocks take queries from the x1
stream and keys/values from the x2 stream. The cross branch's first residual
input is x2's patch embeddings; after that it carries its own residual
stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LayerNorm, Linear, Module, Parameter, Tensor, trunc_normal
from .autodiff.tensor import DEFAULT_DTYPE


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 192
    num_blocks: int = 12
    num_heads: int = 3
    n_mels: int = 128
    n_frames: int = 512
    patch_width: int = 2
    patch_stride: int = 1
    mlp_hidden: int = 768
    projection_dim: int = 512
    init_std: float = 0.02
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.patch_width > self.n_frames:
            raise ValueError("patch wider than the spectrogram")
        for name in ("embed_dim", "num_heads", "n_mels", "patch_width", "patch_stride",
                     "mlp_hidden", "projection_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")

    @property
    def num_patches(self) -> int:
        return (self.n_frames - self.patch_width) // self.patch_stride + 1

    @property
    def patch_size(self) -> int:
        return self.n_mels * self.patch_width


def patchify(spec: np.ndarray, width: int = 2, stride: int = 1) -> np.ndarray:
    """Split (..., mels, frames) into (..., patches, mels * width).

    Patch ``i`` is columns ``[i*stride, i*stride + width)`` of every mel row,
    flattened row-major (mel-major): ``[m0t0, m0t1, m1t0, m1t1, ...]``.
    """
    spec = np.asarray(spec)
    if spec.ndim < 2:
        raise ValueError(f"patchify needs (mels, frames), got shape {spec.shape}")
    if spec.shape[-1] < width:
        raise ValueError(f"{spec.shape[-1]} frames is fewer than the patch width {width}")
    win = np.lib.stride_tricks.sliding_window_view(spec, width, axis=-1)[..., ::stride, :]
    win = np.moveaxis(win, -2, -3)  # (..., patches, mels, width)
    return np.ascontiguousarray(win).reshape(*win.shape[:-2], -1)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, std: float, dtype):
        self.heads = heads
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w_{name}", Parameter(trunc_normal(rng, (dim, dim), std, dtype), dtype))
            setattr(self, f"b_{name}", Parameter(np.zeros(dim), dtype))

    def _split(self, t: Tensor) -> Tensor:
        b, p, d = t.shape
        return t.reshape(b, p, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def project_qkv(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return (
            self._split(ad.linear(h, self.w_q, self.b_q)),
            self._split(ad.linear(h, self.w_k, self.b_k)),
            self._split(ad.linear(h, self.w_v, self.b_v)),
        )

    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        a = ad.scaled_dot_attention(q, k, v)
        b, h, p, dh = a.shape
        merged = a.transpose(0, 2, 1, 3).reshape(b, p, h * dh)
        return ad.linear(merged, self.w_o, self.b_o)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, std: float, dtype):
        self.fc1 = Linear(dim, hidden, rng, std, dtype)
        self.fc2 = Linear(hidden, dim, rng, std, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, cfg: BackboneConfig, rng, dtype):
        self.norm1 = LayerNorm(cfg.embed_dim, cfg.norm_eps, dtype)
        self.attn = Attention(cfg.embed_dim, cfg.num_heads, rng, cfg.init_std, dtype)
        self.norm2 = LayerNorm(cfg.embed_dim, cfg.norm_eps, dtype)
        self.mlp = Mlp(cfg.embed_dim, cfg.mlp_hidden, rng, cfg.init_std, dtype)

    def qkv(self, stream: Tensor):
        return self.attn.project_qkv(self.norm1(stream))

    def finish(self, skip: Tensor, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """``skip + attention(q, k, v)`` followed by the MLP residual."""
        h = skip + self.attn.attend(q, k, v)
        return h + self.mlp(self.norm2(h))


class Encoder(Module):
    """Patch embedding, positional embedding and the block stack."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_size, cfg.embed_dim, rng, cfg.init_std, dtype)
        self.pos_embed = Parameter(
            trunc_normal(rng, (cfg.num_patches, cfg.embed_dim), cfg.init_std, dtype), dtype
        )
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.num_blocks)]
        self.dtype = np.dtype(dtype)

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[-2:] != (self.cfg.n_mels, self.cfg.n_frames):
            raise ValueError(
                f"expected spectrogram of shape ({self.cfg.n_mels}, {self.cfg.n_frames}), "
                f"got {x.shape[-2:]}"
            )
        return x, single

    def embed(self, spec) -> Tensor:
        """(B, mels, frames) -> (B, patches, embed_dim)."""
        x, _ = self._as_batch(spec)
        patches = Tensor(patchify(x, self.cfg.patch_width, self.cfg.patch_stride))
        return self.patch_embed(patches) + self.pos_embed

    def run_self(self, e: Tensor) -> tuple[Tensor, list]:
        """Self-attention over embeddings ``e``; returns final stream and per-block (q, k, v)."""
        stream, cache = e, []
        for block in self.blocks:
            q, k, v = block.qkv(stream)
            cache.append((q, k, v))
            stream = block.finish(stream, q, k, v)
        return stream, cache

    def run_cross(self, e2: Tensor, cache1: list, cache2: list) -> Tensor:
        """Cross-attention stream seeded with x2's embeddings as the first skip input."""
        stream = e2
        for block, (q1, _, _), (_, k2, v2) in zip(self.blocks, cache1, cache2):
            stream = block.finish(stream, q1, k2, v2)
        return stream

    @staticmethod
    def pool(stream: Tensor) -> Tensor:
        return stream.mean(axis=1)

    def encode_self(self, spec) -> Tensor:
        """Mean-pooled self-attention representation, (B, embed_dim) or (embed_dim,)."""
        x, single = self._as_batch(spec)
        r = self.pool(self.run_self(self.embed(x))[0])
        return _check(r[0] if single else r, "encode_self")

    def encode_cross(self, spec1, spec2) -> Tensor:
        """Cross-attention representation: queries from x1, keys/values from x2."""
        x1, single = self._as_batch(spec1)
        x2, _ = self._as_batch(spec2)
        e2 = self.embed(x2)
        _, cache1 = self.run_self(self.embed(x1))
        _, cache2 = self.run_self(e2)
        r = self.pool(self.run_cross(e2, cache1, cache2))
        return _check(r[0] if single else r, "encode_cross")

    def encode_triplet(self, spec1, spec2, with_cross: bool = True):
        """(r1_sa, r2_sa, r12_ca) for batches, sharing the two self-attention passes."""
        x1, _ = self._as_batch(spec1)
        x2, _ = self._as_batch(spec2)
        e2 = self.embed(x2)
        s1, cache1 = self.run_self(self.embed(x1))
        s2, cache2 = self.run_self(e2)
        r1 = _check(self.pool(s1), "encode_self")
        r2 = _check(self.pool(s2), "encode_self")
        if not with_cross:
            return r1, r2, None
        r12 = _check(self.pool(self.run_cross(e2, cache1, cache2)), "encode_cross")
        return r1, r2, r12


def _check(t: Tensor, where: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise ad.NonFiniteError(f"non-finite activations in {where}")
    return t


class ProjectionHead(Module):
    """LayerNorm -> Linear up to ``projection_dim`` -> LayerNorm -> ReLU."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.norm1 = LayerNorm(cfg.embed_dim, cfg.norm_eps, dtype)
        self.fc = Linear(cfg.embed_dim, cfg.projection_dim, rng, cfg.init_std, dtype)
        self.norm2 = LayerNorm(cfg.projection_dim, cfg.norm_eps, dtype)

    def __call__(self, r: Tensor) -> Tensor:
        return ad.relu(self.norm2(self.fc(self.norm1(r))))


class ContrastiveModel(Module):
    """Encoder plus projection head, the trainable unit of representation learning."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, dtype)
        self.projection = ProjectionHead(cfg, rng, dtype)

    def project(self, r: Tensor) -> Tensor:
        return self.projection(r)


def parameter_count(cfg: BackboneConfig) -> int:
    """Learnable scalars in encoder + projection head, counted on a built model."""
    return ContrastiveModel(cfg).num_parameters()
