"""Temporal patch embedding and the dual-stream hierarchical attention encoder.

Patches are embedded by a three-stage conv stack plus a linear projection,
augmented with learned absolute per-patch position embeddings, then pooled
into the five topology levels. A global stream starts from the whole-brain
feature and queries successively finer levels; a local stream starts from
the single-channel features and queries successively coarser levels. Each
stream ends with a self-attention block, and the two are fused back to one
feature vector per (channel, patch).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .signal_io import PatchedSignal
from .topology import BthHierarchy, build_hierarchy, get_montage


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 16
    n_heads: int = 2
    ffn_mult: int = 4
    patch_len: int = 200
    max_patches: int = 64
    montage: str | None = None

    def conv_out_len(self) -> int:
        l1 = (self.patch_len + 2 * 7 - 15) // 8 + 1
        l2 = (l1 + 2 * 1 - 3) // 1 + 1
        l3 = (l2 + 2 * 1 - 3) // 1 + 1
        return l3


@dataclass
class EncoderOutput:
    """H_EEG plus every intermediate needed by fusion oracles and exports."""

    h_eeg: Tensor                      # C x P x E
    features: Tensor                   # shallow per-channel features, C x P x E
    levels: list[Tensor]               # pooled features per level, n_i x P x E
    g_hist: list[Tensor] = field(default_factory=list)  # global stream states
    l_hist: list[Tensor] = field(default_factory=list)  # local stream states


class TemporalEmbedder(Module):
    """Conv stages (1->16->16->16, kernels 15/3/3, strides 8/1/1) + linear."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.conv1_w = ad.parameter((16, 1, 15), rng, fan_in=15)
        self.conv1_b = ad.parameter((16,), rng, fan_in=15)
        self.conv2_w = ad.parameter((16, 16, 3), rng, fan_in=48)
        self.conv2_b = ad.parameter((16,), rng, fan_in=48)
        self.conv3_w = ad.parameter((16, 16, 3), rng, fan_in=48)
        self.conv3_b = ad.parameter((16,), rng, fan_in=48)
        self.proj = Linear(16 * cfg.conv_out_len(), cfg.embed_dim, rng)
        self.patch_len = cfg.patch_len

    def __call__(self, patches: np.ndarray) -> Tensor:
        c, p, w = patches.shape
        if w != self.patch_len:
            raise ConfigError(f"patch length {w} does not match embedder ({self.patch_len})")
        x = Tensor(patches.reshape(c * p, 1, w))
        x = ad.gelu(ad.conv1d(x, self.conv1_w, self.conv1_b, stride=8, padding=7))
        x = ad.gelu(ad.conv1d(x, self.conv2_w, self.conv2_b, stride=1, padding=1))
        x = ad.gelu(ad.conv1d(x, self.conv3_w, self.conv3_b, stride=1, padding=1))
        flat = ad.reshape(x, (c, p, x.shape[1] * x.shape[2]))
        return self.proj(flat)


class CsaBlock(Module):
    """Cross-scale attention step: FFN(LN(attn(q, kv) + q))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg.embed_dim, cfg.n_heads, rng)
        self.ln = LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_mult * cfg.embed_dim, rng)

    def __call__(self, query: Tensor, key_value: Tensor) -> Tensor:
        mixed = self.attn(query, key_value)
        return self.ffn(self.ln(ad.add(mixed, query)))


class SelfBlock(Module):
    """Stream-final step: FFN(LN(MSA(x) + x))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg.embed_dim, cfg.n_heads, rng)
        self.ln = LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_mult * cfg.embed_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        mixed = self.attn(x, x)
        return self.ffn(self.ln(ad.add(mixed, x)))


def _flat(level: Tensor) -> Tensor:
    n, p, e = level.shape
    return ad.reshape(level, (n * p, e))


def _unflat(tokens: Tensor, n: int, p: int, e: int) -> Tensor:
    return ad.reshape(tokens, (n, p, e))


class DualStreamEncoder(Module):
    """Hierarchy-pooled dual-stream attention encoder producing H_EEG."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, hierarchy: BthHierarchy | None = None):
        self.cfg = cfg
        self.hierarchy = hierarchy or build_hierarchy(get_montage(cfg.montage))
        self.embedder = TemporalEmbedder(cfg, rng)
        self.positions = Embedding(cfg.max_patches, cfg.embed_dim, rng)
        # four unshared cross-scale blocks per stream (levels 5 - 1 steps)
        self.global_blocks = [CsaBlock(cfg, rng) for _ in range(4)]
        self.local_blocks = [CsaBlock(cfg, rng) for _ in range(4)]
        self.global_final = SelfBlock(cfg, rng)
        self.local_final = SelfBlock(cfg, rng)
        self.fuse_proj = Linear(2 * cfg.embed_dim, cfg.embed_dim, rng)

    def pool_levels(self, features: Tensor) -> list[Tensor]:
        """Mean-pool C x P x E features into all five hierarchy levels."""
        c, p, e = features.shape
        flat = ad.reshape(features, (c, p * e))
        levels = []
        for level in range(1, 6):
            mat = self.hierarchy.mean_matrix(level)
            pooled = ad.matmul(Tensor(mat), flat)
            levels.append(ad.reshape(pooled, (mat.shape[0], p, e)))
        return levels

    def broadcast_mean_234(self, levels: list[Tensor], p: int, e: int) -> Tensor:
        """Unweighted mean of levels 2..4 broadcast back to channels."""
        c = self.hierarchy.montage.n_channels
        total = None
        for level in (2, 3, 4):
            mat = self.hierarchy.member_matrix(level)
            src = levels[level - 1]
            full = ad.matmul(Tensor(mat), ad.reshape(src, (mat.shape[1], p * e)))
            total = full if total is None else ad.add(total, full)
        return ad.reshape(ad.mul(total, 1.0 / 3.0), (c, p, e))

    def __call__(self, patches: PatchedSignal | np.ndarray) -> EncoderOutput:
        data = patches.data if isinstance(patches, PatchedSignal) else np.asarray(patches)
        c, p, _ = data.shape
        if c != self.hierarchy.montage.n_channels:
            raise ConfigError(
                f"{c} channels in input but montage defines "
                f"{self.hierarchy.montage.n_channels}"
            )
        if p > self.cfg.max_patches:
            raise ConfigError(f"{p} patches exceed configured maximum {self.cfg.max_patches}")
        e = self.cfg.embed_dim

        feats = self.embedder(data)
        feats = ad.add(feats, self.positions(np.arange(p)))
        levels = self.pool_levels(feats)

        g = _flat(levels[0])
        g_hist = [g]
        for block, finer in zip(self.global_blocks, levels[1:]):
            g = block(g, _flat(finer))
            g_hist.append(g)
        l = _flat(levels[4])
        l_hist = [l]
        for block, coarser in zip(self.local_blocks, levels[3::-1]):
            l = block(l, _flat(coarser))
            l_hist.append(l)

        g = self.global_final(g)
        l = self.local_final(l)
        g_hist.append(g)
        l_hist.append(l)

        # fusion: broadcast the (1 x P x E) global stream to channels,
        # concatenate with the local stream, project 2E -> E, then add the
        # channel-broadcast mean of the intermediate levels 2..4
        ones = Tensor(np.ones((c, 1)))
        g_broad = ad.reshape(ad.matmul(ones, ad.reshape(g, (1, p * e))), (c, p, e))
        l_full = _unflat(l, c, p, e)
        fused = self.fuse_proj(ad.concat([g_broad, l_full], axis=-1))
        h_eeg = ad.add(fused, self.broadcast_mean_234(levels, p, e))
        return EncoderOutput(h_eeg=h_eeg, features=feats, levels=levels, g_hist=g_hist, l_hist=l_hist)
