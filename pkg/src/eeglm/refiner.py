"""Latent-expert cross-attention refiner with an orthogonality penalty."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError
from .hashing import fnv1a_64
from .nn import FeedForward, LayerNorm, Module, MultiHeadAttention


@dataclass(frozen=True)
class RefinerConfig:
    """Sizes for the latent-expert refiner."""

    n_experts: int = 16
    embed_dim: int = 16
    n_heads: int = 8
    ffn_mult: int = 4

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"need at least one latent expert, got {self.n_experts}")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} not divisible by {self.n_heads} heads"
            )


@dataclass(frozen=True)
class ExpertSummary:
    """Refined per-expert summaries plus the aggregation weights over tokens."""

    s_sem: Tensor = field(repr=False)
    attention_map: np.ndarray = field(repr=False)


class HashedTextEmbedder:
    """Deterministic per-word hashed embedding: one L2-normalized row per word."""

    def __init__(self, embed_dim: int, n_hashes: int = 4):
        if embed_dim < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {embed_dim}")
        if n_hashes < 1:
            raise ConfigError(f"hash count must be >= 1, got {n_hashes}")
        self.embed_dim = embed_dim
        self.n_hashes = n_hashes

    def embed(self, text: str) -> np.ndarray:
        words = text.lower().split()
        rows = np.zeros((len(words), self.embed_dim))
        for i, word in enumerate(words):
            for seed in range(self.n_hashes):
                rows[i, fnv1a_64(f"{seed}:{word}") % self.embed_dim] += 1.0
        rows /= self.n_hashes
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        return rows / np.maximum(norms, 1e-12)


class SemanticRefiner(Module):
    """Two-stage cross-attention: calibrate experts on text, aggregate tokens."""

    def __init__(self, cfg: RefinerConfig, rng: np.random.Generator):
        self.cfg = cfg
        e = cfg.embed_dim
        self.q_lat = ad.parameter((cfg.n_experts, e), rng, fan_in=e)
        self.cal_attn = MultiHeadAttention(e, cfg.n_heads, rng)
        self.cal_ln = LayerNorm(e)
        self.cal_ffn = FeedForward(e, e * cfg.ffn_mult, rng)
        self.agg_attn = MultiHeadAttention(e, cfg.n_heads, rng)
        self.proj_ln = LayerNorm(e)
        self.proj_ffn = FeedForward(e, e * cfg.ffn_mult, rng)

    def _check_width(self, arr_shape, what: str) -> None:
        if arr_shape[-1] != self.cfg.embed_dim:
            raise ShapeError(
                f"{what} has width {arr_shape[-1]}, refiner expects {self.cfg.embed_dim}"
            )

    def calibrate(self, h_text: Tensor | np.ndarray) -> Tensor:
        """Prime the latent experts on the profile text embedding."""
        h_text = h_text if isinstance(h_text, Tensor) else Tensor(np.asarray(h_text))
        if h_text.shape[0] == 0:
            raise ShapeError("text embedding is empty: nothing to calibrate on")
        self._check_width(h_text.shape, "text embedding")
        attended = self.cal_attn(self.q_lat, h_text)
        return ad.add(self.cal_ffn(self.cal_ln(attended)), attended)

    def aggregate(self, q_calib: Tensor, z_q: Tensor | np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Let calibrated experts pool the quantized token stream."""
        z_q = z_q if isinstance(z_q, Tensor) else Tensor(np.asarray(z_q))
        if z_q.shape[0] == 0:
            raise ShapeError("token stream is empty: nothing to aggregate")
        self._check_width(z_q.shape, "token stream")
        out = self.agg_attn(q_calib, z_q)
        return out, self.agg_attn.last_attention.copy()

    def project(self, o_star: Tensor) -> Tensor:
        """Final alignment head: normalized residual feed-forward."""
        return self.proj_ln(ad.add(o_star, self.proj_ffn(o_star)))

    def __call__(self, h_text: Tensor | np.ndarray, z_q: Tensor | np.ndarray) -> ExpertSummary:
        q_calib = self.calibrate(h_text)
        out, attention_map = self.aggregate(q_calib, z_q)
        return ExpertSummary(s_sem=self.project(out), attention_map=attention_map)

    def orth_loss(self) -> Tensor:
        """Frobenius deviation of the normalized expert Gram matrix from I."""
        if not np.any(self.q_lat.data):
            raise NumericError("latent experts are all zero: Gram normalizer vanishes")
        gram = ad.matmul(self.q_lat, ad.transpose(self.q_lat))
        fro_sq = ad.sum_(ad.mul(self.q_lat, self.q_lat))
        dev = ad.sub(ad.div(gram, fro_sq), np.eye(self.cfg.n_experts))
        return ad.sqrt(ad.sum_(ad.mul(dev, dev)))


def attention_rows(
    attention_map: np.ndarray, channels: tuple[str, ...], n_patches: int
) -> list[tuple[int, str, int, float]]:
    """Flatten an expert-by-token attention map to (expert, channel, patch, weight)."""
    n_experts, n_tokens = attention_map.shape
    if n_tokens != len(channels) * n_patches:
        raise ShapeError(
            f"attention map covers {n_tokens} tokens, expected "
            f"{len(channels)} channels x {n_patches} patches"
        )
    rows = []
    for e in range(n_experts):
        for t in range(n_tokens):
            rows.append((e, channels[t // n_patches], t % n_patches, float(attention_map[e, t])))
    return rows
