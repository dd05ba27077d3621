"""Semantic compressor / decompressor and feature-fusion helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Block, Linear, Module, Tensor

VARIANTS = ("mlp", "mha", "none")


def pool_tokens(x: Tensor, n_out: int) -> Tensor:
    """Mean-pool non-overlapping k x k windows of a square token grid."""
    b, n, dim = x.shape
    if n_out == n:
        return x
    g_in, g_out = int(round(n**0.5)), int(round(n_out**0.5))
    if g_in * g_in != n or g_out * g_out != n_out or g_in % g_out:
        raise nx.ShapeError(f"pool_tokens: cannot pool {n} tokens to {n_out}")
    k = g_in // g_out
    x = x.reshape(b, g_out, k, g_out, k, dim).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n_out, k * k, dim).mean(axis=2)


class Compressor(Module):
    """Z (N x D) -> latent (n x d).

    ``mlp``: per-token D -> 4d -> d. ``mha``: two attention blocks at width D
    without positional encoding, then per-token D -> d. ``none``: identity
    (d must equal D). Sequence reduction pools tokens before the map.
    """

    def __init__(self, variant: str, in_dim: int, out_dim: int, n_in: int, n_out: int,
                 rng: np.random.Generator, heads: int = 4, mlp_ratio: int = 2):
        if variant not in VARIANTS:
            raise ValueError(f"unknown compressor variant '{variant}'")
        if variant == "none" and in_dim != out_dim:
            raise ValueError("identity compressor needs d == D")
        self.variant = variant
        self.in_dim, self.out_dim, self.n_in, self.n_out = in_dim, out_dim, n_in, n_out
        if variant == "mlp":
            self.fc1 = Linear(in_dim, 4 * out_dim, rng)
            self.fc2 = Linear(4 * out_dim, out_dim, rng)
        elif variant == "mha":
            self.blocks = [Block(in_dim, heads, rng, mlp_ratio) for _ in range(2)]
            self.out = Linear(in_dim, out_dim, rng)

    def forward(self, z) -> Tensor:
        z = nx.as_tensor(z)
        if z.ndim != 3 or z.shape[1:] != (self.n_in, self.in_dim):
            raise nx.ShapeError(f"compress: expected (B, {self.n_in}, {self.in_dim}), got {z.shape}")
        z = pool_tokens(z, self.n_out)
        if self.variant == "mlp":
            return self.fc2(nx.gelu(self.fc1(z)))
        if self.variant == "mha":
            for block in self.blocks:
                z = block(z)
            return self.out(z)
        return z


class Decompressor(Module):
    """Latent (n x d) -> conditioning (n x D): per-token linear, then one attention block."""

    def __init__(self, in_dim: int, out_dim: int, n: int, rng: np.random.Generator, heads: int = 4,
                 mlp_ratio: int = 2):
        self.in_dim, self.out_dim, self.n = in_dim, out_dim, n
        self.proj = Linear(in_dim, out_dim, rng)
        self.block = Block(out_dim, heads, rng, mlp_ratio)

    def forward(self, z) -> Tensor:
        z = nx.as_tensor(z)
        if z.ndim != 3 or z.shape[1:] != (self.n, self.in_dim):
            raise nx.ShapeError(f"decompress: expected (B, {self.n}, {self.in_dim}), got {z.shape}")
        return self.block(self.proj(z))


def compress(z, compressor: Compressor) -> Tensor:
    single = np.ndim(z.data if isinstance(z, Tensor) else z) == 2
    out = compressor(z[None] if single else z)
    return out[0] if single else out


def decompress(z, decompressor: Decompressor) -> Tensor:
    single = np.ndim(z.data if isinstance(z, Tensor) else z) == 2
    out = decompressor(z[None] if single else z)
    return out[0] if single else out


class Fusion(Module):
    """Combine uncompressed features Z with the compressed latent.

    ``seq_concat`` projects the latent to width D with a d -> D linear and
    appends it along tokens; ``dim_concat`` appends it along channels.
    """

    def __init__(self, feat_dim: int, latent_dim: int, rng: np.random.Generator):
        self.proj = Linear(latent_dim, feat_dim, rng)

    def forward(self, z, latent, mode: str) -> Tensor:
        z, latent = nx.as_tensor(z), nx.as_tensor(latent)
        if mode == "seq_concat":
            lat = self.proj(latent)
            if lat.shape[-1] != z.shape[-1]:
                raise nx.ShapeError(f"seq_concat: widths {z.shape} vs {lat.shape}")
            return nx.concat([z, lat], axis=-2)
        if mode == "dim_concat":
            if z.shape[-2] != latent.shape[-2]:
                raise nx.ShapeError(f"dim_concat: token counts {z.shape} vs {latent.shape}")
            return nx.concat([z, latent], axis=-1)
        raise ValueError(f"unknown fusion mode '{mode}'")


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_json(obj) -> "LatentStats":
        return LatentStats(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


def normalize_latents(latents: np.ndarray, min_count: int = 100) -> tuple[LatentStats, np.ndarray]:
    """Fit per-channel mean/std over every token of every latent and standardise."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[0] < min_count:
        raise ValueError(f"normalize_latents needs >= {min_count} latents, got {latents.shape[0]}")
    flat = latents.reshape(-1, latents.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for ch, s in enumerate(std):
        if s < 1e-8:
            raise ValueError(f"latent channel {ch} has zero variance")
    stats = LatentStats(mean, std)
    return stats, stats.standardize(latents)
