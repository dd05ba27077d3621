"""Frozen semantic encoder and a linear-probe readout of its features.

The encoder is randomly initialised from a seed and never trained:
patchify -> fixed linear projection -> fixed 2-D sinusoidal positions ->
two self-attention blocks -> layernorm.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Block, LayerNorm, Linear, Module, Tensor
from .toydata import IMAGE_SIZE

PATCH = 4
GRID_TOKENS = IMAGE_SIZE // PATCH  # 8 patches per side
N_TOKENS = GRID_TOKENS * GRID_TOKENS  # 64
FEATURE_DIM = 144


def patchify(images: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """(B, H, W, 3) -> (B, H/p * W/p, p*p*3), raster order over patches."""
    b, h, w, c = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, g_h, patch, g_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch * patch * c)


def unpatchify(patches: np.ndarray, size: int = IMAGE_SIZE, patch: int = PATCH) -> np.ndarray:
    b = patches.shape[0]
    g = size // patch
    x = patches.reshape(b, g, g, patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, size, size, 3)


def grid_positions(dim: int, grid: int = GRID_TOKENS) -> np.ndarray:
    """2-D sinusoidal table (grid*grid, dim): half the channels encode the row."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    half = dim // 2
    return np.concatenate([nx.sinusoidal(rows, half, 100.0), nx.sinusoidal(cols, dim - half, 100.0)], axis=-1)


class Encoder(Module):
    def __init__(self, seed: int = 0, dim: int = FEATURE_DIM, depth: int = 2, heads: int = 4):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.dim = dim
        self.proj = Linear(PATCH * PATCH * 3, dim, rng)
        self.blocks = [Block(dim, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.positions = grid_positions(dim)
        self.freeze()

    def forward(self, images) -> Tensor:
        images = np.asarray(images, dtype=nx.get_default_dtype())
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError(f"encoder expects (..., {IMAGE_SIZE}, {IMAGE_SIZE}, 3) images, got {images.shape}")
        x = self.proj(Tensor(patchify(images))) + Tensor(self.positions.astype(images.dtype))
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def encode(encoder: Encoder, images, batch: int = 256) -> np.ndarray:
    """FeatureGrid(s) as a plain array: (64, 144) for one image, (B, 64, 144) for a batch."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    with nx.no_grad():
        out = np.concatenate([encoder(images[i:i + batch]).data for i in range(0, len(images), batch)])
    return out[0] if single else out


def linear_probe(features: np.ndarray, labels: np.ndarray, seed: int = 0, train_frac: float = 0.5,
                 epochs: int = 200, lr: float = 0.1) -> float:
    """Held-out accuracy of a softmax-regression probe.

    Features are standardised with training-split statistics and the single
    linear layer is trained by full-batch gradient descent.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("linear_probe needs at least 2 classes")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels])
    order = np.random.default_rng(seed).permutation(len(y))
    cut = int(round(train_frac * len(y)))
    tr, te = order[:cut], order[cut:]
    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0)
    sd[sd < 1e-8] = 1.0
    xs = (features - mu) / sd
    with nx.precision(np.float64):
        rng = np.random.default_rng(seed)
        layer = Linear(xs.shape[1], len(classes), rng, std=0.0)
        x_tr = Tensor(xs[tr])
        for _ in range(epochs):
            loss = nx.cross_entropy(layer(x_tr), y[tr])
            nx.backward(loss)
            for p in layer.parameters():
                p.data -= lr * p.grad
        with nx.no_grad():
            pred = layer(Tensor(xs[te])).data.argmax(axis=-1)
    return float((pred == y[te]).mean())
