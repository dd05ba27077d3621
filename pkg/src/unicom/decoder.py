"""Stage 1: joint compressor / flow-matching pixel decoder training.

The decoder works on 4x4 pixel patches in data space y = 2x - 1. The
conditioning latent is decompressed to encoder width, spatially aligned to
the 8x8 patch grid (nearest upsampling when tokens were pooled) and added to
the patch embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import MetricsLog, file_hash, load_checkpoint, save_checkpoint
from .compressor import Compressor, Decompressor, LatentStats, normalize_latents
from .encoder import FEATURE_DIM, N_TOKENS, PATCH, Encoder, encode, patchify, unpatchify
from .flow import euler_integrate
from .numerics import Block, LayerNorm, Linear, Module, Parameter, Tensor, TimestepEmbedding
from .toydata import check_image, generate_corpus, render
from .training import TrainState, make_state, run_loop

log = logging.getLogger(__name__)

PATCH_DIM = PATCH * PATCH * 3


@dataclass
class Stage1Config:
    seed: int = 0
    encoder_seed: int = 0
    data_seed: int = 0
    variant: str = "mha"
    n: int = 64
    d: int = 8
    width: int = 64
    depth: int = 3
    heads: int = 4
    lam: float = 0.5
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 3000
    eval_every: int = 250
    train_size: int = 2000
    eval_size: int = 64
    eval_euler_steps: int = 8

    @staticmethod
    def from_dict(obj: dict) -> "Stage1Config":
        return Stage1Config(**{k: v for k, v in obj.items() if k in Stage1Config.__dataclass_fields__})


class PerceptualNet(Module):
    """Frozen random feature extractor on patch tokens.

    Layer 1 maps each 4x4 patch to 64 features; layer 2 merges each 2x2
    neighbourhood of patches, like a stride-2 convolution.
    """

    def __init__(self, seed: int = 1234, hidden: int = 64):
        rng = np.random.default_rng(seed)
        self.fc1 = Linear(PATCH_DIM, hidden, rng)
        self.fc2 = Linear(4 * hidden, hidden, rng)
        self.freeze()

    def forward(self, patches) -> Tensor:
        h = nx.gelu(self.fc1(nx.as_tensor(patches)))
        b, n, c = h.shape
        g = int(round(n**0.5))
        h = h.reshape(b, g // 2, 2, g // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, n // 4, 4 * c)
        return nx.gelu(self.fc2(h))


def upsample_index(n_cond: int, n_out: int = N_TOKENS) -> np.ndarray:
    """Index of the conditioning token covering each of the ``n_out`` patch tokens."""
    g_out, g_in = int(round(n_out**0.5)), int(round(n_cond**0.5))
    rows, cols = np.divmod(np.arange(n_out), g_out)
    k = g_out // g_in
    return (rows // k) * g_in + cols // k


class PixelDecoder(Module):
    def __init__(self, cond_dim: int, n_cond: int, width: int, depth: int, heads: int,
                 rng: np.random.Generator):
        self.n_cond = n_cond
        self.index = None if n_cond == N_TOKENS else upsample_index(n_cond)
        self.inp = Linear(PATCH_DIM, width, rng)
        self.cond = Linear(cond_dim, width, rng)
        self.pos = Parameter(nx.nn.normal(rng, (N_TOKENS, width), 0.02))
        self.time = TimestepEmbedding(width, rng)
        self.blocks = [Block(width, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(width)
        self.out = Linear(width, PATCH_DIM, rng, std=0.0)

    def forward(self, y_t, t, cond: Tensor) -> Tensor:
        """Velocity in patch space, shape (B, 64, 48)."""
        if self.index is not None:
            cond = cond[:, self.index, :]
        h = self.inp(nx.as_tensor(y_t)) + self.cond(cond) + self.pos
        h = h + self.time(np.atleast_1d(t)).reshape(-1, 1, self.pos.shape[1])
        for block in self.blocks:
            h = block(h)
        return self.out(self.norm(h))


class Stage1Model(Module):
    """Frozen encoder + trainable compressor, decompressor and pixel decoder."""

    def __init__(self, cfg: Stage1Config):
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_seed)
        rng = np.random.default_rng(cfg.seed)
        d = FEATURE_DIM if cfg.variant == "none" else cfg.d
        self.latent_dim = d
        self.compressor = Compressor(cfg.variant, FEATURE_DIM, d, N_TOKENS, cfg.n, rng, cfg.heads)
        self.decompressor = Decompressor(d, FEATURE_DIM, cfg.n, rng, cfg.heads)
        self.decoder = PixelDecoder(FEATURE_DIM, cfg.n, cfg.width, cfg.depth, cfg.heads, rng)
        self.perceptual = PerceptualNet()
        self.stats: LatentStats | None = None

    def trainable_modules(self) -> dict[str, Module]:
        return {"compressor": self.compressor, "decompressor": self.decompressor, "decoder": self.decoder}

    def compress_features(self, feats) -> np.ndarray:
        with nx.no_grad():
            return np.concatenate([self.compressor(feats[i:i + 256]).data for i in range(0, len(feats), 256)])

    def latents_for(self, images) -> np.ndarray:
        """Raw (unstandardised) latents for images."""
        return self.compress_features(encode(self.encoder, images))


def to_data(images) -> np.ndarray:
    return 2.0 * np.asarray(images) - 1.0


def recon_loss(model: Stage1Model, images, latent: Tensor, lam: float, t, eps) -> tuple[Tensor, Tensor, Tensor]:
    """L_flow + lam * L_perc for a batch; returns (total, l_flow, l_perc).

    ``eps`` is patch-space noise (B, 64, 48); ``t`` has shape (B,). The
    perceptual term compares the one-step clean estimate
    y_hat = y_t + (1 - t) * v_hat against the data.
    """
    if lam < 0:
        raise ValueError("perceptual weight must be non-negative")
    dtype = nx.get_default_dtype()
    y = patchify(to_data(images)).astype(dtype)
    eps = np.asarray(eps, dtype=dtype)
    t = np.asarray(t, dtype=dtype).reshape(-1, 1, 1)
    y_t = t * y + (1.0 - t) * eps
    cond = model.decompressor(latent)
    v_hat = model.decoder(Tensor(y_t), t.reshape(-1), cond)
    l_flow = nx.mse(v_hat, Tensor(y - eps))
    y_hat = Tensor(y_t) + v_hat * Tensor(1.0 - t)
    with nx.no_grad():
        feat_ref = model.perceptual(Tensor(y))
    l_perc = nx.mse(model.perceptual(y_hat), feat_ref)
    return l_flow + l_perc * lam, l_flow, l_perc


def decode_latents(model: Stage1Model, latents: np.ndarray, steps: int, seed: int = 0) -> np.ndarray:
    """Sample images conditioned on raw latents by Euler integration from noise."""
    latents = np.asarray(latents, dtype=nx.get_default_dtype())
    rng = np.random.default_rng(seed)
    with nx.no_grad():
        cond = model.decompressor(Tensor(latents))
        y0 = rng.standard_normal((len(latents), N_TOKENS, PATCH_DIM)).astype(latents.dtype)

        def v_fn(y, t):
            return model.decoder(Tensor(y), np.full(len(y), t), cond).data

        y1 = euler_integrate(v_fn, y0, steps)
    return np.clip((unpatchify(y1) + 1.0) / 2.0, 0.0, 1.0)


def reconstruct(images, model: Stage1Model, steps: int, seed: int = 0, batch: int = 64) -> np.ndarray:
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    for i in range(0, len(images), batch):
        lat = model.latents_for(images[i:i + batch])
        out.append(decode_latents(model, lat, steps, seed + i))
    out = np.concatenate(out)
    return out[0] if single else out


def psnr(mse_value: float) -> float:
    return float(10.0 * np.log10(1.0 / max(mse_value, 1e-12)))


def evaluate_reconstruction(model: Stage1Model, images, captions, steps: int, seed: int = 0) -> dict:
    recon = reconstruct(images, model, steps, seed)
    per_image = ((recon - images) ** 2).reshape(len(images), -1).mean(axis=1)
    mse_value = float(per_image.mean())
    checker = float(np.mean([check_image(r, c) for r, c in zip(recon, captions)]))
    return {"mse": mse_value, "psnr": psnr(mse_value), "checker": checker}


_feature_cache: dict[tuple, tuple[np.ndarray, np.ndarray, list]] = {}


def corpus_features(encoder_seed: int, data_seed: int, count: int, split: str):
    """(images, features, captions) for a corpus split, cached per process."""
    key = (encoder_seed, data_seed, count, split)
    if key not in _feature_cache:
        corpus = generate_corpus(data_seed, count, split)
        images = np.stack([render(s) for s, _ in corpus]).astype(np.float32)
        feats = encode(Encoder(encoder_seed), images)
        _feature_cache[key] = (images, feats, [c for _, c in corpus])
    return _feature_cache[key]


def stage1_header(model: Stage1Model) -> dict:
    return {
        "kind": "stage1",
        "config": asdict(model.cfg),
        "latent_dim": model.latent_dim,
        "latent_stats": model.stats.to_json() if model.stats is not None else None,
    }


def save_stage1(model: Stage1Model, path, **extra) -> Path:
    tensors = {}
    for prefix, module in model.trainable_modules().items():
        tensors.update({f"{prefix}.{k}": v for k, v in module.state_dict().items()})
    return save_checkpoint(path, {**stage1_header(model), **extra}, tensors)


def load_stage1(path) -> Stage1Model:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "stage1":
        raise ValueError(f"{path} is not a stage-1 checkpoint")
    model = Stage1Model(Stage1Config.from_dict(header["config"]))
    for prefix, module in model.trainable_modules().items():
        module.load_state_dict({k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")})
        module.freeze()
    if header.get("latent_stats"):
        model.stats = LatentStats.from_json(header["latent_stats"])
    model.path = str(path)
    model.sha256 = file_hash(path)
    return model


@dataclass
class Stage1Result:
    checkpoint: Path
    metrics_path: Path
    final: dict = field(default_factory=dict)
    frozen_ok: bool = True


def train_decoder(cfg: Stage1Config, out_dir) -> Stage1Result:
    """Jointly train compressor, decompressor and pixel decoder; encoder stays frozen."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Stage1Model(cfg)
    named = []
    for prefix, module in model.trainable_modules().items():
        named += [(f"{prefix}.{n}", p) for n, p in module.trainable()]
    state: TrainState = make_state(named, cfg.seed, cfg.lr, cfg.weight_decay)
    state.register_frozen("encoder", model.encoder)
    state.register_frozen("perceptual", model.perceptual)

    images, feats, _ = corpus_features(cfg.encoder_seed, cfg.data_seed, cfg.train_size, "train")
    ev_images, _, ev_caps = corpus_features(cfg.encoder_seed, cfg.data_seed, cfg.eval_size, "val")
    rng = np.random.default_rng(cfg.seed + 7919)
    metrics = MetricsLog(out_dir / "metrics.jsonl", variant=variant_name(cfg), seed=cfg.seed)
    ckpt_path = out_dir / "stage1.ckpt"
    running = {"l_flow": [], "l_perc": []}

    def loss_fn(step):
        idx = rng.integers(0, len(images), cfg.batch_size)
        t = rng.random(cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, N_TOKENS, PATCH_DIM))
        latent = model.compressor(Tensor(feats[idx]))
        total, l_flow, l_perc = recon_loss(model, images[idx], latent, cfg.lam, t, eps)
        running["l_flow"].append(float(l_flow.data))
        running["l_perc"].append(float(l_perc.data))
        return total, {"l_flow": float(l_flow.data), "l_perc": float(l_perc.data)}

    def on_eval(step):
        ev = evaluate_reconstruction(model, ev_images, ev_caps, cfg.eval_euler_steps, seed=cfg.seed)
        lf = float(np.mean(running["l_flow"])) if running["l_flow"] else None
        lp = float(np.mean(running["l_perc"])) if running["l_perc"] else None
        running["l_flow"].clear()
        running["l_perc"].clear()
        metrics.write(step, l_flow=lf, l_perc=lp, psnr=ev["psnr"], mse=ev["mse"], checker=ev["checker"])
        log.info("stage1 %s step %d psnr %.2f checker %.3f", variant_name(cfg), step, ev["psnr"], ev["checker"])

    def save(step):
        return save_stage1(model, ckpt_path)

    run_loop(state, cfg.steps, loss_fn, cfg.lr, cfg.warmup, on_eval, cfg.eval_every, save)
    model.stats, _ = normalize_latents(model.compress_features(feats))
    # hashes of the frozen modules after training, for independent audit
    save_stage1(model, ckpt_path, frozen=state.frozen_hashes())
    frozen = state.verify_frozen()
    from .checkpoint import read_metrics
    final = read_metrics(metrics.path)[-1]
    return Stage1Result(ckpt_path, metrics.path, final, all(frozen.values()))


def variant_name(cfg: Stage1Config) -> str:
    proj = "-" if cfg.variant == "none" else cfg.variant
    d = FEATURE_DIM if cfg.variant == "none" else cfg.d
    return f"{proj}_n{cfg.n}_d{d}"
