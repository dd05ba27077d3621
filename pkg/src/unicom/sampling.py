"""Latent and pixel sampling by Euler integration, plus generate/edit entry points."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import toydata as td
from .decoder import PATCH_DIM, Stage1Model, load_stage1
from .encoder import N_TOKENS, unpatchify
from .flow import euler_integrate
from .numerics import Tensor
from .transfusion import UnifiedModel, condition_on_image, edit_batch, joint_loss, load_unified, t2i_batch

log = logging.getLogger(__name__)

__all__ = ["SamplerConfig", "euler_integrate", "generate", "generate_batch", "edit", "edit_images",
           "decode_to_images", "load_pipeline", "write_ppm", "read_ppm"]


@dataclass(frozen=True)
class SamplerConfig:
    """``guidance`` w blends v_uncond + w * (v_cond - v_uncond); w=1 is plain conditional."""

    steps: int = 32
    guidance: float = 1.0
    seed: int = 0
    pixel_steps: int = 8

    def __post_init__(self):
        if self.steps < 1 or self.pixel_steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")


def _noise(seeds, shape, dtype) -> np.ndarray:
    """One independent noise draw per item so results do not depend on batching."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(shape) for s in seeds]).astype(dtype)


def _velocity(model: UnifiedModel, batch, z) -> np.ndarray:
    """Velocity at state ``z`` for the batch's target block (the batch only supplies layout and t)."""
    k = max(i for i, b in enumerate(batch.layout.blocks) if b.role == "target")
    batch.inputs[k] = z
    return model.velocity(model(batch), batch.layout.blocks[k]).data


def decode_to_images(stage1: Stage1Model, latents, seeds, steps: int) -> np.ndarray:
    """Standardised latents -> pixel images via the frozen decompressor and pixel decoder."""
    dtype = nx.get_default_dtype()
    raw = stage1.stats.destandardize(np.asarray(latents, dtype=np.float64)).astype(dtype)
    with nx.no_grad():
        cond = stage1.decompressor(Tensor(raw))
        y0 = _noise([s + 7 for s in seeds], (N_TOKENS, PATCH_DIM), dtype)

        def v_fn(y, t):
            return stage1.decoder(Tensor(y), np.full(len(y), t), cond).data

        y1 = euler_integrate(v_fn, y0, steps)
    return np.clip((unpatchify(y1) + 1.0) / 2.0, 0.0, 1.0)


def generate_latents(model: UnifiedModel, prompts, sampler: SamplerConfig, seeds=None) -> np.ndarray:
    b = len(prompts)
    seeds = [sampler.seed + i for i in range(b)] if seeds is None else list(seeds)
    shape = (model.cfg.n_slots, model.cfg.latent_dim)
    z0 = _noise(seeds, shape, nx.get_default_dtype())
    dummy = np.zeros((b,) + shape, dtype=z0.dtype)
    guided = sampler.guidance != 1.0
    with nx.no_grad():
        def v_fn(z, t):
            tt = np.full(b, t)
            v_c = _velocity(model, t2i_batch(prompts, dummy, tt, dummy), z)
            if not guided:
                return v_c
            v_u = _velocity(model, t2i_batch(prompts, dummy, tt, dummy, drop=np.ones(b, dtype=bool)), z)
            return v_u + sampler.guidance * (v_c - v_u)

        return euler_integrate(v_fn, z0, sampler.steps)


def generate_batch(prompts, stage1: Stage1Model, model: UnifiedModel, sampler: SamplerConfig = SamplerConfig(),
                   seeds=None) -> np.ndarray:
    """Images (B, 32, 32, 3) for caption token lists; item i uses seed ``seeds[i]``."""
    seeds = [sampler.seed + i for i in range(len(prompts))] if seeds is None else list(seeds)
    z = generate_latents(model, prompts, sampler, seeds)
    return decode_to_images(stage1, z, seeds, sampler.pixel_steps)


def generate(prompt, stage1: Stage1Model, model: UnifiedModel, sampler: SamplerConfig = SamplerConfig()) -> np.ndarray:
    return generate_batch([list(prompt)], stage1, model, sampler, [sampler.seed])[0]


def edit_images(images, instructions, stage1: Stage1Model, model: UnifiedModel,
                sampler: SamplerConfig = SamplerConfig(), seeds=None) -> np.ndarray:
    """Edit a batch of source images. Guidance is not applied: no unconditional edit branch is trained."""
    images = np.asarray(images, dtype=np.float32)
    b = len(images)
    seeds = [sampler.seed + i for i in range(b)] if seeds is None else list(seeds)
    src = np.stack([condition_on_image(stage1, im)[0] for im in images])
    z0 = _noise(seeds, src.shape[1:], src.dtype)
    dummy = np.zeros_like(src)
    with nx.no_grad():
        def v_fn(z, t):
            return _velocity(model, edit_batch(instructions, src, dummy, np.full(b, t), dummy), z)

        z = euler_integrate(v_fn, z0, sampler.steps)
    return decode_to_images(stage1, z, seeds, sampler.pixel_steps)


def edit(image, instruction, stage1: Stage1Model, model: UnifiedModel,
         sampler: SamplerConfig = SamplerConfig()) -> np.ndarray:
    return edit_images(np.asarray(image)[None], [list(instruction)], stage1, model, sampler, [sampler.seed])[0]


def load_pipeline(stage1_path, unified_path) -> tuple[Stage1Model, UnifiedModel]:
    """Load both checkpoints; refuse a unified model trained against a different stage 1."""
    stage1 = load_stage1(stage1_path)
    model, header = load_unified(unified_path)
    expected = header.get("stage1", {}).get("sha256")
    if expected and expected != stage1.sha256:
        raise ValueError(f"{unified_path} was trained against stage-1 {expected[:12]}, got {stage1.sha256[:12]}")
    return stage1, model


def write_ppm(path, image) -> Path:
    """Binary P6 with 8-bit channels; values in [0, 1] are rounded to 0..255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got {image.shape}")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode() + pixels.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the raster
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
