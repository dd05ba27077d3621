"""Pathway II: learnable queries read a frozen backbone; a connector feeds a separate flow predictor."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import toydata as td
from .checkpoint import MetricsLog, file_hash, load_checkpoint, params_hash, read_metrics, save_checkpoint
from .decoder import Stage1Model, load_stage1
from .encoder import grid_positions
from .numerics import Block, LayerNorm, Linear, Module, Parameter, Tensor, TimestepEmbedding
from .sampling import SamplerConfig, _noise, decode_to_images, euler_integrate
from .training import make_state, run_loop
from .transfusion import (EDIT_TRAIN_KINDS, W_FM, MixedSequence, TaskData, TauReached, UnifiedModel, build_mask,
                          interpolate, load_unified, steps_to_tau, target_velocity, task_data)

log = logging.getLogger(__name__)


class FlowPredictor(Module):
    """Bidirectional transformer over [condition tokens; latent slots] predicting velocity."""

    def __init__(self, width: int, depth: int, heads: int, latent_dim: int, n_slots: int, n_cond: int,
                 rng: np.random.Generator):
        self.cond_pos = Parameter(nx.nn.normal(rng, (n_cond, width), 0.02))
        self.slot_pos = Parameter(grid_positions(width, math.isqrt(n_slots)))
        self.latent_in = Linear(latent_dim, width, rng)
        self.time = TimestepEmbedding(width, rng)
        self.blocks = [Block(width, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(width)
        self.vel_head = Linear(width, latent_dim, rng, std=0.0)

    def forward(self, cond: Tensor, z_t, t) -> Tensor:
        z_t = nx.as_tensor(np.asarray(z_t, dtype=nx.get_default_dtype()))
        b, n = z_t.shape[0], z_t.shape[1]
        lat = self.latent_in(z_t) + self.slot_pos + self.time(np.asarray(t)).reshape(b, 1, -1)
        h = nx.concat([cond + self.cond_pos, lat], axis=1)
        for block in self.blocks:
            h = block(h)
        m = cond.shape[1]
        return self.vel_head(self.norm(h)[:, m:m + n])


@dataclass
class MetaQueryConfig:
    seed: int = 0
    data_seed: int = 0
    backbone: str = ""
    n_queries: int = 16
    connector_depth: int = 2
    depth: int = 4
    heads: int = 4
    mixture: dict = field(default_factory=lambda: {"t2i": 0.6, "edit": 0.3, "i2i": 0.1})
    edit_kinds: list = field(default_factory=lambda: list(EDIT_TRAIN_KINDS))
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    train_size: int = 2000
    edit_size: int = 2000
    eval_size: int = 64
    eval_every: int = 100
    checker_every: int = 0
    checker_steps: int = 16
    tau: float | None = None
    stop_at_tau: bool = False

    @staticmethod
    def from_dict(obj: dict) -> "MetaQueryConfig":
        return MetaQueryConfig(**{k: v for k, v in obj.items() if k in MetaQueryConfig.__dataclass_fields__})


class MetaQueryModel(Module):
    """Queries, image-context projection, connector and flow predictor around a frozen backbone."""

    def __init__(self, cfg: MetaQueryConfig, backbone: UnifiedModel, latent_dim: int, n_slots: int):
        self.cfg = cfg
        self.backbone = backbone
        self.latent_dim, self.n_slots = latent_dim, n_slots
        backbone.freeze()
        rng = np.random.default_rng(cfg.seed + 31)
        w = backbone.cfg.width
        d, n = latent_dim, n_slots
        self.queries = Parameter(nx.nn.normal(rng, (cfg.n_queries, w), 0.02))
        self.ctx_in = Linear(d, w, rng)
        self.connector = [Block(w, cfg.heads, rng) for _ in range(cfg.connector_depth)]
        self.connector_norm = LayerNorm(w)
        self.predictor = FlowPredictor(w, cfg.depth, cfg.heads, d, n, cfg.n_queries, rng)

    def trainable_modules(self) -> dict:
        return {"ctx_in": self.ctx_in, "predictor": self.predictor, "connector_norm": self.connector_norm,
                **{f"connector.{i}": b for i, b in enumerate(self.connector)}}

    def own_state(self) -> dict[str, np.ndarray]:
        out = {"queries": self.queries.data.copy()}
        for prefix, module in self.trainable_modules().items():
            out.update({f"{prefix}.{k}": v for k, v in module.state_dict().items()})
        return out

    def load_own_state(self, tensors: dict) -> None:
        self.queries.data = tensors["queries"].astype(self.queries.data.dtype)
        for prefix, module in self.trainable_modules().items():
            module.load_state_dict({k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")})

    def extract_condition(self, ids, context=None) -> Tensor:
        """Hidden states (B, M, width) at the query positions of [c; Q].

        ``ids`` (B, L) is the text/delimiter prefix. When ``context`` (B, n, d)
        is given, the prefix must contain one BOI/EOI block of n slots that
        receives the projected context latents.
        """
        ids = np.asarray(ids)
        b, length = ids.shape
        m = self.cfg.n_queries
        bb = self.backbone
        if length + m > bb.cfg.max_len:
            raise ValueError(f"sequence of {length + m} positions exceeds the backbone cap {bb.cfg.max_len}")
        tags = np.zeros(length, dtype=np.int8)
        parts = []
        tok = bb.tok(ids)
        if context is not None:
            boi = int(np.flatnonzero(ids[0] == td.BOI)[0])
            n = np.asarray(context).shape[1]
            tags[boi + 1:boi + 1 + n] = 1
            ctx = nx.as_tensor(np.asarray(context, dtype=nx.get_default_dtype()))
            parts = [tok[:, :boi + 1], self.ctx_in(ctx), tok[:, boi + 1 + n:]]
        else:
            parts = [tok]
        q = nx.as_tensor(np.broadcast_to(np.zeros(1, dtype=self.queries.dtype), (b, 1, 1))) + self.queries
        h = nx.concat([p for p in parts if p.shape[1] > 0] + [q], axis=1)
        if bb.cfg.positional:
            h = h + bb.pos[: length + m]
        prefix = build_mask(MixedSequence(ids[0], tags))
        mask = np.zeros((length + m, length + m), dtype=bool)
        mask[:length, :length] = prefix
        mask[length:, :] = True
        return bb.run(h, mask)[:, length:]

    def condition(self, h_q: Tensor) -> Tensor:
        for block in self.connector:
            h_q = block(h_q)
        return self.connector_norm(h_q)

    def velocity(self, ids, z_t, t, context=None) -> Tensor:
        return self.predictor(self.condition(self.extract_condition(ids, context)), z_t, t)


# -- prompt layouts (text prefix before the queries) ------------------------

def t2i_prefix(captions) -> np.ndarray:
    return np.stack([td.pad(c, td.MAX_CAPTION_LEN) for c in captions])


def _image_prefix(lead: list[int], n: int, tail_rows) -> np.ndarray:
    seq = MixedSequence.build([("text", lead), ("image", n, "context")])
    rows = []
    for tail in tail_rows:
        rows.append(np.concatenate([seq.tokens, np.asarray(tail, dtype=np.int64)]))
    return np.stack(rows)


def edit_prefix(instructions, n: int) -> np.ndarray:
    return _image_prefix([td.TOK["<edit>"]], n, [td.pad(i, td.MAX_INSTRUCTION_LEN) for i in instructions])


def i2i_prefix(count: int, n: int) -> np.ndarray:
    return _image_prefix([td.TOK["<i2t>"]], n, [[] for _ in range(count)])


def flow_loss(model: MetaQueryModel, ids, z1, t, eps, context=None) -> Tensor:
    zt = interpolate(z1, eps, t)
    v = target_velocity(z1, eps)
    v_hat = model.velocity(ids, zt, t, context)
    return nx.mse(v_hat, Tensor(np.asarray(v, dtype=v_hat.dtype)))


def eval_flow_loss(model: MetaQueryModel, data: TaskData, seed: int = 0, chunk: int = 32) -> float:
    """Same held-out protocol as the unified pathway: fixed time grid and noise."""
    rng = np.random.default_rng(10_000 + seed)
    n = len(data.eval_captions)
    t = (np.arange(n) + 0.5) / n
    eps = rng.standard_normal(data.eval_targets.shape).astype(np.float32)
    total = 0.0
    with nx.no_grad():
        for i in range(0, n, chunk):
            sl = slice(i, i + chunk)
            loss = flow_loss(model, t2i_prefix(data.eval_captions[sl]), data.eval_targets[sl], t[sl], eps[sl])
            total += float(loss.data) * len(t[sl])
    return total / n


@dataclass
class MetaQueryResult:
    checkpoint: Path
    metrics_path: Path
    steps_to_tau: float
    frozen_ok: bool
    stage1_sha256: str


def save_metaquery(model: MetaQueryModel, path, **extra) -> Path:
    header = {"kind": "metaquery", "config": asdict(model.cfg), "latent_dim": model.latent_dim,
              "n_slots": model.n_slots, **extra}
    return save_checkpoint(path, header, model.own_state())


def load_metaquery(path) -> tuple[MetaQueryModel, dict]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "metaquery":
        raise ValueError(f"{path} is not a metaquery checkpoint")
    cfg = MetaQueryConfig.from_dict(header["config"])
    backbone, _ = load_unified(cfg.backbone)
    model = MetaQueryModel(cfg, backbone, header["latent_dim"], header["n_slots"])
    model.load_own_state(tensors)
    return model, header


def train_metaquery(cfg: MetaQueryConfig, stage1_checkpoint, out_dir) -> MetaQueryResult:
    """Train queries, connector and flow predictor against a frozen backbone and stage 1."""
    if not cfg.backbone:
        raise ValueError("metaquery training needs a pretrained backbone checkpoint")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage1 = load_stage1(stage1_checkpoint)
    backbone, _ = load_unified(cfg.backbone)
    data = task_data(stage1, cfg.data_seed, cfg.train_size, cfg.edit_size, cfg.eval_size, cfg.edit_kinds)
    model = MetaQueryModel(cfg, backbone, stage1.latent_dim, stage1.cfg.n)
    named = [("queries", model.queries)]
    for prefix, module in model.trainable_modules().items():
        named += [(f"{prefix}.{k}", p) for k, p in module.trainable()]
    state = make_state(named, cfg.seed, cfg.lr, cfg.weight_decay)
    state.register_frozen("backbone", backbone)
    for name, module in stage1.trainable_modules().items():
        state.register_frozen(name, module)
    backbone_hash = params_hash(backbone.named_parameters())

    tasks = sorted(k for k, v in cfg.mixture.items() if v > 0)
    probs = np.array([cfg.mixture[k] for k in tasks], dtype=np.float64)
    probs /= probs.sum()
    rng = np.random.default_rng(cfg.seed + 104729)
    n = stage1.cfg.n
    metrics = MetricsLog(out_dir / "metrics.jsonl", seed=cfg.seed, target_dim=stage1.latent_dim)
    running: list[float] = []

    def loss_fn(step):
        task = tasks[int(rng.choice(len(tasks), p=probs))]
        b = cfg.batch_size
        t = rng.random(b)
        if task == "t2i":
            idx = rng.integers(0, len(data.captions), b)
            z1, ids, ctx = data.targets[idx], t2i_prefix([data.captions[i] for i in idx]), None
        elif task == "edit":
            idx = rng.integers(0, len(data.edit_instr), b)
            z1, ctx = data.edit_tgt[idx], data.edit_src[idx]
            ids = edit_prefix([data.edit_instr[i] for i in idx], n)
        elif task == "i2i":
            idx = rng.integers(0, len(data.captions), b)
            z1 = ctx = data.targets[idx]
            ids = i2i_prefix(b, n)
        else:
            raise ValueError(f"unknown task '{task}'")
        eps = rng.standard_normal(z1.shape).astype(np.float32)
        loss = flow_loss(model, ids, z1, t, eps, ctx)
        running.append(float(loss.data))
        return loss * W_FM, {"task": task}

    def on_eval(step):
        ev = eval_flow_loss(model, data, cfg.seed)
        extra = {"l_fm": float(np.mean(running)) if running else None}
        running.clear()
        if cfg.checker_every and step % cfg.checker_every == 0:
            extra["checker"] = heldout_checker(stage1, model, cfg.checker_steps, cfg.seed)
        metrics.write(step, eval_l_fm=ev, **extra)
        log.info("metaquery seed %d step %d eval_l_fm %.4f", cfg.seed, step, ev)
        if cfg.stop_at_tau and cfg.tau is not None and ev <= cfg.tau:
            raise TauReached

    try:
        run_loop(state, cfg.steps, loss_fn, cfg.lr, cfg.warmup, on_eval, cfg.eval_every)
    except TauReached:
        pass
    frozen_ok = all(state.verify_frozen().values()) and params_hash(backbone.named_parameters()) == backbone_hash
    ckpt = save_metaquery(model, out_dir / "metaquery.ckpt", train=asdict(cfg),
                          backbone_sha256=file_hash(cfg.backbone),
                          stage1={"path": stage1.path, "sha256": stage1.sha256}, frozen=state.frozen_hashes())
    records = read_metrics(metrics.path)
    reached = steps_to_tau(records, cfg.tau) if cfg.tau is not None else math.inf
    return MetaQueryResult(ckpt, metrics.path, reached, frozen_ok, stage1.sha256)


# -- sampling ----------------------------------------------------------------

def _sample(model: MetaQueryModel, ids, context, seeds, steps: int) -> np.ndarray:
    z0 = _noise(seeds, (model.n_slots, model.latent_dim), nx.get_default_dtype())
    with nx.no_grad():
        cond = model.condition(model.extract_condition(ids, context))

        def v_fn(z, t):
            return model.predictor(cond, z, np.full(len(z), t)).data

        return euler_integrate(v_fn, z0, steps)


def generate_from_queries_batch(prompts, stage1: Stage1Model, model: MetaQueryModel,
                                sampler: SamplerConfig = SamplerConfig(), seeds=None) -> np.ndarray:
    seeds = [sampler.seed + i for i in range(len(prompts))] if seeds is None else list(seeds)
    z = _sample(model, t2i_prefix(prompts), None, seeds, sampler.steps)
    return decode_to_images(stage1, z, seeds, sampler.pixel_steps)


def generate_from_queries(prompt, stage1: Stage1Model, model: MetaQueryModel,
                          sampler: SamplerConfig = SamplerConfig()) -> np.ndarray:
    """h_Q -> connector -> latent Euler sampling -> pixel decoding; one 32x32x3 image."""
    return generate_from_queries_batch([list(prompt)], stage1, model, sampler, [sampler.seed])[0]


def edit_from_queries(images, instructions, stage1: Stage1Model, model: MetaQueryModel,
                      sampler: SamplerConfig = SamplerConfig(), seeds=None) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    seeds = [sampler.seed + i for i in range(len(images))] if seeds is None else list(seeds)
    ctx = stage1.stats.standardize(stage1.latents_for(images)).astype(np.float32)
    z = _sample(model, edit_prefix(instructions, ctx.shape[1]), ctx, seeds, sampler.steps)
    return decode_to_images(stage1, z, seeds, sampler.pixel_steps)


def heldout_checker(stage1: Stage1Model, model: MetaQueryModel, steps: int = 16, seed: int = 0) -> float:
    prompts = [td.caption(s) for s in td.single_object_scenes("val")]
    images = generate_from_queries_batch(prompts, stage1, model, SamplerConfig(steps=steps, seed=seed))
    return float(np.mean([td.check_image(im, p) for im, p in zip(images, prompts)]))
