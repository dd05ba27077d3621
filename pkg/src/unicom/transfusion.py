"""Pathway I: one transformer over interleaved text tokens and latent image blocks.

Text positions are causal. Latent slots of an image block attend to each
other bidirectionally and to everything before the block (up to and
including its BOI token); they never see the block's EOI or anything later.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import toydata as td
from .checkpoint import MetricsLog, load_checkpoint, params_hash, read_metrics, save_checkpoint
from .compressor import LatentStats, normalize_latents
from .decoder import Stage1Model, corpus_features, load_stage1
from .encoder import FEATURE_DIM, N_TOKENS, grid_positions
from .flow import interpolate, target_velocity
from .numerics import MLP, Block, Embedding, LayerNorm, Linear, Module, Parameter, Tensor, TimestepEmbedding
from .training import make_state, run_loop

log = logging.getLogger(__name__)

TEXT, LATENT = 0, 1
ROLES = ("target", "context", "understand")
W_FM, W_CE = 5.0, 1.0


class MaskError(ValueError):
    """Sequence has unmatched BOI/EOI delimiters or stray latent slots."""


@dataclass(frozen=True)
class ImageBlock:
    boi: int
    eoi: int
    role: str = "target"

    @property
    def start(self) -> int:
        return self.boi + 1

    @property
    def stop(self) -> int:
        return self.eoi

    @property
    def size(self) -> int:
        return self.eoi - self.boi - 1


@dataclass
class MixedSequence:
    """Token ids with per-position modality tags.

    Latent slots carry the PAD id as a placeholder; their vectors travel
    separately (see ``Batch``).
    """

    tokens: np.ndarray
    tags: np.ndarray
    blocks: list[ImageBlock] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.tokens)

    @staticmethod
    def build(parts) -> "MixedSequence":
        """``parts``: ("text", ids) or ("image", n_slots, role) items, in order."""
        tokens, tags, blocks = [], [], []
        for part in parts:
            if part[0] == "text":
                tokens += list(part[1])
                tags += [TEXT] * len(part[1])
            elif part[0] == "image":
                n, role = part[1], part[2]
                boi = len(tokens)
                tokens += [td.BOI] + [td.PAD] * n + [td.EOI]
                tags += [TEXT] + [LATENT] * n + [TEXT]
                blocks.append(ImageBlock(boi, boi + n + 1, role))
            else:
                raise ValueError(f"unknown part {part[0]}")
        return MixedSequence(np.asarray(tokens, dtype=np.int64), np.asarray(tags, dtype=np.int8), blocks)


def find_blocks(tokens, tags) -> list[ImageBlock]:
    """Recover image blocks from delimiters, validating well-formedness."""
    tokens = np.asarray(tokens)
    tags = np.asarray(tags)
    blocks, open_at = [], None
    for i, (tok, tag) in enumerate(zip(tokens, tags)):
        if tag == LATENT:
            if open_at is None:
                raise MaskError(f"latent slot at {i} outside BOI/EOI")
            continue
        if tok == td.BOI:
            if open_at is not None:
                raise MaskError(f"nested BOI at {i}")
            open_at = i
        elif tok == td.EOI:
            if open_at is None:
                raise MaskError(f"EOI at {i} without BOI")
            blocks.append(ImageBlock(open_at, i))
            open_at = None
        elif open_at is not None:
            raise MaskError(f"text token at {i} inside an image block")
    if open_at is not None:
        raise MaskError(f"BOI at {open_at} is never closed")
    return blocks


def build_mask(seq: MixedSequence) -> np.ndarray:
    """Boolean (S, S) mask; entry (i, j) True lets position i attend to j."""
    s = seq.length
    mask = np.tril(np.ones((s, s), dtype=bool))
    for b in find_blocks(seq.tokens, seq.tags):
        # slots see the whole block and the prefix up to BOI
        mask[b.start:b.stop, :b.stop] = True
    return mask


# -- batches -----------------------------------------------------------------

@dataclass
class Batch:
    """Sequences sharing one layout.

    ``inputs[k]`` holds block k's slot vectors (B, n, dim); ``t[k]`` the
    per-sequence flow time of target blocks; ``velocity[k]`` the regression
    target; ``ce_weights`` marks positions (B, S-1) whose next token is scored.
    """

    layout: MixedSequence
    ids: np.ndarray
    inputs: dict[int, np.ndarray]
    t: dict[int, np.ndarray]
    velocity: dict[int, np.ndarray]
    ce_weights: np.ndarray
    task: str = ""

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    def select(self, idx) -> "Batch":
        idx = np.atleast_1d(idx)
        return Batch(self.layout, self.ids[idx], {k: v[idx] for k, v in self.inputs.items()},
                     {k: v[idx] for k, v in self.t.items()}, {k: v[idx] for k, v in self.velocity.items()},
                     self.ce_weights[idx], self.task)


def text_weights(layout: MixedSequence, ids: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Score next-token predictions between non-PAD text positions."""
    tags = layout.tags
    pred_ok = (tags[:-1] == TEXT)[None] & (ids[:, :-1] != td.PAD)
    tgt_ok = (tags[1:] == TEXT)[None] & (ids[:, 1:] != td.PAD)
    w = (pred_ok & tgt_ok).astype(np.float64)
    if keep is not None:
        w *= np.asarray(keep, dtype=np.float64)[:, None]
    return w


def t2i_layout(n: int) -> MixedSequence:
    return MixedSequence.build([("text", [td.PAD] * td.MAX_CAPTION_LEN), ("image", n, "target")])


def edit_layout(n: int) -> MixedSequence:
    return MixedSequence.build([("text", [td.TOK["<edit>"]]), ("image", n, "context"),
                                ("text", [td.PAD] * td.MAX_INSTRUCTION_LEN), ("image", n, "target")])


def i2t_layout(n: int) -> MixedSequence:
    return MixedSequence.build([("text", [td.TOK["<i2t>"]]), ("image", n, "understand"),
                                ("text", [td.PAD] * td.MAX_CAPTION_LEN)])


def text_layout() -> MixedSequence:
    return MixedSequence.build([("text", [td.PAD] * td.MAX_CAPTION_LEN)])


def _noisy(z1: np.ndarray, t: np.ndarray, eps: np.ndarray):
    return interpolate(z1, eps, t), target_velocity(z1, eps)


def t2i_batch(captions, z1, t, eps, drop=None) -> Batch:
    """Text-to-image batch. ``drop`` (bool per row) blanks the caption to BOS EOS."""
    z1 = np.asarray(z1)
    n = z1.shape[1]
    layout = t2i_layout(n)
    b = len(captions)
    drop = np.zeros(b, dtype=bool) if drop is None else np.asarray(drop, dtype=bool)
    ids = np.tile(layout.tokens, (b, 1))
    for i, cap in enumerate(captions):
        ids[i, :td.MAX_CAPTION_LEN] = td.pad([td.BOS, td.EOS] if drop[i] else cap, td.MAX_CAPTION_LEN)
    zt, v = _noisy(z1, t, eps)
    blk = 0
    return Batch(layout, ids, {blk: zt}, {blk: np.asarray(t, dtype=np.float64)}, {blk: v},
                 text_weights(layout, ids, ~drop), "t2i")


def edit_batch(instructions, z_src, z1, t, eps) -> Batch:
    z1 = np.asarray(z1)
    n = z1.shape[1]
    layout = edit_layout(n)
    ids = np.tile(layout.tokens, (len(instructions), 1))
    start = layout.blocks[0].eoi + 1
    for i, ins in enumerate(instructions):
        ids[i, start:start + td.MAX_INSTRUCTION_LEN] = td.pad(ins, td.MAX_INSTRUCTION_LEN)
    zt, v = _noisy(z1, t, eps)
    return Batch(layout, ids, {0: np.asarray(z_src), 1: zt}, {1: np.asarray(t, dtype=np.float64)}, {1: v},
                 text_weights(layout, ids), "edit")


def i2t_batch(features, captions) -> Batch:
    features = np.asarray(features)
    layout = i2t_layout(features.shape[1])
    ids = np.tile(layout.tokens, (len(captions), 1))
    start = layout.blocks[0].eoi + 1
    for i, cap in enumerate(captions):
        ids[i, start:] = td.pad(cap, td.MAX_CAPTION_LEN)
    return Batch(layout, ids, {0: features}, {}, {}, text_weights(layout, ids), "i2t")


def text_batch(captions) -> Batch:
    layout = text_layout()
    ids = np.stack([td.pad(c, td.MAX_CAPTION_LEN) for c in captions])
    return Batch(layout, ids, {}, {}, {}, text_weights(layout, ids), "text")


# -- model -------------------------------------------------------------------

@dataclass
class UnifiedConfig:
    seed: int = 0
    width: int = 64
    depth: int = 4
    heads: int = 4
    latent_dim: int = 8
    feature_dim: int = FEATURE_DIM
    n_slots: int = N_TOKENS
    max_len: int = 160
    positional: bool = True

    @staticmethod
    def from_dict(obj: dict) -> "UnifiedConfig":
        return UnifiedConfig(**{k: v for k, v in obj.items() if k in UnifiedConfig.__dataclass_fields__})


class UnifiedModel(Module):
    def __init__(self, cfg: UnifiedConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w = cfg.width
        self.tok = Embedding(td.VOCAB_SIZE, w, rng)
        self.pos = Parameter(nx.nn.normal(rng, (cfg.max_len, w), 0.02))
        # unit-scale 2-D grid code so slot identity survives next to O(1) latent inputs
        self.slot = Parameter(grid_positions(w, math.isqrt(cfg.n_slots)))
        self.latent_in = Linear(cfg.latent_dim, w, rng)
        self.und_proj = MLP(cfg.feature_dim, w, rng, out=w)
        self.time = TimestepEmbedding(w, rng)
        self.blocks = [Block(w, cfg.heads, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(w)
        self.text_head = Linear(w, td.VOCAB_SIZE, rng)
        self.vel_head = Linear(w, cfg.latent_dim, rng, std=0.0)

    # pieces reused by the query pathway
    def embed_tokens(self, ids, offset: int = 0) -> Tensor:
        ids = np.asarray(ids)
        h = self.tok(ids)
        if self.cfg.positional:
            h = h + self.pos[offset:offset + ids.shape[1]]
        return h

    def run(self, h: Tensor, mask: np.ndarray) -> Tensor:
        for block in self.blocks:
            h = block(h, mask)
        return self.norm(h)

    def embed_latents(self, z, t) -> Tensor:
        """Latent slot inputs with their flow-time embedding (t=1 for clean context)."""
        z = nx.as_tensor(np.asarray(z, dtype=nx.get_default_dtype()))
        h = self.latent_in(z) + self.time(np.asarray(t)).reshape(z.shape[0], 1, -1)
        if self.cfg.positional:
            h = h + self.slot[: z.shape[1]]
        return h

    def embed(self, batch: Batch) -> Tensor:
        layout = batch.layout
        b = batch.size
        parts = []
        cursor = 0
        tok = self.tok(batch.ids)
        for k, blk in enumerate(layout.blocks):
            parts.append(tok[:, cursor:blk.start])
            if blk.role == "understand":
                feats = nx.as_tensor(np.asarray(batch.inputs[k], dtype=nx.get_default_dtype()))
                parts.append(self.und_proj(feats))
            else:
                t = batch.t.get(k, np.ones(b))
                parts.append(self.embed_latents(batch.inputs[k], t))
            cursor = blk.stop
        parts.append(tok[:, cursor:])
        h = nx.concat([p for p in parts if p.shape[1] > 0], axis=1)
        if self.cfg.positional:
            h = h + self.pos[: layout.length]
        return h

    def forward(self, batch: Batch) -> Tensor:
        """Final hidden states (B, S, width)."""
        return self.run(self.embed(batch), build_mask(batch.layout))

    def velocity(self, hidden: Tensor, block: ImageBlock) -> Tensor:
        return self.vel_head(hidden[:, block.start:block.stop])


@dataclass
class Losses:
    total: Tensor
    ce: Tensor
    fm: Tensor
    has_latent: bool


def joint_loss(model: UnifiedModel, batch: Batch, w_fm: float = W_FM, w_ce: float = W_CE) -> Losses:
    """w_fm * L_fm + w_ce * L_ce, each averaged per sequence then over the batch."""
    hidden = model(batch)
    b = batch.size
    fm_terms = []
    for k, blk in enumerate(batch.layout.blocks):
        if blk.role != "target":
            continue
        v_hat = model.velocity(hidden, blk)
        target = Tensor(np.asarray(batch.velocity[k], dtype=v_hat.dtype))
        fm_terms.append(nx.mse(v_hat, target))
    has_latent = bool(fm_terms)
    if has_latent:
        fm = fm_terms[0]
        for term in fm_terms[1:]:
            fm = fm + term
        fm = fm * (1.0 / len(fm_terms))
    else:
        log.debug("batch without latent slots: L_fm = 0")
        fm = Tensor(np.zeros((), dtype=hidden.dtype))
    w = batch.ce_weights
    counts = w.sum(axis=1, keepdims=True)
    norm_w = np.where(counts > 0, w / np.maximum(counts, 1.0), 0.0) / b
    if w.any():
        logits = model.text_head(hidden[:, :-1])
        ce = nx.cross_entropy(logits, batch.ids[:, 1:], norm_w, normalize=False)
    else:
        ce = Tensor(np.zeros((), dtype=hidden.dtype))
    return Losses(fm * w_fm + ce * w_ce, ce, fm, has_latent)


def condition_on_image(stage1: Stage1Model, image) -> tuple[np.ndarray, int]:
    """Standardised latents of a source image and the slot count of its block.

    The block is inserted clean (t=1) before the instruction text; it spans
    n latent slots plus BOI and EOI.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (td.IMAGE_SIZE, td.IMAGE_SIZE, 3):
        raise ValueError(f"source image must be 32x32x3, got {image.shape}")
    z = stage1.stats.standardize(stage1.latents_for(image[None]))[0]
    return z, z.shape[0] + 2


# -- data --------------------------------------------------------------------

EDIT_TRAIN_KINDS = td.EDIT_KINDS + ("keep",)


@dataclass
class TaskData:
    """Everything one unified run samples from, precomputed once."""

    captions: list
    targets: np.ndarray
    features: np.ndarray
    edit_instr: list
    edit_src: np.ndarray
    edit_tgt: np.ndarray
    eval_captions: list
    eval_targets: np.ndarray


_task_cache: dict = {}


def _render_all(scenes) -> np.ndarray:
    return np.stack([td.render(s) for s in scenes]).astype(np.float32)


def task_data(stage1: Stage1Model, data_seed: int, train_size: int, edit_size: int, eval_size: int,
              edit_kinds=EDIT_TRAIN_KINDS) -> TaskData:
    """Standardised generation targets in the stage-1 latent space, cached per process."""
    edit_kinds = tuple(edit_kinds)
    key = (stage1.sha256, data_seed, train_size, edit_size, eval_size, edit_kinds)
    if key in _task_cache:
        return _task_cache[key]
    if stage1.stats is None:
        raise ValueError("stage-1 checkpoint carries no latent statistics")
    cfg = stage1.cfg
    images, feats, caps = corpus_features(cfg.encoder_seed, data_seed, train_size, "train")
    std = stage1.stats.standardize
    targets = std(stage1.compress_features(feats)).astype(np.float32)
    ev_images, ev_feats, ev_caps = corpus_features(cfg.encoder_seed, data_seed, eval_size, "val")
    pairs = td.make_edit_pairs(data_seed, edit_size, "train", kinds=edit_kinds)
    src = std(stage1.latents_for(_render_all([p.source for p in pairs]))).astype(np.float32)
    tgt = std(stage1.latents_for(_render_all([p.target for p in pairs]))).astype(np.float32)
    data = TaskData(caps, targets, feats, [list(p.instruction) for p in pairs], src, tgt,
                    ev_caps, std(stage1.compress_features(ev_feats)).astype(np.float32))
    _task_cache[key] = data
    return data


def eval_flow_loss(model, data: TaskData, seed: int = 0, chunk: int = 32) -> float:
    """T2I flow loss on held-out captions at a fixed grid of times and noise."""
    rng = np.random.default_rng(10_000 + seed)
    n = len(data.eval_captions)
    t = (np.arange(n) + 0.5) / n
    eps = rng.standard_normal(data.eval_targets.shape).astype(np.float32)
    total = 0.0
    with nx.no_grad():
        for i in range(0, n, chunk):
            sl = slice(i, i + chunk)
            batch = t2i_batch(data.eval_captions[sl], data.eval_targets[sl], t[sl], eps[sl])
            total += float(joint_loss(model, batch).fm.data) * len(batch.ids)
    return total / n


def heldout_checker(stage1: Stage1Model, model: UnifiedModel, steps: int = 16, seed: int = 0) -> float:
    """Mean checker score of generations for every held-out single-object prompt."""
    from .sampling import SamplerConfig, generate_batch

    prompts = [td.caption(s) for s in td.single_object_scenes("val")]
    images = generate_batch(prompts, stage1, model, SamplerConfig(steps=steps, seed=seed))
    return float(np.mean([td.check_image(im, p) for im, p in zip(images, prompts)]))


# -- training ----------------------------------------------------------------

TRUNK_PREFIXES = ("tok.", "pos", "blocks.", "norm.", "text_head.", "und_proj.")


@dataclass
class UnifiedTrainConfig:
    seed: int = 0
    data_seed: int = 0
    width: int = 128
    depth: int = 4
    heads: int = 4
    mixture: dict = field(default_factory=lambda: {"t2i": 0.6, "edit": 0.3, "text": 0.05, "i2t": 0.05})
    edit_kinds: list = field(default_factory=lambda: list(EDIT_TRAIN_KINDS))
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    cond_drop: float = 0.1
    w_fm: float = W_FM
    w_ce: float = W_CE
    train_size: int = 2000
    edit_size: int = 2000
    eval_size: int = 64
    eval_every: int = 100
    checker_every: int = 0
    checker_steps: int = 16
    tau: float | None = None
    stop_at_tau: bool = False
    init: str | None = None

    @staticmethod
    def from_dict(obj: dict) -> "UnifiedTrainConfig":
        return UnifiedTrainConfig(**{k: v for k, v in obj.items() if k in UnifiedTrainConfig.__dataclass_fields__})

    def model_config(self, latent_dim: int, n_slots: int) -> UnifiedConfig:
        return UnifiedConfig(seed=self.seed, width=self.width, depth=self.depth, heads=self.heads,
                             latent_dim=latent_dim, n_slots=n_slots)


class TauReached(Exception):
    pass


@dataclass
class UnifiedResult:
    checkpoint: Path
    metrics_path: Path
    steps_to_tau: float
    frozen_ok: bool
    stage1_sha256: str


def save_unified(model: UnifiedModel, path, kind: str = "unified", **extra) -> Path:
    header = {"kind": kind, "config": asdict(model.cfg), **extra}
    return save_checkpoint(path, header, model.state_dict())


def load_unified(path) -> tuple[UnifiedModel, dict]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") not in ("unified", "trunk"):
        raise ValueError(f"{path} is not a unified-model checkpoint")
    model = UnifiedModel(UnifiedConfig.from_dict(header["config"]))
    model.load_state_dict(tensors)
    return model, header


def load_trunk_into(model: UnifiedModel, path) -> list[str]:
    """Copy the language/understanding trunk weights from a pretrained checkpoint."""
    _, tensors = load_checkpoint(path)
    own = model.state_dict()
    picked = {k: v for k, v in tensors.items() if k.startswith(TRUNK_PREFIXES) and k in own}
    for k, v in picked.items():
        if own[k].shape != v.shape:
            raise ValueError(f"trunk tensor {k} has shape {v.shape}, model expects {own[k].shape}")
    model.load_state_dict({**own, **picked})
    return sorted(picked)


def _draw(rng, data: TaskData, task: str, b: int, cond_drop: float) -> Batch:
    if task == "t2i":
        idx = rng.integers(0, len(data.captions), b)
        z1 = data.targets[idx]
        t = rng.random(b)
        eps = rng.standard_normal(z1.shape).astype(np.float32)
        drop = rng.random(b) < cond_drop
        return t2i_batch([data.captions[i] for i in idx], z1, t, eps, drop)
    if task == "edit":
        idx = rng.integers(0, len(data.edit_instr), b)
        z1 = data.edit_tgt[idx]
        t = rng.random(b)
        eps = rng.standard_normal(z1.shape).astype(np.float32)
        return edit_batch([data.edit_instr[i] for i in idx], data.edit_src[idx], z1, t, eps)
    idx = rng.integers(0, len(data.captions), b)
    caps = [data.captions[i] for i in idx]
    if task == "i2t":
        return i2t_batch(data.features[idx], caps)
    if task == "text":
        return text_batch(caps)
    raise ValueError(f"unknown task '{task}'")


def _mixture(mixture: dict) -> tuple[list[str], np.ndarray]:
    tasks = sorted(k for k, v in mixture.items() if v > 0)
    if not tasks:
        raise ValueError("task mixture has no positive ratio")
    p = np.array([mixture[k] for k in tasks], dtype=np.float64)
    return tasks, p / p.sum()


def steps_to_tau(records: list[dict], tau: float, key: str = "eval_l_fm") -> float:
    """First logged step whose ``key`` is at or below tau; inf if never."""
    for rec in records:
        v = rec.get(key)
        if v is not None and v <= tau:
            return float(rec["step"])
    return math.inf


def train_unified(cfg: UnifiedTrainConfig, stage1_checkpoint, out_dir) -> UnifiedResult:
    """Train the unified transformer on frozen stage-1 latents."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage1 = load_stage1(stage1_checkpoint)
    data = task_data(stage1, cfg.data_seed, cfg.train_size, cfg.edit_size, cfg.eval_size, cfg.edit_kinds)
    model = UnifiedModel(cfg.model_config(stage1.latent_dim, stage1.cfg.n))
    if cfg.init:
        load_trunk_into(model, cfg.init)
    state = make_state(model.trainable(), cfg.seed, cfg.lr, cfg.weight_decay)
    for name, module in stage1.trainable_modules().items():
        state.register_frozen(name, module)
    state.register_frozen("encoder", stage1.encoder)
    stage1_hash = params_hash(stage1.named_parameters())

    tasks, probs = _mixture(cfg.mixture)
    rng = np.random.default_rng(cfg.seed + 104729)
    metrics = MetricsLog(out_dir / "metrics.jsonl", seed=cfg.seed, target_dim=stage1.latent_dim)
    running: dict[str, list] = {"l_fm": [], "l_ce": []}

    def loss_fn(step):
        task = tasks[int(rng.choice(len(tasks), p=probs))]
        losses = joint_loss(model, _draw(rng, data, task, cfg.batch_size, cfg.cond_drop), cfg.w_fm, cfg.w_ce)
        if losses.has_latent:
            running["l_fm"].append(float(losses.fm.data))
        if task in ("text", "i2t", "t2i"):
            running["l_ce"].append(float(losses.ce.data))
        return losses.total, {"task": task}

    def on_eval(step):
        ev = eval_flow_loss(model, data, cfg.seed)
        means = {k: (float(np.mean(v)) if v else None) for k, v in running.items()}
        for v in running.values():
            v.clear()
        if cfg.checker_every and step % cfg.checker_every == 0:
            means["checker"] = heldout_checker(stage1, model, cfg.checker_steps, cfg.seed)
        metrics.write(step, eval_l_fm=ev, **means)
        log.info("unified d=%d seed %d step %d eval_l_fm %.4f", stage1.latent_dim, cfg.seed, step, ev)
        if cfg.stop_at_tau and cfg.tau is not None and ev <= cfg.tau:
            raise TauReached

    try:
        run_loop(state, cfg.steps, loss_fn, cfg.lr, cfg.warmup, on_eval, cfg.eval_every)
    except TauReached:
        pass
    frozen_ok = all(state.verify_frozen().values()) and params_hash(stage1.named_parameters()) == stage1_hash
    ckpt = save_unified(model, out_dir / "unified.ckpt", train=asdict(cfg),
                        stage1={"path": stage1.path, "sha256": stage1.sha256}, frozen=state.frozen_hashes())
    records = read_metrics(metrics.path)
    reached = steps_to_tau(records, cfg.tau) if cfg.tau is not None else math.inf
    return UnifiedResult(ckpt, metrics.path, reached, frozen_ok, stage1.sha256)


def pretrain_trunk(cfg: UnifiedTrainConfig, out_path, mode: str = "lm", steps: int = 300,
                   init: str | None = None, encoder_seed: int = 0) -> Path:
    """Caption language modelling ("lm") or, on top of that, image captioning ("vlm").

    Only trunk weights (embeddings, blocks, text head, understanding projection)
    are later copied into a unified model, so no stage-1 checkpoint is needed.
    """
    if mode not in ("lm", "vlm"):
        raise ValueError(f"unknown trunk mode '{mode}'")
    _, feats, caps = corpus_features(encoder_seed, cfg.data_seed, cfg.train_size, "train")
    model = UnifiedModel(cfg.model_config(8, N_TOKENS))
    if init:
        load_trunk_into(model, init)
    state = make_state(model.trainable(), cfg.seed, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 15485863)
    p_i2t = 0.0 if mode == "lm" else 0.8

    def loss_fn(step):
        idx = rng.integers(0, len(caps), cfg.batch_size)
        picked = [caps[i] for i in idx]
        batch = i2t_batch(feats[idx], picked) if rng.random() < p_i2t else text_batch(picked)
        return joint_loss(model, batch).total, {}

    hist = run_loop(state, steps, loss_fn, cfg.lr, cfg.warmup)
    tail = [h["loss"] for h in hist[-20:]]
    log.info("trunk %s seed %d final loss %.4f", mode, cfg.seed, float(np.mean(tail)) if tail else float("nan"))
    return save_unified(model, out_path, kind="trunk", mode=mode, steps=steps)
