"""Ablation harness.

Every training run lives in a ``RunStore`` directory keyed by what it trains
and is reused when its recorded config matches, so experiments that share an
arm (the d=8 transfusion run serves three comparisons) train it once.
Reports and curve CSVs are rebuilt from the stored logs alone.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import toydata as td
from .checkpoint import read_metrics
from .compressor import Fusion
from .decoder import Stage1Config, load_stage1, train_decoder
from .encoder import Encoder, encode, linear_probe
from .training import TrainingDiverged
from .transfusion import UnifiedTrainConfig, load_unified, pretrain_trunk, steps_to_tau, train_unified

log = logging.getLogger(__name__)

DEFAULTS_PATH = Path(__file__).with_name("defaults.json")

SHAPE_VARIANTS = {
    "uncompressed_n64_D144": {"variant": "none", "n": 64, "d": 144},
    "sequence_n16_D144": {"variant": "none", "n": 16, "d": 144},
    "mlp_n64_d32": {"variant": "mlp", "n": 64, "d": 32},
    "mlp_n64_d8": {"variant": "mlp", "n": 64, "d": 8},
    "mha_n64_d8": {"variant": "mha", "n": 64, "d": 8},
}

# arm -> (stage-1 variant, trunk init)
UNIFIED_ARMS = {
    "transfusion_lm_d8": ("mha_n64_d8", "lm"),
    "transfusion_lm_D144": ("uncompressed_n64_D144", "lm"),
    "transfusion_vlm_d8": ("mha_n64_d8", "vlm"),
}
METAQUERY_ARM = "metaquery_d8"

EXPERIMENTS = ("shape", "convergence", "projector", "init-pathway")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Packaged defaults, then an optional JSON file, then explicit overrides."""
    cfg = json.loads(DEFAULTS_PATH.read_text())
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    return _merge(cfg, overrides or {})


def _json_equal(path: Path, obj: dict) -> bool:
    return path.exists() and json.loads(path.read_text()) == json.loads(json.dumps(obj))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- run store ---------------------------------------------------------------

class RunStore:
    def __init__(self, root, config: dict | None = None):
        self.root = Path(root)
        self.config = config if config is not None else load_config()

    def _stage1_cfg(self, name: str, seed: int) -> Stage1Config:
        c = self.config["stage1"]
        return Stage1Config.from_dict({**c, **SHAPE_VARIANTS[name], "seed": seed})

    def stage1_dir(self, name: str, seed: int) -> Path:
        return self.root / "stage1" / name / f"seed{seed}"

    def stage1(self, name: str, seed: int) -> Path:
        """Run dir of a trained stage-1 variant; trains it if absent or stale."""
        cfg = self._stage1_cfg(name, seed)
        run = self.stage1_dir(name, seed)
        if _json_equal(run / "config.json", asdict(cfg)) and ((run / "stage1.ckpt").exists() or (run / "failed.json").exists()):
            return run
        for stale in ("failed.json", "projector.json"):
            (run / stale).unlink(missing_ok=True)
        try:
            train_decoder(cfg, run)
        except TrainingDiverged as exc:
            _write_json(run / "failed.json", {"step": exc.step, "loss": exc.loss})
        _write_json(run / "config.json", asdict(cfg))
        return run

    def stage1_ckpt(self, name: str, seed: int) -> Path:
        run = self.stage1(name, seed)
        if (run / "failed.json").exists():
            raise TrainingDiverged(-1, float("nan"), None)
        return run / "stage1.ckpt"

    def _unified_cfg(self, seed: int, **extra) -> UnifiedTrainConfig:
        return UnifiedTrainConfig.from_dict({**self.config["unified"], "seed": seed, **extra})

    def trunk(self, mode: str, seed: int) -> Path:
        steps = self.config["trunk"][f"{mode}_steps"]
        cfg = self._unified_cfg(seed)
        run = self.root / "trunk" / mode / f"seed{seed}"
        init = str(self.trunk("lm", seed)) if mode == "vlm" else None
        record = {"train": asdict(cfg), "mode": mode, "steps": steps, "init": init}
        ckpt = run / "trunk.ckpt"
        if not (_json_equal(run / "config.json", record) and ckpt.exists()):
            pretrain_trunk(cfg, ckpt, mode, steps, init)
            _write_json(run / "config.json", record)
        return ckpt

    def unified_dir(self, arm: str, seed: int) -> Path:
        return self.root / "unified" / arm / f"seed{seed}"

    def unified(self, arm: str, seed: int) -> Path:
        variant, init = UNIFIED_ARMS[arm]
        stage1 = self.stage1_ckpt(variant, seed)
        cfg = self._unified_cfg(seed, init=str(self.trunk(init, seed)), tau=self.config.get("tau"))
        run = self.unified_dir(arm, seed)
        record = {"train": asdict(cfg), "stage1": str(stage1)}
        if not (_json_equal(run / "config.json", record) and (run / "unified.ckpt").exists()):
            (run / "eval.json").unlink(missing_ok=True)
            train_unified(cfg, stage1, run)
            _write_json(run / "config.json", record)
        return run

    def metaquery(self, seed: int) -> Path:
        from .metaquery import MetaQueryConfig, train_metaquery

        stage1 = self.stage1_ckpt("mha_n64_d8", seed)
        cfg = MetaQueryConfig.from_dict({**self.config["metaquery"], "seed": seed,
                                         "backbone": str(self.trunk("lm", seed)), "tau": self.config.get("tau")})
        run = self.unified_dir(METAQUERY_ARM, seed)
        record = {"train": asdict(cfg), "stage1": str(stage1)}
        if not (_json_equal(run / "config.json", record) and (run / "metaquery.ckpt").exists()):
            (run / "eval.json").unlink(missing_ok=True)
            train_metaquery(cfg, stage1, run)
            _write_json(run / "config.json", record)
        return run

    def edit_identity(self, arm: str, seed: int) -> float:
        """Checker score of "keep" edits against the source caption on held-out sources."""
        run = self.metaquery(seed) if arm == METAQUERY_ARM else self.unified(arm, seed)
        ev = self.config["edit_eval"]
        out = run / "eval.json"
        if out.exists():
            cached = json.loads(out.read_text())
            if cached.get("edit_eval") == ev:
                return cached["edit_identity"]
        score = edit_identity_score(run, arm, seed, ev["count"], ev["steps"])
        _write_json(out, {"edit_eval": ev, "edit_identity": score})
        return score

    # -- end-to-end pipeline and freezing audit runs --------------------------

    def _cached(self, run: Path, record: dict, ckpt: str, train) -> Path:
        if not (_json_equal(run / "config.json", record) and (run / ckpt).exists()):
            (run / "eval.json").unlink(missing_ok=True)
            train()
            _write_json(run / "config.json", record)
        return run

    def final_stage1(self) -> Path:
        """The default channel configuration trained on the pipeline budget."""
        cfg = Stage1Config.from_dict({**self.config["stage1"], **SHAPE_VARIANTS["mha_n64_d8"],
                                      **self.config["final"]["stage1"], "seed": 0})
        run = self.root / "final" / "stage1"
        return self._cached(run, asdict(cfg), "stage1.ckpt", lambda: train_decoder(cfg, run))

    def final_unified(self) -> Path:
        stage1 = self.final_stage1() / "stage1.ckpt"
        cfg = UnifiedTrainConfig.from_dict({**self.config["unified"], **self.config["final"]["unified"], "seed": 0})
        run = self.root / "final" / "unified"
        record = {"train": asdict(cfg), "stage1": str(stage1)}
        return self._cached(run, record, "unified.ckpt", lambda: train_unified(cfg, stage1, run))

    def freeze_metaquery(self) -> Path:
        """A metaquery run long enough to audit that its backbone stays frozen."""
        from .metaquery import MetaQueryConfig, train_metaquery

        stage1 = self.stage1_ckpt("mha_n64_d8", 0)
        cfg = MetaQueryConfig.from_dict({**self.config["metaquery"], **self.config["freeze_audit"]["metaquery"],
                                         "seed": 0, "backbone": str(self.trunk("lm", 0))})
        run = self.root / "freeze" / "metaquery"
        record = {"train": asdict(cfg), "stage1": str(stage1)}
        return self._cached(run, record, "metaquery.ckpt", lambda: train_metaquery(cfg, stage1, run))

    def pipeline_eval(self) -> dict:
        """Held-out single-object generation and recolor edit scores of the final pipeline."""
        run = self.final_unified()
        ev = self.config["final"]["eval"]
        out = run / "eval.json"
        if out.exists():
            cached = json.loads(out.read_text())
            if cached.get("eval") == ev:
                return cached
        res = {"eval": ev, **evaluate_pipeline(self.final_stage1() / "stage1.ckpt", run / "unified.ckpt",
                                               ev["steps"], ev["recolor_pairs"], ev["seed"])}
        _write_json(out, res)
        return res


def evaluate_pipeline(stage1_ckpt, unified_ckpt, steps: int, recolor_pairs: int, seed: int) -> dict:
    from .sampling import SamplerConfig, edit_images, generate_batch, load_pipeline

    stage1, model = load_pipeline(stage1_ckpt, unified_ckpt)
    sampler = SamplerConfig(steps=steps, seed=seed)
    prompts = [td.caption(sc) for sc in td.single_object_scenes("val")]
    images = generate_batch(prompts, stage1, model, sampler)
    t2i = [td.check_image(im, p) for im, p in zip(images, prompts)]
    pairs = td.make_edit_pairs(seed, recolor_pairs, "val", kinds=("recolor",))
    sources = np.stack([td.render(p.source) for p in pairs])
    edited = edit_images(sources, [list(p.instruction) for p in pairs], stage1, model, sampler)
    recolor = [td.check_image(o, td.caption(p.target)) == 1.0 for o, p in zip(edited, pairs)]
    # a pair passes when every object of the target caption is present, so kept objects count too
    return {"t2i_checker": float(np.mean(t2i)), "t2i_prompts": len(prompts),
            "recolor_pass_rate": float(np.mean(recolor)), "recolor_pairs": len(pairs)}


def edit_identity_pairs(count: int) -> list:
    return td.make_edit_pairs(2024, count, "val", kinds=("keep",))


def edit_identity_score(run: Path, arm: str, seed: int, count: int, steps: int) -> float:
    from .sampling import SamplerConfig, edit_images

    record = json.loads((run / "config.json").read_text())
    stage1 = load_stage1(record["stage1"])
    pairs = edit_identity_pairs(count)
    sources = np.stack([td.render(p.source) for p in pairs])
    instr = [list(p.instruction) for p in pairs]
    sampler = SamplerConfig(steps=steps, seed=seed)
    if arm == METAQUERY_ARM:
        from .metaquery import edit_from_queries, load_metaquery

        model, _ = load_metaquery(run / "metaquery.ckpt")
        out = edit_from_queries(sources, instr, stage1, model, sampler)
    else:
        model, _ = load_unified(run / "unified.ckpt")
        out = edit_images(sources, instr, stage1, model, sampler)
    return float(np.mean([td.check_image(o, td.caption(p.source)) for o, p in zip(out, pairs)]))


# -- metrics -----------------------------------------------------------------

def silhouette(x: np.ndarray, labels) -> float:
    """Mean over points of (b - a) / max(a, b) with Euclidean distances.

    a: mean distance to the other members of the point's cluster (s = 0 for
    singletons); b: smallest mean distance to another cluster.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    sq = (x * x).sum(axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    np.fill_diagonal(dist, 0.0)
    member = labels[None, :] == classes[:, None]
    sums = dist @ member.T.astype(np.float64)
    counts = member.sum(axis=1).astype(np.float64)
    own = np.searchsorted(classes, labels)
    n_own = counts[own]
    a = np.where(n_own > 1, sums[np.arange(len(x)), own] / np.maximum(n_own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[np.arange(len(x)), own] = np.inf
    b = means.min(axis=1)
    s = np.where(n_own > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


def projector_metrics(stage1_ckpt: Path, seed: int, cfg: dict) -> dict:
    """Silhouette and probe accuracies of mean-pooled standardised latents, plus fusion probes."""
    from . import numerics as nx

    stage1 = load_stage1(stage1_ckpt)
    encoder = Encoder(stage1.cfg.encoder_seed)

    def pooled(scenes):
        images = np.stack([td.render(s) for s in scenes]).astype(np.float32)
        feats = encode(encoder, images)
        lat = stage1.stats.standardize(stage1.compress_features(feats))
        return feats, lat

    k = cfg["silhouette_classes"]
    scenes, labels = td.class_scenes(seed, td.ALL_CLASSES[:k], cfg["silhouette_per_class"])
    _, lat = pooled(scenes)
    sil = silhouette(lat.mean(axis=1), labels)

    scenes, labels = td.class_scenes(seed + 1000, td.ALL_CLASSES, cfg["probe_per_class"])
    feats, lat = pooled(scenes)
    fusion = Fusion(feats.shape[-1], lat.shape[-1], np.random.default_rng(seed))
    with nx.no_grad():
        seq = fusion(feats, lat.astype(np.float32), "seq_concat").data.mean(axis=1)
        dim = fusion(feats, lat.astype(np.float32), "dim_concat").data.mean(axis=1) \
            if lat.shape[1] == feats.shape[1] else None
    return {
        "silhouette": sil,
        "probe_compressed": linear_probe(lat.mean(axis=1), labels, seed),
        "probe_features": linear_probe(feats.mean(axis=1), labels, seed),
        "probe_seq_concat": linear_probe(seq, labels, seed),
        "probe_dim_concat": linear_probe(dim, labels, seed) if dim is not None else None,
    }


# -- reports -----------------------------------------------------------------

_OPS = {"<": np.less, "<=": np.less_equal, ">=": np.greater_equal, ">": np.greater}


@dataclass
class Predicate:
    name: str
    lhs: str
    op: str
    rhs: str
    lhs_values: list
    rhs_values: list

    @property
    def lhs_median(self) -> float:
        return float(np.median(self.lhs_values)) if self.lhs_values else math.nan

    @property
    def rhs_median(self) -> float:
        return float(np.median(self.rhs_values)) if self.rhs_values else math.nan

    @property
    def passed(self) -> bool:
        return bool(_OPS[self.op](self.lhs_median, self.rhs_median))

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: median {self.lhs}={self.lhs_median:.6g} {self.op} "
                f"median {self.rhs}={self.rhs_median:.6g} (raw {self.lhs_values} vs {self.rhs_values})")


@dataclass
class Report:
    name: str
    rows: list[dict]
    predicates: list[Predicate]
    notes: list[str] = field(default_factory=list)

    def predicate(self, name: str) -> Predicate:
        return next(p for p in self.predicates if p.name == name)

    def to_markdown(self) -> str:
        cols = list(self.rows[0]) if self.rows else []
        lines = [f"# Ablation: {self.name}", "", "| " + " | ".join(cols) + " |",
                 "|" + "---|" * len(cols)]
        for r in self.rows:
            lines.append("| " + " | ".join(_fmt(r[c]) for c in cols) + " |")
        lines += ["", "## Directional predicates", ""]
        lines += [f"- {p.line()}" for p in self.predicates]
        if self.notes:
            lines += ["", "## Notes", ""] + [f"- {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows({k: _fmt(v) for k, v in r.items()} for r in self.rows)
        return buf.getvalue()

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        md = out_dir / f"report_{self.name}.md"
        cs = out_dir / f"report_{self.name}.csv"
        md.write_text(self.to_markdown())
        cs.write_text(self.to_csv())
        return md, cs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    return str(v)


def _seeds(store: RunStore, seeds) -> list[int]:
    return list(seeds if seeds is not None else store.config["seeds"])


def _final(run: Path) -> dict | None:
    path = run / "metrics.jsonl"
    if (run / "failed.json").exists() or not path.exists():
        return None
    recs = read_metrics(path)
    return recs[-1] if recs else None


def _require_tau(store: RunStore) -> float:
    tau = store.config.get("tau")
    if tau is None:
        raise ValueError("tau is not set; run `unicom pilot-tau` once and commit the value")
    return float(tau)


def report(name: str, store: RunStore, seeds=None) -> Report:
    """Rebuild an experiment's report from the logs in ``store``."""
    seeds = _seeds(store, seeds)
    if name == "shape":
        return _report_shape(store, seeds)
    if name == "convergence":
        return _report_convergence(store, seeds)
    if name == "projector":
        return _report_projector(store, seeds)
    if name == "init-pathway":
        return _report_init_pathway(store, seeds)
    raise ValueError(f"unknown experiment '{name}'")


def _report_shape(store, seeds) -> Report:
    rows, mse = [], {}
    for name in SHAPE_VARIANTS:
        for seed in seeds:
            rec = _final(store.stage1_dir(name, seed))
            ok = rec is not None
            rows.append({"variant": name, "seed": seed, "status": "ok" if ok else "failed",
                         "mse": rec["mse"] if ok else None, "psnr": rec["psnr"] if ok else None,
                         "checker": rec["checker"] if ok else None})
            if ok:
                mse.setdefault(name, []).append(rec["mse"])
    preds = [Predicate("channel_beats_sequence", "mse(mha_n64_d8)", "<", "mse(sequence_n16_D144)",
                       mse.get("mha_n64_d8", []), mse.get("sequence_n16_D144", [])),
             Predicate("mlp_channel_beats_sequence", "mse(mlp_n64_d8)", "<", "mse(sequence_n16_D144)",
                       mse.get("mlp_n64_d8", []), mse.get("sequence_n16_D144", []))]
    notes = []
    base = mse.get("uncompressed_n64_D144", [])
    for name in SHAPE_VARIANTS:
        if name != "uncompressed_n64_D144" and base and mse.get(name):
            holds = np.median(base) <= np.median(mse[name])
            notes.append(f"uncompressed <= {name}: {'holds' if holds else 'does not hold'} "
                         f"({np.median(base):.6g} vs {np.median(mse[name]):.6g})")
    return Report("shape", rows, preds, notes)


def _unified_rows(store, arms, seeds, tau) -> tuple[list[dict], dict]:
    rows, steps = [], {}
    for arm in arms:
        for seed in seeds:
            path = store.unified_dir(arm, seed) / "metrics.jsonl"
            recs = read_metrics(path) if path.exists() else []
            s = steps_to_tau(recs, tau) if recs else math.nan
            rows.append({"variant": arm, "seed": seed, "steps_to_tau": s,
                         "final_eval_l_fm": recs[-1]["eval_l_fm"] if recs else None,
                         "last_step": recs[-1]["step"] if recs else None})
            steps.setdefault(arm, []).append(s)
    return rows, steps


def _report_convergence(store, seeds) -> Report:
    tau = _require_tau(store)
    rows, steps = _unified_rows(store, ["transfusion_lm_d8", "transfusion_lm_D144"], seeds, tau)
    pred = Predicate("compressed_target_converges_faster", "steps(d8)", "<", "steps(D144)",
                     steps["transfusion_lm_d8"], steps["transfusion_lm_D144"])
    ratio = pred.rhs_median / pred.lhs_median if pred.lhs_median > 0 else math.nan
    return Report("convergence", rows, [pred], [f"tau = {tau:.6g}", f"median speedup ratio = {ratio:.4g}"])


def _report_projector(store, seeds) -> Report:
    rows, vals = [], {}
    for name in ("mlp_n64_d8", "mha_n64_d8"):
        for seed in seeds:
            path = store.stage1_dir(name, seed) / "projector.json"
            m = json.loads(path.read_text()) if path.exists() else {}
            rows.append({"variant": name, "seed": seed, **{k: m.get(k) for k in (
                "silhouette", "probe_compressed", "probe_features", "probe_seq_concat", "probe_dim_concat")}})
            for k, v in m.items():
                vals.setdefault((name, k), []).append(v)
    get = lambda n, k: vals.get((n, k), [])  # noqa: E731
    preds = [
        Predicate("mha_silhouette_ge_mlp", "silhouette(mha)", ">=", "silhouette(mlp)",
                  get("mha_n64_d8", "silhouette"), get("mlp_n64_d8", "silhouette")),
        Predicate("mha_probe_ge_mlp", "probe(mha)", ">=", "probe(mlp)",
                  get("mha_n64_d8", "probe_compressed"), get("mlp_n64_d8", "probe_compressed")),
        Predicate("seq_concat_probe_ge_compressed", "probe(seq_concat)", ">=", "probe(compressed)",
                  get("mha_n64_d8", "probe_seq_concat"), get("mha_n64_d8", "probe_compressed")),
    ]
    return Report("projector", rows, preds)


def _report_init_pathway(store, seeds) -> Report:
    tau = _require_tau(store)
    arms = ["transfusion_lm_d8", "transfusion_vlm_d8", METAQUERY_ARM]
    rows, steps = _unified_rows(store, arms, seeds, tau)
    edit = {}
    for r in rows:
        path = store.unified_dir(r["variant"], r["seed"]) / "eval.json"
        score = json.loads(path.read_text())["edit_identity"] if path.exists() else None
        r["edit_identity"] = score
        if score is not None and r["variant"] != "transfusion_vlm_d8":
            edit.setdefault(r["variant"], []).append(score)
    preds = [
        Predicate("transfusion_converges_no_slower", "steps(transfusion)", "<=", "steps(metaquery)",
                  steps["transfusion_lm_d8"], steps[METAQUERY_ARM]),
        Predicate("vlm_init_converges_no_slower", "steps(vlm_init)", "<=", "steps(lm_init)",
                  steps["transfusion_vlm_d8"], steps["transfusion_lm_d8"]),
        Predicate("transfusion_preserves_identity", "edit(transfusion)", ">=", "edit(metaquery)",
                  edit.get("transfusion_lm_d8", []), edit.get(METAQUERY_ARM, [])),
    ]
    return Report("init-pathway", rows, preds, [f"tau = {tau:.6g}"])


# -- ablations ---------------------------------------------------------------

def _with_budget(store: RunStore, section: str, budget: int | None) -> RunStore:
    if budget is None:
        return store
    return RunStore(store.root, _merge(store.config, {section: {"steps": int(budget)}}))


def ablate_shape(store: RunStore, seeds=None, budget: int | None = None) -> Report:
    store = _with_budget(store, "stage1", budget)
    for name in SHAPE_VARIANTS:
        for seed in _seeds(store, seeds):
            store.stage1(name, seed)
    return report("shape", store, seeds)


def ablate_convergence(store: RunStore, seeds=None, budget: int | None = None) -> Report:
    store = _with_budget(store, "unified", budget)
    for arm in ("transfusion_lm_d8", "transfusion_lm_D144"):
        for seed in _seeds(store, seeds):
            store.unified(arm, seed)
    return report("convergence", store, seeds)


def ablate_projector(store: RunStore, seeds=None, budget: int | None = None) -> Report:
    store = _with_budget(store, "stage1", budget)
    for name in ("mlp_n64_d8", "mha_n64_d8"):
        for seed in _seeds(store, seeds):
            run = store.stage1(name, seed)
            out = run / "projector.json"
            if not out.exists():
                _write_json(out, projector_metrics(run / "stage1.ckpt", seed, store.config["projector"]))
    return report("projector", store, seeds)


def ablate_init_and_pathway(store: RunStore, seeds=None, budget: int | None = None) -> Report:
    store = _with_budget(store, "unified", budget)
    if budget is not None:
        store = _with_budget(store, "metaquery", budget)
    for seed in _seeds(store, seeds):
        store.unified("transfusion_vlm_d8", seed)
        store.edit_identity("transfusion_lm_d8", seed)
        store.edit_identity(METAQUERY_ARM, seed)
    return report("init-pathway", store, seeds)


ABLATIONS = {"shape": ablate_shape, "convergence": ablate_convergence, "projector": ablate_projector,
             "init-pathway": ablate_init_and_pathway}


def pilot_tau(store: RunStore, seed: int = 99, fraction: float = 0.6) -> float:
    """Eval flow loss of the uncompressed-target arm at ``fraction`` of the unified budget."""
    cfg = _merge(store.config, {"tau": None})
    run = RunStore(store.root / "pilot", cfg).unified("transfusion_lm_D144", seed)
    recs = read_metrics(run / "metrics.jsonl")
    target = fraction * cfg["unified"]["steps"]
    rec = min(recs, key=lambda r: abs(r["step"] - target))
    return float(rec["eval_l_fm"])


# -- curve CSVs --------------------------------------------------------------

CURVES = {
    "shape": ("stage1", list(SHAPE_VARIANTS), ("mse", "psnr", "checker")),
    "convergence": ("unified", ["transfusion_lm_d8", "transfusion_lm_D144"], ("eval_l_fm",)),
    "init-pathway": ("unified", ["transfusion_lm_d8", "transfusion_vlm_d8", METAQUERY_ARM], ("eval_l_fm",)),
}
CSV_COLUMNS = ("experiment", "variant", "seed", "step", "metric", "value")


def emit_plots_csv(name: str, store: RunStore, out_dir, seeds=None) -> Path:
    """One long-format CSV of metric-vs-step curves: experiment,variant,seed,step,metric,value."""
    if name not in CURVES:
        raise ValueError(f"experiment '{name}' has no curves (choose from {sorted(CURVES)})")
    kind, variants, metrics = CURVES[name]
    rows = []
    for variant in variants:
        for seed in _seeds(store, seeds):
            run = store.stage1_dir(variant, seed) if kind == "stage1" else store.unified_dir(variant, seed)
            path = run / "metrics.jsonl"
            if not path.exists():
                continue
            for rec in read_metrics(path):
                for m in metrics:
                    if rec.get(m) is not None:
                        rows.append((name, variant, seed, int(rec["step"]), m, repr(float(rec[m]))))
    rows.sort(key=lambda r: (r[1], r[2], r[3], r[4]))
    out = Path(out_dir) / f"curves_{name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    out.write_text(buf.getvalue())
    return out
