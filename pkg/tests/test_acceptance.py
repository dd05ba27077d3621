"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training-backed criteria share one run store (``UNICOM_RUN_DIR`` keeps it
between sessions) built from the packaged defaults, so runs used by several
criteria are trained once.
"""

import math
import time

import numpy as np
import pytest

from unicom import flow
from unicom import numerics as nx
from unicom.checkpoint import load_checkpoint, params_hash
from unicom.compressor import Compressor
from unicom.decoder import load_stage1
from unicom.encoder import Encoder
from unicom.experiments import RunStore, load_config, projector_metrics, report
from unicom.numerics import Tensor
from unicom.transfusion import MixedSequence, build_mask, load_unified

from conftest import ACCEPTANCE
from gradcases import INSTANCES, OPS, worst_error
from test_transfusion import EXAMPLE_MASK, check_mask_invariants, example_sequence

pytestmark = pytest.mark.acceptance

SUITE_START: list[float] = []


@pytest.fixture(autouse=True)
def suite_clock():
    # starts at the first acceptance test, so unit tests collected alongside do not count
    if not SUITE_START:
        SUITE_START.append(time.perf_counter())


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def store(run_dir):
    return RunStore(run_dir, load_config())


def test_c01_gradient_oracle():
    start = time.perf_counter()
    worst = {name: worst_error(name) for name in OPS}
    elapsed = time.perf_counter() - start
    name = max(worst, key=worst.get)
    verdict(1, worst[name] < 1e-4 and elapsed < 120 and INSTANCES >= 20,
            f"{len(OPS)} ops x {INSTANCES} instances, worst relative error {worst[name]:.2e} ({name}), "
            f"{elapsed:.1f}s")


def test_c02_flow_algebra():
    rng = np.random.default_rng(2)
    z1, eps = rng.standard_normal((4, 64, 8)), rng.standard_normal((4, 64, 8))
    errs = {
        "t=0": np.abs(flow.interpolate(z1, eps, np.zeros(4)) - eps).max(),
        "t=1": np.abs(flow.interpolate(z1, eps, np.ones(4)) - z1).max(),
        "t=1/2": np.abs(flow.interpolate(z1, eps, np.full(4, 0.5)) - 0.5 * (z1 + eps)).max(),
        "velocity": np.abs(flow.target_velocity(z1, eps) - (z1 - eps)).max(),
        "straight": np.abs(flow.euler_integrate(lambda z, t: flow.target_velocity(z1, eps), eps, 50) - z1).max(),
    }
    decay = abs(flow.euler_integrate(lambda z, t: -z, np.ones(1), 1000)[0] - math.exp(-1))
    ok = max(errs.values()) <= 1e-12 and decay < 1e-3
    verdict(2, ok, f"max identity error {max(errs.values()):.1e}, decay error {decay:.2e}")


def test_c03_mask_suite():
    exact = np.array_equal(build_mask(example_sequence()), EXAMPLE_MASK)
    rng = np.random.default_rng(3)
    for _ in range(100):
        parts = []
        for _ in range(int(rng.integers(1, 6))):
            if rng.random() < 0.5:
                parts.append(("text", list(rng.integers(5, 23, int(rng.integers(1, 6))))))
            else:
                parts.append(("image", int(rng.integers(1, 7)), "target"))
        seq = MixedSequence.build(parts)
        check_mask_invariants(seq, build_mask(seq))
    verdict(3, exact, "7-slot example mask bit-exact; invariants hold on 100 random sequences")


def test_c04_equivariance():
    rng = np.random.default_rng(4)
    mha = Compressor("mha", 144, 8, 64, 64, np.random.default_rng(0))
    worst_mha = 0.0
    for _ in range(50):
        z = rng.standard_normal((1, 64, 144)).astype(np.float32)
        perm = rng.permutation(64)
        with nx.no_grad():
            worst_mha = max(worst_mha, np.abs(mha(z).data[0][perm] - mha(z[:, perm]).data[0]).max())
    mlp = Compressor("mlp", 144, 8, 64, 64, np.random.default_rng(0))
    worst_mlp = 0.0
    for k in range(10):
        z = rng.standard_normal((1, 64, 144)).astype(np.float32)
        bumped = z.copy()
        bumped[0, k] += rng.standard_normal(144).astype(np.float32)
        with nx.no_grad():
            a, b = mlp(z).data[0], mlp(bumped).data[0]
        worst_mlp = max(worst_mlp, np.abs(np.delete(a - b, k, axis=0)).max())
    verdict(4, worst_mha < 1e-5 and worst_mlp < 1e-7,
            f"MHA permutation error {worst_mha:.1e} over 50 permutations; MLP cross-token leak {worst_mlp:.1e}")


def _hashes_match(header: dict, reference: dict) -> bool:
    recorded = header.get("frozen", {})
    return all(recorded.get(name) == h for name, h in reference.items())


def test_c05_freezing(store):
    # stage 1: the encoder is rebuilt from its seed and compared with the trained run's record
    s1_run = store.final_stage1()
    s1_header, _ = load_checkpoint(s1_run / "stage1.ckpt")
    encoder = Encoder(s1_header["config"]["encoder_seed"])
    stage1_ok = (_hashes_match(s1_header, {"encoder": params_hash(encoder.named_parameters())})
                 and s1_header["config"]["steps"] >= 1000)

    # stage 2: compressor, decompressor and pixel decoder as stored in the stage-1 file
    un_run = store.final_unified()
    un_header, _ = load_checkpoint(un_run / "unified.ckpt")
    stage1 = load_stage1(un_header["stage1"]["path"])
    ref = {name: params_hash(m.named_parameters()) for name, m in stage1.trainable_modules().items()}
    unified_ok = _hashes_match(un_header, ref) and un_header["train"]["steps"] >= 1000

    # metaquery: the backbone as stored in its trunk checkpoint
    mq_run = store.freeze_metaquery()
    mq_header, _ = load_checkpoint(mq_run / "metaquery.ckpt")
    backbone, _ = load_unified(mq_header["train"]["backbone"])
    mq_ok = (_hashes_match(mq_header, {"backbone": params_hash(backbone.named_parameters())})
             and mq_header["train"]["steps"] >= 1000)
    verdict(5, stage1_ok and unified_ok and mq_ok,
            f"encoder frozen in stage 1: {stage1_ok}; stage 1 frozen in unified training: {unified_ok}; "
            f"backbone frozen in metaquery: {mq_ok}")


def test_c06_reconstruction(store):
    from unicom.checkpoint import read_metrics

    run = store.final_stage1()
    recs = read_metrics(run / "metrics.jsonl")
    hit = [r for r in recs if r["psnr"] > 20 and r["checker"] >= 0.9]
    last = recs[-1]
    ok = bool(hit) and last["step"] <= 3000
    verdict(6, ok, f"held-out PSNR {last['psnr']:.2f} dB, checker {last['checker']:.3f} at step {last['step']}; "
                   f"first passing eval at step {hit[0]['step'] if hit else 'never'}")


def _ordering(number, rep, names):
    preds = [rep.predicate(n) for n in names]
    for p in preds:
        print("   ", p.line())
    verdict(number, all(p.passed for p in preds), "; ".join(
        f"{p.lhs} {p.lhs_median:.4g} {p.op} {p.rhs} {p.rhs_median:.4g}" for p in preds))


def test_c07_shape_ablation(store):
    for seed in store.config["seeds"]:
        for name in ("mha_n64_d8", "sequence_n16_D144"):
            store.stage1(name, seed)
    _ordering(7, report("shape", store), ["channel_beats_sequence"])


def test_c08_convergence_ablation(store):
    for seed in store.config["seeds"]:
        for arm in ("transfusion_lm_d8", "transfusion_lm_D144"):
            store.unified(arm, seed)
    _ordering(8, report("convergence", store), ["compressed_target_converges_faster"])


def test_c09_projector_ablation(store):
    import json

    for seed in store.config["seeds"]:
        for name in ("mlp_n64_d8", "mha_n64_d8"):
            run = store.stage1(name, seed)
            out = run / "projector.json"
            if not out.exists():
                out.write_text(json.dumps(projector_metrics(run / "stage1.ckpt", seed, store.config["projector"])))
    _ordering(9, report("projector", store),
              ["mha_silhouette_ge_mlp", "mha_probe_ge_mlp", "seq_concat_probe_ge_compressed"])


def test_c10_pathway_and_init(store):
    for seed in store.config["seeds"]:
        store.unified("transfusion_vlm_d8", seed)
        store.edit_identity("transfusion_lm_d8", seed)
        store.edit_identity("metaquery_d8", seed)
    _ordering(10, report("init-pathway", store), ["transfusion_converges_no_slower",
                                                  "vlm_init_converges_no_slower", "transfusion_preserves_identity"])


def test_c11_end_to_end(store):
    from unicom import toydata as td
    from unicom.sampling import SamplerConfig, edit, generate, load_pipeline

    ev = store.pipeline_eval()
    stage1, model = load_pipeline(store.final_stage1() / "stage1.ckpt", store.final_unified() / "unified.ckpt")
    sampler = SamplerConfig(steps=8, seed=3)
    prompt = td.prompt_tokens("blue circle at 2 1")
    same_gen = generate(prompt, stage1, model, sampler).tobytes() == generate(prompt, stage1, model, sampler).tobytes()
    src = td.render(td.make_edit_pairs(0, 1, "val", kinds=("recolor",))[0].source)
    instr = td.tokenize("keep")
    same_edit = edit(src, instr, stage1, model, sampler).tobytes() == edit(src, instr, stage1, model, sampler).tobytes()
    elapsed = time.perf_counter() - SUITE_START[0]
    ok = ev["t2i_checker"] >= 0.8 and ev["recolor_pass_rate"] >= 0.7 and same_gen and same_edit and elapsed < 3600
    verdict(11, ok, f"held-out single-object checker {ev['t2i_checker']:.3f} over {ev['t2i_prompts']} prompts, "
                    f"recolor pass rate {ev['recolor_pass_rate']:.3f} over {ev['recolor_pairs']} pairs, "
                    f"deterministic {same_gen and same_edit}, suite time {elapsed / 60:.1f} min")
