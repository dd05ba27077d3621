import json
import math

import numpy as np
import pytest

from unicom.checkpoint import MetricsLog
from unicom.experiments import (CSV_COLUMNS, SHAPE_VARIANTS, Predicate, RunStore, ablate_shape, emit_plots_csv,
                                load_config, report, silhouette)

from conftest import TINY_STAGE1


def brute_silhouette(x, labels):
    n = len(x)
    s = []
    for i in range(n):
        same = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not same:
            s.append(0.0)
            continue
        a = sum(math.dist(x[i], x[j]) for j in same) / len(same)
        b = min(
            sum(math.dist(x[i], x[j]) for j in range(n) if labels[j] == c) / sum(1 for lab in labels if lab == c)
            for c in set(labels) if c != labels[i]
        )
        s.append((b - a) / max(a, b))
    return sum(s) / n


@pytest.mark.parametrize("seed", range(5))
def test_silhouette_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 30)
    x = rng.standard_normal((30, 4)) + labels[:, None] * (seed % 3)
    assert abs(silhouette(x, labels) - brute_silhouette(x.tolist(), labels.tolist())) < 1e-9


def test_silhouette_edge_cases():
    x = np.array([[0.0], [0.1], [5.0]])
    assert abs(silhouette(x, [0, 0, 1]) - brute_silhouette(x.tolist(), [0, 0, 1])) < 1e-12
    with pytest.raises(ValueError):
        silhouette(x, [1, 1, 1])


def test_predicate_medians_and_line():
    p = Predicate("p", "a", "<", "b", [3.0, 1.0, 2.0], [5.0, 4.0, 0.0])
    assert p.lhs_median == 2.0 and p.rhs_median == 4.0 and p.passed
    assert p.line().startswith("PASS p: median a=2 < median b=4")
    assert not Predicate("q", "a", ">=", "b", [1.0], [2.0]).passed
    # infinite steps (never reached tau) compare as expected
    assert Predicate("r", "a", "<", "b", [100.0, 200.0, 300.0], [math.inf, math.inf, 300.0]).passed


def test_load_config_deep_merge(tmp_path):
    base = load_config()
    assert base["seeds"] == [0, 1, 2]
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"stage1": {"steps": 5}}))
    cfg = load_config(path, {"unified": {"lr": 0.5}})
    assert cfg["stage1"]["steps"] == 5 and cfg["stage1"]["batch_size"] == base["stage1"]["batch_size"]
    assert cfg["unified"]["lr"] == 0.5 and cfg["unified"]["width"] == base["unified"]["width"]


def _fake_unified_logs(store, arms, seeds, steps):
    for arm in arms:
        for seed in seeds:
            log = MetricsLog(store.unified_dir(arm, seed) / "metrics.jsonl", seed=seed)
            for k, step in enumerate(steps):
                log.write(step, eval_l_fm=1.0 / (k + 1 + seed) + 0.1 * (arm == "transfusion_lm_D144"))


def test_curves_csv_contract(tmp_path):
    store = RunStore(tmp_path, load_config(overrides={"tau": 0.3}))
    arms = ["transfusion_lm_d8", "transfusion_lm_D144"]
    _fake_unified_logs(store, arms, [0, 1, 2], [0, 50, 100, 150])
    out = emit_plots_csv("convergence", store, tmp_path / "out")
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) - 1 == 4 * 2 * 3
    first = out.read_bytes()
    assert emit_plots_csv("convergence", store, tmp_path / "out").read_bytes() == first
    with pytest.raises(ValueError):
        emit_plots_csv("projector", store, tmp_path / "out")


def test_convergence_report_from_logs(tmp_path):
    store = RunStore(tmp_path, load_config(overrides={"tau": 0.31}))
    _fake_unified_logs(store, ["transfusion_lm_d8", "transfusion_lm_D144"], [0, 1, 2], [0, 50, 100, 150])
    rep = report("convergence", store)
    assert len(rep.rows) == 6
    pred = rep.predicates[0]
    assert pred.lhs_values == [150.0, 100.0, 50.0]
    assert pred.rhs_values == [math.inf, 150.0, 100.0]
    assert pred.passed
    md, cs = rep.write(tmp_path / "reports")
    assert "PASS compressed_target_converges_faster" in md.read_text()
    assert cs.read_text().splitlines()[0] == "variant,seed,steps_to_tau,final_eval_l_fm,last_step"


def test_tau_required(tmp_path):
    with pytest.raises(ValueError, match="tau"):
        report("convergence", RunStore(tmp_path, load_config(overrides={"tau": None})))


def test_shape_ablation_plumbing(tmp_path):
    stage1 = {**TINY_STAGE1, "steps": 2, "eval_every": 2}
    store = RunStore(tmp_path, load_config(overrides={"stage1": stage1, "seeds": [0]}))
    rep = ablate_shape(store)
    assert len(rep.rows) == len(SHAPE_VARIANTS) * 1
    assert {r["status"] for r in rep.rows} == {"ok"}
    ckpt = store.stage1_dir("mha_n64_d8", 0) / "stage1.ckpt"
    stamp = ckpt.stat().st_mtime_ns
    store.stage1("mha_n64_d8", 0)  # cached: same config, no retraining
    assert ckpt.stat().st_mtime_ns == stamp

    diverging = RunStore(tmp_path / "div", load_config(overrides={
        "stage1": {**stage1, "lr": 1e9, "warmup": 0, "steps": 40}, "seeds": [0]}))
    with pytest.warns(RuntimeWarning):
        diverging.stage1("mlp_n64_d8", 0)
    rows = report("shape", diverging).rows
    assert [r["status"] for r in rows if r["variant"] == "mlp_n64_d8"] == ["failed"]


def _tiny_final():
    from conftest import TINY_UNIFIED

    stage1 = {**TINY_STAGE1, "steps": 2, "eval_every": 2}
    return {"seeds": [0], "stage1": stage1, "unified": TINY_UNIFIED,
            "trunk": {"lm_steps": 2, "vlm_steps": 2},
            "metaquery": {"depth": 1, "heads": 2, "n_queries": 4, "connector_depth": 1, "batch_size": 2,
                          "warmup": 1, "train_size": 100, "edit_size": 16, "eval_size": 4},
            "final": {"stage1": {"steps": 3}, "unified": {"steps": 3, "edit_kinds": ["recolor"]},
                      "eval": {"steps": 2, "recolor_pairs": 3, "seed": 0}},
            "freeze_audit": {"metaquery": {"steps": 3, "eval_every": 3}}}


def test_final_pipeline_and_freeze_audit(tmp_path, capsys):
    from unicom.checkpoint import load_checkpoint, params_hash
    from unicom.cli import main
    from unicom.transfusion import load_unified

    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(_tiny_final()))
    assert main(["pipeline", "--runs", str(tmp_path / "runs"), "--config", str(cfg)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["t2i_checker"] <= 1.0 and out["recolor_pairs"] == 3
    header, _ = load_checkpoint(out["unified"])
    assert header["train"]["edit_kinds"] == ["recolor"] and set(header["frozen"]) >= {"compressor", "encoder"}

    store = RunStore(tmp_path / "runs", load_config(cfg))
    cached = store.pipeline_eval()  # read back from eval.json, no retraining
    assert cached["eval"] == out["eval"] and cached["recolor_pass_rate"] == out["recolor_pass_rate"]
    run = store.freeze_metaquery()
    mq, _ = load_checkpoint(run / "metaquery.ckpt")
    backbone, _ = load_unified(mq["train"]["backbone"])
    assert mq["frozen"]["backbone"] == params_hash(backbone.named_parameters())
