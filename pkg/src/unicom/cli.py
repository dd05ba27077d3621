"""Command line: training stages, sampling, ablations, reports and corpus export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import toydata as td
from .experiments import ABLATIONS, EXPERIMENTS, RunStore, emit_plots_csv, load_config, pilot_tau, report


def _store(args) -> RunStore:
    overrides = {"seeds": list(range(args.seeds))} if getattr(args, "seeds", None) else None
    return RunStore(args.runs, load_config(args.config, overrides))


def cmd_generate(args) -> int:
    from .sampling import SamplerConfig, generate, load_pipeline, write_ppm

    stage1, model = load_pipeline(args.stage1, args.unified)
    tokens = td.prompt_tokens(args.prompt_tokens)
    image = generate(tokens, stage1, model, SamplerConfig(args.steps, args.guidance, args.seed))
    write_ppm(args.out, image)
    print(f"wrote {args.out} (checker {td.check_image(image, tokens):.3f})")
    return 0


def cmd_edit(args) -> int:
    from .sampling import SamplerConfig, edit, load_pipeline, read_ppm, write_ppm

    stage1, model = load_pipeline(args.stage1, args.unified)
    image = edit(read_ppm(args.image), td.tokenize(args.instruction), stage1, model,
                 SamplerConfig(args.steps, 1.0, args.seed))
    write_ppm(args.out, image)
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    store = _store(args)
    rep = ABLATIONS[args.name](store, budget=args.budget)
    md, cs = rep.write(args.out or store.root / "reports")
    print(rep.to_markdown())
    print(f"wrote {md} and {cs}")
    return 0 if all(p.passed for p in rep.predicates) else 1


def cmd_report(args) -> int:
    store = _store(args)
    rep = report(args.name, store)
    out = Path(args.out or store.root / "reports")
    rep.write(out)
    if args.name != "projector":
        emit_plots_csv(args.name, store, out)
    print(rep.to_markdown())
    return 0


def cmd_pilot_tau(args) -> int:
    tau = pilot_tau(_store(args))
    print(json.dumps({"tau": tau}))
    return 0


def cmd_pipeline(args) -> int:
    store = _store(args)
    ev = store.pipeline_eval()
    print(json.dumps({"stage1": str(store.final_stage1() / "stage1.ckpt"),
                      "unified": str(store.final_unified() / "unified.ckpt"), **ev}))
    return 0


def cmd_train_stage1(args) -> int:
    from .decoder import Stage1Config, train_decoder

    cfg = Stage1Config.from_dict(json.loads(Path(args.config).read_text()) if args.config else {})
    res = train_decoder(cfg, args.out)
    print(json.dumps({"checkpoint": str(res.checkpoint), "final": res.final, "frozen_ok": res.frozen_ok}))
    return 0


def cmd_train_unified(args) -> int:
    from .transfusion import UnifiedTrainConfig, train_unified

    cfg = UnifiedTrainConfig.from_dict(json.loads(Path(args.config).read_text()) if args.config else {})
    res = train_unified(cfg, args.stage1, args.out)
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps_to_tau": res.steps_to_tau,
                      "frozen_ok": res.frozen_ok}))
    return 0


def cmd_export_corpus(args) -> int:
    for path in td.export_corpus(args.out, args.seed, args.count):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unicom", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample an image from a token prompt")
    g.add_argument("--prompt-tokens", required=True, help='e.g. "red square at 0 0"')
    g.add_argument("--stage1", required=True)
    g.add_argument("--unified", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=32)
    g.add_argument("--guidance", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    e = sub.add_parser("edit", help="edit a PPM image with a token instruction")
    e.add_argument("--image", required=True)
    e.add_argument("--instruction", required=True, help='e.g. "recolor 1 2 blue"')
    e.add_argument("--stage1", required=True)
    e.add_argument("--unified", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=32)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_edit)

    for name, fn, helptext in (("ablate", cmd_ablate, "train the runs of an ablation and report"),
                               ("report", cmd_report, "rebuild a report and curve CSV from logs")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--name", required=True, choices=EXPERIMENTS)
        a.add_argument("--seeds", type=int, default=None, help="number of seeds (0..k-1)")
        a.add_argument("--runs", default="runs", help="run store directory")
        a.add_argument("--config", default=None, help="JSON overrides of the packaged defaults")
        a.add_argument("--out", default=None)
        if name == "ablate":
            a.add_argument("--budget", type=int, default=None, help="step budget of the trained stage")
        a.set_defaults(fn=fn)

    t = sub.add_parser("pilot-tau", help="measure the steps-to-tau threshold from the uncompressed baseline")
    t.add_argument("--runs", default="runs")
    t.add_argument("--config", default=None)
    t.set_defaults(fn=cmd_pilot_tau)

    f = sub.add_parser("pipeline", help="train or reuse the end-to-end pipeline and score it on held-out prompts")
    f.add_argument("--runs", default="runs")
    f.add_argument("--config", default=None)
    f.set_defaults(fn=cmd_pipeline)

    s1 = sub.add_parser("train-stage1", help="train compressor, decompressor and pixel decoder")
    s1.add_argument("--config", default=None)
    s1.add_argument("--out", required=True)
    s1.set_defaults(fn=cmd_train_stage1)

    s2 = sub.add_parser("train-unified", help="train the unified transformer on a frozen stage 1")
    s2.add_argument("--config", default=None)
    s2.add_argument("--stage1", required=True)
    s2.add_argument("--out", required=True)
    s2.set_defaults(fn=cmd_train_unified)

    x = sub.add_parser("export-corpus", help="write the toy corpus as JSONL")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--count", type=int, default=1000)
    x.set_defaults(fn=cmd_export_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
