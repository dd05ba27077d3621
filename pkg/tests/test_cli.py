import json

import pytest

from unicom import toydata as td
from unicom.cli import build_parser, main
from unicom.sampling import read_ppm, write_ppm


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["ablate", "--name", "shape", "--seeds", "2"])
    assert args.seeds == 2 and args.budget is None
    with pytest.raises(SystemExit):
        build_parser().parse_args(["report", "--name", "nonsense"])


def test_export_corpus(tmp_path, capsys):
    assert main(["export-corpus", "--out", str(tmp_path), "--count", "5"]) == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(tmp_path / "train.jsonl"), str(tmp_path / "val.jsonl")]
    loaded = td.load_corpus(tmp_path / "train.jsonl")
    assert [toks for _, toks in loaded] == [toks for _, toks in td.generate_corpus(0, 5, "train")]


def test_generate_and_edit(tiny_stage1, tiny_unified, tmp_path, capsys):
    out = tmp_path / "g.ppm"
    assert main(["generate", "--prompt-tokens", "red square at 0 0", "--stage1", str(tiny_stage1),
                 "--unified", str(tiny_unified), "--steps", "2", "--out", str(out)]) == 0
    assert "checker" in capsys.readouterr().out
    assert read_ppm(out).shape == (32, 32, 3)

    src = tmp_path / "src.ppm"
    write_ppm(src, td.render(td.generate_corpus(0, 1)[0][0]))
    edited = tmp_path / "e.ppm"
    assert main(["edit", "--image", str(src), "--instruction", "recolor 0 0 blue", "--stage1", str(tiny_stage1),
                 "--unified", str(tiny_unified), "--steps", "2", "--out", str(edited)]) == 0
    assert read_ppm(edited).shape == (32, 32, 3)


def test_bad_prompt_is_rejected(tiny_stage1, tiny_unified, tmp_path):
    with pytest.raises(ValueError):
        main(["generate", "--prompt-tokens", "red banana", "--stage1", str(tiny_stage1),
              "--unified", str(tiny_unified), "--out", str(tmp_path / "x.ppm")])


def test_train_stage1_command(tmp_path, capsys):
    from conftest import TINY_STAGE1

    cfg = tmp_path / "s1.json"
    cfg.write_text(json.dumps({**TINY_STAGE1, "steps": 2, "eval_every": 2}))
    assert main(["train-stage1", "--config", str(cfg), "--out", str(tmp_path / "s1")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["frozen_ok"] is True
