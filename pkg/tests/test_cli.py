import json
import subprocess
import sys

import pytest

from symgen.cli import UsageError, main, parse_seeds
from symgen.corpus import read_corpus
from symgen.generator import load_checkpoint


def test_parse_seeds():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds("0..1,7") == [0, 1, 7]
    for bad in ("", "a", "1,1", "3..x"):
        with pytest.raises(UsageError):
            parse_seeds(bad)


def test_canon(capsys):
    assert main(["canon", "mul x1 x2", "mul x2 x1"]) == 0
    assert capsys.readouterr().out.strip() == "Equal"
    assert main(["canon", "mul x1 x2", "add x1 x2"]) == 0
    assert capsys.readouterr().out.strip() == "NotEqual"
    assert main(["canon", "mul x1", "x1"]) == 2


def test_usage_errors(tmp_path, capsys):
    assert main(["run", "--problem", "Nope-1", "--out", str(tmp_path)]) == 2
    assert main(["bench", "--runs", str(tmp_path / "empty")]) == 2
    assert main(["pretrain", "--corpus", str(tmp_path / "missing.tsv")]) == 2
    assert main(["run", "--problem", "Feynman-1", "--seeds", "x", "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nbogus = 1\n")
    assert main(["run", "--problem", "Feynman-1", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["nonsense"]) == 2


def test_pareto_command(tmp_path, capsys):
    src = tmp_path / "c.csv"
    src.write_text("complexity,nmse,equation\n3,0.5,x1\n4,0.2,x1*x2\n5,0.3,x1 + x2\n")
    out = tmp_path / "p.csv"
    assert main(["pareto", "--input", str(src), "--out", str(out)]) == 0
    assert out.read_text().splitlines() == ["complexity,nmse,equation", "3,0.5,x1", "4,0.2,x1*x2"]


def test_end_to_end(tmp_path, capsys):
    corpus = tmp_path / "corpus.tsv"
    assert main(["gen-corpus", "--library", "koza-d2", "--count", "40", "--seed", "1",
                 "--out", str(corpus)]) == 0
    header, records = read_corpus(corpus)
    assert len(records) == 40 and header["library"] == "koza-d2"
    manifest = json.loads((tmp_path / "corpus.tsv.manifest.json").read_text())
    assert manifest["count"] == 40 and manifest["holdouts"] > 0

    ini = tmp_path / "small.ini"
    ini.write_text("[arch]\nhidden = 16\ninducing = 8\nff = 32\n[pretrain]\nval_every = 1\n")
    ckpt = tmp_path / "gen.ckpt"
    assert main(["pretrain", "--corpus", str(corpus), "--out", str(ckpt), "--iterations", "2",
                 "--k", "8", "--t", "2", "--val-count", "5", "--val-k", "4", "--config", str(ini)]) == 0
    gen, meta, extra = load_checkpoint(ckpt)
    assert meta["iterations"] == 2 and any(k.startswith("adam.") for k in extra)
    resumed = tmp_path / "gen2.ckpt"
    assert main(["pretrain", "--corpus", str(corpus), "--out", str(resumed), "--iterations", "1",
                 "--k", "8", "--t", "2", "--val-count", "5", "--val-k", "4", "--resume", str(ckpt),
                 "--config", str(ini)]) == 0

    runs = tmp_path / "runs"
    assert main(["run", "--problem", "Feynman-1", "--seeds", "0..1", "--checkpoint", str(ckpt),
                 "--k", "100", "--budget", "100000", "--out", str(runs)]) == 0
    assert (runs / "config.json").exists()
    for s in (0, 1):
        d = runs / "Feynman-1" / f"seed-{s}"
        assert (d / "trace.jsonl").exists() and (d / "summary.json").exists() and (d / "equation.txt").exists()
    capsys.readouterr()
    assert main(["bench", "--runs", str(runs)]) == 0
    out = capsys.readouterr().out
    assert "recovery" in out and (runs / "report.json").exists() and (runs / "pareto.csv").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "symgen.cli", "canon", "add x1 x1", "mul 2 x1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "Equal"
