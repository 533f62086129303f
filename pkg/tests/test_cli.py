import csv
import json

import pytest
import torch

from scarcebench.cli import _command_line, main
from scarcebench.datamodel import load_manifest

CONFIG = """\
model: {dim: 16, extractor: {channels: 8}}
plan: {mode: cl, heads: [bbox], epochs: 1, lr: 0.1, batch_size: 8, short_edge: 32}
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", d / "data", "--seed", 3, "--counts", "140,135,130,40,35,30,25,20",
               "--image-size", 32, "--objects-per-image", 2, "--render") == 0
    assert run("build", "--fixture", d / "data" / "fixture.json", "--seed", 0, "--out", d / "data" / "full.json") == 0
    (d / "train.yaml").write_text(CONFIG)
    return d


def rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def test_command_line_drops_outputs():
    assert _command_line(["build", "--out", "a.json", "--seed", "1"]) == "scarcebench build --seed 1"
    assert _command_line(["eval", "--out=x.csv", "--summary", "s.json", "--k-shot", "1"]) == "scarcebench eval --k-shot 1"


def test_build_is_byte_identical(work, capsys):
    fixture = work / "data" / "fixture.json"
    assert run("build", "--fixture", fixture, "--seed", 0, "--out", work / "b1.json") == 0
    out = capsys.readouterr().out
    assert "categories_base" in out
    assert run("build", "--fixture", fixture, "--seed", 0, "--out", work / "b2.json") == 0
    assert (work / "b1.json").read_bytes() == (work / "b2.json").read_bytes()
    m = load_manifest(work / "b1.json")
    assert m.context_ratio == 2.7
    assert m.header["command"].startswith("scarcebench build --fixture")
    assert len(m.categories_in("base")) == 3


@pytest.mark.parametrize("kind,extra", [
    ("scarce-class", ["--keep-ratio", "0.5"]),
    ("scarce-image", ["--keep-ratio", "0.5"]),
    ("scarce-class-adjust", ["--keep-ratio", "0.5"]),
    ("supervision-fraction", ["--head", "attribute", "--fraction", "0.25"]),
])
def test_regimes_are_byte_identical(work, kind, extra):
    full = work / "data" / "full.json"
    outs = []
    for i in range(2):
        out = work / f"{kind}{i}.json"
        assert run("regime", "--manifest", full, "--kind", kind, *extra, "--seed", 4, "--out", out) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    p0, p1 = (o.with_name(o.name + ".portion.csv") for o in outs)
    assert p0.read_bytes() == p1.read_bytes()
    assert all(r["portion_pct"] for r in rows(p0))


def test_scarce_class_survivors(work):
    full = load_manifest(work / "data" / "full.json")
    assert run("regime", "--manifest", work / "data" / "full.json", "--kind", "scarce-class", "--keep-ratio", 0.5,
               "--seed", 0, "--out", work / "sc.json") == 0
    derived = load_manifest(work / "sc.json")
    base = sorted(full.categories_in("base"), key=lambda c: (c.instance_count, c.category_id))
    survivors = [c.category_id for c in base[int(0.5 * len(base)):]]
    assert sorted(c.category_id for c in derived.categories_in("base")) == sorted(survivors)


def test_keep_one_changes_provenance_only(work):
    assert run("regime", "--manifest", work / "data" / "full.json", "--kind", "scarce-image", "--keep-ratio", 1.0,
               "--seed", 0, "--out", work / "same.json") == 0
    a, b = load_manifest(work / "data" / "full.json"), load_manifest(work / "same.json")
    assert a.instances == b.instances and a.images == b.images and a.regime != b.regime


def test_train_eval_report(work, capsys):
    data = work / "data"
    assert run("train", "--manifest", data / "full.json", "--config", work / "train.yaml", "--seed", 0,
               "--steps", 6, "--out", work / "run") == 0
    stages = json.loads((work / "run" / "stages.json").read_text())["stages"]
    assert [s["heads"] for s in stages] == [["cls"], ["cls", "bbox"]]
    assert abs(stages[1]["initial_probe"] - stages[0]["final_probe"]) < 1e-6
    metrics = (work / "run" / "metrics.csv").read_text()
    assert metrics.startswith("# command: scarcebench train")

    ckpt = work / "run" / "final.pt"
    for name in ("e1.csv", "e2.csv"):
        assert run("eval", "--manifest", data / "full.json", "--checkpoint", ckpt, "--classifier", "proto",
                   "--classifier", "linear", "--k-shot", 1, "--k-shot", 5, "--out", work / name,
                   "--summary", work / (name + ".json")) == 0
    r1, r2 = rows(work / "e1.csv"), rows(work / "e2.csv")
    assert r1 == r2 and len(r1) == 4
    for r in r1:
        assert int(r["way"]) <= 5 and float(r["top5"]) == 100.0
    assert (work / "e1.csv").read_bytes() == (work / "e2.csv").read_bytes()

    assert run("report", work / "e1.csv", work / "run" / "metrics.csv", "--out", work / "rep") == 0
    table = rows(work / "rep" / "eval_summary.csv")
    assert [(t["regime"], t["model"]) for t in table] == [("full", "e1")]
    side = json.loads((work / "rep" / "novel_test_proto_1shot_top1.json").read_text())
    expected = next(float(r["top1"]) for r in r1 if r["classifier"] == "proto" and r["k_shot"] == "1")
    assert side["series"]["e1"] == [expected]
    assert (work / "rep" / "novel_test_proto_1shot_top1.svg").read_text().lstrip().startswith("<?xml")
    assert (work / "rep" / "final_loss.json").exists()


def test_train_resume_matches(work):
    data = work / "data"
    cfg = work / "resume.yaml"
    cfg.write_text(CONFIG.replace("epochs: 1", "epochs: 2").replace("batch_size: 8", "batch_size: 64"))
    common = ["--manifest", data / "full.json", "--config", cfg, "--seed", 1]
    assert run("train", *common, "--out", work / "a") == 0
    assert run("train", *common, "--resume", work / "a" / "checkpoints" / "stage0_epoch0.pt", "--out", work / "b") == 0
    sa = torch.load(work / "a" / "final.pt", weights_only=False)["state"]
    sb = torch.load(work / "b" / "final.pt", weights_only=False)["state"]
    assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_errors_exit_nonzero(work, capsys):
    bad = work / "bad.yaml"
    bad.write_text("model: {}\nplan: {mode: mtl, heads: [], epochs: 1, batch_size: 8}\n")
    assert run("train", "--manifest", work / "data" / "full.json", "--config", bad, "--seed", 0, "--out", work / "x") == 1
    assert "plan.lr" in capsys.readouterr().err
    broken = work / "broken.json"
    broken.write_text("{")
    assert run("regime", "--manifest", broken, "--kind", "scarce-class", "--keep-ratio", 0.5, "--seed", 0, "--out", work / "y.json") == 1
    assert run("report", "--out", work / "empty") == 1
    empty = work / "empty.csv"
    empty.write_text("regime,ratio,instances,portion_pct\n")
    assert run("report", empty, "--out", work / "empty") == 1
    with pytest.raises(SystemExit):
        run("build", "--fixture", work / "data" / "fixture.json", "--out", work / "z.json")  # --seed missing
