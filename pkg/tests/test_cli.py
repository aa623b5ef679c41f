import pytest

from lafasr.ablation import format_table, run_ablation
from lafasr.cli import main
from lafasr.config import dump_config
from conftest import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config()
    cfg.synth.num_train, cfg.synth.num_dev, cfg.synth.num_test = 8, 4, 6
    cfg.train.max_steps = 3
    cfg.train.batch_size = 4
    cfg.ablation.steps = 2
    cfg.ablation.probe_steps = 2
    cfg.ablation.probe_layers = (2, 3)
    conf = root / "tiny.conf"
    conf.write_text(dump_config(cfg))
    assert main(["gen-data", "--config", str(conf), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(conf), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "model.qfn").exists() and (run / "model.qfn.conf").exists() and (run / "optim.qfn").exists()
    lines = (run / "train.log").read_text().splitlines()
    assert len(lines) == 3 and len(lines[0].split("\t")) == 8


def test_resume_continues_steps(workspace, tmp_path):
    conf = tmp_path / "more.conf"
    conf.write_text((workspace / "tiny.conf").read_text() + "train.max_steps = 5\n")
    code = main(["train", "--config", str(conf), "--data", str(workspace / "data"), "--out", str(workspace / "run"),
                 "--resume", str(workspace / "run" / "model.qfn")])
    assert code == 0
    steps = [int(l.split("\t")[0]) for l in (workspace / "run" / "train.log").read_text().splitlines()]
    assert steps == [1, 2, 3, 4, 5]


def test_eval_table(workspace, capsys):
    ckpt, manifest = str(workspace / "run" / "model.qfn"), str(workspace / "data" / "test.tsv")
    assert main(["eval", "--ckpt", ckpt, "--manifest", manifest]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert header.startswith("ID\tModel\tAID ACC(%)\tTotal") and "accent0" in header
    assert main(["eval", "--ckpt", ckpt, "--manifest", manifest, "--chunk", "1"]) == 0


def test_decode_lines(workspace, capsys):
    ckpt, manifest = str(workspace / "run" / "model.qfn"), str(workspace / "data" / "test.tsv")
    assert main(["decode", "--ckpt", ckpt, "--manifest", manifest, "--method", "rescore"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(len(l.split("\t")) == 3 for l in lines)


def test_stream_decode(workspace, capsys):
    ckpt = str(workspace / "run" / "model.qfn")
    assert main(["stream-decode", "--ckpt", ckpt, "--wav-or-synth", "synth:42:1", "--chunk", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t")[:2] == ["synth-42", "0"] and lines[-1].split("\t")[1] == "final"


def test_probe_layer(workspace, capsys):
    ckpt, manifest = str(workspace / "run" / "model.qfn"), str(workspace / "data" / "test.tsv")
    assert main(["probe-layer", "--ckpt", ckpt, "--layer", "3", "--manifest", manifest, "--steps", "2"]) == 0
    assert capsys.readouterr().out.startswith("L3\t")


def test_grad_check(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "encoder.block1" in out and "FAIL" not in out


def test_errors_exit_one(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "none.qfn"), "--manifest", "x"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["eval"])
    assert e.value.code == 1
    bad = tmp_path / "bad.conf"
    bad.write_text("encoder.nope = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1


def test_ablation_table(workspace, tmp_path):
    cfg = tiny_config()
    cfg.synth.num_train, cfg.synth.num_dev, cfg.synth.num_test = 8, 4, 6
    cfg.train.batch_size = 4
    cfg.ablation.steps = 2
    cfg.ablation.probe_steps = 2
    cfg.ablation.stream_chunk = 100
    result = run_ablation(cfg, workspace / "data", tmp_path, probe_layers=[2, 3])
    assert [r.variant for r in result.rows] == list(cfg.ablation.variants)
    assert result.row("A1").aid_accuracy is None
    assert len({r.report.utterances for r in result.rows}) == 1
    # with a chunk covering every utterance, streaming Q1 reproduces Q2 exactly
    assert result.row("Q1").report.cells() == result.row("Q2").report.cells()
    table = (tmp_path / "table.tsv").read_text()
    assert table == format_table(result)
    a1 = next(l for l in table.splitlines() if l.startswith("A1\t"))
    assert a1.split("\t")[3] == "-"
    assert set(result.probes) == {2, 3}


def test_failed_variant_marked(workspace, tmp_path, monkeypatch):
    import lafasr.ablation as ab

    real = ab.train_variant

    def flaky(cfg, *a, **k):
        if cfg.fusion.mode == "self":
            raise RuntimeError("boom")
        return real(cfg, *a, **k)

    monkeypatch.setattr(ab, "train_variant", flaky)
    cfg = tiny_config()
    cfg.train.batch_size = 4
    cfg.ablation.steps = 1
    result = run_ablation(cfg, workspace / "data", None, variants=["A4", "Q2"], probe_layers=[])
    assert result.row("A4").failed and "boom" in result.row("A4").error
    assert not result.row("Q2").failed
    assert "failed" in format_table(result).splitlines()[1]
