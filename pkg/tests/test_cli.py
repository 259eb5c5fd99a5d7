import json

import pytest

from mmasr import experiment as ex
from mmasr.cli import main
from mmasr.config import ExperimentConfig, load_config, parse_ini
from mmasr.errors import ConfigError

TINY = ["--preset", "desk", "--data.n_train=24", "--data.n_val=8", "--data.n_test=8",
        "--train.max_epochs=2", "--model.hidden=8"]


def test_config_text_round_trip_and_overrides(tmp_path):
    cfg = load_config(overrides=["train.lr=0.01", "--grounding.mode=vat", "decode.len_norm=false"])
    assert cfg.train.lr == 0.01 and cfg.grounding.mode == "vat" and cfg.decode.len_norm is False
    assert parse_ini(cfg.to_ini()) == cfg
    (tmp_path / "c.ini").write_text("[model]\nhidden = 12\n")
    assert load_config(tmp_path / "c.ini", ["model.enc_layers=4"]).model.hidden == 12


@pytest.mark.parametrize("bad", ["train.nope=1", "bogus.lr=1", "train.lr=abc", "grounding.mode=fusion",
                                 "decode.len_norm=maybe", "lr=1"])
def test_bad_config_rejected(bad):
    with pytest.raises(ConfigError):
        load_config(overrides=[bad])


def test_unknown_key_in_file(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nwarmup = 3\n")
    with pytest.raises(ConfigError, match="train.warmup"):
        load_config(tmp_path / "c.ini")


def test_prepare_is_deterministic(tmp_path):
    assert main(["prepare", "--synth", "--seed", "7", "--out", str(tmp_path / "a"), *TINY]) == 0
    assert main(["prepare", "--synth", "--seed", "7", "--out", str(tmp_path / "b"), *TINY]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_video_granularity_shares_keys(tmp_path):
    main(["prepare", "--synth", "--visual-granularity", "video", "--out", str(tmp_path), *TINY])
    prep = ex.load_prepared(tmp_path)
    keys = {}
    for r in prep.datasets["train"].records:
        keys.setdefault(r.video_id, set()).add(r.visual_key)
    assert all(len(k) == 1 for k in keys.values())


def test_missing_inputs_exit_nonzero(tmp_path, capsys):
    assert main(["prepare", "--manifest-dir", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: FileNotFoundError:") and str(tmp_path / "none") in err
    assert len(err.strip().splitlines()) == 1
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "x"), "--bogus"]) == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    data = root / "data"
    assert main(["prepare", "--synth", "--out", str(data), *TINY]) == 0
    assert main(["train", "--data", str(data), "--out", str(root / "baseline"), "--seeds", "1,2", *TINY]) == 0
    return root, data


def test_train_writes_self_describing_runs(workspace):
    root, _ = workspace
    for s in (1, 2):
        d = root / "baseline" / f"seed{s}"
        assert {"best.ckpt", "last.ckpt", "train_log.tsv", "config.ini", "run.json"} <= {p.name for p in d.iterdir()}
        info = json.loads((d / "run.json").read_text())
        assert info["seed"] == s and info["procedure"] == "train"
        assert parse_ini((d / "config.ini").read_text()).model.hidden == 8


def test_adapt_needs_a_converged_baseline(workspace, tmp_path, capsys):
    root, data = workspace
    rc = main(["adapt", "--data", str(data), "--from", str(tmp_path), "--out", str(tmp_path / "v"), *TINY])
    assert rc == 2 and "ContractError" in capsys.readouterr().err


def test_decode_variants(workspace, tmp_path, capsys):
    root, data = workspace
    c1 = str(root / "baseline" / "seed1" / "best.ckpt")
    run = lambda *a: main(["decode", "--data", str(data), *a, *TINY])
    assert run("--ckpt", c1, "--beam", "3", "--out", str(tmp_path / "one.hyp")) == 0
    assert run("--ensemble", c1, "--beam", "3", "--out", str(tmp_path / "ens.hyp")) == 0
    assert (tmp_path / "one.hyp").read_text() == (tmp_path / "ens.hyp").read_text()
    assert run("--ckpt", c1, "--beam", "1", "--out", str(tmp_path / "b1.hyp")) == 0
    prep = ex.load_prepared(data)
    data_split = prep.split("test")
    from mmasr.decoding import greedy_decode
    models = ex.load_models([c1])
    greedy = [prep.vocab.decode(h) for h in greedy_decode(models[0], data_split.feats)]
    assert [l.split("\t")[1] for l in (tmp_path / "b1.hyp").read_text().splitlines()] == greedy
    capsys.readouterr()
    assert run("--ckpt", c1, "--discard-shift", "--out", str(tmp_path / "d.hyp")) == 0
    assert "warning" in capsys.readouterr().err
    assert main(["evaluate", "--data", str(data), "--hyp", str(tmp_path / "one.hyp"),
                 "--scores", str(tmp_path / "s.tsv")]) == 0
    assert capsys.readouterr().out.startswith("WER ")


def test_report_layout(workspace, capsys):
    root, data = workspace
    assert main(["restart", "--data", str(data), "--from", str(root / "baseline"), "--out",
                 str(root / "restart"), "--seeds", "1,2", *TINY]) == 0
    for name in ("baseline", "restart"):
        assert main(["evaluate", "--data", str(data), "--system", str(root / name), "--decode.beam=2"]) == 0
    capsys.readouterr()
    csv_path = root / "r.csv"
    assert main(["report", str(root / "restart"), str(root / "baseline"), "--csv", str(csv_path)]) == 0
    text = capsys.readouterr().out
    rows = ex.read_report_csv(csv_path.read_text())
    assert rows[0].system == "baseline" and text.splitlines()[2].startswith("baseline")
    for r in rows:
        assert r.min_wer <= r.avg_wer
        assert f"{100 * r.avg_wer:.2f}" in text


def test_single_run_report_row():
    s = {"system": "x", "mode": "none", "granularity": "-", "seeds": {"seed1": 0.25}, "ensemble": 0.25}
    r = ex.ReportRow.from_summary(s)
    assert r.min_wer == r.avg_wer == r.ens_wer


def test_rows_sorted_baseline_first_then_avg_descending():
    R = lambda n, a: ex.ReportRow(n, "none", "-", a, a, a)
    rows = ex.order_rows([R("b", 0.1), R("baseline", 0.05), R("c", 0.3)])
    assert [r.system for r in rows] == ["baseline", "c", "b"]
