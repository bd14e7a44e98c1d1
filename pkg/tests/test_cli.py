from pathlib import Path

import pytest
import yaml

from memunlearn.cli import main
from memunlearn.orchestrate import RunLog

from test_orchestrate import tiny


def write_config(tmp_path, **over):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(tiny(**over)))
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def two_seed_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, seeds=[0, 1])
    assert main(["run", str(cfg), "--out", str(tmp / "runs")]) == 0
    return next((tmp / "runs").iterdir())


@pytest.fixture(scope="module")
def continual_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli-cont")
    cfg = write_config(tmp, protocol="continual", steps=3, seeds=[0, 1])
    assert main(["run", str(cfg), "--out", str(tmp / "runs")]) == 0
    return next((tmp / "runs").iterdir())


def test_run_prints_run_dir(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "run", write_config(tmp_path), "--out", tmp_path / "runs")
    assert code == 0
    run_dir = Path(out.strip().splitlines()[-1])
    assert (run_dir / "records.jsonl").exists() and (run_dir / "summary.csv").exists()


def test_missing_field_exits_2(tmp_path, capsys):
    raw = tiny()
    raw["model"].pop("architecture")
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    code, _, err = run_cli(capsys, "run", path, "--out", tmp_path / "runs")
    assert code == 2 and "model.architecture" in err
    assert not (tmp_path / "runs").exists()


def test_seed_flag_replaces_config_seeds(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "run", write_config(tmp_path), "--out", tmp_path / "runs", "--seed", "1,2,3")
    assert code == 0
    records = RunLog(Path(out.strip().splitlines()[-1])).records()
    assert sorted(r.seed for r in records) == [1, 2, 3]


def test_failed_seed_exits_1(tmp_path, capsys):
    # a 50-step continual run exhausts the pool
    cfg = write_config(tmp_path, protocol="continual", steps=50)
    code, out, err = run_cli(capsys, "run", cfg, "--out", tmp_path / "runs")
    assert code == 1 and "seed 0 failed" in err
    assert Path(out.strip().splitlines()[-1]).is_dir()


def test_set_override(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "run", write_config(tmp_path), "--out", tmp_path / "runs",
                           "--set", "partition={M: 3, N: 2}")
    assert code == 0
    rec = RunLog(Path(out.strip().splitlines()[-1])).records()[0]
    assert [len(p) for p in rec.partitions] == [2, 2, 2]


# -- report ------------------------------------------------------------------


def test_report_tables(two_seed_run, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "report", two_seed_run, "--out", tmp_path)
    assert code == 0
    md = (tmp_path / "report.md").read_text()
    assert "±" in md and "schema_version" in md
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0].startswith("method,") and len(rows) == 2


def test_report_is_byte_reproducible(two_seed_run, tmp_path, capsys):
    run_cli(capsys, "report", two_seed_run, "--out", tmp_path / "a")
    run_cli(capsys, "report", two_seed_run, "--out", tmp_path / "b")
    for name in ("report.csv", "report.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_empty_selection(two_seed_run, tmp_path, capsys):
    code, _, err = run_cli(capsys, "report", two_seed_run, "--out", tmp_path, "--where", "method=salun")
    assert code == 1 and "empty selection" in err


def test_report_bad_grouping(two_seed_run, tmp_path, capsys):
    code, _, _ = run_cli(capsys, "report", two_seed_run, "--out", tmp_path, "--group-by", "colour")
    assert code == 2


def test_continual_plots(continual_run, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "report", continual_run, "--out", tmp_path, "--format", "csv,plot")
    assert code == 0
    pngs = sorted(p.name for p in tmp_path.glob("*.png"))
    assert pngs == ["continual_mlp_tow.png", "continual_mlp_tow_mia.png"]
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert len(rows) == 1 + 3  # one row per step


# -- inspect -----------------------------------------------------------------


def test_inspect_lists_lineage(two_seed_run, capsys):
    code, out, _ = run_cli(capsys, "inspect", two_seed_run / "store", "--verify")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# schema_version")
    body = "\n".join(lines[1:])
    assert "original" in body and "retrained" in body and "unlearned" in body and "method=finetune" in body


def test_inspect_fresh_store(tmp_path, capsys):
    (tmp_path / "store").mkdir()
    code, out, _ = run_cli(capsys, "inspect", tmp_path / "store")
    assert code == 0 and out.splitlines() == ["# schema_version: 1"]


def test_inspect_missing_store(tmp_path, capsys):
    code, _, err = run_cli(capsys, "inspect", tmp_path / "nope")
    assert code == 1 and "no checkpoint store" in err


def test_inspect_corrupt_manifest(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, out, _ = run_cli(capsys, "run", cfg, "--out", tmp_path / "runs")
    store = Path(out.strip().splitlines()[-1]) / "store"
    manifest = sorted((store / "manifests").glob("*.json"))[0]
    manifest.write_text("{not json")
    code, _, err = run_cli(capsys, "inspect", store)
    assert code == 1 and "integrity error" in err and manifest.stem in err


# -- validate-proxy and help ---------------------------------------------------


def test_validate_proxy(tmp_path, capsys):
    raw = tiny(protocol="proxy_validation", proxies=["conf", "ent"], memorization=dict(T=12, p=0.5))
    raw.pop("partition")
    raw.pop("unlearn")
    raw.pop("proxy")
    path = tmp_path / "pv.yaml"
    path.write_text(yaml.safe_dump(raw))
    code, out, _ = run_cli(capsys, "validate-proxy", path, "--out", tmp_path / "runs")
    assert code == 0, out
    csv_path = Path(out.strip().splitlines()[-1])
    assert csv_path.name == "proxy_fidelity.csv" and csv_path.exists()
    assert "conf" in out and "ent" in out


def test_run_rejects_proxy_validation_config(tmp_path, capsys):
    raw = tiny(protocol="proxy_validation", proxies=["conf"], memorization=dict(T=4, p=0.7))
    for k in ("partition", "unlearn", "proxy"):
        raw.pop(k)
    path = tmp_path / "pv.yaml"
    path.write_text(yaml.safe_dump(raw))
    code, _, err = run_cli(capsys, "run", path)
    assert code == 2 and "validate-proxy" in err


def test_help(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("run", "validate-proxy", "report", "inspect"):
        assert cmd in out
