import json
import os
import random

import pytest

from microfuzz import cli, isa, oracle
from microfuzz.agent import fault_model_to_dict
from microfuzz.controller import CampaignConfig, CampaignDatabase
from microfuzz.engine import FaultModel, FaultRule
from microfuzz.isa import encode
from microfuzz.report import compute_matrices, render_csv, render_text
from microfuzz.ucode.model import Op


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------

def test_single_database_matrices():
    matrices = compute_matrices({"solo": {1, 2, 3}})
    assert matrices.overlap == [[3]]
    assert matrices.uniqueness == [[0]]
    assert matrices.exclusive == [3]


def test_identical_databases():
    cov = {0x100, 0x102, 0x88}
    matrices = compute_matrices({"a": set(cov), "b": set(cov)})
    assert matrices.overlap[0][1] == matrices.overlap[0][0] == len(cov)
    assert matrices.uniqueness[0][1] == matrices.uniqueness[1][0] == 0
    assert matrices.exclusive == [0, 0]


def test_matrices_against_set_algebra():
    rng = random.Random(12)
    sets = {f"cfg{i}": {rng.randrange(200) for _ in range(rng.randrange(5, 60))}
            for i in range(4)}
    matrices = compute_matrices(sets)
    names = matrices.names
    assert names == sorted(sets)
    for i, a in enumerate(names):
        assert matrices.overlap[i][i] == len(sets[a])
        assert matrices.uniqueness[i][i] == 0
        assert matrices.exclusive[i] <= matrices.overlap[i][i]
        for j, b in enumerate(names):
            assert matrices.overlap[i][j] == len(sets[a] & sets[b])
            assert matrices.overlap[i][j] == matrices.overlap[j][i]
            assert matrices.uniqueness[i][j] == len(sets[a] - sets[b])
            assert matrices.overlap[i][j] + matrices.uniqueness[i][j] == len(sets[a])
    text = render_text(matrices)
    assert "overlap" in text and "exclusive" in text
    csv = render_csv(matrices)
    assert csv.splitlines()[0] == "matrix,row," + ",".join(names)


# ---------------------------------------------------------------------------
# CLI surface
# ---------------------------------------------------------------------------

def test_cli_unknown_flag_is_usage_error(capsys):
    assert cli.main(["afl", "--frobnicate"]) == cli.EXIT_USAGE


def test_cli_unreachable_agent(tmp_path):
    code = cli.main(["--database", str(tmp_path / "db.json"),
                     "--agent", "127.0.0.1:1", "afl", "-i", "1"])
    assert code == cli.EXIT_UNREACHABLE


def test_cli_timeout_zero_clean_exit(tmp_path):
    db_path = tmp_path / "empty.json"
    code = cli.main(["--database", str(db_path), "--local", "afl", "-t", "0"])
    assert code == cli.EXIT_OK
    data = json.loads(db_path.read_text())
    assert data["seeds"] == [] and data["findings"] == []


def test_cli_local_campaign_and_exports(tmp_path):
    db_path = tmp_path / "run.json"
    corpus_dir = tmp_path / "corpus"
    code = cli.main([
        "--database", str(db_path), "--local", "--seed", "5",
        "afl", "-i", "2", "-c", str(corpus_dir),
    ])
    assert code == cli.EXIT_OK
    db = CampaignDatabase.load(str(db_path))
    assert len(db.data["seeds"]) == 2
    files = sorted(os.listdir(corpus_dir))
    assert len(files) == 2
    assert all(len(name) == 8 and name == name.lower() for name in files)
    first = db.data["seeds"][0]
    assert (corpus_dir / files[0]).read_bytes().hex() == first["data"]


def test_cli_env_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("UFUZZ_SEED", "777")
    db_path = tmp_path / "env.json"
    code = cli.main(["--database", str(db_path), "--local",
                     "--seed", "5", "afl", "-t", "0"])
    assert code == cli.EXIT_OK
    assert json.loads(db_path.read_text())["config"]["seed"] == 777


def test_cli_report_roundtrip(tmp_path, capsys):
    for name, addrs in (("one", {0x88: 2, 0x89: 1}), ("two", {0x88: 1})):
        db = CampaignDatabase(str(tmp_path / f"{name}.json"),
                              config=CampaignConfig(name=name))
        db.data["coverage"] = {f"{a:#06x}": c for a, c in addrs.items()}
        db.save()
    csv_path = tmp_path / "matrices.csv"
    code = cli.main(["report", str(tmp_path / "one.json"), str(tmp_path / "two.json"),
                     "--csv", str(csv_path)])
    assert code == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "one" in out and "two" in out
    lines = csv_path.read_text().splitlines()
    assert lines[1] == "overlap,one,2,1"


def test_cli_report_schema_mismatch(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert cli.main(["report", str(bad)]) == cli.EXIT_SCHEMA


def test_cli_spec_sweep(tmp_path):
    from microfuzz.specfuzz import generate_catalog, catalog_to_text

    rows = generate_catalog()[:3]
    catalog = tmp_path / "mini.catalog"
    catalog.write_text(catalog_to_text(rows))
    db_path = tmp_path / "spec.json"
    code = cli.main(["--database", str(db_path), "spec",
                     "--trials", "4", "--catalog", str(catalog)])
    assert code == cli.EXIT_OK
    db = CampaignDatabase.load(str(db_path))
    assert len(db.data["findings"]) == 3
    for finding in db.data["findings"]:
        assert finding["observed_class"] == finding["expected_class"]


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

def _f3_campaign(tmp_path, monkeypatch) -> str:
    fault = FaultModel(rules=[
        FaultRule(opcode=int(Op.WRSEGFLD), persists_through_rollback=True),
    ])
    fault_file = tmp_path / "fault.json"
    fault_file.write_text(json.dumps(fault_model_to_dict(fault)))
    seed_dir = tmp_path / "seeds"
    seed_dir.mkdir()
    case = (
        encode(isa.OP_XOR, 0, 0)
        + encode(isa.OP_JZ, imm=2)
        + encode(isa.OP_CSEG, 3)
        + encode(isa.OP_CSEG, 5)
        + encode(isa.OP_HLT)
    )
    (seed_dir / "00000000").write_bytes(case)
    db_path = tmp_path / "f3.json"
    code = cli.main([
        "--database", str(db_path), "--local", "--seed", "2",
        "--fault-model", str(fault_file),
        "afl", "-i", "1", "-a", str(seed_dir),
        "-s", str(tmp_path / "solutions"),
    ])
    assert code == cli.EXIT_OK
    return str(db_path)


def test_cli_replay_reproduces_finding(tmp_path, monkeypatch):
    db_path = _f3_campaign(tmp_path, monkeypatch)
    db = CampaignDatabase.load(db_path)
    findings = [f for f in db.data["findings"] if f["kind"] == oracle.ARCH_DIVERGENCE]
    assert findings, db.data["findings"]
    assert os.listdir(tmp_path / "solutions")
    assert cli.main(["--database", db_path, "replay",
                     str(findings[0]["id"])]) == cli.EXIT_OK


def test_cli_replay_missing_id(tmp_path, monkeypatch):
    db_path = _f3_campaign(tmp_path, monkeypatch)
    assert cli.main(["--database", db_path, "replay", "99"]) == cli.EXIT_USAGE


def test_cli_replay_without_fault_model_not_reproducible(tmp_path, monkeypatch):
    db_path = _f3_campaign(tmp_path, monkeypatch)
    data = json.loads(open(db_path).read())
    data["config"]["fault"]["rules"] = []  # a correct-mode engine cannot replay it
    stripped = tmp_path / "stripped.json"
    stripped.write_text(json.dumps(data))
    finding_id = str(data["findings"][0]["id"])
    assert cli.main(["--database", str(stripped), "replay", finding_id]) == cli.EXIT_USAGE
