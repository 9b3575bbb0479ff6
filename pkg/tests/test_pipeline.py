import csv
import io
import json
import os

import numpy as np
import pytest

import stylemark as sm
from stylemark.cli import main as cli_main
from stylemark.data import ConfigurationError
from stylemark.pipeline import DEFAULT_CONFIG, load_config, reports_csv
from stylemark.training import STEP_COUNTER

TINY_OVERRIDES = {
    "dataset": {"n_train": 300, "n_surrogate": 300, "n_test": 120},
    "train": {"epochs": 3},
    "attacks": [{"attack_id": "label_query", "epochs": 3, "seed": 300}],
    "meta": {"epochs": 60},
    "meta_pool_size": 30,
    "m": 6,
    "verify_seeds": [0, 1],
}


def tiny_config(out_dir, **extra):
    overrides = json.loads(json.dumps(TINY_OVERRIDES))
    overrides["out_dir"] = str(out_dir)
    for k, v in extra.items():
        overrides[k] = v
    return load_config(None, overrides)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out)
    ledger = sm.run_experiment(cfg)
    return cfg, ledger


def test_run_emits_expected_report_rows(tiny_run):
    cfg, ledger = tiny_run
    attacks = {r["attack_id"] for r in ledger.reports}
    assert attacks == {"source", "label_query", "independent"}
    per_attack = {a: sum(1 for r in ledger.reports if r["attack_id"] == a)
                  for a in attacks}
    assert all(v == len(cfg["verify_seeds"]) for v in per_attack.values())
    assert os.path.exists(os.path.join(cfg["out_dir"], "reports.csv"))
    assert os.path.exists(os.path.join(cfg["out_dir"], "report_table.txt"))


def test_rerun_hits_cache_with_zero_training_steps(tiny_run):
    cfg, ledger1 = tiny_run
    before = STEP_COUNTER.count
    ledger2 = sm.run_experiment(cfg)
    assert STEP_COUNTER.count == before
    assert not ledger2.stats["cache_misses"]
    # cached artifacts reproduce the fresh run's reports bit-for-bit
    assert reports_csv(ledger2.reports) == reports_csv(ledger1.reports)


def test_stage_failure_persists_ledger_and_signals(tmp_path):
    cfg = tiny_config(tmp_path / "fail",
                      attacks=[{"attack_id": "label_query", "epochs": 1,
                                "query_budget": 5, "seed": 1}])
    with pytest.raises(sm.StageError, match="attack-label_query"):
        sm.run_experiment(cfg)
    # models trained before the failing stage are on disk with the ledger
    ledger = sm.RunLedger(cfg["out_dir"])
    kinds = {e["kind"] for e in ledger.entries.values()}
    assert "model" in kinds and "dataset" in kinds
    assert ledger.verify_integrity() == []


def test_ledger_integrity(tiny_run):
    _, ledger = tiny_run
    assert ledger.verify_integrity() == []


def test_csv_roundtrip_matches_reports(tiny_run):
    cfg, ledger = tiny_run
    with open(os.path.join(cfg["out_dir"], "reports.csv")) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(ledger.reports)
    for parsed, row in zip(rows, ledger.reports):
        assert parsed["attack_id"] == row["attack_id"]
        assert int(parsed["m"]) == row["m"]
        assert float(parsed["p"]) == row["p_value"]
        assert float(parsed["delta_mu"]) == row["delta_mu"]
        assert parsed["decision"] == row["decision"]
        assert parsed["suspect_hash"] == row["suspect_hash"]


def test_report_table_shapes(tiny_run):
    _, ledger = tiny_run
    table = sm.report_table(ledger, grouping="attack")
    lines = table.strip().split("\n")
    assert lines[0].split()[:3] == ["attack", "delta_mu", "p_value"]
    assert len(lines) == 1 + 3  # header + source/label_query/independent

    single = sm.report_table([ledger.reports[0]], grouping="attack")
    assert len(single.strip().split("\n")) == 2

    by_mode = sm.report_table(ledger, grouping="mode")
    assert "delta_mu[raw]" in by_mode.split("\n")[0]

    with pytest.raises(ValueError):
        sm.report_table([], grouping="attack")
    with pytest.raises(ConfigurationError):
        sm.report_table(ledger, grouping="nope")


def test_mode_grouping_two_columns(tiny_run):
    _, ledger = tiny_run
    rows = [dict(r) for r in ledger.reports]
    for r in list(rows):
        other = dict(r)
        other["mode"] = "sign"
        other["p_value"] = 0.5
        rows.append(other)
    table = sm.report_table(rows, grouping="mode")
    header = table.split("\n")[0]
    assert "p[raw]" in header and "p[sign]" in header
    body = table.strip().split("\n")[1:]
    assert all(len(line.split()) == 5 for line in body)


def test_full_attack_grid_reproduces_table_structure(tmp_path):
    # seven rows: source, five attacks, independent
    cfg = tiny_config(
        tmp_path / "grid",
        dataset={"n_train": 200, "n_surrogate": 200, "n_test": 80},
        train={"epochs": 2},
        attacks=[
            {"attack_id": "distillation", "epochs": 2, "seed": 300},
            {"attack_id": "zero_shot", "generator_steps": 4,
             "student_steps_per_round": 1, "seed": 301},
            {"attack_id": "fine_tune", "epochs": 1, "learning_rate": 0.01, "seed": 302},
            {"attack_id": "label_query", "epochs": 2, "seed": 303},
            {"attack_id": "logit_query", "epochs": 2, "seed": 304},
        ],
        m=4,
        verify_seeds=[0],
    )
    ledger = sm.run_experiment(cfg)
    table = sm.report_table(ledger, grouping="attack")
    lines = table.strip().split("\n")
    assert len(lines) == 1 + 7
    assert [l.split()[0] for l in lines[1:]] == [
        "source", "distillation", "zero_shot", "fine_tune", "label_query",
        "logit_query", "independent",
    ]


def test_config_validation_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(None, {"gamma_percent": 150.0})
    with pytest.raises(ConfigurationError):
        load_config(None, {"m": 1})
    with pytest.raises(ConfigurationError):
        load_config(None, {"alpha": 1.5})
    with pytest.raises(ConfigurationError):
        load_config(None, {"mode": "fuzzy"})
    with pytest.raises(ConfigurationError):
        load_config(None, {"attacks": [{"epochs": 3}]})


def test_config_file_overlay(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"gamma_percent": 5.0, "train": {"epochs": 7}}))
    cfg = load_config(path, {"m": 4})
    assert cfg["gamma_percent"] == 5.0
    assert cfg["train"]["epochs"] == 7
    assert cfg["m"] == 4
    # untouched defaults survive
    assert cfg["mask"] == DEFAULT_CONFIG["mask"]


def test_reports_csv_is_deterministic_text(tiny_run):
    _, ledger = tiny_run
    assert reports_csv(ledger.reports) == reports_csv(ledger.reports)


def test_deterministic_reruns_byte_equal_csv(tmp_path):
    cfg_a = tiny_config(tmp_path / "a", dataset={"n_train": 200, "n_surrogate": 200,
                                                 "n_test": 80},
                        train={"epochs": 2}, attacks=[], m=4)
    cfg_b = tiny_config(tmp_path / "b", dataset={"n_train": 200, "n_surrogate": 200,
                                                 "n_test": 80},
                        train={"epochs": 2}, attacks=[], m=4)
    sm.run_experiment(cfg_a)
    sm.run_experiment(cfg_b)
    with open(os.path.join(cfg_a["out_dir"], "reports.csv"), "rb") as f:
        csv_a = f.read()
    with open(os.path.join(cfg_b["out_dir"], "reports.csv"), "rb") as f:
        csv_b = f.read()
    assert csv_a == csv_b


def test_cache_env_var_redirects_artifacts(tmp_path, monkeypatch):
    cache_root = tmp_path / "shared-cache"
    monkeypatch.setenv("STYLEMARK_CACHE", str(cache_root))
    cfg = tiny_config(tmp_path / "runA", dataset={"n_train": 120, "n_surrogate": 120,
                                                  "n_test": 60},
                      train={"epochs": 1}, attacks=[], m=4)
    sm.run_experiment(cfg)
    assert cache_root.exists() and any(cache_root.iterdir())


# -- CLI ----------------------------------------------------------------------


def test_cli_full_stage_flow(tmp_path):
    out = tmp_path / "cli"
    out.mkdir()
    emb = out / "embed"
    assert cli_main(["embed", "--data", "synthetic:100:3", "--gamma", "20",
                     "--seed", "5", "--out", str(emb)]) == 0
    assert (emb / "plan.json").exists()

    vict = out / "victim.ckpt"
    assert cli_main(["train", "--data", str(emb / "transformed.npz"),
                     str(emb / "benign_rest.npz"), "--epochs", "2",
                     "--seed", "1", "--out", str(vict)]) == 0

    ben = out / "benign.ckpt"
    assert cli_main(["train", "--data", "synthetic:100:3", "--epochs", "2",
                     "--seed", "1", "--out", str(ben)]) == 0

    student = out / "student.ckpt"
    assert cli_main(["steal", "--victim", str(vict), "--attack", "label_query",
                     "--surrogate", "synthetic:60:9", "--epochs", "2",
                     "--out", str(student)]) == 0

    meta = out / "meta"
    assert cli_main(["fit-meta", "--victim", str(vict), "--benign", str(ben),
                     "--transformed", str(emb / "transformed.npz"),
                     "--out", str(meta)]) == 0

    csv_path = out / "reports.csv"
    assert cli_main(["verify", "--meta", str(meta), "--suspect", str(student),
                     "--benign", str(ben), "--pool", str(emb / "transformed.npz"),
                     "--m", "4", "--csv", str(csv_path)]) == 0
    assert csv_path.exists()

    pattern = out / "trigger.png"
    assert cli_main(["recover-trigger", "--model", str(vict), "--target", "2",
                     "--probe", "synthetic:30:4", "--iterations", "2",
                     "--out", str(pattern)]) == 0
    assert pattern.exists()


def test_cli_run_and_report(tmp_path):
    out = tmp_path / "run"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "dataset": {"n_train": 150, "n_surrogate": 150, "n_test": 60},
        "train": {"epochs": 1},
        "attacks": [],
        "meta": {"epochs": 30},
        "meta_pool_size": 15,
        "m": 4,
        "verify_seeds": [0],
    }))
    assert cli_main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert cli_main(["report", "--out-dir", str(out)]) == 0


def test_cli_exit_codes(tmp_path):
    # config error: nonexistent checkpoint
    assert cli_main(["steal", "--victim", str(tmp_path / "missing.ckpt"),
                     "--attack", "label_query", "--surrogate", "synthetic:10:1",
                     "--out", str(tmp_path / "x.ckpt")]) == 2
    # config error: bad gamma
    assert cli_main(["run", "--out", str(tmp_path / "r"), "--gamma", "200"]) == 2
    # config error: report on empty dir
    assert cli_main(["report", "--out-dir", str(tmp_path / "empty")]) == 2
