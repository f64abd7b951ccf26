import csv
import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from fedsim.cli import RESULT_COLUMNS, fmt, main
from fedsim.config import ConfigError, parse_config


def _write(path, doc):
    path.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return str(path)


# --------------------------------------------------------------------------
# config parsing

def test_minimal_config_defaults():
    cfg = parse_config({"dataset": "synthetic_iid", "algorithm": "fedavg"})
    fed = cfg.federation
    assert (fed.K, fed.batch_size, fed.learning_rate) == (10, 10, 0.01)
    assert fed.algorithm == "fedavg" and fed.mu == 0.0
    assert cfg.sweep.mus == [0.001, 0.01, 0.1, 1.0]


def test_mnist_learning_rate_default(tmp_path):
    cfg = parse_config({"dataset": {"kind": "mnist", "dir": str(tmp_path)}})
    assert cfg.federation.learning_rate == 0.03


def test_straggler_fraction_out_of_range():
    with pytest.raises(ConfigError, match="straggler_fraction"):
        parse_config({"dataset": "synthetic_iid", "straggler_fraction": 1.2})


def test_fedavg_with_mu_rejected():
    with pytest.raises(ConfigError, match="mu"):
        parse_config({"dataset": "synthetic_iid", "algorithm": "fedavg", "mu": 0.5})


def test_unknown_key_path():
    with pytest.raises(ConfigError) as info:
        parse_config({"dataset": {"kind": "synthetic", "alpah": 1}})
    assert info.value.path == "dataset.alpah"


def test_shorthand_and_adaptive_default():
    cfg = parse_config({"dataset": "synthetic(0.5,1)", "adaptive_mu": True})
    assert cfg.dataset.params == {"alpha": 0.5, "beta": 1.0}
    assert cfg.federation.mu == 0.0
    assert parse_config({"dataset": "synthetic_iid", "adaptive_mu": True}).federation.mu == 1.0


@pytest.mark.parametrize("doc", [
    "[]", "{", '{"dataset": 3}', '{"dataset": "synthetic", "K": "ten"}',
    '{"dataset": "synthetic", "K": 0}', '{"dataset": "synthetic", "K": 31}',
    '{"dataset": "synthetic", "E": true}', '{"dataset": "synthetic", "runs": []}',
    '{"dataset": "synthetic", "federation": {"T": -1}}', '{"model": {"kind": "cnn"}}',
    '{"dataset": "synthetic", "T": 5, "federation": {"T": 6}}',
    '{"dataset": {"kind": "mnist"}}', '{"dataset": "synthetic", "sweep": {"mus": [-1]}}',
])
def test_malformed_documents(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


_json = st.recursive(
    st.none() | st.booleans() | st.integers(-5, 2000) | st.floats(allow_nan=False) | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=12)
_keys = st.sampled_from(["dataset", "algorithm", "K", "T", "E", "mu", "straggler_fraction",
                         "federation", "model", "runs", "sweep", "telemetry", "sampling_scheme",
                         "adaptive_mu", "learning_rate", "batch_size"])


@settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.dictionaries(_keys, _json | st.sampled_from(["synthetic", "synthetic_iid", "fedavg"]),
                       max_size=6))
def test_fuzz_config_never_crashes(doc):
    try:
        parse_config(doc)
    except ConfigError:
        pass


# --------------------------------------------------------------------------
# command line

def test_fmt_round_trips():
    for v in (0.1, 1 / 3, 1e-300, 123456789.123456789):
        assert float(fmt(v)) == v
    assert fmt(None) == "" and fmt(float("nan")) == "nan" and fmt(True) == "true"


def test_run_writes_deterministic_csv(tmp_path):
    cfg = _write(tmp_path / "c.json", {"dataset": "synthetic_iid", "algorithm": "fedavg", "T": 5})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    rows = list(csv.reader(a.decode().splitlines()))
    assert tuple(rows[0]) == RESULT_COLUMNS and len(rows) == 6
    lines = (tmp_path / "a" / "rounds.jsonl").read_text().splitlines()
    assert len(lines) == 5 and json.loads(lines[0])["schema_version"] == 1
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["runs"][0]["rounds"] == 5


def test_seed_override_changes_output(tmp_path):
    cfg = _write(tmp_path / "c.json", {"dataset": "synthetic(1,1)", "T": 2, "E": 1})
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "3"])
    b = (tmp_path / "b" / "results.csv").read_text().splitlines()
    assert b[1].startswith("3,0,")
    assert (tmp_path / "a" / "results.csv").read_text() != "\n".join(b) + "\n"


def test_sweep_writes_one_file_per_mu(tmp_path):
    cfg = _write(tmp_path / "c.json", {"dataset": "synthetic(0.5,0.5)", "T": 2, "E": 1})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    files = sorted(p.parent.name for p in (tmp_path / "s").glob("*/results.csv"))
    assert files == ["mu0.001_stragglers0.0", "mu0.01_stragglers0.0", "mu0.1_stragglers0.0",
                     "mu1.0_stragglers0.0"]


def test_generate_then_metrics(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {"dataset": "synthetic(1,1)", "T": 1, "E": 1})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    assert main(["metrics", "--dataset", str(tmp_path / "g" / "dataset.fsim"),
                 "--checkpoint", str(tmp_path / "r" / "params_seed0.bin")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["B"] >= 1.0 and out["train_loss"] > 0


def test_theory_command(tmp_path, capsys):
    p = _write(tmp_path / "t.json", {"L": 1, "B": 2, "K": 64, "mu": 24, "gamma": 0})
    assert main(["theory", "--params", p]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["gamma_B_below_one"] and out["B_over_sqrt_K_below_one"]
    assert out["rho"] == pytest.approx(0.01731858517949363, rel=1e-12)


@pytest.mark.parametrize("args,code", [
    (["run", "--config", "/nonexistent.json", "--out", "x"], 2),
    (["theory", "--params", "/nonexistent.json"], 1),
    (["metrics", "--dataset", "/nonexistent", "--checkpoint", "/nonexistent"], 1),
    (["bogus"], 2),
])
def test_failures_exit_nonzero(args, code, capsys):
    assert main(args) == code


@pytest.mark.parametrize("doc", ["not json", "[1]", '{"L": 1}', '{"L": 1, "B": 2, "K": 1.5, "mu": 1}',
                                 '{"L": 1, "B": 2, "K": 4, "mu": 0}', '{"L": "x", "B": 2, "K": 4, "mu": 1}'])
def test_theory_bad_params(tmp_path, doc, capsys):
    assert main(["theory", "--params", _write(tmp_path / "t.json", doc)]) != 0


def test_corrupt_dataset_file(tmp_path, capsys):
    (tmp_path / "d.fsim").write_bytes(b"FSIM\x01\x00\xff\xff")
    (tmp_path / "w.bin").write_bytes(b"\x00" * 3)
    assert main(["metrics", "--dataset", str(tmp_path / "d.fsim"),
                 "--checkpoint", str(tmp_path / "w.bin")]) == 1
    assert "truncated" in capsys.readouterr().err
