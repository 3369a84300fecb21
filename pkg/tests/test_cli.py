import json
from pathlib import Path

import pytest

from textreact.cli.config import ConfigTypeError, MissingRequired, UnknownKey, parse_config, parse_config_text
from textreact.cli.main import run_command
from textreact.nn.checkpoint import load_checkpoint

SMOKE = """\
seed = 5
out_dir = run
n_reactions = 120
n_types = 6
n_fragments = 40
n_unlabeled = 20
d_model = 16
n_heads = 2
n_layers = 1
dec_layers = 1
d_ff = 32
ret_epochs = 2
epochs = 1
batch_size = 16
beam_width = 3
max_len = 256
"""

PIPELINE = ("gen-synth", "split", "train-retriever", "build-index", "retrieve", "train-predictor", "evaluate")


def write_config(directory: Path, text: str = SMOKE) -> Path:
    path = directory / "run.cfg"
    path.write_text(text)
    return path


def run_pipeline(directory: Path, monkeypatch) -> Path:
    monkeypatch.chdir(directory)
    cfg = write_config(directory)
    for cmd in PIPELINE:
        assert run_command([cmd, "--config", str(cfg)]) == 0, cmd
    return directory / "run"


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    try:
        yield run_pipeline(tmp_path_factory.mktemp("a"), mp)
    finally:
        mp.undo()


# ---------------------------------------------------------------- config


def test_minimal_config_fills_defaults(tmp_path):
    cfg = parse_config(write_config(tmp_path, "seed = 1\n"))
    assert (cfg.k, cfg.K, cfg.lambda_mlm) == (3, 10, 0.1)
    assert cfg.alpha is None and cfg.task == "rcr"


def test_alpha_out_of_range_is_type_error(tmp_path):
    with pytest.raises(ConfigTypeError) as info:
        parse_config(write_config(tmp_path, "seed = 1\nalpha = 1.5\n"))
    assert isinstance(info.value, TypeError) and info.value.key == "alpha"


def test_flag_overrides_file(tmp_path):
    path = write_config(tmp_path, "seed = 1\nalpha = 0.8\n")
    assert parse_config(path).alpha == 0.8
    assert parse_config(path, {"alpha": "0.2"}).alpha == 0.2


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(UnknownKey):
        parse_config(write_config(tmp_path, "seed = 1\nbogus = 3\n"))
    with pytest.raises(UnknownKey):
        parse_config(write_config(tmp_path, "seed = 1\n"), {"bogus": "3"})


def test_seed_is_mandatory(tmp_path):
    with pytest.raises(MissingRequired):
        parse_config(write_config(tmp_path, "task = rcr\n"))


@pytest.mark.parametrize("line", ["k = 11", "k = 4\nK = 3", "task = forward", "epochs = two", "n_heads = 3"])
def test_bad_values_rejected(tmp_path, line):
    with pytest.raises(ConfigTypeError):
        parse_config(write_config(tmp_path, f"seed = 1\n{line}\n"))


def test_comments_and_blank_lines():
    assert parse_config_text("# header\n\nseed = 3  # trailing\n") == {"seed": "3"}


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run_command(["evaluate", "--config", str(write_config(tmp_path, "seed = 1\nalpha = 2\n"))]) == 2
    assert run_command(["no-such-command"]) == 2
    assert run_command(["gen-synth", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_evaluate_without_checkpoint_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run_command(["evaluate", "--config", str(write_config(tmp_path)), "--out_dir", "empty"]) == 2
    assert "predictor_ckpt" in capsys.readouterr().err


# ---------------------------------------------------------------- pipeline


def test_pipeline_emits_metrics(pipeline_run):
    metrics = json.loads((pipeline_run / "metrics.json").read_text())
    assert metrics["task"] == "rcr" and metrics["ks"] == [1, 3, 10, 15]
    assert all(0 <= v <= 1 for v in metrics["accuracy"].values())
    assert metrics["counts"]["audited_retrievals"] > 0


def test_every_output_names_config_hash(pipeline_run):
    h = json.loads((pipeline_run / "metrics.json").read_text())["config_hash"]
    assert len(h) == 16
    for name in ("retriever_history.json", "retrieval_metrics.json", "predictor.history.json"):
        assert json.loads((pipeline_run / name).read_text())["config_hash"] == h, name
    lines = [json.loads(l) for l in (pipeline_run / "predictions.jsonl").read_text().splitlines()]
    assert lines and all(row["config_hash"] == h for row in lines)
    csv_lines = (pipeline_run / "neighbor_distances.csv").read_text().splitlines()
    assert csv_lines[0] == f"# config_hash={h}" and csv_lines[1].startswith("id,")
    for ckpt in ("retriever.ckpt", "predictor.ckpt"):
        meta, _ = load_checkpoint(pipeline_run / ckpt)
        assert meta["config_hash"] == h, ckpt


def test_pipeline_is_byte_deterministic(pipeline_run, tmp_path, monkeypatch):
    other = run_pipeline(tmp_path, monkeypatch)
    for name in ("retriever.ckpt", "index.txix", "neighbors.jsonl", "predictor.ckpt", "predictions.jsonl", "metrics.json", "neighbor_distances.csv"):
        assert (pipeline_run / name).read_bytes() == (other / name).read_bytes(), name


def test_sweep_alpha_writes_one_metrics_file_per_value(pipeline_run, monkeypatch):
    monkeypatch.chdir(pipeline_run.parent)
    cfg = str(pipeline_run.parent / "run.cfg")
    assert run_command(["sweep", "--config", cfg, "--param", "alpha", "--values", "0,0.5,1.0"]) == 0
    found = sorted(p.parent.name for p in (pipeline_run / "sweep").glob("*/metrics.json"))
    assert found == ["alpha=0", "alpha=0.5", "alpha=1.0"]
    assert run_command(["sweep", "--config", cfg, "--param", "beam_width", "--values", "1"]) == 2


def test_rxnfp_baseline_and_gold_removed_evaluate(pipeline_run, monkeypatch):
    monkeypatch.chdir(pipeline_run.parent)
    cfg = str(pipeline_run.parent / "run.cfg")
    assert run_command(["evaluate", "--config", cfg, "--baseline", "rxnfp", "--metrics", "run/rxnfp.json", "--predictions", "run/rxnfp.jsonl"]) == 0
    assert json.loads((pipeline_run / "rxnfp.json").read_text())["accuracy"]["1"] >= 0
    assert run_command(["evaluate", "--config", cfg, "--scenario", "gold_removed", "--metrics", "run/gr.json", "--predictions", "run/gr.jsonl"]) == 0
    assert json.loads((pipeline_run / "gr.json").read_text())["scenario"]["kind"] == "gold_removed"


def test_grad_check_command(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_command(["grad-check", "--config", str(write_config(tmp_path))]) == 0
    report = json.loads((tmp_path / "run" / "gradcheck.json").read_text())
    assert len(report["results"]) == 8 and all(r["passed"] for r in report["results"])
