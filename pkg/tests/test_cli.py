import csv
import json

import numpy as np
import pytest
import torch

from crossmost import cli
from crossmost.checkpoint import save_model
from crossmost.config import RunConfig
from crossmost.errors import CrossmostError, DomainError
from crossmost.trainer import build_model

TINY_TOML = """
seed = 0
[data]
n_classes = 3
n_points = 128
views = 2
pretrain_views = 2
pixels = 16
train_per_class = 6
test_per_class = 4
pretrain_per_class = 6
exemplars_per_class = 1
[tokenizer]
n_groups = 8
group_size = 8
patch_size = 4
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_embed = 8
[trainer]
batch_size = 6
pretrain_batch_size = 6
epochs = 2
pretrain_epochs = 1
"""


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


def test_pipeline_gen_pretrain_selftrain_eval(tmp_path, tiny_toml, capsys):
    code, res, _ = run(["gen-data", "--config", tiny_toml, "--out", tmp_path / "data"], capsys)
    assert code == 0 and res["splits"]["train"] == 18
    assert (tmp_path / "data" / "config.json").exists() and (tmp_path / "data" / "config.hash").exists()

    code, res, _ = run(["pretrain", "--config", tiny_toml, "--data", tmp_path / "data", "--out", tmp_path / "init"], capsys)
    assert code == 0 and res["pretrain_loss"] > 0

    args = ["selftrain", "--config", tiny_toml, "--data", tmp_path / "data", "--init", tmp_path / "init"]
    code, res, _ = run(args + ["--out", tmp_path / "st"], capsys)
    assert code == 0 and res["epoch"] == 2
    lines = (tmp_path / "st" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3

    code, res, _ = run(
        ["eval", "--init", tmp_path / "st" / "checkpoints" / "final", "--dump-embeddings", tmp_path / "emb.csv"], capsys
    )
    assert code == 0 and res["n_samples"] == 12 and res["embedding_rows"] == 24
    assert res["acc_pcl"] == pytest.approx(json.loads(lines[-1])["acc_pcl"])
    with open(tmp_path / "emb.csv") as fh:
        assert len(list(csv.reader(fh))) == 25


def test_selftrain_is_byte_deterministic(tmp_path, tiny_toml, capsys):
    outputs = []
    for name in ("a", "b"):
        code, res, _ = run(["selftrain", "--config", tiny_toml, "--out", tmp_path / name], capsys)
        assert code == 0
        outputs.append(res)
    for f in ("metrics.jsonl", "steps.jsonl", "config.json", "config.hash"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert outputs[0] == outputs[1]
    for p in (tmp_path / "a" / "checkpoints").rglob("*.bin"):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_flags_override_config(tmp_path, tiny_toml, capsys):
    args = ["selftrain", "--config", tiny_toml, "--out", tmp_path / "r", "--seed", "3", "--mode", "unimodal_point",
            "--views", "1", "--set", "trainer.epochs=1", "--set", "objective.threshold=0.5"]
    code, _, _ = run(args, capsys)
    assert code == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["seed"] == 3 and saved["objective"]["mode"] == "unimodal_point"
    assert saved["data"]["views"] == 1 and saved["trainer"]["epochs"] == 1
    assert saved["objective"]["threshold"] == 0.5
    # the stored config reproduces the run
    code, _, _ = run(["selftrain", "--config", tmp_path / "r" / "config.json", "--out", tmp_path / "r2"], capsys)
    assert (tmp_path / "r" / "metrics.jsonl").read_bytes() == (tmp_path / "r2" / "metrics.jsonl").read_bytes()


def test_eval_of_random_checkpoint_is_near_chance(tmp_path, capsys):
    cfg = RunConfig().replace(
        **{"data.train_per_class": 1, "data.pretrain_per_class": 1, "data.test_per_class": 25,
           "data.n_points": 256, "tokenizer.group_size": 16}
    )
    accs = []
    for seed in range(4):
        torch.manual_seed(seed)
        save_model(build_model(cfg.replace(seed=seed)), tmp_path / f"m{seed}", cfg.to_dict(), 0)
        code, res, _ = run(["eval", "--init", tmp_path / f"m{seed}"], capsys)
        assert code == 0 and res["n_samples"] == 200
        accs.append(res["acc_pcl"])
    assert abs(np.mean(accs) - 0.125) < 0.05


def test_one_cell_ablation(tmp_path, tiny_toml, capsys):
    grid = tmp_path / "grid.toml"
    grid.write_text('base = "tiny.toml"\nseeds = [0]\n[set]\n"trainer.epochs" = 1\n[[cells]]\nname = "only"\n')
    code, res, _ = run(["ablate", "--grid", grid, "--out", tmp_path / "abl"], capsys)
    assert code == 0 and res["runs"] == 1
    with open(tmp_path / "abl" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["run"] == "only-s0" and rows[0]["epochs"] == "1"


def test_exit_codes(tmp_path, tiny_toml, capsys, monkeypatch):
    code, _, err = run(["selftrain", "--config", tmp_path / "nope.toml", "--out", tmp_path / "x"], capsys)
    assert code == cli.EXIT_MISSING_FILE == err["exit_code"] and err["error"] == "FileNotFoundError"

    bad = tmp_path / "bad.toml"
    bad.write_text("[trainer]\nepochs = -3\n")
    code, _, err = run(["selftrain", "--config", bad, "--out", tmp_path / "x"], capsys)
    assert code == 3 and err["error"] == "ConfigurationError" and err["command"] == "selftrain"

    code, _, err = run(["selftrain", "--config", tiny_toml, "--set", "trainer.epochs", "--out", tmp_path / "x"], capsys)
    assert code == 3

    run(["gen-data", "--config", tiny_toml, "--out", tmp_path / "data"], capsys)
    code, _, err = run(["pretrain", "--config", tiny_toml, "--seed", "9", "--data", tmp_path / "data", "--out", tmp_path / "p"], capsys)
    assert code == 3 and "different" in err["message"]

    with pytest.raises(SystemExit) as exc:
        cli.main(["selftrain", "--mode", "bogus", "--out", str(tmp_path)])
    assert exc.value.code == 2
    capsys.readouterr()

    def nan_total(comps, cfg):
        return torch.tensor(float("nan")), {}

    monkeypatch.setattr("crossmost.trainer.obj.total_loss", nan_total)
    code, _, err = run(["selftrain", "--config", tiny_toml, "--out", tmp_path / "nan"], capsys)
    assert code == 4 and err["error"] == "DivergenceError" and "last_good_checkpoint" in err

    for exc, want in ((DomainError("bad input"), 5), (CrossmostError("other"), 1)):

        def fail(args, exc=exc):
            raise exc

        monkeypatch.setattr(cli, "cmd_gen_data", fail)
        code, _, err = run(["gen-data", "--out", tmp_path / "d"], capsys)
        assert code == want == err["exit_code"] and err["message"] == str(exc)
