import json

import pytest

import main


def run_cli(capsys, *argv):
    code = main.main(list(argv))
    out = capsys.readouterr().out
    return code, out


def test_train_streams_metrics(capsys, write_config):
    code, out = run_cli(capsys, "train", "--config", str(write_config()))
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()]
    assert [r["iter"] for r in records] == list(range(6))
    assert set(records[0]) == {"iter", "lr", "loss", "peak_modeled_mem"}


def test_train_is_reproducible(capsys, write_config, tmp_path):
    config = write_config()
    for name in ("a.jsonl", "b.jsonl"):
        assert run_cli(capsys, "train", "--config", str(config), "--metrics", str(tmp_path / name))[0] == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_invalid_key_exits_2(capsys, tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"nope": 1}', encoding="utf-8")
    code, out = run_cli(capsys, "train", "--config", str(path))
    assert code == 2
    assert out == ""


def test_plan_on_budget(capsys, tmp_path):
    path = tmp_path / "plan.json"
    path.write_text(json.dumps({"m": [1, 1, 1, 1], "budget": 3}), encoding="utf-8")
    code, out = run_cli(capsys, "plan", "--input", str(path))
    assert code == 0
    assert json.loads(out)["boundaries"] == [2]


@pytest.mark.parametrize("payload, boundaries", [
    ({"m": [3, 1, 1, 3, 2], "n_segments": 3}, [2, 4]),
    ({"m": [3, 1, 1, 3, 2], "boundaries": [1]}, [1]),
])
def test_plan_modes(capsys, tmp_path, payload, boundaries):
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    code, out = run_cli(capsys, "plan", "--input", str(path))
    assert code == 0 and json.loads(out)["boundaries"] == boundaries


def test_infeasible_plan_exits_2(capsys, tmp_path):
    path = tmp_path / "plan.json"
    path.write_text(json.dumps({"m": [5, 5], "budget": 1}), encoding="utf-8")
    assert run_cli(capsys, "plan", "--input", str(path))[0] == 2


def test_widths_preset(capsys):
    code, out = run_cli(capsys, "widths", "--preset", "RG-128gf")
    assert code == 0
    assert out == "stage,width,depth\n1,528,2\n2,1056,7\n3,2904,17\n4,7392,1\n"


def test_simulate_schedule(capsys, tmp_path):
    path = tmp_path / "costs.json"
    path.write_text(json.dumps({"comm": [1, 1, 1], "compute": [2, 2, 2]}), encoding="utf-8")
    code, out = run_cli(capsys, "simulate-schedule", "--input", str(path))
    report = json.loads(out)
    assert code == 0
    assert report["serial_makespan"] == 9 and report["prefetch_makespan"] == 7
    assert len(report["events"]) == 12


def test_reshard_and_probe(capsys, write_config, tmp_path):
    shards = tmp_path / "shards"
    config = write_config(checkpoint_every=6, checkpoint_dir=str(shards), n_samples=80)
    assert run_cli(capsys, "train", "--config", str(config))[0] == 0

    code, out = run_cli(capsys, "reshard", "--in", str(shards), "--out", str(tmp_path / "slices"),
                        "--mode", "to-slices")
    assert code == 0 and json.loads(out)["kind"] == "sliced"

    code, out = run_cli(capsys, "reshard", "--in", str(tmp_path / "slices"), "--out", str(tmp_path / "again"),
                        "--mode", "to-shards", "--world", "2")
    assert code == 0
    for name in ("shard_rank00000.bin", "shard_rank00001.bin", "metadata.json"):
        assert (shards / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    code, out = run_cli(capsys, "probe", "--config", str(config), "--slices", str(tmp_path / "slices"))
    report = json.loads(out)
    assert code == 0 and 0.0 <= report["top1"] <= 1.0 and report["n_test"] == 16


def test_resume_with_other_world_exits_4(capsys, write_config, tmp_path):
    shards = tmp_path / "shards"
    config = write_config(checkpoint_every=3, checkpoint_dir=str(shards))
    assert run_cli(capsys, "train", "--config", str(config))[0] == 0
    other = write_config("other.json", world_size=1)
    assert run_cli(capsys, "train", "--config", str(other), "--resume", str(shards))[0] == 4


def test_reshard_to_shards_needs_world(capsys, tmp_path):
    code, _ = run_cli(capsys, "reshard", "--in", str(tmp_path), "--out", str(tmp_path / "o"), "--mode", "to-shards")
    assert code == 2
