import csv
import io
import json
import math

import numpy as np
import pytest

import synergy_moe.cli as cli
from synergy_moe.config import RunConfig, load_config
from synergy_moe.errors import ConfigError
from synergy_moe.geometry import CameraFrame, frame_to_dict
from synergy_moe.tensor import PRIMITIVES

TINY = {
    "seed": 3, "layers": 2, "d_hidden": 32, "pool_size": 8, "batch_size": 4, "log_every": 1,
    "steps_stage_1_1": 3, "steps_stage_1_2": 3, "steps_stage_2_1": 4, "steps_stage_2_2": 3,
}


@pytest.fixture
def csqa_file(tmp_path):
    path = tmp_path / "qa.jsonl"
    assert cli.main(["gen-csqa", "--synthetic", "5", "--out", str(path)]) == 0
    return path


def tiny_config(tmp_path, **extra):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, **extra}))
    return path


def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_empty_stages_only_echoes_config(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(tiny_config(tmp_path)), "--stages", "", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["config.json"]
    echo = json.loads((out / "config.json").read_text())
    assert echo["stages"] == [] and echo["layers"] == 2


def test_flag_overrides_config_file(tmp_path):
    out = tmp_path / "run"
    cfg = tiny_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--stages", "", "--alpha", "0.5", "--schedule", "full",
                     "--out", str(out)]) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["alpha"] == 0.5 and echo["schedule"] == "full" and echo["seed"] == 3


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sead": 1}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert "sead" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"layers": "eight"})


def test_missing_csqa_is_actionable(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tiny_config(tmp_path)), "--out", str(tmp_path / "run")])
    err = capsys.readouterr().err
    assert code == 1 and "csqa" in err.lower() and "gen-csqa" in err


def test_stage_needs_previous_checkpoint(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tiny_config(tmp_path)), "--stages", "stage_2_1",
                     "--out", str(tmp_path / "run")])
    assert code == 1 and "stage_1_2" in capsys.readouterr().err


def test_full_run_is_reproducible_and_resumable(tmp_path, csqa_file):
    cfg = tiny_config(tmp_path, csqa_path=str(csqa_file))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(b)]) == 0
    for stage in ("stage_1_1", "stage_1_2", "stage_2_1", "stage_2_2"):
        for name in ("report.json", "curve.csv", "routing.csv"):
            if (a / stage / name).exists() or name == "report.json":
                assert (a / stage / name).read_bytes() == (b / stage / name).read_bytes(), (stage, name)
    report = json.loads((a / "stage_2_1" / "report.json").read_text())
    assert report["steps"] == 4 and "coarse" in report["pool_loss_final"]
    assert "time" not in json.dumps(report)

    # resume: drop the last stage and rerun; earlier stages are reused untouched
    stamp = (a / "stage_1_1" / "model.npz").stat().st_mtime_ns
    last = (a / "stage_2_2" / "report.json").read_bytes()
    for p in (a / "stage_2_2").iterdir():
        p.unlink()
    assert cli.main(["train", "--config", str(cfg), "--out", str(a)]) == 0
    assert (a / "stage_1_1" / "model.npz").stat().st_mtime_ns == stamp
    assert (a / "stage_2_2" / "report.json").read_bytes() == last

    # route-stats of the run equals the last logged step of routing.csv
    rows = read_csv(a / "stage_2_2" / "routing.csv")
    final = max(int(r["step"]) for r in rows)
    logged = {(int(r["layer"]), int(r["expert"])): float(r["token_fraction"]) for r in rows if int(r["step"]) == final}
    out = tmp_path / "stats.csv"
    assert cli.main(["route-stats", str(a), "--out", str(out)]) == 0
    got = {(int(r["layer"]), int(r["expert"])): float(r["token_fraction"]) for r in read_csv(out)}
    assert got.keys() == logged.keys()
    assert max(abs(got[k] - logged[k]) for k in got) < 1e-9


def test_mismatched_run_directory_is_refused(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--stages", "", "--out", str(out)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--stages", "", "--seed", "9", "--out", str(out)]) == 1
    assert "seed" in capsys.readouterr().err


def write_routing(path, probs_by_layer):
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / "routing_final.npz", **{f"layer_{k}": v for k, v in probs_by_layer.items()})


def test_route_stats_collapsed_and_uniform(tmp_path, capsys):
    m = 4
    collapsed = np.zeros((32, m))
    collapsed[:, 1] = 1.0
    write_routing(tmp_path / "collapsed", {0: collapsed})
    assert cli.main(["route-stats", str(tmp_path / "collapsed")]) == 0
    text = capsys.readouterr()
    assert "max_share=1.000000" in text.err and f"load_balance_loss={float(m):.6f}" in text.err
    assert "layer,expert,token_fraction,mean_prob" in text.out

    uniform = np.full((32, m), 1.0 / m)
    uniform[np.arange(32), np.arange(32) % m] += 1e-6  # argmax cycles through experts
    uniform /= uniform.sum(1, keepdims=True)
    write_routing(tmp_path / "uniform", {0: uniform})
    assert cli.main(["route-stats", str(tmp_path / "uniform")]) == 0
    err = capsys.readouterr().err
    assert "max_share=0.250000" in err and "min_share=0.250000" in err and "load_balance_loss=1.000000" in err


def test_route_stats_without_telemetry(tmp_path, capsys):
    assert cli.main(["route-stats", str(tmp_path)]) == 1
    assert "routing_final.npz" in capsys.readouterr().err


@pytest.mark.parametrize("axis,count", [("experts", 3), ("placement", 4)])
def test_ablation_tables(tmp_path, capsys, axis, count):
    cfg = tiny_config(tmp_path, stages=["stage_1_1", "stage_1_2", "stage_2_1"], layers=4, steps_stage_2_1=2)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(cfg), "--axis", axis, "--out", str(out)]) == 0
    rows = read_csv(out / f"ablation_{axis}.csv")
    assert len(rows) == count
    if axis == "placement":
        at28 = {r["schedule"]: int(r["moe_layers_at_28"]) for r in rows}
        assert at28 == {"first_half": 14, "last_half": 14, "interval(4)": 7, "full": 28}
    else:
        assert [int(r["num_experts"]) for r in rows] == [2, 3, 4]
    first = (out / f"ablation_{axis}.csv").read_bytes()
    out2 = tmp_path / "abl2"
    assert cli.main(["ablate", "--config", str(cfg), "--axis", axis, "--out", str(out2)]) == 0
    assert (out2 / f"ablation_{axis}.csv").read_bytes() == first


def test_lift_identity_rig(tmp_path, capsys):
    depth = np.arange(1.0, 7.0).reshape(2, 3)
    frame = CameraFrame(depth, np.eye(3), np.eye(4))
    path = tmp_path / "frame.json"
    path.write_text(json.dumps(frame_to_dict(frame)))
    assert cli.main(["lift", str(path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    pts = np.array(doc["data"]).reshape(doc["dims"])
    for i in range(2):
        for j in range(3):
            d = depth[i, j]
            assert np.allclose(pts[i, j], [j * d, i * d, d], atol=1e-12)


def test_malformed_json_reports_location(tmp_path, capsys):
    path = tmp_path / "frame.json"
    path.write_text('{"depth": {"dims": [1, 1],\n "data": [1.0,, ]}}')
    assert cli.main(["lift", str(path)]) == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_missing_file_exit_code(tmp_path):
    assert cli.main(["lift", str(tmp_path / "nope.json")]) == 1


def test_usage_error_exit_code(capsys):
    assert cli.main(["ablate", "--axis", "nonsense", "--out", "x"]) == 1
    assert cli.main(["gen-csqa"]) == 1


def test_internal_error_exit_code(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise KeyError("broken")

    monkeypatch.setattr(cli, "run_pipeline", boom)
    assert cli.main(["train", "--stages", "", "--out", str(tmp_path)]) == 2
    assert "internal error" in capsys.readouterr().err


def test_grad_check_flags_corrupted_matmul(monkeypatch, capsys):
    good = PRIMITIVES["matmul"]

    def bad(a, b):
        out, vjp = good(a, b)
        return out, lambda g: tuple(1.01 * v for v in vjp(g))

    monkeypatch.setitem(PRIMITIVES, "matmul", bad)
    assert cli.main(["grad-check", "--n-seeds", "1"]) == 1
    captured = capsys.readouterr()
    assert "op:matmul" in captured.err
    assert "FAIL" in captured.out


def test_gen_csqa_from_pair_dir(tmp_path, capsys):
    from synergy_moe.csqa import baby_toy_pair, pair_to_dict

    pairs = tmp_path / "pairs"
    pairs.mkdir()
    (pairs / "baby.json").write_text(json.dumps(pair_to_dict(baby_toy_pair())))
    assert cli.main(["gen-csqa", "--pairs", str(pairs), "--seed", "1"]) == 0
    lines = [json.loads(s) for s in capsys.readouterr().out.splitlines()]
    assert lines and {d["level"] for d in lines} == {"object", "relation"}
    assert len(lines) <= 8
    assert cli.main(["gen-csqa", "--pairs", str(pairs), "--seed", "1"]) == 0
    assert [json.loads(s) for s in capsys.readouterr().out.splitlines()] == lines


def test_load_config_none_is_default():
    assert load_config(None) == RunConfig()
    assert math.isclose(RunConfig().stage_config("stage_2_1").lr, 1e-4)
