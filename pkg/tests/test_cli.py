import json
from pathlib import Path

import pytest

from cogmap_nav.cli import main
from cogmap_nav.runner import CSV_COLUMNS
from cogmap_nav.world import dump_scenario, generate_world, load_scenario


@pytest.fixture
def short_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"max_steps": 40}))
    return str(p)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_gen_world_prints_scenario(capsys):
    assert main(["gen-world", "--seed", "7"]) == 0
    assert capsys.readouterr().out == dump_scenario(generate_world(7))


def test_gen_world_to_file_round_trips(tmp_path):
    out = tmp_path / "w.json"
    assert main(["gen-world", "--seed", "3", "--goal", "bed", "--out", str(out)]) == 0
    assert load_scenario(out.read_text()).goal == "bed"


def test_run_writes_csv_and_snapshots_deterministically(tmp_path, short_cfg, capsys):
    for name in ("a", "b"):
        argv = ["run", "--seed", "42", "--episodes", "2", "--config", short_cfg, "--out", str(tmp_path / name)]
        assert main(argv) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert any(k.startswith("snapshots/episode_001/") for k in a)
    header = a["results.csv"].decode().splitlines()[0]
    assert tuple(header.split(",")) == CSV_COLUMNS
    assert "SR" in capsys.readouterr().out


def test_run_from_scenario_file(tmp_path, short_cfg):
    scen = tmp_path / "s.json"
    scen.write_text(dump_scenario(generate_world(5)))
    out = tmp_path / "o"
    assert main(["run", "--scenario", str(scen), "--config", short_cfg, "--no-snapshots", "--out", str(out)]) == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].split(",")[1] == "5"
    assert not (out / "snapshots").exists()


def test_eval_table_bins_and_csv(tmp_path, short_cfg, capsys):
    csv_path = tmp_path / "r.csv"
    argv = ["eval", "--seed", "1", "--episodes", "2", "--config", short_cfg, "--bins", "4", "--csv", str(csv_path),
            "--disable-state", "CV", "--noise", "0,0,0"]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "entropy" in out and len(csv_path.read_text().splitlines()) == 3


def test_replay_backend_from_script(tmp_path, short_cfg):
    script = tmp_path / "script.json"
    script.write_text(json.dumps({"states": ["Broad Search"] * 4}))
    out = tmp_path / "o"
    argv = ["run", "--seed", "2", "--config", short_cfg, "--backend", "replay", "--script", str(script),
            "--no-snapshots", "--out", str(out)]
    assert main(argv) == 0


def test_render_and_prompt_dump(tmp_path, short_cfg):
    frames = tmp_path / "frames"
    assert main(["render", "--seed", "4", "--config", short_cfg, "--field", "--out", str(frames)]) == 0
    names = sorted(p.name for p in frames.iterdir())
    assert "seed4_field.ppm" in names and "seed4_0000.ppm" in names
    dump = tmp_path / "prompt.txt"
    assert main(["prompt-dump", "--seed", "4", "--step", "0", "--out", str(dump)]) == 0
    text = dump.read_text()
    assert text.startswith("=== state prompt ===") and f"Goal: {generate_world(4).goal}\n" in text


@pytest.mark.parametrize("extra", [
    ["--disable-state", "BS"],
    ["--disable-state", "XX"],
    ["--noise", "0.1,0.2"],
    ["--noise", "a,b,c"],
    ["--noise", "0.1,1.5,0"],
    ["--episodes", "0"],
    ["--backend", "replay"],
    ["--scenario", "/nonexistent/scenario.json"],
])
def test_configuration_errors_exit_2(tmp_path, extra, capsys):
    assert main(["run", "--no-snapshots", "--out", str(tmp_path)] + extra) == 2
    assert "configuration error" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [{"max_stepz": 3}, {"max_steps": 0}, {"prompt": {"bogus": 1}}, [1, 2], "{not json"])
def test_bad_config_file_exits_2(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    assert main(["eval", "--config", str(p)]) == 2


def test_bad_scenario_exits_2_with_line(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text('{\n "seed": 1\n}')
    assert main(["run", "--scenario", str(p), "--out", str(tmp_path)]) == 2
    assert "line" in capsys.readouterr().err


def test_llm_backend_without_endpoint_exits_2(tmp_path, monkeypatch):
    monkeypatch.delenv("COGNAV_LLM_BASE_URL", raising=False)
    assert main(["run", "--backend", "llm", "--out", str(tmp_path)]) == 2


def test_argparse_usage_errors_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["run", "--backend", "oracle"])
    assert err.value.code == 2
