import pytest

from fical.config import apply_overrides, config_from_dict, load_config
from fical.errors import ConfigError

BASIC = """
[experiment]
output_dir = "results"

[[clients]]
client_id = "c1"
dataset = "c1.jsonl"
toolsets = ["dogs"]

[[clients]]
client_id = "c2"
dataset = "c2.jsonl"

[tlu]
k = 4
budget = 1024

[baseline]
param_count = 8e9
"""


@pytest.fixture
def config_file(tmp_path):
    for name in ("c1.jsonl", "c2.jsonl"):
        (tmp_path / name).write_text("")
    path = tmp_path / "config.toml"
    path.write_text(BASIC)
    return path


def test_load_basic(config_file):
    cfg = load_config(config_file)
    assert cfg.client_ids == ["c1", "c2"]
    assert cfg.client("c1").toolsets == ("dogs",)
    assert cfg.tlu.k == 4 and cfg.tlu.dim == 64
    assert cfg.baseline.param_count == 8e9
    assert cfg.output_dir == "results"
    assert cfg.resolve("c1.jsonl") == config_file.parent / "c1.jsonl"


def test_overrides_take_precedence(config_file):
    cfg = load_config(config_file, ["tlu.k=12", "eval.rag=false", "llm.model=my-model", "baseline.rounds=10.0"])
    assert cfg.tlu.k == 12
    assert cfg.eval.rag is False
    assert cfg.llm.model == "my-model"
    assert cfg.baseline.rounds == 10


@pytest.mark.parametrize(
    "override",
    ["tlu.k", "tlu=3", "nosuch.k=1", "tlu.nosuch=1", "tlu.k=1.5", "tlu.k=abc", "eval.rag=1", "baseline.param_count=x"],
)
def test_bad_overrides(config_file, override):
    with pytest.raises(ConfigError):
        load_config(config_file, [override])


@pytest.mark.parametrize(
    "override",
    [
        "tlu.budget=0",
        "tlu.min_span=19",
        "federation.transport=carrier-pigeon",
        "eval.split_fraction=1.0",
        "eval.judge_mode=vibes",
        "llm.mode=remote",
        "baseline.rounds=-1",
    ],
)
def test_validation(config_file, override):
    with pytest.raises(ConfigError):
        load_config(config_file, [override])


def test_missing_dataset_and_file(config_file, tmp_path):
    (tmp_path / "c2.jsonl").unlink()
    with pytest.raises(ConfigError, match="c2"):
        load_config(config_file)
    assert load_config(config_file, check_paths=False).client_ids == ["c1", "c2"]
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_structural_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"clients": [{"client_id": "c1", "dataset": "x"}], "bogus": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"clients": [{"client_id": "c1"}]})
    with pytest.raises(ConfigError):
        config_from_dict({"clients": [], "tlu": 3})
    cfg = config_from_dict({"clients": [{"client_id": "a", "dataset": "x"}, {"client_id": "a", "dataset": "y"}]})
    with pytest.raises(ConfigError):
        cfg.validate(check_paths=False)


def test_invalid_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[[clients]\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_override_strings_fall_back_to_raw():
    doc = apply_overrides({}, ["llm.endpoint=http://localhost:9/v1", 'llm.model="quoted"'])
    assert doc["llm"] == {"endpoint": "http://localhost:9/v1", "model": "quoted"}


def test_env_fills_llm_settings(config_file, monkeypatch):
    monkeypatch.setenv("FICAL_LLM_API_KEY", "sk-secret")
    monkeypatch.setenv("FICAL_LLM_MODEL", "env-model")
    cfg = load_config(config_file)
    assert cfg.llm.model == "env-model"
    assert load_config(config_file, ["llm.model=cli-model"]).llm.model == "cli-model"
    snap = cfg.snapshot()
    assert snap["llm"]["api_key"] == "***"
    assert "sk-secret" not in repr(snap)
