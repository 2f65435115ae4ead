"""Experiment configuration: one TOML file plus ``--set section.key=value`` overrides.

Example::

    [experiment]
    output_dir = "out"

    [[clients]]
    client_id = "c1"
    dataset = "data/c1.jsonl"
    toolsets = ["dogs"]

    [llm]
    mode = "mock"

    [tlu]
    k = 8
    budget = 2048

    [federation]
    transport = "simulated"

    [eval]
    seed = 7

    [baseline]
    param_count = 13000000
    rounds = 50
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .domain import is_identifier
from .errors import ConfigError
from .gateway import LLMSettings


@dataclass
class ClientConfig:
    client_id: str
    dataset: str
    toolsets: tuple[str, ...] = ()


@dataclass
class TLUSettings:
    dim: int = 64
    k: int = 8
    budget: int = 2048
    min_span: int = 40
    examples_per_tool: int = 5
    parse_retries: int = 3
    agent_retries: int = 2
    template: str = ""  # path to a custom KCG template; empty means the packaged one


@dataclass
class FederationSettings:
    transport: str = "simulated"
    server: str = "http://127.0.0.1:8765"
    host: str = "127.0.0.1"
    port: int = 8765
    deadline: float = 300.0


@dataclass
class EvalSettings:
    judge_mode: str = "structural"
    simulator_mode: str = "deterministic"
    split_fraction: float = 0.2
    seed: int = 0
    rag: bool = True


@dataclass
class BaselineSettings:
    param_count: float = 13_000_000
    bytes_per_param: float = 4.0
    rounds: int = 50
    clients: int = 0  # 0: use the number of configured clients


@dataclass
class ExperimentConfig:
    clients: list[ClientConfig]
    llm: LLMSettings = field(default_factory=LLMSettings)
    tlu: TLUSettings = field(default_factory=TLUSettings)
    federation: FederationSettings = field(default_factory=FederationSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    baseline: BaselineSettings = field(default_factory=BaselineSettings)
    output_dir: str = "fical-out"
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, path: str | Path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def client(self, client_id: str) -> ClientConfig:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise ConfigError(f"no client {client_id!r} in configuration")

    @property
    def client_ids(self) -> list[str]:
        return [c.client_id for c in self.clients]

    def validate(self, check_paths: bool = True) -> None:
        if not self.clients:
            raise ConfigError("at least one [[clients]] entry is required")
        ids = self.client_ids
        if len(set(ids)) != len(ids):
            raise ConfigError("client_id values must be unique")
        for c in self.clients:
            if not is_identifier(c.client_id):
                raise ConfigError(f"invalid client_id {c.client_id!r}")
            if check_paths and not self.resolve(c.dataset).exists():
                raise ConfigError(f"dataset for {c.client_id!r} not found: {self.resolve(c.dataset)}")
        self.llm.validate()
        t = self.tlu
        if t.dim < 1 or t.k < 0 or t.budget < 1:
            raise ConfigError("tlu.dim and tlu.budget must be positive, tlu.k non-negative")
        if t.min_span < 20:
            raise ConfigError("tlu.min_span must be at least 20")
        if t.examples_per_tool < 1 or t.parse_retries < 0 or t.agent_retries < 0:
            raise ConfigError("tlu.examples_per_tool >= 1, retries >= 0")
        if check_paths and t.template and not self.resolve(t.template).exists():
            raise ConfigError(f"template not found: {self.resolve(t.template)}")
        if self.federation.transport not in ("simulated", "http"):
            raise ConfigError("federation.transport must be 'simulated' or 'http'")
        if self.federation.deadline <= 0:
            raise ConfigError("federation.deadline must be positive")
        e = self.eval
        if e.judge_mode not in ("structural", "llm"):
            raise ConfigError("eval.judge_mode must be 'structural' or 'llm'")
        if e.simulator_mode not in ("deterministic", "llm"):
            raise ConfigError("eval.simulator_mode must be 'deterministic' or 'llm'")
        if not 0.0 < e.split_fraction < 1.0:
            raise ConfigError("eval.split_fraction must lie in (0, 1)")
        b = self.baseline
        if b.param_count < 0 or b.bytes_per_param <= 0 or b.rounds < 0 or b.clients < 0:
            raise ConfigError("baseline values must be non-negative (bytes_per_param positive)")

    def snapshot(self) -> dict[str, Any]:
        """Reproducible view of the configuration (secrets removed)."""
        llm = dataclasses.asdict(self.llm)
        llm["api_key"] = "***" if self.llm.api_key else ""
        return {
            "clients": [
                {"client_id": c.client_id, "dataset": str(c.dataset), "toolsets": list(c.toolsets)}
                for c in self.clients
            ],
            "llm": llm,
            "tlu": dataclasses.asdict(self.tlu),
            "federation": dataclasses.asdict(self.federation),
            "eval": dataclasses.asdict(self.eval),
            "baseline": dataclasses.asdict(self.baseline),
        }


_SECTIONS = {
    "llm": LLMSettings,
    "tlu": TLUSettings,
    "federation": FederationSettings,
    "eval": EvalSettings,
    "baseline": BaselineSettings,
}


def _parse_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _coerce(cls: type, key: str, value: Any) -> Any:
    names = {f.name: f for f in dataclasses.fields(cls)}
    if key not in names:
        raise ConfigError(f"unknown setting {cls.__name__}.{key}")
    default = getattr(cls(), key)
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(f"expected true/false, got {value!r}")
            return value
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueError(f"expected an integer, got {value!r}")
            return value
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"expected a number, got {value!r}")
            return float(value)
        return str(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def apply_overrides(doc: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in _SECTIONS and section != "experiment":
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        doc.setdefault(section, {})[name] = _parse_value(raw.strip())
    return doc


def config_from_dict(doc: dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    unknown = set(doc) - set(_SECTIONS) - {"clients", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    clients = []
    for i, c in enumerate(doc.get("clients", [])):
        try:
            clients.append(
                ClientConfig(str(c["client_id"]), str(c["dataset"]), tuple(c.get("toolsets", ())))
            )
        except (KeyError, TypeError):
            raise ConfigError(f"clients[{i}] needs client_id and dataset") from None
    sections = {}
    for name, cls in _SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = cls(**{k: _coerce(cls, k, v) for k, v in values.items()})
    experiment = doc.get("experiment", {})
    cfg = ExperimentConfig(
        clients=clients,
        output_dir=str(experiment.get("output_dir", "fical-out")),
        base_dir=base_dir or Path.cwd(),
        **sections,
    )
    cfg.llm = LLMSettings.from_env(**dataclasses.asdict(cfg.llm))
    return cfg


def load_config(path: str | Path, overrides: Sequence[str] = (), check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(apply_overrides(doc, overrides), base_dir=path.resolve().parent)
    cfg.validate(check_paths=check_paths)
    return cfg
