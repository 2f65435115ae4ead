"""Command line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 domain error
(leakage, generation failure, protocol violation), 3 transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DomainError, FicalError, TransportError
from .federation import (
    DEFAULT_BASELINE,
    MB,
    POPULAR_MODELS,
    TYPICAL_LINK_BPS,
    BaselineCostModel,
    CommLedger,
    GlobalCompendium,
    HttpTransport,
    baseline_comm_bytes,
    comm_ratio,
    transmission_table,
)
from .harness import (
    Backends,
    build_catalog,
    build_client_compendium,
    compare_rag_ablation,
    load_client_datasets,
    run_experiment,
)
from .kcg import KnowledgeCompendium
from .server import make_server, serve_in_background
from .tlu import AgentConfig, VectorStore, build_index, chunk_compendium, format_tool_call, run_agent

log = logging.getLogger("fical")

EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN, EXIT_TRANSPORT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's default 2."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else cfg.resolve(cfg.output_dir)


def _write(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


# -- commands ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    cfg.client(args.client)
    (dataset,) = load_client_datasets(cfg, only=args.client)
    comp = build_client_compendium(cfg, dataset, Backends.from_config(cfg).generator)
    target = Path(args.out) if args.out else _out_dir(args, cfg) / "compendiums" / f"{args.client}.md"
    if args.out and target.suffix == "":
        target = target / f"{args.client}.md"
    _write(target, comp.to_bytes())
    print(f"{target}\t{comp.byte_size} bytes\t{len(comp.entries)} tools")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _config(args)
    host = args.host or cfg.federation.host
    port = cfg.federation.port if args.port is None else args.port
    try:
        server = make_server(cfg.client_ids, host, port)
    except OSError as exc:
        raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
    print(f"serving on {server.url} for clients {', '.join(cfg.client_ids)}", flush=True)
    thread = serve_in_background(server)
    started = time.monotonic()
    try:
        while thread.is_alive():
            if args.timeout and time.monotonic() - started >= args.timeout:
                break
            time.sleep(0.1)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    print(json.dumps(server.federation.status(), sort_keys=True))
    return EXIT_OK


def _server_url(args, cfg: ExperimentConfig) -> str:
    return args.server or cfg.federation.server


def cmd_upload(args) -> int:
    cfg = _config(args)
    cfg.client(args.client)
    payload = Path(args.compendium).read_bytes()
    comp = KnowledgeCompendium.from_bytes(payload)
    if comp.client_id != args.client:
        raise ConfigError(f"{args.compendium} belongs to client {comp.client_id!r}")
    transport = HttpTransport(_server_url(args, cfg), timeout=cfg.federation.deadline)
    try:
        receipt = transport.upload(args.client, payload)
    finally:
        transport.close()
    print(json.dumps(
        {"client_id": receipt.client_id, "bytes": receipt.bytes,
         "received": receipt.received, "registered": receipt.registered},
        sort_keys=True,
    ))
    return EXIT_OK


def cmd_fetch_global(args) -> int:
    cfg = _config(args)
    cfg.client(args.client)
    transport = HttpTransport(_server_url(args, cfg), timeout=cfg.federation.deadline)
    try:
        data = transport.fetch_global(args.client)
    finally:
        transport.close()
    GlobalCompendium.from_bytes(data)
    target = Path(args.out) if args.out else _out_dir(args, cfg) / "global.md"
    _write(target, data)
    print(f"{target}\t{len(data)} bytes")
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = _config(args)
    global_comp = GlobalCompendium.from_bytes(Path(args.global_path).read_bytes())
    embedder = Backends.from_config(cfg).embedder
    store = build_index(chunk_compendium(global_comp), embedder, cfg.llm.parallelism)
    target = Path(args.out) if args.out else _out_dir(args, cfg) / "global.fical-index"
    target.parent.mkdir(parents=True, exist_ok=True)
    path = store.save(target)
    print(f"{path}\t{len(store)} chunks\tdim={store.dim}")
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = _config(args)
    store = VectorStore.load(args.index)
    backends = Backends.from_config(cfg)
    catalog = build_catalog(load_client_datasets(cfg))
    agent_cfg = AgentConfig(
        k=cfg.tlu.k if args.k is None else args.k,
        budget=cfg.tlu.budget,
        retries=cfg.tlu.agent_retries,
        seed=cfg.eval.seed,
    )
    answer = run_agent(args.text, store, backends.agent, backends.embedder, catalog, agent_cfg)
    if args.verbose:
        for r in answer.retrieved:
            print(f"# {r.similarity:+.4f} {r.chunk.chunk_id}")
    print(format_tool_call(answer.call))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if args.ablate_rag:
        return _ablate(cfg, out)
    report = run_experiment(cfg)
    paths = report.write(out)
    print(report.to_table(), end="")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def _ablate(cfg: ExperimentConfig, out: Path) -> int:
    paired = compare_rag_ablation(cfg)
    paths = paired.write(out)
    print(paired.to_table(), end="")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_ablate_rag(args) -> int:
    cfg = _config(args)
    return _ablate(cfg, _out_dir(args, cfg))


def _parse_models(items: Sequence[str]) -> dict[str, float]:
    models = {}
    for item in items:
        name, sep, value = item.rpartition("=")
        try:
            params = float(value)
        except ValueError:
            raise ConfigError(f"--params expects NAME=COUNT or COUNT, got {item!r}") from None
        if params < 0:
            raise ConfigError("parameter counts must be non-negative")
        models[name if sep else value] = params
    return models


def cmd_costs(args) -> int:
    cfg = load_config(args.config, args.set, check_paths=False) if args.config else None
    if args.link_bps <= 0 or args.bytes_per_param <= 0:
        raise ConfigError("--link-bps and --bytes-per-param must be positive")
    models = _parse_models(args.params) if args.params else dict(POPULAR_MODELS)
    rows = transmission_table(models, args.bytes_per_param, args.link_bps)
    result: dict = {"transmission": rows}

    if args.ledger or args.ledger_bytes is not None or args.ledger_mb is not None:
        if args.ledger:
            ledger_bytes = CommLedger.from_jsonl(Path(args.ledger).read_text(encoding="utf-8")).total_bytes
        elif args.ledger_bytes is not None:
            ledger_bytes = args.ledger_bytes
        else:
            ledger_bytes = args.ledger_mb * MB
        if args.baseline_mb is not None:
            baseline = args.baseline_mb * MB
        elif cfg is not None:
            b = cfg.baseline
            baseline = baseline_comm_bytes(
                BaselineCostModel(b.param_count, b.bytes_per_param, b.rounds, b.clients or len(cfg.clients))
            )
        else:
            baseline = baseline_comm_bytes(DEFAULT_BASELINE)
        if ledger_bytes <= 0:
            raise ConfigError("ledger total must be positive")
        result["ratio"] = {
            "ledger_bytes": ledger_bytes,
            "ledger_mb": ledger_bytes / MB,
            "baseline_bytes": baseline,
            "baseline_mb": baseline / MB,
            "comm_ratio": comm_ratio(ledger_bytes, baseline),
        }

    if args.json:
        print(json.dumps(result, sort_keys=True, indent=2))
        return EXIT_OK
    print(f"{'model':<16}{'params':>12}{'hours':>10}   ({args.bytes_per_param:g} B/param, {args.link_bps:g} bps)")
    for row in rows:
        print(f"{row['model']:<16}{row['params']:>12.4g}{row['hours']:>10.3f}")
    if "ratio" in result:
        r = result["ratio"]
        print(
            f"\nledger {r['ledger_mb']:.6g} MB vs baseline {r['baseline_mb']:.6g} MB: "
            f"comm ratio {r['comm_ratio']:.4g}"
        )
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fical", description="Federated in-context tool learning with knowledge compendiums.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose-log", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, func, help_text: str, config_required: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=config_required, help="experiment TOML file")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override one config value (repeatable)",
        )
        p.set_defaults(func=func)
        return p

    p = command("generate", cmd_generate, "Generate one client's knowledge compendium.")
    p.add_argument("--client", required=True, help="client_id from the config")
    p.add_argument("--out", help="output file or directory (default: <output_dir>/compendiums/)")

    p = command("serve", cmd_serve, "Run the federation server over HTTP.")
    p.add_argument("--host", help="bind address (default: federation.host)")
    p.add_argument("--port", type=int, help="port (default: federation.port; 0 picks a free one)")
    p.add_argument("--timeout", type=float, default=0.0, help="stop after this many seconds (0: run until interrupted)")

    p = command("upload", cmd_upload, "Upload a compendium file to a running server.")
    p.add_argument("--client", required=True)
    p.add_argument("--compendium", required=True, help="compendium file written by 'generate'")
    p.add_argument("--server", help="server URL (default: federation.server)")

    p = command("fetch-global", cmd_fetch_global, "Download the aggregated global compendium.")
    p.add_argument("--client", required=True)
    p.add_argument("--server", help="server URL (default: federation.server)")
    p.add_argument("--out", help="output file (default: <output_dir>/global.md)")

    p = command("index", cmd_index, "Chunk and embed a global compendium into a vector store.")
    p.add_argument("--global", dest="global_path", required=True, help="global compendium file")
    p.add_argument("--out", help="index file (default: <output_dir>/global.fical-index)")

    p = command("query", cmd_query, "Answer one request with the retrieval-augmented agent.")
    p.add_argument("--index", required=True, help="vector store written by 'index'")
    p.add_argument("--k", type=int, help="chunks to retrieve (default: tlu.k)")
    p.add_argument("--verbose", action="store_true", help="also print the retrieved chunks")
    p.add_argument("text", help="the user request")

    p = command("run", cmd_run, "Run the whole experiment and write the report.")
    p.add_argument("--out", help="report directory (default: experiment.output_dir)")
    p.add_argument("--ablate-rag", action="store_true", help="also evaluate without retrieval and write the paired report")

    p = command("ablate-rag", cmd_ablate_rag, "Evaluate with and without retrieval on the same federation.")
    p.add_argument("--out", help="report directory (default: experiment.output_dir)")

    p = command("costs", cmd_costs, "Transmission-time table and communication ratio.", config_required=False)
    p.add_argument("--params", action="append", default=[], metavar="[NAME=]COUNT",
                   help="model size, e.g. LLaMA=405e9 (repeatable; default: four well-known models)")
    p.add_argument("--bytes-per-param", type=float, default=4.0)
    p.add_argument("--link-bps", type=float, default=TYPICAL_LINK_BPS, help="link speed in bits per second")
    p.add_argument("--ledger", help="ledger.jsonl from a run")
    p.add_argument("--ledger-bytes", type=int, help="ledger total in bytes")
    p.add_argument("--ledger-mb", type=float, help="ledger total in MB (10^6 bytes)")
    p.add_argument("--baseline-mb", type=float,
                   help="baseline traffic in MB (default: from the config's [baseline] section)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose_log else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (DomainError, FicalError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
