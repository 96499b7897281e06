"""Command-line interface: build, query, eval, stats, synth.

Configuration is a JSON file (see ``AppConfig``); command-line flags override
it, and provider endpoints/keys come last from the environment
(``PASSAGEHOP_CHAT_*``, ``PASSAGEHOP_EMBED_*``, falling back to ``OPENAI_*``).

Exit codes: 0 ok, 1 unexpected, 2 usage, 3 config, 4 corpus/dataset,
5 provider, 6 archive, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from passagehop import evalkit, indexer, prompts, storage
from passagehop.core import DimensionError
from passagehop.providers import (
    ChatModel,
    Embedder,
    HashEmbedder,
    KeywordExtractor,
    OpenAIChat,
    OpenAIEmbedder,
    ProviderConfig,
    ProviderError,
    RuleKeywordExtractor,
    ScriptedChat,
)
from passagehop.traversal import Reasoner, ReasonerMode, TraversalParams, retrieve

log = logging.getLogger("passagehop")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_PROVIDER = 5
EXIT_ARCHIVE = 6
EXIT_INTERRUPTED = 130


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


# --- configuration -------------------------------------------------------------


@dataclass
class AppConfig:
    """Everything a command needs besides its positional arguments.

    File layout (all keys optional)::

        {
          "providers": {
            "embedding": {"kind": "hash", "dim": 256}
                       | {"kind": "openai", "endpoint": "...", "model": "...", "dim": 1024},
            "keywords":  {"kind": "rule", "min_length": 3},
            "chat":      null
                       | {"kind": "scripted", "script": "script.json"}
                       | {"kind": "openai", "endpoint": "...", "model": "...", "temperature": 0.1}
          },
          "index":     {"min_in_questions": 2, "min_out_questions": 4, "edge_cap_rule": "nlogn", ...},
          "traversal": {"top_k": 20, "n_hop": 4, "reasoner_mode": "llm", "strict": false},
          "paths":     {"corpus": ..., "graph": ..., "prompts": ..., "traces": ..., "reports": ...},
          "log_level": "WARNING"
        }

    Relative paths are resolved against the config file's directory.
    """

    embedding: dict[str, Any] = field(default_factory=lambda: {"kind": "hash", "dim": 256})
    keywords: dict[str, Any] = field(default_factory=lambda: {"kind": "rule"})
    chat: dict[str, Any] | None = None
    index: dict[str, Any] = field(default_factory=dict)
    traversal: dict[str, Any] = field(default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)
    log_level: str = "WARNING"

    @classmethod
    def from_file(cls, path: str | Path | None) -> AppConfig:
        if path is None:
            return cls()
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CliError(f"config file not found: {path}", EXIT_CONFIG) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from exc
        if not isinstance(raw, dict):
            raise CliError(f"{path}: top level must be an object", EXIT_CONFIG)
        unknown = set(raw) - {"providers", "index", "traversal", "paths", "log_level"}
        if unknown:
            raise CliError(f"{path}: unknown keys {sorted(unknown)}", EXIT_CONFIG)
        base = path.parent
        prov = raw.get("providers", {})
        cfg = cls(
            embedding=dict(prov.get("embedding") or {"kind": "hash", "dim": 256}),
            keywords=dict(prov.get("keywords") or {"kind": "rule"}),
            chat=dict(prov["chat"]) if prov.get("chat") else None,
            index=dict(raw.get("index", {})),
            traversal=dict(raw.get("traversal", {})),
            paths={k: (base / v) for k, v in raw.get("paths", {}).items() if v},
            log_level=str(raw.get("log_level", "WARNING")).upper(),
        )
        if cfg.chat and cfg.chat.get("script"):
            cfg.chat["script"] = base / cfg.chat["script"]
        return cfg

    def validate(self) -> None:
        """Check referenced files before any long-running work."""
        if self.chat and self.chat.get("kind") == "scripted":
            script = self.chat.get("script")
            if script is not None and not Path(script).is_file():
                raise CliError(f"chat script not found: {script}", EXIT_CONFIG)
        prompt_dir = self.paths.get("prompts")
        if prompt_dir is not None and not Path(prompt_dir).is_dir():
            raise CliError(f"prompt directory not found: {prompt_dir}", EXIT_CONFIG)

    def template(self, name: str) -> str:
        prompt_dir = self.paths.get("prompts")
        if prompt_dir is not None and (Path(prompt_dir) / f"{name}.txt").is_file():
            return (Path(prompt_dir) / f"{name}.txt").read_text(encoding="utf-8")
        return prompts.load(name)


def _provider_config(spec: dict[str, Any], env_prefix: str) -> ProviderConfig:
    try:
        cfg = ProviderConfig(
            endpoint=spec.get("endpoint", ""),
            model_name=spec.get("model", ""),
            api_key=spec.get("api_key", ""),
            timeout=float(spec.get("timeout", 30.0)),
            max_retries=int(spec.get("max_retries", 3)),
            temperature=float(spec.get("temperature", 0.1)),
            max_tokens=int(spec.get("max_tokens", 2048)),
        ).with_env(env_prefix)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad provider settings: {exc}", EXIT_CONFIG) from exc
    if not cfg.endpoint or not cfg.model_name:
        raise CliError(f"{env_prefix}: endpoint and model are required", EXIT_CONFIG)
    return cfg


def make_embedder(cfg: AppConfig) -> Embedder:
    spec = cfg.embedding
    kind = spec.get("kind", "hash")
    if kind == "hash":
        return HashEmbedder(dim=int(spec.get("dim", 256)))
    if kind == "openai":
        if "dim" not in spec:
            raise CliError("openai embedding needs 'dim'", EXIT_CONFIG)
        return OpenAIEmbedder(_provider_config(spec, "PASSAGEHOP_EMBED"), dim=int(spec["dim"]))
    raise CliError(f"unknown embedding kind {kind!r}", EXIT_CONFIG)


def make_extractor(cfg: AppConfig) -> KeywordExtractor:
    spec = cfg.keywords
    if spec.get("kind", "rule") != "rule":
        raise CliError(f"unknown keywords kind {spec.get('kind')!r}", EXIT_CONFIG)
    return RuleKeywordExtractor(min_length=int(spec.get("min_length", 3)))


def make_chat(cfg: AppConfig) -> ChatModel | None:
    spec = cfg.chat
    if not spec:
        return None
    kind = spec.get("kind")
    if kind == "scripted":
        if spec.get("script") is None:
            return ScriptedChat(spec.get("responses", {}), default=spec.get("default"))
        try:
            return ScriptedChat.from_file(spec["script"])
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read chat script: {exc}", EXIT_CONFIG) from exc
    if kind == "openai":
        return OpenAIChat(_provider_config(spec, "PASSAGEHOP_CHAT"))
    raise CliError(f"unknown chat kind {kind!r}", EXIT_CONFIG)


def _descriptor(embedder: Embedder, extractor: KeywordExtractor, chat: ChatModel | None) -> dict:
    return {
        "embedding": embedder.name,
        "dim": embedder.dim,
        "keywords": extractor.name,
        "chat": chat.name if chat is not None else None,
    }


def _index_config(cfg: AppConfig, workers: int | None) -> indexer.IndexConfig:
    opts = dict(cfg.index)
    if workers is not None:
        opts["workers"] = workers
    try:
        return indexer.IndexConfig(
            in_template=cfg.template(prompts.IN_COMING),
            out_template=cfg.template(prompts.OUT_COMING),
            **opts,
        )
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad index settings: {exc}", EXIT_CONFIG) from exc


def _params(cfg: AppConfig, args: argparse.Namespace, top_k: int | None = None, n_hop: int | None = None) -> TraversalParams:
    t = cfg.traversal
    mode = ReasonerMode.SIMILARITY if getattr(args, "no_llm", False) else t.get("reasoner_mode", "llm")
    try:
        return TraversalParams(
            top_k=top_k if top_k is not None else int(t.get("top_k", 20)),
            n_hop=n_hop if n_hop is not None else int(t.get("n_hop", 4)),
            reasoner_mode=mode,
            workers=int(t.get("workers", 1)),
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _reasoner(cfg: AppConfig, params: TraversalParams) -> Reasoner:
    if params.reasoner_mode is ReasonerMode.SIMILARITY:
        return Reasoner.similarity()
    chat = make_chat(cfg)
    if chat is None:
        raise CliError("no chat provider configured; configure one or pass --no-llm", EXIT_CONFIG)
    return Reasoner.llm(chat, cfg.template(prompts.REASONING), strict=bool(cfg.traversal.get("strict", False)))


def _load_graph(path: Path, embedder: Embedder, extractor: KeywordExtractor):
    try:
        graph = storage.load(path)
        meta = storage.load_metadata(path)
    except FileNotFoundError as exc:
        raise CliError(f"graph archive not found: {path}", EXIT_ARCHIVE) from exc
    except (storage.ArchiveError, ValueError, OSError) as exc:
        raise CliError(f"cannot load {path}: {exc}", EXIT_ARCHIVE) from exc
    if graph.dim != embedder.dim:
        raise CliError(f"archive dim {graph.dim} != configured embedder dim {embedder.dim}", EXIT_CONFIG)
    built = meta.get("providers", {})
    for key, now in (("embedding", embedder.name), ("keywords", extractor.name)):
        if key in built and built[key] != now:
            log.warning("archive was built with %s=%r but %r is configured", key, built[key], now)
    return graph


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _path(arg: str | None, cfg: AppConfig, key: str, what: str) -> Path:
    if arg is not None:
        return Path(arg)
    if key in cfg.paths:
        return cfg.paths[key]
    raise CliError(f"no {what} given (argument or paths.{key} in config)", EXIT_USAGE)


# --- commands --------------------------------------------------------------------


def cmd_build(args: argparse.Namespace, cfg: AppConfig) -> int:
    corpus_path = _path(args.corpus, cfg, "corpus", "corpus")
    out = _path(args.out, cfg, "graph", "output archive")
    try:
        corpus = indexer.load_corpus(corpus_path)
    except FileNotFoundError as exc:
        raise CliError(f"corpus not found: {corpus_path}", EXIT_INPUT) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    if not corpus:
        raise CliError(f"corpus is empty: {corpus_path}", EXIT_INPUT)
    config = _index_config(cfg, args.workers)

    if args.dry_run:
        low, high = config.planned_calls(len(corpus))
        print(f"passages: {len(corpus)}")
        print(f"planned LLM calls: {low} (up to {high} with re-prompts)")
        print(f"edge cap: {config.edge_cap(len(corpus))}")
        return EXIT_OK

    chat = make_chat(cfg)
    if chat is None:
        raise CliError("building needs a chat provider (providers.chat)", EXIT_CONFIG)
    embedder, extractor = make_embedder(cfg), make_extractor(cfg)
    try:
        graph, report = indexer.build_graph(corpus, config, chat=chat, embedder=embedder, extractor=extractor)
    except indexer.IdConflictError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    except (indexer.BuildError, ProviderError) as exc:
        raise CliError(str(exc), EXIT_PROVIDER) from exc

    meta = {"providers": _descriptor(embedder, extractor, chat), "corpus_size": len(corpus)}
    storage.save(graph, out, metadata=meta)
    doc = {"archive": out.name, "fingerprint": storage.fingerprint(graph), **report.to_dict()}
    report_path = Path(args.report) if args.report else out.with_name(out.name + ".report.json")
    _write_json(report_path, doc)
    print(f"wrote {out} ({report.vertex_count} vertices, {report.edge_count} edges)")
    print(f"fingerprint {doc['fingerprint']}")
    if report.failures:
        print(f"{len(report.failures)} indexing issue(s); see {report_path}")
    return EXIT_OK


def cmd_query(args: argparse.Namespace, cfg: AppConfig) -> int:
    embedder, extractor = make_embedder(cfg), make_extractor(cfg)
    graph = _load_graph(_path(args.graph, cfg, "graph", "graph archive"), embedder, extractor)
    params = _params(cfg, args, args.top_k, args.n_hop)
    reasoner = _reasoner(cfg, params)
    try:
        context, trace = retrieve(args.question, graph, params, reasoner, embedder=embedder, extractor=extractor)
    except ProviderError as exc:
        raise CliError(str(exc), EXIT_PROVIDER) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    if args.trace:
        _write_json(Path(args.trace), trace.to_dict())
    if args.json:
        rows = [{**item, "text": p.text} for item, p in zip(trace.context, context)]
        print(json.dumps({"query": args.question, "context": rows, "llm_calls": trace.llm_calls}, indent=2))
        return EXIT_OK
    for rank, (item, p) in enumerate(zip(trace.context, context), 1):
        print(f"{rank:>3}. [{p.id}] H={item['h']:.4f} sim={item['sim']:.4f} imp={item['imp']:.4f}")
        print(f"     {p.text}")
    print(f"({len(context)} passages, {trace.llm_calls} LLM calls)")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def cmd_eval(args: argparse.Namespace, cfg: AppConfig) -> int:
    embedder, extractor = make_embedder(cfg), make_extractor(cfg)
    dataset_path = _path(args.dataset, cfg, "dataset", "dataset")
    try:
        dataset = evalkit.load_dataset(dataset_path)
    except FileNotFoundError as exc:
        raise CliError(f"dataset not found: {dataset_path}", EXIT_INPUT) from exc
    except ValueError as exc:
        raise CliError(f"{dataset_path}: {exc}", EXIT_INPUT) from exc
    graph = _load_graph(_path(args.graph, cfg, "graph", "graph archive"), embedder, extractor)
    try:
        dataset.validate(graph)
    except evalkit.EvalInputError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc

    out_dir = Path(args.out) if args.out else cfg.paths.get("reports")
    top_ks = args.top_k or [int(cfg.traversal.get("top_k", 20))]
    n_hops = args.n_hop or [int(cfg.traversal.get("n_hop", 4))]
    generator = None
    if args.generate:
        generator = make_chat(cfg)
        if generator is None:
            raise CliError("--generate needs a chat provider", EXIT_CONFIG)
    answer_template = cfg.template(prompts.ANSWER)

    reports: list[evalkit.EvalReport] = []
    code = EXIT_OK
    try:
        for k in top_ks:
            for h in n_hops:
                params = _params(cfg, args, k, h)
                rep = evalkit.run_eval(
                    dataset,
                    graph,
                    params,
                    embedder=embedder,
                    extractor=extractor,
                    reasoner=_reasoner(cfg, params),
                    generator=generator,
                    answer_template=answer_template,
                )
                reports.append(rep)
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    (out_dir / f"report_k{k}_h{h}.json").write_text(rep.to_json(), encoding="utf-8")
    except KeyboardInterrupt:
        log.warning("interrupted; keeping %d completed report(s)", len(reports))
        code = EXIT_INTERRUPTED
    table = evalkit.format_table(reports)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return code


def cmd_stats(args: argparse.Namespace, cfg: AppConfig) -> int:
    path = _path(args.graph, cfg, "graph", "graph archive")
    try:
        graph = storage.load(path)
    except FileNotFoundError as exc:
        raise CliError(f"graph archive not found: {path}", EXIT_ARCHIVE) from exc
    except (storage.ArchiveError, ValueError, OSError) as exc:
        raise CliError(f"cannot load {path}: {exc}", EXIT_ARCHIVE) from exc
    st = storage.stats(graph).to_dict()
    if args.json:
        print(json.dumps(st, indent=2, sort_keys=True))
    else:
        width = max(map(len, st))
        for key, value in st.items():
            shown = f"{value:.4f}" if isinstance(value, float) else str(value)
            print(f"{key:<{width}}  {shown}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, cfg: AppConfig) -> int:
    from passagehop.synthetic import chain_corpus

    out = Path(args.outdir)
    paths = chain_corpus(args.chains, args.seed).write(out)
    config = {
        "providers": {
            "embedding": {"kind": "hash", "dim": 256},
            "keywords": {"kind": "rule"},
            "chat": {"kind": "scripted", "script": paths["script"].name},
        },
        "traversal": {"top_k": 4, "n_hop": 3, "reasoner_mode": "similarity"},
        "paths": {"corpus": paths["corpus"].name, "graph": "graph.psg", "dataset": paths["dataset"].name},
    }
    _write_json(out / "config.json", config)
    print(f"wrote {args.chains} chains to {out}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="passagehop", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--log-level", help="override the configured log level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="index a JSONL corpus into a graph archive")
    p.add_argument("corpus", nargs="?")
    p.add_argument("--out", help="archive path")
    p.add_argument("--report", help="index report path (default: <archive>.report.json)")
    p.add_argument("--workers", type=int)
    p.add_argument("--dry-run", action="store_true", help="print planned LLM calls and exit")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="retrieve context for one question")
    p.add_argument("graph", nargs="?")
    p.add_argument("question")
    p.add_argument("--top-k", type=int)
    p.add_argument("--n-hop", type=int)
    p.add_argument("--no-llm", action="store_true", help="choose edges by similarity instead of an LLM")
    p.add_argument("--trace", help="write the traversal trace as JSON")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="evaluate retrieval (and optionally answers) on a dataset")
    p.add_argument("graph", nargs="?")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--top-k", type=_int_list, help="comma-separated list, e.g. 2,4,20")
    p.add_argument("--n-hop", type=_int_list, help="comma-separated list, e.g. 1,2,3,4")
    p.add_argument("--no-llm", action="store_true")
    p.add_argument("--generate", action="store_true", help="also generate and score answers")
    p.add_argument("--out", help="directory for JSON reports and table.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="print graph statistics")
    p.add_argument("graph", nargs="?")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write the synthetic chain corpus, dataset and config")
    p.add_argument("outdir")
    p.add_argument("--chains", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        cfg = AppConfig.from_file(args.config or os.environ.get("PASSAGEHOP_CONFIG"))
        level = (args.log_level or cfg.log_level).upper()
        logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
        cfg.validate()
        return args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(f"error: provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
