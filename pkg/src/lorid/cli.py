"""Command line front end.

Subcommands cover the whole pipeline: augment (teacher knowledge), emit (SFT
datasets), run (interaction loop or self-consistency over a corpus), score,
report, and probe. Exit codes: 0 success, 2 usage or input error, 3 run
completed with failures, 4 backend unreachable.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import augment as augment_mod
from . import evalharness
from .backend import HealthState, HttpBackend, ScriptTable, ScriptedBackend
from .core import (
    AdapterRole,
    FallbackPolicy,
    InteractionConfig,
    corpus_digest,
    group_variants,
    validate_corpus,
)
from .errors import BackendUnavailable, LoridError, RunAborted
from .interaction import (
    RunMode,
    batch_run,
    build_manifest,
    read_transcripts,
    write_transcripts,
)

__all__ = ["dispatch", "main"]


class UsageError(LoridError):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _parse_adapters(text: str | None) -> dict[AdapterRole, str]:
    if not text:
        return {}
    adapters: dict[AdapterRole, str] = {}
    for chunk in text.split(","):
        if "=" not in chunk:
            raise UsageError(f"bad adapter assignment {chunk!r}, expected role=name")
        role_text, name = chunk.split("=", 1)
        try:
            role = AdapterRole(role_text.strip().lower())
        except ValueError as exc:
            raise UsageError(f"unknown adapter role {role_text!r}") from exc
        if not name.strip():
            raise UsageError(f"empty model name for role {role_text!r}")
        adapters[role] = name.strip()
    return adapters


def _make_backend(spec: str, adapters: dict[AdapterRole, str], seed: int, concurrency: int):
    if spec.startswith("scripted:"):
        path = spec[len("scripted:"):]
        return ScriptedBackend(ScriptTable.from_jsonl(path), run_seed=seed, source=path)
    if spec.startswith(("http://", "https://")):
        url = spec
    elif spec.startswith("http:"):
        url = spec[len("http:"):]
    else:
        raise UsageError(f"backend spec must be scripted:PATH or http:URL, got {spec!r}")
    return HttpBackend(url, adapters, max_in_flight=concurrency)


def _require_adapters(backend, adapters: dict[AdapterRole, str], roles) -> None:
    if isinstance(backend, HttpBackend):
        missing = [r.value for r in roles if r not in adapters]
        if missing:
            raise UsageError(f"http backend needs --adapters entries for: {', '.join(missing)}")


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# subcommand handlers


def _cmd_run(args) -> int:
    problems = evalharness.load_corpus(args.corpus)
    config = InteractionConfig(
        threshold=args.threshold,
        top_p=args.top_p,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        run_seed=args.seed,
        fallback=FallbackPolicy(args.fallback),
        concurrency_limit=args.concurrency,
    )
    if args.mode == "lorid":
        mode = RunMode("lorid")
    else:
        mode = RunMode("sc-cot", k=args.k, system=args.system)
    adapters = _parse_adapters(args.adapters)
    backend = _make_backend(args.backend, adapters, args.seed, args.concurrency)
    from .interaction import roles_for

    _require_adapters(backend, adapters, roles_for(mode))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # The manifest lands before any result so interrupted runs are detectable.
    _write_json(
        out / "manifest.json",
        build_manifest(problems, config, backend, mode, started=_utc_now(), status="running"),
    )
    artifacts = batch_run(problems, config, backend, mode)
    write_transcripts(out / "transcripts.jsonl", artifacts.transcripts)
    if artifacts.failures:
        with open(out / "failures.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for problem_id, error in artifacts.failures:
                fh.write(json.dumps({"problem_id": problem_id, "error": error}, ensure_ascii=False))
                fh.write("\n")
    _write_json(out / "manifest.json", artifacts.manifest)
    print(
        f"run {artifacts.manifest['run_id']}: {len(artifacts.transcripts)} transcript(s), "
        f"{len(artifacts.failures)} failure(s), status {artifacts.status}"
    )
    return 3 if artifacts.failures else 0


def _cmd_augment(args) -> int:
    problems = evalharness.load_corpus(args.corpus)
    report = validate_corpus(problems)
    if not report.accepted:
        raise UsageError(
            f"corpus rejected: duplicates {list(report.duplicate_ids)[:5]}, "
            f"dangling origins {list(report.dangling_origins)[:5]}"
        )
    originals = [group[0] for group in group_variants(problems).values()]
    adapters = _parse_adapters(args.adapters)
    backend = _make_backend(args.backend, adapters, args.seed, args.concurrency)
    _require_adapters(backend, adapters, (AdapterRole.TEACHER,))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _utc_now()
    manifest = {
        "v": 1,
        "command": "augment",
        "prompt_version": augment_mod.KNOWLEDGE_PROMPT_VERSION,
        "instruction": augment_mod.KNOWLEDGE_INSTRUCTION,
        "corpus_digest": corpus_digest(problems),
        "backend": backend.describe(),
        "teacher": {"temperature": args.temperature, "top_p": args.top_p, "max_tokens": args.max_tokens},
        "seed": args.seed,
        "n_origins": len(originals),
        "status": "running",
        "started": started,
        "finished": None,
    }
    _write_json(out / "manifest.json", manifest)
    knowledge_path = out / "knowledge.jsonl"
    ks = augment_mod.generate_knowledge(
        originals,
        backend,
        checkpoint_path=knowledge_path,
        temperature=args.temperature,
        top_p=args.top_p,
        max_tokens=args.max_tokens,
        run_seed=args.seed,
        concurrency=args.concurrency,
    )
    # Rewrite in canonical order; the append-mode checkpoint order depends on
    # completion timing, the final artifact must not.
    augment_mod.save_knowledge(knowledge_path, ks)
    complete = len(ks) == len(originals)
    manifest.update(
        status="complete" if complete else "partial",
        finished=_utc_now(),
        n_generated=len(ks),
    )
    _write_json(out / "manifest.json", manifest)
    print(f"knowledge for {len(ks)}/{len(originals)} origin(s) -> {knowledge_path}")
    return 0 if complete else 3


def _cmd_emit(args) -> int:
    base = evalharness.load_corpus(args.corpus)
    problems = list(base)
    for variant_path in args.variants or []:
        problems.extend(augment_mod.load_variants(variant_path, base))
    report = validate_corpus(problems)
    if not report.accepted:
        raise UsageError(
            f"corpus rejected: duplicates {list(report.duplicate_ids)[:5]}, "
            f"dangling origins {list(report.dangling_origins)[:5]}"
        )
    ks = augment_mod.load_knowledge(args.knowledge)
    pairs = augment_mod.share_knowledge(problems, ks)
    paths = augment_mod.emit_sft_datasets(pairs, args.out)
    for role, path in paths.items():
        print(f"{role.value}: {len(pairs)} record(s) -> {path}")
    return 0


def _cmd_score(args) -> int:
    problems = evalharness.load_corpus(args.corpus)
    run_dir = Path(args.run)
    transcripts = read_transcripts(run_dir / "transcripts.jsonl")
    run_manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    metrics = evalharness.score_run(transcripts, problems)
    sources = {p.source.value for p in problems}
    dataset = sources.pop() if len(sources) == 1 else "mixed"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "v": 1,
        "run_id": run_manifest["run_id"],
        "mode": RunMode.from_json(run_manifest["mode"]).label(),
        "dataset": dataset,
        "metrics": metrics.to_json(),
    }
    _write_json(out / "metrics.json", payload)
    print(
        f"scored {metrics.n} problem(s): accuracy {metrics.accuracy:.4f}, "
        f"mean iterations {metrics.mean_iterations:.2f}"
    )
    return 0


def _cmd_report(args) -> int:
    rows = []
    for metrics_path in args.metrics:
        obj = json.loads(Path(metrics_path).read_text(encoding="utf-8"))
        rows.append(
            evalharness.ReportRow(
                run_id=obj["run_id"],
                mode=obj["mode"],
                dataset=obj["dataset"],
                metrics=evalharness.RunMetrics.from_json(obj["metrics"]),
            )
        )
    csv_path, md_path = evalharness.render_report(rows, args.out)
    print(f"wrote {csv_path} and {md_path}")
    return 0


def _cmd_probe(args) -> int:
    adapters = _parse_adapters(args.adapters)
    backend = _make_backend(args.backend, adapters, seed=0, concurrency=1)
    required = tuple(adapters) or (AdapterRole.IR, AdapterRole.KG, AdapterRole.DR)
    status = backend.probe(required)
    print(f"backend: {status.state.value}")
    if status.missing_roles:
        print(f"missing roles: {', '.join(status.missing_roles)}")
    if status.detail:
        print(status.detail)
    return 0 if status.state is HealthState.READY else 4


# --------------------------------------------------------------------------
# parser


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", required=True, help="scripted:PATH or http:URL")
    parser.add_argument(
        "--adapters",
        default="",
        help="comma list of role=model (roles: ir, kg, dr, teacher); needed for http backends",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--concurrency", type=int, default=4)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lorid")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a corpus through the interaction loop or a baseline")
    run.add_argument("--corpus", required=True)
    _add_backend_flags(run)
    run.add_argument("--mode", choices=("lorid", "sc-cot"), default="lorid")
    run.add_argument("--k", type=int, default=1, help="samples per problem in sc-cot mode")
    run.add_argument("--system", type=int, choices=(1, 2), default=1, help="sc-cot lane")
    run.add_argument("--threshold", type=int, default=20)
    run.add_argument("--top-p", type=float, default=0.90, dest="top_p")
    run.add_argument("--temperature", type=float, default=1.50)
    run.add_argument("--max-tokens", type=int, default=1024, dest="max_tokens")
    run.add_argument(
        "--fallback",
        choices=tuple(p.value for p in FallbackPolicy),
        default=FallbackPolicy.MAJORITY_UNION.value,
    )
    run.add_argument("--out", required=True)
    run.set_defaults(handler=_cmd_run)

    aug = sub.add_parser("augment", help="generate shared knowledge with the teacher model")
    aug.add_argument("--corpus", required=True)
    _add_backend_flags(aug)
    aug.add_argument("--temperature", type=float, default=augment_mod.TEACHER_TEMPERATURE)
    aug.add_argument("--top-p", type=float, default=augment_mod.TEACHER_TOP_P, dest="top_p")
    aug.add_argument("--max-tokens", type=int, default=1024, dest="max_tokens")
    aug.add_argument("--out", required=True)
    aug.set_defaults(handler=_cmd_augment)

    emit = sub.add_parser("emit", help="emit the three aligned SFT datasets")
    emit.add_argument("--corpus", required=True)
    emit.add_argument("--variants", action="append", default=[])
    emit.add_argument("--knowledge", required=True, help="knowledge.jsonl from augment")
    emit.add_argument("--out", required=True)
    emit.set_defaults(handler=_cmd_emit)

    score = sub.add_parser("score", help="score a finished run against its corpus")
    score.add_argument("--corpus", required=True)
    score.add_argument("--run", required=True, help="output directory of a run")
    score.add_argument("--out", required=True)
    score.set_defaults(handler=_cmd_score)

    report = sub.add_parser("report", help="render CSV and markdown comparisons")
    report.add_argument("--metrics", action="append", required=True, help="metrics.json (repeatable)")
    report.add_argument("--out", required=True)
    report.set_defaults(handler=_cmd_report)

    probe = sub.add_parser("probe", help="health-check a backend")
    _add_backend_flags(probe)
    probe.set_defaults(handler=_cmd_probe)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except BackendUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (LoridError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
