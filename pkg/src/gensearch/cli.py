"""``gensearch run|score|grpo|data``.

Exit codes: 0 success, 1 audit/criteria failure, 2 usage or schema error,
3 backend unavailable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import __version__
from .clients import HttpChatClient, ScriptedPolicy
from .config import CliConfig, ConfigError, load_config
from .datapipe import (
    DataError,
    SplitSpec,
    audit_manifests,
    filter_records,
    manifest_header,
    read_manifest,
    split_dataset,
    write_manifest,
)
from .episode import config_dict, run_rollouts
from .grpo import GroupRollout, GrpoError, evaluate_group, finite_difference_check
from .scoring import (
    BenchmarkSample,
    JudgeError,
    MockJudge,
    ScoringError,
    aggregate_benchmark,
    judge_manifest,
    load_template,
    parse_kscore_judgment,
)
from .toolkit import HttpToolBackend, MockToolBackend

log = logging.getLogger("gensearch")

EXIT_OK, EXIT_CRITERIA, EXIT_USAGE, EXIT_BACKEND = 0, 1, 2, 3
GRAD_CHECK_TOLERANCE = 1e-5


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    try:
        f = open(path, encoding="utf-8")
    except OSError as exc:
        raise CliFailure(EXIT_USAGE, f"cannot read {path}: {exc}") from None
    with f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except ValueError as exc:
                raise CliFailure(EXIT_USAGE, f"{path}: row {lineno}: invalid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise CliFailure(EXIT_USAGE, f"{path}: row {lineno}: expected a JSON object")
            yield lineno, doc


def _write_jsonl(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def _config(args: argparse.Namespace, overrides: dict[str, dict[str, Any]] | None = None) -> CliConfig:
    try:
        return load_config(args.config, overrides=overrides, output_dir=getattr(args, "out_dir", None))
    except ConfigError as exc:
        raise CliFailure(EXIT_USAGE, f"config error: {exc}") from None


# -- run ----------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    overrides = {
        "episode": {
            "max_tool_calls": args.max_tool_calls,
            "max_turns": args.max_turns,
            "max_context_tokens": args.max_context_tokens or (64000 if args.eval else None),
        }
    }
    cfg = _config(args, overrides)
    b = cfg.backends

    if args.mock_fixtures:
        try:
            tools = MockToolBackend.from_dir(args.mock_fixtures)
            policy = ScriptedPolicy.from_dir(args.mock_fixtures)
        except (OSError, ValueError, KeyError) as exc:
            raise CliFailure(EXIT_USAGE, f"bad mock fixtures: {exc}") from None
    else:
        missing = [n for n in ("policy_url", "search_url", "image_url", "browse_url") if not getattr(b, n)]
        if missing:
            raise CliFailure(EXIT_BACKEND, f"backend unavailable: no {', '.join(missing)} and no --mock-fixtures")
        tools = HttpToolBackend(b.search_url, b.image_url, b.browse_url, api_key=b.api_key, timeout=b.timeout)
        policy = HttpChatClient(b.policy_url, model=b.policy_model, api_key=b.api_key, timeout=b.timeout)

    rows = []
    for lineno, doc in _read_jsonl(args.prompts):
        if not isinstance(doc.get("prompt"), str):
            raise CliFailure(EXIT_USAGE, f"{args.prompts}: row {lineno}: missing string 'prompt'")
        rows.append((str(doc.get("id", lineno)), doc["prompt"]))

    groups = run_rollouts(
        [p for _, p in rows],
        policy,
        tools,
        cfg.episode,
        group_size=args.group_size,
        parallel=args.parallel,
    )
    trajectories, requests = [], []
    for (pid, _), group in zip(rows, groups):
        for k, traj in enumerate(group):
            trajectories.append({"prompt_id": pid, "rollout": k, **traj.to_dict()})
            requests.append({"version": 1, "prompt_id": pid, "rollout": k, **traj.request.to_dict()})

    out = Path(cfg.output_dir)
    _write_jsonl(out / "trajectories.jsonl", trajectories)
    _write_jsonl(out / "requests.jsonl", requests)
    outcomes: dict[str, int] = {}
    for t in trajectories:
        outcomes[t["outcome"]] = outcomes.get(t["outcome"], 0) + 1
    summary = {"version": 1, "episodes": len(trajectories), "outcomes": dict(sorted(outcomes.items())),
               "episode_config": config_dict(cfg.episode)}
    print(json.dumps(summary))
    return EXIT_OK


# -- score --------------------------------------------------------------------


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _config(args)
    judged: list[tuple[int, BenchmarkSample | None, dict[str, Any]]] = []
    for lineno, doc in _read_jsonl(args.input):
        for key in ("id", "category"):
            if key not in doc:
                raise CliFailure(EXIT_USAGE, f"row {lineno}: MissingKey: {key}")
        if "judgment" in doc:
            try:
                sample = BenchmarkSample(str(doc["id"]), doc["category"], parse_kscore_judgment(doc["judgment"]))
                sample.subset
            except (ScoringError, DataError) as exc:
                raise CliFailure(EXIT_USAGE, f"row {lineno}: {exc}") from None
            judged.append((lineno, sample, doc))
        else:
            for key in ("prompt", "gen_image", "gt_image"):
                if key not in doc:
                    raise CliFailure(EXIT_USAGE, f"row {lineno}: MissingKey: {key} (no judgment to score from)")
            judged.append((lineno, None, doc))

    pending = [doc for _, s, doc in judged if s is None]
    if pending:
        if args.judge_fixtures:
            try:
                judge = MockJudge.from_dir(args.judge_fixtures)
            except (OSError, ValueError, KeyError) as exc:
                raise CliFailure(EXIT_USAGE, f"bad judge fixtures: {exc}") from None
        elif cfg.backends.judge_url:
            b = cfg.backends
            judge = HttpChatClient(b.judge_url, model=b.judge_model, api_key=b.api_key, timeout=b.timeout)
        else:
            raise CliFailure(EXIT_BACKEND, "rows need judging but no judge URL and no --judge-fixtures")
        template = load_template("kscore_judge.txt", cfg.judge.kscore_template)
        try:
            fresh = iter(judge_manifest(judge, pending, cfg.judge.parallel, cfg.judge.retries, template))
        except JudgeError as exc:
            raise CliFailure(EXIT_BACKEND, f"judge failed: {exc}") from None
        except DataError as exc:
            raise CliFailure(EXIT_USAGE, str(exc)) from None
        judged = [(n, s if s is not None else next(fresh), d) for n, s, d in judged]

    samples = [s for _, s, _ in judged]
    try:
        for lineno, s, _ in judged:
            try:
                s.subset
            except DataError as exc:
                raise CliFailure(EXIT_USAGE, f"row {lineno}: {exc}") from None
        report = aggregate_benchmark(samples, cfg.reward, per_sample=args.per_sample)
    except ScoringError as exc:
        raise CliFailure(EXIT_USAGE, str(exc)) from None

    doc = report.to_dict()
    if pending:
        doc["judgments"] = [{"id": s.id, **s.judgment.to_dict()} for s in samples]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    if args.json:
        print(json.dumps(doc, ensure_ascii=False))
    else:
        print(report.table())
        if args.per_sample:
            for row in report.per_sample:
                print(f"{row['id']:<24}{row['subset']:<20}{row['kscore']:>10.2f}")
    return EXIT_OK


# -- grpo ---------------------------------------------------------------------


def cmd_grpo(args: argparse.Namespace) -> int:
    cfg = _config(args, {"grpo": {"epsilon": args.epsilon, "beta_kl": args.beta_kl}})
    worst_overall = 0.0
    lines = []
    for lineno, doc in _read_jsonl(args.input):
        try:
            group = GroupRollout.from_dict(doc)
            result = evaluate_group(group, cfg.grpo)
        except GrpoError as exc:
            raise CliFailure(EXIT_USAGE, f"row {lineno}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise CliFailure(EXIT_USAGE, f"row {lineno}: malformed rollout: {exc!r}") from None
        out: dict[str, Any] = {
            "version": 1,
            "group_id": group.group_id,
            "J": result.objective,
            "advantages": result.advantages.tolist(),
        }
        if args.grads:
            out["grads"] = [g.tolist() for g in result.grads]
        if args.grad_check:
            worst = finite_difference_check(group, np.asarray(result.advantages), cfg.grpo)
            out["grad_check_max_rel_error"] = worst
            worst_overall = max(worst_overall, worst)
        lines.append(json.dumps(out))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if args.grad_check and worst_overall >= GRAD_CHECK_TOLERANCE:
        print(f"gradient check failed: max relative error {worst_overall:.3e}", file=sys.stderr)
        return EXIT_CRITERIA
    return EXIT_OK


# -- data ---------------------------------------------------------------------


def _load_manifest(path: str):
    try:
        return read_manifest(path)
    except OSError as exc:
        raise CliFailure(EXIT_USAGE, f"cannot read {path}: {exc}") from None
    except DataError as exc:
        raise CliFailure(EXIT_USAGE, str(exc)) from None


def cmd_data(args: argparse.Namespace) -> int:
    if args.data_cmd == "filter":
        cfg = _config(args, {"filter": {"max_prompt_tokens": args.max_prompt_tokens}})
        header, records = _load_manifest(args.input)
        result = filter_records(records, cfg.filter)
        rules = {
            "max_prompt_tokens": cfg.filter.max_prompt_tokens,
            "min_scores": cfg.filter.min_scores,
            "require_search_consistency": cfg.filter.require_search_consistency,
        }
        write_manifest(args.out, manifest_header("filtered", rules=rules), result.kept)
        if args.dropped:
            _write_jsonl(Path(args.dropped), [{"id": r.id, "reason": why} for r, why in result.dropped])
        print(json.dumps({"version": 1, "kept": len(result.kept), "dropped": len(result.dropped)}))
        return EXIT_OK

    if args.data_cmd == "split":
        header, records = _load_manifest(args.input)
        try:
            spec = SplitSpec(args.bench, args.sft, args.rl, args.seed)
            splits = split_dataset(records, spec)
        except (DataError, ValueError) as exc:
            raise CliFailure(EXIT_USAGE, str(exc)) from None
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        spec_doc = {"bench_size": spec.bench_size, "sft_size": spec.sft_size, "rl_size": spec.rl_size}
        for name in ("bench", "sft", "rl"):
            write_manifest(
                out / f"{name}.jsonl",
                manifest_header(name, rules=header.get("rules"), spec=spec_doc, seed=spec.seed),
                getattr(splits, name),
            )
        print(json.dumps({"version": 1, **{n: len(getattr(splits, n)) for n in ("bench", "sft", "rl")}}))
        return EXIT_OK

    # audit
    manifests = [_load_manifest(p)[1] for p in (args.bench, args.sft, args.rl)]
    report = audit_manifests(*manifests)
    print(json.dumps(report.to_dict()))
    return EXIT_OK if report.passed else EXIT_CRITERIA


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gensearch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gensearch {__version__}")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run agent episodes over a prompt manifest")
    run.add_argument("--prompts", required=True, help="JSONL of {id, prompt}")
    run.add_argument("--mock-fixtures", help="fixture directory (tools/*.json, policy.json)")
    run.add_argument("--group-size", type=int, default=1)
    run.add_argument("--parallel", type=int)
    run.add_argument("--out-dir")
    run.add_argument("--eval", action="store_true", help="evaluation context budget (64000 tokens)")
    run.add_argument("--max-tool-calls", type=int)
    run.add_argument("--max-turns", type=int)
    run.add_argument("--max-context-tokens", type=int)
    run.set_defaults(func=cmd_run)

    score = sub.add_parser("score", help="aggregate K-Score judgments into a benchmark report")
    score.add_argument("input", help="JSONL of judged samples or benchmark manifest rows")
    score.add_argument("--judge-fixtures", help="fixture directory with judge/kscore.json")
    score.add_argument("--per-sample", action="store_true")
    score.add_argument("--out", help="write the JSON report here")
    score.add_argument("--json", action="store_true", help="print JSON instead of the table")
    score.set_defaults(func=cmd_score)

    grpo = sub.add_parser("grpo", help="advantages and objective for rollout groups")
    grpo.add_argument("input", help="JSONL of rollout groups")
    grpo.add_argument("--grads", action="store_true", help="include per-token gradients")
    grpo.add_argument("--grad-check", action="store_true", help="compare against central differences")
    grpo.add_argument("--epsilon", type=float)
    grpo.add_argument("--beta-kl", type=float)
    grpo.add_argument("--out")
    grpo.set_defaults(func=cmd_grpo)

    data = sub.add_parser("data", help="filter, split and audit dataset manifests")
    dsub = data.add_subparsers(dest="data_cmd", required=True)
    f = dsub.add_parser("filter")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--dropped", help="write dropped ids and reasons here")
    f.add_argument("--max-prompt-tokens", type=int)
    s = dsub.add_parser("split")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--bench", type=int, default=630)
    s.add_argument("--sft", type=int, default=10000)
    s.add_argument("--rl", type=int, default=6000)
    s.add_argument("--seed", type=int, default=0)
    a = dsub.add_parser("audit")
    a.add_argument("--bench", required=True)
    a.add_argument("--sft", required=True)
    a.add_argument("--rl", required=True)
    data.set_defaults(func=cmd_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliFailure as exc:
        print(f"gensearch: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
