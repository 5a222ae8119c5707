"""Command-line entry point: ``relbias {preview,simulate,run,analyze}``.

Options can also come from a JSON file given with ``--config``; flags given
on the command line win over the file. API keys are only read from the
environment variable named by ``--api-key-env``.

Exit codes: 0 success, 2 configuration error, 3 partial failure (some
runs failed), 4 analysis error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .engine import (
    N_LEARNING,
    N_TRANSFER,
    SessionConfig,
    TranscriptError,
    llm_agent_spec,
    plan_session,
    policy_agent_spec,
    read_transcript,
    run_batch,
    write_transcript,
)
from .gateway import EndpointConfig, Gateway, Mode
from .prompts import SYSTEM_PROMPT, Condition, render_choice_prompt, render_history

log = logging.getLogger("relbias")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_ANALYSIS = 4

DEFAULTS = {
    "condition": "baseline",
    "seed": 0,
    "run_index": 0,
    "runs": 30,
    "sd": 1.0,
    "jobs": 1,
    "trial": "learning:1",
    "format": "text",
    "mode": "live",
    "agent": "relative",
    "rule": "greedy",
    "api_key_env": "OPENAI_API_KEY",
    "timeout": 60.0,
    "max_retries": 5,
    "system_prompt": SYSTEM_PROMPT,
}


class ConfigError(Exception):
    pass


def _common(p: argparse.ArgumentParser, task: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file with option values (flags win)")
    p.add_argument("--format", choices=["text", "data"], help="text for humans, data for JSON on stdout")
    p.add_argument("-v", "--verbose", action="count", default=0)
    if task:
        p.add_argument("--condition", help="baseline, feelings, expected-outcomes, regret or broken-contexts")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--sd", type=float, help="payoff sd (0 gives noise-free outcomes)")
        p.add_argument("--system-prompt", dest="system_prompt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relbias", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preview", help="print the prompt of one trial of a seeded task")
    _common(p)
    p.add_argument("--trial", help="learning:K (1-20) or transfer:K (1-28)")
    p.add_argument("--run-index", dest="run_index", type=int)

    p = sub.add_parser("simulate", help="run simulated agents, then analyse")
    _common(p)
    p.add_argument("--agent", choices=["absolute", "relative", "hybrid", "random"])
    p.add_argument("--weight", type=float, help="hybrid weight on absolute values, 0..1")
    p.add_argument("--rule", choices=["greedy", "softmax"])
    p.add_argument("--temperature", type=float, help="softmax temperature")
    p.add_argument("--runs", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", type=Path, help="output directory (transcripts/ and report/)")
    p.add_argument("--no-transcripts", dest="no_transcripts", action="store_true", default=None)

    p = sub.add_parser("run", help="run sessions against a chat-completion endpoint")
    _common(p)
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float, help="omit to use the endpoint default")
    p.add_argument("--api-key-env", dest="api_key_env")
    p.add_argument("--no-auth", dest="no_auth", action="store_true", default=None)
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.add_argument("--rpm", type=float, help="request rate limit per minute")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--cassette", type=Path)
    p.add_argument("--runs", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", type=Path, help="transcript directory")
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--reask", action="store_true", default=None, help="re-ask once after an ambiguous reply")

    p = sub.add_parser("analyze", help="analyse transcript files or directories")
    _common(p, task=False)
    p.add_argument("paths", nargs="*", type=Path)
    p.add_argument("--out", type=Path, help="report directory")
    p.add_argument("--allow-mixed", dest="allow_mixed", action="store_true", default=None)
    p.add_argument("--fixed-denominator", dest="fixed_denominator", action="store_true", default=None,
                   help="divide choice counts by 7 even after exclusions")
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, then from DEFAULTS."""
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        base = Path(args.config).parent
        for key in ("cassette", "out"):
            if key in values and values[key] and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
    for key, value in vars(args).items():
        if value is None or value == []:
            if key in values:
                setattr(args, key, values[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    for key in ("cassette", "out"):
        if isinstance(getattr(args, key, None), str):
            setattr(args, key, Path(getattr(args, key)))
    if key_paths := getattr(args, "paths", None):
        args.paths = [Path(p) for p in key_paths]
    if hasattr(args, "condition"):
        try:
            args.condition = Condition.parse(args.condition)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return args


def _emit(args, text: str, data: dict) -> None:
    if args.format == "data":
        print(json.dumps(data, sort_keys=True, indent=2, default=float))
    else:
        print(text)


def _report_data(report: analysis.AnalysisReport) -> dict:
    c = report.contrast
    return {
        "conditions": report.conditions,
        "models": report.models,
        "runs": len(report.rates.runs),
        "choice_rates": dict(zip(report.rates.labels, [float(x) for x in report.rates.mean])),
        "contrast": None if c is None else {
            "mean": c.mean, "t": c.t, "df": c.df, "p": c.p, "d": c.d, "stars": c.stars, "degenerate": c.degenerate,
        },
        "diagnostic_pairs": {d.pair_id: {"k": d.k, "n": d.n, "proportion": d.proportion, "p": d.p, "stars": d.stars}
                             for d in report.diagnostics},
        "excluded_ambiguous": sum(e[3] + e[4] for e in report.exclusions),
    }


# ---------------------------------------------------------------------------

def cmd_preview(args) -> int:
    try:
        phase, k = args.trial.split(":")
        k = int(k)
    except ValueError:
        raise ConfigError(f"--trial must look like learning:K or transfer:K, got {args.trial!r}") from None
    limit = {"learning": N_LEARNING, "transfer": N_TRANSFER}.get(phase)
    if limit is None or not 1 <= k <= limit:
        raise ConfigError(f"bad trial {args.trial!r}: learning:1..{N_LEARNING} or transfer:1..{N_TRANSFER}")
    config = SessionConfig(args.condition, {"type": "custom", "name": "preview"}, master_seed=args.seed,
                           run_index=args.run_index, payoff_sd=args.sd, system_prompt=args.system_prompt)
    plan = plan_session(config)
    if phase == "learning":
        options = plan.learning[k - 1].options
        history = render_history(plan.outcomes[: k - 1], args.condition)
    else:
        options = plan.transfer[k - 1].options
        history = render_history(plan.outcomes, args.condition)
    letters = tuple(plan.instance.letter_of(o) for o in options)
    messages = render_choice_prompt(plan.instance, letters, args.condition, history, args.system_prompt)
    if args.format == "data":
        print(json.dumps([m.to_dict() for m in messages], indent=2, ensure_ascii=False))
    else:
        sys.stdout.write(messages[1].content + "\n")
    return EXIT_OK


def _finish_analysis(args, transcripts, report_dir) -> int:
    try:
        report = analysis.analyze(transcripts, fixed_denominator=bool(getattr(args, "fixed_denominator", False)),
                                  allow_mixed=bool(getattr(args, "allow_mixed", False)))
    except analysis.AnalysisError as exc:
        log.error("%s", exc)
        return EXIT_ANALYSIS
    if report_dir is not None:
        analysis.write_report(report, report_dir)
    _emit(args, analysis.summary_text(report), _report_data(report))
    return EXIT_OK


def cmd_simulate(args) -> int:
    weight = args.weight
    if args.agent == "hybrid" and weight is None:
        raise ConfigError("--agent hybrid needs --weight")
    try:
        agent = policy_agent_spec(args.agent, weight if args.agent == "hybrid" else None, args.rule, args.temperature)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = args.out
    keep = out is not None and not args.no_transcripts
    config = SessionConfig(args.condition, agent, master_seed=args.seed, n_runs=args.runs,
                           output_dir=str(out / "transcripts") if keep else None, payoff_sd=args.sd,
                           system_prompt=args.system_prompt)
    result = run_batch(config, jobs=args.jobs)
    code = _finish_analysis(args, result.transcripts, out / "report" if out else None)
    if result.failures:
        return EXIT_PARTIAL
    return code


def cmd_run(args) -> int:
    if not args.model or (not args.base_url and args.mode != "replay"):
        raise ConfigError("run needs --model and --base-url (base url optional in replay mode)")
    if args.mode != "live" and not args.cassette:
        raise ConfigError(f"--mode {args.mode} needs --cassette")
    if args.out is None:
        raise ConfigError("run needs --out for transcripts")
    endpoint = EndpointConfig(
        base_url=args.base_url or "",
        model_id=args.model,
        temperature=args.temperature,
        timeout=args.timeout,
        max_retries=args.max_retries,
        api_key_env_var=None if args.no_auth else args.api_key_env,
        requests_per_minute=args.rpm,
    )
    config = SessionConfig(args.condition, llm_agent_spec(endpoint), master_seed=args.seed, n_runs=args.runs,
                           output_dir=str(args.out), payoff_sd=args.sd, reask_ambiguous=bool(args.reask),
                           system_prompt=args.system_prompt)
    try:
        gateway = Gateway(endpoint, args.mode, args.cassette)
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from exc

    def progress(t):
        amb = sum(r.ambiguous for r in t.records)
        print(f"run {t.config.run_index}: {len(t.records)} trials, {amb} ambiguous", file=sys.stderr)

    with gateway:
        result = run_batch(config, gateway=gateway, jobs=args.jobs, resume=bool(args.resume), on_done=progress)
    n_amb = sum(r.ambiguous for t in result.transcripts for r in t.records)
    text = f"completed {len(result.transcripts)}/{config.n_runs} runs; {n_amb} ambiguous responses recorded"
    for i, err in sorted(result.failures.items()):
        text += f"\nrun {i} failed: {err}"
    _emit(args, text, {"completed": len(result.transcripts), "failed": result.failures, "ambiguous": n_amb})
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_analyze(args) -> int:
    if not args.paths:
        raise ConfigError("analyze needs at least one transcript file or directory")
    files = []
    for p in args.paths:
        files.extend(sorted(p.glob("*.jsonl")) if p.is_dir() else [p])
    transcripts = []
    for f in files:
        try:
            transcripts.append(read_transcript(f))
        except (TranscriptError, OSError) as exc:
            log.warning("skipping %s: %s", f, exc)
    if not transcripts:
        log.error("no readable transcripts")
        return EXIT_ANALYSIS
    return _finish_analysis(args, transcripts, args.out)


COMMANDS = {"preview": cmd_preview, "simulate": cmd_simulate, "run": cmd_run, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve(args)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"relbias: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
