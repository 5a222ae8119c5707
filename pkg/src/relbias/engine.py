"""Session orchestration: learning phase with complete feedback, then the
transfer test without feedback, persisted as line-delimited JSON.

Outcomes do not depend on the agent (both options pay out every learning
round), so the whole task realization of a run, including all 40 outcome
draws, is fixed by ``(master_seed, run_index)`` before the first prompt.
"""

from __future__ import annotations

import contextlib
import enum
import gc
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from . import agents as ag
from .gateway import EndpointConfig, Gateway, GatewayError, message_digest
from .prompts import (
    RATED_CONDITIONS,
    SYSTEM_PROMPT,
    Condition,
    parse_choice,
    parse_ratings,
    render_choice_prompt,
    render_history_lines,
)
from .task import (
    LearningTrial,
    OutcomeRecord,
    TaskInstance,
    TransferTrial,
    assign_letters,
    build_task_spec,
    make_learning_schedule,
    make_transfer_schedule,
    round_half_away,
    session_streams,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 2
SUPPORTED_SCHEMAS = (1, 2)
N_LEARNING = 20
N_TRANSFER = 28


class Phase(str, enum.Enum):
    LEARNING = "learning"
    TRANSFER = "transfer"


class TranscriptError(ValueError):
    pass


class SessionAborted(RuntimeError):
    def __init__(self, run_index: int, completed: int, path: Optional[Path], cause: Exception):
        super().__init__(f"run {run_index} aborted after {completed} trials: {cause}")
        self.run_index = run_index
        self.completed = completed
        self.path = path
        self.cause = cause


@dataclass(frozen=True)
class SessionConfig:
    condition: Condition
    agent: dict
    master_seed: int = 0
    run_index: int = 0
    n_runs: int = 30
    output_dir: Optional[str] = None
    payoff_sd: float = 1.0
    reask_ambiguous: bool = False
    system_prompt: str = SYSTEM_PROMPT

    def __post_init__(self):
        object.__setattr__(self, "condition", Condition.parse(self.condition))
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if self.agent.get("type") not in ("policy", "llm", "custom"):
            raise ValueError(f"agent spec needs type policy, llm or custom: {self.agent}")

    @property
    def model_name(self) -> str:
        a = self.agent
        if a["type"] == "llm":
            name = a["model_id"]
        elif a["type"] == "policy":
            name = ag.ValuationPolicy.from_dict(a).name
        else:
            name = a.get("name", "custom")
        return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)

    def for_run(self, run_index: int) -> "SessionConfig":
        return replace(self, run_index=run_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["condition"] = self.condition.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def same_task(self, other: "SessionConfig") -> bool:
        keys = ("condition", "agent", "master_seed", "run_index", "payoff_sd", "system_prompt")
        return all(getattr(self, k) == getattr(other, k) for k in keys)


def policy_agent_spec(kind: str, weight: Optional[float] = None, rule: str = "greedy", temperature: Optional[float] = None) -> dict:
    return {"type": "policy", **ag.ValuationPolicy(kind, weight, rule, temperature).to_dict()}


def llm_agent_spec(endpoint: EndpointConfig) -> dict:
    return {"type": "llm", **endpoint.to_dict()}


@dataclass
class SessionPlan:
    instance: TaskInstance
    learning: list[LearningTrial]
    transfer: list[TransferTrial]
    outcomes: list[OutcomeRecord]
    # one uniform per trial (learning then transfer) for agent randomness
    agent_uniforms: list[float]


def plan_session(config: SessionConfig) -> SessionPlan:
    spec = build_task_spec(sd=config.payoff_sd)
    streams = session_streams(config.master_seed, config.run_index)
    instance = assign_letters(spec, streams.letters, master_seed=config.master_seed)
    learning = make_learning_schedule(streams.schedule, spec)
    transfer = make_transfer_schedule(streams.schedule, spec)
    # one batched draw; same sequence as drawing each outcome in turn
    z = iter(streams.outcomes.standard_normal(2 * len(learning)).tolist())
    outcomes = []
    for trial in learning:
        entries = tuple(
            (instance.letter_of(o), round_half_away(spec.options[o].mean_payoff + spec.options[o].payoff_sd * next(z)))
            for o in trial.options
        )
        outcomes.append(OutcomeRecord(trial.round_number, entries))
    uniforms = streams.agent.random(N_LEARNING + N_TRANSFER).tolist()
    return SessionPlan(instance, learning, transfer, outcomes, uniforms)


# ---------------------------------------------------------------------------
# Agents

@dataclass
class TrialContext:
    messages: list
    letters: tuple
    options: tuple
    observations: ag.ObservationTable
    condition: Condition
    uniform: float
    tag: str


@dataclass
class AgentReply:
    text: str
    latency: Optional[float] = None


class PolicyAgent:
    """Simulated agent; answers in the same text format an LLM would."""

    def __init__(self, policy: ag.ValuationPolicy):
        self.policy = policy
        self._cache = (None, -1, None)

    def _values(self, obs: ag.ObservationTable) -> dict:
        # the table only grows between learning rounds
        table, n_rounds, values = self._cache
        if table is not obs or n_rounds != len(obs.contexts):
            values = ag.policy_values(self.policy, obs)
            self._cache = (obs, len(obs.contexts), values)
        return values

    def respond(self, ctx: TrialContext) -> AgentReply:
        values = self._values(ctx.observations)
        decision = ag.decide(self.policy, values, ctx.options, ctx.uniform)
        letter = ctx.letters[ctx.options.index(decision.option)]
        ratings = self._ratings(ctx, values) if ctx.condition in RATED_CONDITIONS else None
        return AgentReply(ag.response_for(letter, ratings))

    def _ratings(self, ctx: TrialContext, values: dict) -> Optional[dict]:
        if ctx.condition is Condition.EXPECTED_OUTCOMES:
            means = ctx.observations.means()
            if any(o not in means for o in ctx.options):
                return None
            return {l: round(means[o]) for l, o in zip(ctx.letters, ctx.options)}
        if self.policy.kind is ag.ValuationKind.RANDOM:
            return None
        if self.policy.kind is ag.ValuationKind.ABSOLUTE:
            values = ag._minmax(values)
        if any(values.get(o) is None for o in ctx.options):
            return None
        return {l: 1 + round(6 * values[o]) for l, o in zip(ctx.letters, ctx.options)}


class LLMAgent:
    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def respond(self, ctx: TrialContext) -> AgentReply:
        ex = self.gateway.exchange(ctx.messages, tag=ctx.tag)
        return AgentReply(ex.response_text, ex.latency)


def make_agent(spec: dict, gateway: Optional[Gateway] = None):
    if spec["type"] == "policy":
        return PolicyAgent(ag.ValuationPolicy.from_dict(spec))
    if spec["type"] == "llm":
        if gateway is None:
            raise ValueError("an LLM agent needs a gateway")
        return LLMAgent(gateway)
    raise ValueError(f"cannot build agent from spec {spec}; pass the agent object directly")


# ---------------------------------------------------------------------------
# Records

@dataclass
class TrialRecord:
    phase: Phase
    index: int
    letters: tuple
    options: tuple
    prompt_digest: str
    prompt: str
    response: str
    choice: Optional[str]
    ambiguity: Optional[str] = None
    round_number: Optional[int] = None
    outcomes: Optional[list] = None
    ratings: Optional[dict] = None
    ratings_missing: bool = False
    undefined_values: bool = False
    wall_time: Optional[float] = None
    earlier_responses: list = field(default_factory=list)

    def __post_init__(self):
        self.phase = Phase(self.phase)
        self.letters = tuple(self.letters)
        self.options = tuple(self.options)
        if self.outcomes is not None:
            self.outcomes = [tuple(e) for e in self.outcomes]

    @property
    def ambiguous(self) -> bool:
        return self.choice is None

    @property
    def chosen_option(self) -> Optional[int]:
        if self.choice is None:
            return None
        return self.options[self.letters.index(self.choice)]

    @property
    def label(self) -> str:
        return f"{self.phase.value} {self.index}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase"] = self.phase.value
        d["outcomes"] = [list(e) for e in self.outcomes] if self.outcomes is not None else None
        return d


@dataclass
class RunTranscript:
    config: SessionConfig
    instance: TaskInstance
    learning: list = field(default_factory=list)
    transfer: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def complete(self) -> bool:
        return len(self.learning) == N_LEARNING and len(self.transfer) == N_TRANSFER

    @property
    def records(self) -> list:
        return self.learning + self.transfer

    def history(self) -> list[OutcomeRecord]:
        """Outcome history rebuilt from the learning records alone."""
        return [OutcomeRecord(r.round_number, tuple(r.outcomes)) for r in self.learning]

    def header(self) -> dict:
        return {
            "record": "header",
            "schema_version": self.schema_version,
            "config": self.config.to_dict(),
            "letters": "".join(self.instance.letters),
        }


def transcript_path(config: SessionConfig) -> Path:
    if config.output_dir is None:
        raise ValueError("config has no output_dir")
    return Path(config.output_dir) / f"{config.condition.value}_{config.model_name}_{config.run_index}.jsonl"


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def write_transcript(t: RunTranscript, path: "str | Path") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps(t.header()) + "\n")
        for rec in t.records:
            fh.write(_dumps({"record": "trial", **rec.to_dict()}) + "\n")
    return path


def _migrate_v1(trial: dict, letters: str) -> dict:
    # schema 1 stored the presented letters as "pair" and had no option indices
    trial = dict(trial)
    trial["letters"] = trial.pop("pair")
    trial["options"] = [letters.index(l) for l in trial["letters"]]
    trial.setdefault("ratings_missing", False)
    return trial


def read_transcript(path: "str | Path", allow_partial: bool = False) -> RunTranscript:
    """Load a transcript; ``allow_partial`` tolerates an unfinished session
    and drops a torn final line (crash mid-write)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise TranscriptError(f"{path}: empty transcript")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TranscriptError(f"{path}:1: corrupt header: {exc}") from exc
    version = header.get("schema_version")
    if header.get("record") != "header" or version not in SUPPORTED_SCHEMAS:
        raise TranscriptError(f"{path}: unsupported schema version {version!r} (supported: {SUPPORTED_SCHEMAS})")
    if version < SCHEMA_VERSION:
        log.warning("%s: migrating schema %s -> %s", path, version, SCHEMA_VERSION)
    config = SessionConfig.from_dict(header["config"])
    spec = build_task_spec(sd=config.payoff_sd)
    instance = TaskInstance(spec, tuple(header["letters"]), config.master_seed)
    t = RunTranscript(config, instance, schema_version=SCHEMA_VERSION)

    last_valid = "none (header only)"
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            raw = json.loads(line)
            raw.pop("record")
            if version == 1:
                raw = _migrate_v1(raw, header["letters"])
            rec = TrialRecord(**raw)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if allow_partial and lineno == len(lines):
                log.warning("%s:%d: dropping torn final record", path, lineno)
                break
            raise TranscriptError(f"{path}:{lineno}: corrupt record ({exc}); last valid trial: {last_valid}") from exc
        (t.learning if rec.phase is Phase.LEARNING else t.transfer).append(rec)
        last_valid = rec.label
    if not allow_partial and not t.complete:
        raise TranscriptError(
            f"{path}: truncated transcript ({len(t.learning)} learning, {len(t.transfer)} transfer trials); "
            f"last valid trial: {last_valid}"
        )
    return t


# ---------------------------------------------------------------------------
# Running

class _Sink:
    def __init__(self, path: Optional[Path], header: Optional[dict], append: bool):
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a" if append else "w", encoding="utf-8")
            if not append:
                self._write(header)

    def _write(self, obj: dict) -> None:
        self._fh.write(_dumps(obj) + "\n")
        self._fh.flush()

    def trial(self, rec: TrialRecord) -> None:
        if self._fh is not None:
            self._write({"record": "trial", **rec.to_dict()})

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _ask(agent, ctx: TrialContext, config: SessionConfig) -> tuple[AgentReply, object, list]:
    reply = agent.respond(ctx)
    parsed = parse_choice(reply.text, ctx.letters)
    earlier = []
    if parsed.ambiguous and config.reask_ambiguous:
        earlier.append(reply.text)
        reply = agent.respond(ctx)
        parsed = parse_choice(reply.text, ctx.letters)
    return reply, parsed, earlier


def run_session(config: SessionConfig, agent=None, gateway: Optional[Gateway] = None, resume: bool = False) -> RunTranscript:
    """Play one full session (20 learning + 28 transfer trials).

    With ``config.output_dir`` set, each trial is appended to the transcript
    file as soon as it completes; ``resume=True`` picks up an interrupted
    file and asks only the remaining trials.
    """
    plan = plan_session(config)
    agent = agent if agent is not None else make_agent(config.agent, gateway)
    path = transcript_path(config) if config.output_dir else None
    transcript = RunTranscript(config, plan.instance)

    done: list = []
    if resume and path is not None and path.exists():
        previous = read_transcript(path, allow_partial=True)
        if not previous.config.same_task(config) or previous.instance.letters != plan.instance.letters:
            raise TranscriptError(f"{path}: existing transcript belongs to a different session")
        done = previous.records
        # rewrite without any torn tail, then keep appending
        write_transcript(previous, path)
    sink = _Sink(path, transcript.header() if path is not None else None, append=bool(done))

    condition = config.condition
    rated = condition.collects_ratings
    spec = plan.instance.spec
    obs = ag.ObservationTable(spec)
    history = ""

    def trial(phase: Phase, k: int, options: tuple, round_number=None, outcome: Optional[OutcomeRecord] = None):
        position = k - 1 if phase is Phase.LEARNING else N_LEARNING + k - 1
        if position < len(done):
            rec = done[position]
            if rec.phase is not phase or rec.index != k or rec.options != options:
                raise TranscriptError(f"{path}: resumed record {rec.label} does not match the schedule")
            return rec
        letters = tuple(plan.instance.letter_of(o) for o in options)
        messages = render_choice_prompt(plan.instance, letters, condition, history, config.system_prompt)
        ctx = TrialContext(
            messages, letters, options, obs, condition, plan.agent_uniforms[position],
            f"run{config.run_index}/{phase.value}/{k}",
        )
        try:
            reply, parsed, earlier = _ask(agent, ctx, config)
        except GatewayError as exc:
            sink.close()
            raise SessionAborted(config.run_index, position, path, exc) from exc
        ratings = None
        if rated:
            pr = parse_ratings(reply.text, letters, condition)
            ratings = pr.values if pr is not None else None
        undefined = any(obs.outcomes.get(o) is None for o in options)
        rec = TrialRecord(
            phase=phase,
            index=k,
            letters=letters,
            options=options,
            prompt_digest=message_digest(messages),
            prompt=messages[1].content,
            response=reply.text,
            choice=parsed.letter,
            ambiguity=parsed.reason.value if parsed.reason else None,
            round_number=round_number,
            outcomes=list(outcome.entries) if outcome is not None else None,
            ratings=ratings,
            ratings_missing=rated and ratings is None,
            undefined_values=undefined,
            wall_time=reply.latency,
            earlier_responses=earlier,
        )
        sink.trial(rec)
        return rec

    try:
        for k, (lt, outcome) in enumerate(zip(plan.learning, plan.outcomes), start=1):
            transcript.learning.append(trial(Phase.LEARNING, k, lt.options, lt.round_number, outcome))
            obs.add_round(lt.context_index, {o: v for o, (_, v) in zip(lt.options, outcome.entries)})
            lines = render_history_lines(outcome, condition)
            history = "\n".join([history, *lines] if history else lines)
        for k, tt in enumerate(plan.transfer, start=1):
            transcript.transfer.append(trial(Phase.TRANSFER, k, tt.options))
    finally:
        sink.close()
    return transcript


@contextlib.contextmanager
def _gc_paused():
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


@dataclass
class BatchResult:
    transcripts: list
    failures: dict

    @property
    def ok(self) -> bool:
        return not self.failures


def run_batch(
    config: SessionConfig,
    agent_factory: Optional[Callable[[], object]] = None,
    gateway: Optional[Gateway] = None,
    jobs: int = 1,
    resume: bool = False,
    run_indices: Optional[list] = None,
    on_done: Optional[Callable[[RunTranscript], None]] = None,
) -> BatchResult:
    """Run ``config.n_runs`` sessions with run indices 0..n-1.

    A failing session is recorded in ``failures`` and the rest continue.
    """
    indices = list(range(config.n_runs)) if run_indices is None else list(run_indices)

    def one(i: int):
        agent = agent_factory() if agent_factory else None
        t = run_session(config.for_run(i), agent=agent, gateway=gateway, resume=resume)
        if on_done:
            on_done(t)
        return t

    transcripts, failures = {}, {}

    def collect(i, fn):
        try:
            transcripts[i] = fn()
        except (SessionAborted, GatewayError, TranscriptError) as exc:
            log.error("run %d failed: %s", i, exc)
            failures[i] = str(exc)

    # simulated sessions build only acyclic records, so refcounting frees
    # them; without the pause the cyclic collector keeps rescanning every
    # finished transcript. Live and custom-agent batches keep it on.
    simulated = gateway is None and agent_factory is None
    with _gc_paused() if simulated else contextlib.nullcontext():
        if jobs <= 1:
            for i in indices:
                collect(i, lambda i=i: one(i))
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {i: pool.submit(one, i) for i in indices}
                for i in indices:
                    collect(i, futures[i].result)
    return BatchResult([transcripts[i] for i in sorted(transcripts)], failures)


def load_transcripts(paths) -> list[RunTranscript]:
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.jsonl")) if p.is_dir() else [p]
        out.extend(read_transcript(f) for f in files)
    return out
