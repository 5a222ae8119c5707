import json

import httpx
import numpy as np
import pytest

from relbias.engine import (
    N_LEARNING,
    N_TRANSFER,
    AgentReply,
    Phase,
    PolicyAgent,
    SessionAborted,
    SessionConfig,
    TranscriptError,
    llm_agent_spec,
    load_transcripts,
    plan_session,
    policy_agent_spec,
    read_transcript,
    run_batch,
    run_session,
    transcript_path,
    write_transcript,
)
from relbias.agents import ValuationPolicy
from relbias.gateway import EndpointConfig, Gateway, GatewayError, GatewayTimeout, Mode
from relbias.prompts import HISTORY_HEADER, Condition


def policy_config(kind="absolute", sd=1.0, **kw):
    return SessionConfig(kw.pop("condition", "baseline"), policy_agent_spec(kind), payoff_sd=sd, **kw)


def history_block(prompt: str) -> str:
    if HISTORY_HEADER not in prompt:
        return ""
    return prompt.split(HISTORY_HEADER + "\n\n", 1)[1].rsplit("\n\nYou now face", 1)[0]


def test_noise_free_absolute_picks_higher_mean():
    t = run_session(policy_config("absolute", sd=0.0, master_seed=3))
    assert len(t.learning) == N_LEARNING and len(t.transfer) == N_TRANSFER
    for rec in t.transfer:
        assert rec.chosen_option == max(rec.options)


def test_relative_prefers_h18_over_l33():
    for seed in range(5):
        t = run_session(policy_config("relative", master_seed=seed))
        rec = next(r for r in t.transfer if set(r.options) == {1, 6})
        assert rec.chosen_option == 1


def test_records_shape():
    t = run_session(policy_config("relative", master_seed=1))
    for rec in t.learning:
        assert rec.phase is Phase.LEARNING and len(rec.outcomes) == 2
        assert [l for l, _ in rec.outcomes] == list(rec.letters)
    for rec in t.transfer:
        assert rec.phase is Phase.TRANSFER and rec.outcomes is None and rec.round_number is None
    for rec in t.records:
        assert rec.choice in rec.letters
    assert [r.round_number for r in t.learning] == list(range(1, 21))
    assert t.history() == plan_session(t.config).outcomes


def test_first_trial_values_undefined():
    t = run_session(policy_config("absolute", master_seed=2))
    assert t.learning[0].undefined_values
    assert not t.transfer[0].undefined_values


@pytest.mark.parametrize("condition", ["baseline", "regret", "feelings", "expected_outcomes"])
def test_history_grows_by_prefix_extension(condition):
    t = run_session(policy_config("relative", master_seed=4, condition=condition))
    blocks = [history_block(r.prompt) for r in t.learning]
    assert blocks[0] == ""
    for prev, cur in zip(blocks, blocks[1:]):
        assert cur.startswith(prev) and len(cur.split("\n")) == len(prev.split("\n")) + (prev != "")
    final = {history_block(r.prompt) for r in t.transfer}
    assert len(final) == 1
    assert len(final.pop().split("\n")) == 20


def test_broken_contexts_history_adds_line_pairs():
    t = run_session(policy_config("relative", master_seed=4, condition="broken_contexts"))
    blocks = [history_block(r.prompt) for r in t.learning] + [history_block(t.transfer[0].prompt)]
    sizes = [len(b.split("\n")) if b else 0 for b in blocks]
    assert sizes == [2 * k for k in range(21)]
    assert all("Round" not in b for b in blocks)


def test_outcomes_do_not_depend_on_agent():
    a = run_session(policy_config("absolute", master_seed=9, run_index=4))
    b = run_session(policy_config("random", master_seed=9, run_index=4))
    assert [r.outcomes for r in a.learning] == [r.outcomes for r in b.learning]
    assert a.instance == b.instance
    assert [r.options for r in a.records] == [r.options for r in b.records]


def test_round_trip(tmp_path):
    t = run_session(policy_config("relative", master_seed=5, condition="feelings"))
    p = write_transcript(t, tmp_path / "t.jsonl")
    assert read_transcript(p) == t


def test_incremental_file_matches_write_transcript(tmp_path):
    cfg = policy_config("relative", master_seed=5, output_dir=str(tmp_path))
    t = run_session(cfg)
    path = transcript_path(cfg)
    assert path.name == "baseline_relative_0.jsonl"
    copy = write_transcript(t, tmp_path / "copy.jsonl")
    assert path.read_bytes() == copy.read_bytes()


def test_truncated_file_names_last_valid_trial(tmp_path):
    t = run_session(policy_config(master_seed=1))
    p = write_transcript(t, tmp_path / "t.jsonl")
    lines = p.read_text().splitlines(keepends=True)
    p.write_text("".join(lines[:31]))
    with pytest.raises(TranscriptError, match="last valid trial: transfer 10"):
        read_transcript(p)
    # a torn line is reported with its line number
    p.write_text("".join(lines[:31]) + lines[31][:40])
    with pytest.raises(TranscriptError, match=r":32: corrupt record"):
        read_transcript(p)
    partial = read_transcript(p, allow_partial=True)
    assert len(partial.records) == 30


def test_unsupported_schema(tmp_path):
    t = run_session(policy_config(master_seed=1))
    p = write_transcript(t, tmp_path / "t.jsonl")
    lines = p.read_text().splitlines()
    header = json.loads(lines[0])
    header["schema_version"] = 99
    p.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(TranscriptError, match="unsupported schema version 99"):
        read_transcript(p)


def test_reads_schema_1(tmp_path, caplog):
    t = run_session(policy_config(master_seed=8))
    p = write_transcript(t, tmp_path / "t.jsonl")
    lines = [json.loads(l) for l in p.read_text().splitlines()]
    lines[0]["schema_version"] = 1
    for rec in lines[1:]:
        rec["pair"] = rec.pop("letters")
        del rec["options"]
        del rec["ratings_missing"]
    old = tmp_path / "old.jsonl"
    old.write_text("".join(json.dumps(l) + "\n" for l in lines))
    with caplog.at_level("WARNING"):
        migrated = read_transcript(old)
    assert "migrating schema 1 -> 2" in caplog.text
    assert migrated == t


class Flaky:
    """Wraps an agent and fails with a gateway error on call number ``fail_at``."""

    def __init__(self, inner, fail_at=None):
        self.inner = inner
        self.fail_at = fail_at
        self.calls = 0

    def respond(self, ctx):
        self.calls += 1
        if self.calls == self.fail_at:
            raise GatewayTimeout("simulated outage")
        return self.inner.respond(ctx)


def test_resume_completes_exactly_remaining_trials(tmp_path):
    cfg = policy_config("relative", master_seed=12, output_dir=str(tmp_path))
    policy = ValuationPolicy("relative")
    with pytest.raises(SessionAborted) as err:
        run_session(cfg, agent=Flaky(PolicyAgent(policy), fail_at=31))
    assert err.value.completed == 30
    assert len(read_transcript(transcript_path(cfg), allow_partial=True).records) == 30

    second = Flaky(PolicyAgent(policy))
    resumed = run_session(cfg, agent=second, resume=True)
    assert second.calls == 48 - 30
    reference = run_session(policy_config("relative", master_seed=12))
    assert [r.to_dict() for r in resumed.records] == [r.to_dict() for r in reference.records]
    assert read_transcript(transcript_path(cfg)) == resumed


def test_resume_rejects_other_session(tmp_path):
    cfg = policy_config("relative", master_seed=12, output_dir=str(tmp_path))
    run_session(cfg)
    other = policy_config("relative", master_seed=13, output_dir=str(tmp_path))
    transcript_path(other).write_bytes(transcript_path(cfg).read_bytes())
    with pytest.raises(TranscriptError):
        run_session(other, resume=True)


class Scripted:
    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def respond(self, ctx):
        self.calls += 1
        text = self.replies.pop(0) if self.replies else f"I choose slot machine {ctx.letters[0]}."
        return AgentReply(text)


def test_ambiguous_recorded_not_reasked_by_default():
    agent = Scripted(["Both machines seem similar; I cannot decide."])
    t = run_session(policy_config(master_seed=1), agent=agent)
    assert agent.calls == 48
    assert t.learning[0].ambiguous and t.learning[0].ambiguity == "refusal"


def test_optional_reask():
    agent = Scripted(["Both machines seem similar; I cannot decide."])
    cfg = SessionConfig("baseline", policy_agent_spec("absolute"), master_seed=1, reask_ambiguous=True)
    t = run_session(cfg, agent=agent)
    assert agent.calls == 49
    first = t.learning[0]
    assert not first.ambiguous and first.earlier_responses == ["Both machines seem similar; I cannot decide."]


def test_feelings_ratings_collected():
    t = run_session(policy_config("relative", master_seed=2, condition="feelings"))
    assert t.learning[0].ratings_missing
    for rec in t.transfer:
        assert not rec.ratings_missing
        assert set(rec.ratings) == set(rec.letters)
        assert all(1 <= v <= 7 for v in rec.ratings.values())


def test_batch_files_and_determinism(tmp_path):
    cfg = SessionConfig("baseline", policy_agent_spec("relative"), master_seed=77, n_runs=30, output_dir=str(tmp_path / "a"))
    res = run_batch(cfg)
    assert res.ok and len(res.transcripts) == 30
    files = sorted((tmp_path / "a").glob("*.jsonl"))
    assert len(files) == 30
    assert len({t.instance.letters for t in res.transcripts}) > 25
    again = run_batch(SessionConfig("baseline", policy_agent_spec("relative"), master_seed=77, n_runs=30, output_dir=str(tmp_path / "b")))
    for x, y in zip(res.transcripts, again.transcripts):
        assert x.records == y.records and x.instance == y.instance
    loaded = sorted(load_transcripts([tmp_path / "a"]), key=lambda t: t.config.run_index)
    assert loaded == res.transcripts


def test_parallel_batch_matches_serial():
    cfg = SessionConfig("regret", policy_agent_spec("hybrid", 0.4), master_seed=5, n_runs=8)
    serial = run_batch(cfg)
    parallel = run_batch(cfg, jobs=4)
    assert [t.records for t in serial.transcripts] == [t.records for t in parallel.transcripts]


def test_simulated_batch_restores_collector():
    import gc

    seen = []
    cfg = SessionConfig("baseline", policy_agent_spec("relative"), master_seed=5, n_runs=2)
    assert gc.isenabled()
    run_batch(cfg, on_done=lambda t: seen.append(gc.isenabled()))
    assert seen == [False, False] and gc.isenabled()
    gc.disable()
    try:
        run_batch(cfg)
        assert not gc.isenabled()
    finally:
        gc.enable()
    run_batch(cfg, agent_factory=lambda: PolicyAgent(ValuationPolicy("relative")), on_done=lambda t: seen.append(gc.isenabled()))
    assert seen[-2:] == [True, True]


def test_batch_continues_after_failure():
    cfg = SessionConfig("baseline", policy_agent_spec("relative"), master_seed=5, n_runs=4)
    made = []

    def factory():
        made.append(1)
        return Flaky(PolicyAgent(ValuationPolicy("relative")), fail_at=5 if len(made) == 2 else None)

    res = run_batch(cfg, agent_factory=factory)
    assert list(res.failures) == [1] and len(res.transcripts) == 3 and not res.ok


def test_random_agents_pool_to_half():
    chosen = np.zeros(8)
    shown = np.zeros(8)
    for batch in range(100):
        res = run_batch(SessionConfig("baseline", policy_agent_spec("random"), master_seed=batch, n_runs=30))
        for t in res.transcripts:
            for r in t.transfer:
                shown[list(r.options)] += 1
                chosen[r.chosen_option] += 1
    assert np.all(np.abs(chosen / shown - 0.5) < 0.02)


def test_first_presented_agent_is_half():
    class First:
        def respond(self, ctx):
            return AgentReply(f"I choose slot machine {ctx.letters[0]}.")

    chosen = np.zeros(8)
    for i in range(300):
        t = run_session(policy_config(master_seed=i), agent=First())
        for r in t.transfer:
            chosen[r.chosen_option] += 1
    assert np.all(np.abs(chosen / (300 * 7) - 0.5) < 0.04)


def test_config_validation():
    with pytest.raises(ValueError):
        SessionConfig("baseline", policy_agent_spec("relative"), n_runs=0)
    with pytest.raises(ValueError):
        SessionConfig("baseline", {"type": "oracle"})
    cfg = policy_config("relative", master_seed=3)
    assert SessionConfig.from_dict(cfg.to_dict()) == cfg


# -- sessions through the gateway ---------------------------------------------

def _llm_reply(request):
    body = json.loads(request.content)
    prompt = body["messages"][-1]["content"]
    letter = prompt.split("You now face a choice between slot machine ", 1)[1][0]
    return httpx.Response(200, json={"choices": [{"message": {"content": f"I choose slot machine {letter}."}}]})


def _llm_config(tmp_path, sub, n_runs=1):
    endpoint = EndpointConfig("http://api.test/v1", "fake-model", api_key_env_var=None)
    return endpoint, SessionConfig("baseline", llm_agent_spec(endpoint), master_seed=21, n_runs=n_runs,
                                   output_dir=str(tmp_path / sub))


def test_record_then_replay_session(tmp_path):
    endpoint, cfg = _llm_config(tmp_path, "rec")
    cassette = tmp_path / "c.jsonl"
    with Gateway(endpoint, Mode.RECORD, cassette, transport=httpx.MockTransport(_llm_reply)) as gw:
        recorded = run_session(cfg, gateway=gw)
    assert len(cassette.read_text().splitlines()) == 48

    _, rcfg = _llm_config(tmp_path, "rep")
    outputs = []
    for _ in range(2):
        gw = Gateway(endpoint, Mode.REPLAY, cassette)
        replayed = run_session(rcfg, gateway=gw)
        assert gw.network_calls == 0
        outputs.append(transcript_path(rcfg).read_bytes())
    assert outputs[0] == outputs[1]
    assert [r.to_dict() for r in replayed.records] == [r.to_dict() for r in recorded.records]


def test_gateway_failure_aborts_with_checkpoint(tmp_path):
    endpoint, cfg = _llm_config(tmp_path, "live")
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) > 12:
            return httpx.Response(503)
        return _llm_reply(request)

    gw = Gateway(endpoint, transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(SessionAborted) as err:
        run_session(cfg, gateway=gw)
    assert err.value.completed == 12
    assert isinstance(err.value.cause, GatewayError)

    healthy = Gateway(endpoint, transport=httpx.MockTransport(_llm_reply))
    done = run_session(cfg, gateway=healthy, resume=True)
    assert healthy.network_calls == 36
    assert done.complete
