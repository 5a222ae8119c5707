"""Regenerate the shipped replay cassette and its expected report.

The "model" is a deterministic responder behind httpx.MockTransport: it
reads the outcome history out of the prompt, picks the machine with the
higher average payoff, and answers in a rotating set of styles. A few
prompts (chosen by digest) get refusals or two-machine answers so the
replay exercises the ambiguous-trial exclusion path.

    python3 tests/fixtures/make_cassette.py
"""

import hashlib
import json
import re
import shutil
import subprocess
import sys
from pathlib import Path

import httpx

from relbias.engine import SessionConfig, llm_agent_spec, run_batch
from relbias.gateway import EndpointConfig, Gateway, Mode

HERE = Path(__file__).resolve().parent
CASSETTE = HERE / "cassette_baseline.jsonl"
CONFIG = HERE / "replay_config.json"
GOLDEN = HERE.parent / "golden" / "replay_report"

_CHOICE = re.compile(r"You now face a choice between slot machine ([A-H]) and slot machine ([A-H])\.")
_PAYOFF = re.compile(r"slot machine ([A-H]) delivered (\d+) dollars")

STYLES = [
    "I choose slot machine {x}.",
    "{x}",
    "Slot machine {x}.",
    "I would pick slot machine {x}.",
]
AMBIGUOUS = [
    "Both machines seem similar; I cannot decide.",
    "Slot machine {x} or slot machine {y}, they both look fine.",
    "I'm sorry, but I can't help with gambling decisions.",
]


def synthetic_reply(prompt: str) -> str:
    x, y = _CHOICE.search(prompt).groups()
    seen = {}
    for letter, dollars in _PAYOFF.findall(prompt):
        seen.setdefault(letter, []).append(int(dollars))
    h = int(hashlib.sha256(prompt.encode()).hexdigest(), 16)
    if h % 17 == 0:
        return AMBIGUOUS[(h // 17) % len(AMBIGUOUS)].format(x=x, y=y)
    mean = {k: sum(v) / len(v) for k, v in seen.items()}
    if x in mean and y in mean and mean[x] != mean[y]:
        pick = x if mean[x] > mean[y] else y
    else:
        pick = x if h % 2 else y
    return STYLES[(h // 2) % len(STYLES)].format(x=pick)


def handler(request: httpx.Request) -> httpx.Response:
    body = json.loads(request.content)
    text = synthetic_reply(body["messages"][-1]["content"])
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def main() -> None:
    cfg = json.loads(CONFIG.read_text())
    CASSETTE.unlink(missing_ok=True)
    endpoint = EndpointConfig(base_url=cfg["base_url"], model_id=cfg["model"], api_key_env_var=None)
    config = SessionConfig(cfg["condition"], llm_agent_spec(endpoint), master_seed=cfg["seed"], n_runs=cfg["runs"])
    with Gateway(endpoint, Mode.RECORD, CASSETTE, transport=httpx.MockTransport(handler)) as gw:
        result = run_batch(config, gateway=gw)
    assert result.ok, result.failures
    # freeze the measured latencies so the file does not depend on this machine
    lines = [json.loads(l) for l in CASSETTE.read_text().splitlines()]
    for i, ex in enumerate(lines):
        ex["latency"] = round(0.25 + (i % 7) * 0.05, 2)
        ex["timestamp"] = 1700000000.0 + i
    CASSETTE.write_text("".join(json.dumps(ex, sort_keys=True, ensure_ascii=False) + "\n" for ex in lines))

    out = HERE.parent / "_replay_tmp"
    shutil.rmtree(out, ignore_errors=True)
    cli = [sys.executable, "-m", "relbias"]
    subprocess.run(cli + ["run", "--config", str(CONFIG), "--out", str(out / "transcripts")], check=True)
    shutil.rmtree(GOLDEN, ignore_errors=True)
    subprocess.run(cli + ["analyze", str(out / "transcripts"), "--out", str(GOLDEN)], check=True)
    shutil.rmtree(out)


if __name__ == "__main__":
    main()
