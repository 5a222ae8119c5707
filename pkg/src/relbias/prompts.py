"""Prompt rendering for every condition, and parsing of agent replies.

The Feelings and Expected Outcomes closing blocks are reconstructions:
only fragments of their wording are published, so the full sentences here
are this package's own and are frozen by golden files under tests/golden.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .task import OutcomeRecord, TaskInstance

SYSTEM_PROMPT = "You are a helpful assistant"
HUMAN_SYSTEM_PROMPT = "Pretend that you are a human"

PREAMBLE = (
    "You are playing a game with the goal of winning as much money as possible over the course of "
    "several rounds. In each round, you will be asked which of two slot machines you wish to play. "
    "Some slot machines win more money than others on average. Your total payoff will be the "
    "cumulative sum of the money you win across all rounds of the game. Remember that your goal is "
    "to maximize your total payoff."
)
HISTORY_HEADER = "You made the following observations in the past:"

CHOICE_INTRO = (
    "You now face a choice between slot machine {x} and slot machine {y}. Your goal is to maximize "
    "your total payoff over the course of several rounds."
)
CHOICE_QUESTION = "Which slot machine do you choose?"
NO_REASONING = "Give your answer without explaining your reasoning."

FEELINGS_INSTRUCTION = (
    "Before making your choice, think about how positive or negative you currently feel about "
    "slot machine {x} and slot machine {y}. Then rate your feelings for both slot machines using an "
    "integer from 1 to 7, where 1 = Extremely negative and 7 = Extremely positive."
)
FEELINGS_REPORT = (
    "Report your rating for slot machine {x}, your rating for slot machine {y}, and your choice, "
    "without explaining your reasoning."
)
EXPECTED_INSTRUCTION = (
    "Before making your choice, think about how much money you would expect to win from slot "
    "machine {x} and slot machine {y}. Then estimate the amount of money (in dollars) you would "
    "expect to win if you chose each slot machine."
)
EXPECTED_REPORT = (
    "Report your estimate for slot machine {x}, your estimate for slot machine {y}, and your "
    "choice, without explaining your reasoning."
)


class Condition(str, enum.Enum):
    BASELINE = "baseline"
    FEELINGS = "feelings"
    EXPECTED_OUTCOMES = "expected_outcomes"
    REGRET = "regret"
    BROKEN_CONTEXTS = "broken_contexts"

    @classmethod
    def parse(cls, name: "str | Condition") -> "Condition":
        if isinstance(name, Condition):
            return name
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown condition {name!r}; expected one of {[c.value for c in cls]}") from None

    @property
    def collects_ratings(self) -> bool:
        return self in RATED_CONDITIONS


RATED_CONDITIONS = frozenset({Condition.FEELINGS, Condition.EXPECTED_OUTCOMES})


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self):
        if not self.content:
            raise ValueError("chat message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role.value, "content": self.content}

    @classmethod
    def from_dict(cls, d: dict) -> "ChatMessage":
        return cls(Role(d["role"]), d["content"])


def render_system_prompt() -> str:
    return SYSTEM_PROMPT


def render_history_lines(record: OutcomeRecord, condition: Condition) -> list[str]:
    """History lines contributed by a single learning round."""
    (x_letter, x), (y_letter, y) = record.entries
    r = record.round_number
    if condition is Condition.BROKEN_CONTEXTS:
        return [
            f"- slot machine {x_letter} delivered {x} dollars.",
            f"- slot machine {y_letter} delivered {y} dollars.",
        ]
    if condition is Condition.REGRET:
        word = "less" if x < y else "more"
        return [
            f"- In Round {r}, slot machine {x_letter} delivered {x} dollars, which is {abs(x - y)} "
            f"dollars {word} than slot machine {y_letter} delivered ({y} dollars)."
        ]
    return [
        f"- In Round {r}, slot machine {x_letter} delivered {x} dollars and slot machine "
        f"{y_letter} delivered {y} dollars."
    ]


def render_history(records: Iterable[OutcomeRecord], condition: Condition) -> str:
    condition = Condition.parse(condition)
    lines: list[str] = []
    for rec in records:
        lines.extend(render_history_lines(rec, condition))
    return "\n".join(lines)


def render_closing(x: str, y: str, condition: Condition) -> str:
    intro = CHOICE_INTRO.format(x=x, y=y)
    if condition is Condition.FEELINGS:
        parts = [intro, FEELINGS_INSTRUCTION.format(x=x, y=y), CHOICE_QUESTION, FEELINGS_REPORT.format(x=x, y=y)]
    elif condition is Condition.EXPECTED_OUTCOMES:
        parts = [intro, EXPECTED_INSTRUCTION.format(x=x, y=y), CHOICE_QUESTION, EXPECTED_REPORT.format(x=x, y=y)]
    else:
        parts = [intro, CHOICE_QUESTION, NO_REASONING]
    return " ".join(parts)


def render_user_prompt(pair: Sequence[str], condition: Condition, history_text: str = "") -> str:
    x, y = pair
    blocks = [PREAMBLE]
    if history_text:
        blocks += [HISTORY_HEADER, history_text]
    blocks.append(render_closing(x, y, Condition.parse(condition)))
    return "\n\n".join(blocks)


def render_choice_prompt(
    instance: TaskInstance,
    pair: Sequence[str],
    condition: Condition,
    history_text: str = "",
    system_prompt: str = SYSTEM_PROMPT,
) -> list[ChatMessage]:
    if len(pair) != 2 or pair[0] == pair[1]:
        raise ValueError(f"pair must be two distinct letters, got {pair!r}")
    for letter in pair:
        if letter not in instance.letters:
            raise ValueError(f"letter {letter!r} does not belong to this task instance")
    return [
        ChatMessage(Role.SYSTEM, system_prompt),
        ChatMessage(Role.USER, render_user_prompt(pair, condition, history_text)),
    ]


# ---------------------------------------------------------------------------
# Parsing

class Ambiguity(str, enum.Enum):
    REFUSAL = "refusal"
    BOTH = "both"
    NONE = "none"


@dataclass(frozen=True)
class ParsedChoice:
    letter: Optional[str] = None
    reason: Optional[Ambiguity] = None

    @property
    def ambiguous(self) -> bool:
        return self.letter is None

    @classmethod
    def chosen(cls, letter: str) -> "ParsedChoice":
        return cls(letter=letter)

    @classmethod
    def unclear(cls, reason: Ambiguity) -> "ParsedChoice":
        return cls(reason=reason)


_MACHINE = r"(?i:slot[\s-]*machine|machine|option)\s+[\"'*]*([A-Ha-h])\b"
_BARE = r"[\"'*(]*([A-H])\b(?![-'])"
_TARGET = rf"(?:{_MACHINE}|{_BARE})"

_VERBS = (
    r"choose|chose|choosing|pick|picked|select|selected|go\s+with|going\s+with|opt\s+for|"
    r"play|prefer|choice\s+is|answer\s+is|decision\s+is|choice|answer|decision|selection"
)
_DECISIVE = re.compile(
    rf"(?i:\b(?:{_VERBS}))\b\s*[:\-=]?\s*(?i:(?:to\s+play|the)\s+)?[\"'*]*{_TARGET}"
)
_MENTION = re.compile(_MACHINE)
_SINGLE = re.compile(r"^\W*(?:(?i:slot\s*machine|machine)\s+)?([A-Ha-h])\W*$")

_REFUSAL = re.compile(
    r"(?i)\b(?:cannot|can't|can not|unable|won't|will not|refuse|impossible|not possible|"
    r"no way to|don't have enough|do not have enough|not enough information|neither|"
    r"as an ai|i'm sorry|i am sorry)\b"
)


def _offered_upper(letter: str, offered: Sequence[str]) -> Optional[str]:
    up = letter.upper()
    return up if up in offered else None


def decisive_spans(response: str, offered: Sequence[str]) -> list[tuple[int, int, str]]:
    """Spans of explicit choice statements naming an offered letter."""
    spans = []
    for m in _DECISIVE.finditer(response):
        letter = m.group(1) or m.group(2)
        up = _offered_upper(letter, offered)
        if up is not None:
            spans.append((m.start(), m.end(), up))
    return spans


def parse_choice(response: str, offered: Sequence[str]) -> ParsedChoice:
    """Identify which offered slot machine a reply chooses.

    Rule order: single-token reply; explicit choice statements ("I choose
    slot machine E", "Choice: E"); a lone "slot machine X" mention. Anything
    else is ambiguous, classified as refusal, both-mentioned or none.
    """
    offered = [o.upper() for o in offered]
    if len(offered) != 2 or offered[0] == offered[1]:
        raise ValueError(f"offered letters must be two distinct letters, got {offered!r}")
    text = response.strip()

    # canonical reply format, checked before the general parser
    if len(text) == 24 and text.startswith("I choose slot machine ") and text[-1] == "." and text[22] in offered:
        return ParsedChoice.chosen(text[22])

    m = _SINGLE.match(text)
    if m:
        up = _offered_upper(m.group(1), offered)
        if up is not None:
            return ParsedChoice.chosen(up)

    decided = {letter for _, _, letter in decisive_spans(text, offered)}
    if len(decided) == 1:
        return ParsedChoice.chosen(decided.pop())
    if len(decided) > 1:
        return ParsedChoice.unclear(Ambiguity.BOTH)

    if _REFUSAL.search(text):
        return ParsedChoice.unclear(Ambiguity.REFUSAL)
    mentioned = {u for u in (_offered_upper(m.group(1), offered) for m in _MENTION.finditer(text)) if u}
    if len(mentioned) == 1:
        return ParsedChoice.chosen(mentioned.pop())
    if len(mentioned) > 1:
        return ParsedChoice.unclear(Ambiguity.BOTH)
    return ParsedChoice.unclear(Ambiguity.NONE)


_NUMBER = re.compile(r"(?<![\w.])\$?(\d+(?:\.\d+)?)")
_LETTER_TOKEN = re.compile(rf"{_MACHINE}|\b([A-H])\b")


@dataclass(frozen=True)
class ParsedRatings:
    values: dict

    def __getitem__(self, letter: str) -> float:
        return self.values[letter]


def parse_ratings(response: str, offered: Sequence[str], condition: Condition) -> Optional[ParsedRatings]:
    """Pull one number per offered letter out of a rating reply.

    Choice statements are masked out first. If the first remaining token is
    a letter, each letter takes the first number after it; otherwise each
    letter takes the closest number before it. Returns None when either
    letter lacks a number or a feelings rating falls outside 1..7.
    """
    condition = Condition.parse(condition)
    if not condition.collects_ratings:
        raise ValueError(f"condition {condition.value} does not collect ratings")
    offered = [o.upper() for o in offered]

    masked = list(response)
    for start, end, _ in decisive_spans(response, offered):
        masked[start:end] = " " * (end - start)
    text = "".join(masked)

    tokens: list[tuple[int, str, object]] = []
    for m in _LETTER_TOKEN.finditer(text):
        letter = (m.group(1) or m.group(2)).upper()
        if letter in offered:
            tokens.append((m.start(), "L", letter))
    for m in _NUMBER.finditer(text):
        tokens.append((m.start(), "N", float(m.group(1))))
    tokens.sort(key=lambda t: t[0])
    if not tokens:
        return None

    values: dict[str, float] = {}
    letter_first = tokens[0][1] == "L"
    for i, (_, kind, letter) in enumerate(tokens):
        if kind != "L" or letter in values:
            continue
        if letter_first:
            following = tokens[i + 1:]
        else:
            following = reversed(tokens[:i])
        for _, k2, v in following:
            if k2 == "L":
                break
            values[letter] = v
            break

    if set(values) != set(offered):
        return None
    if condition is Condition.FEELINGS:
        if any(v != int(v) or not 1 <= v <= 7 for v in values.values()):
            return None
        values = {k: int(v) for k, v in values.items()}
    return ParsedRatings(values)
