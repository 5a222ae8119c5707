"""Simulated decision agents with absolute, relative and hybrid valuation.

These agents read the structured outcome table rather than prompt text and
serve as analytic oracles for the transfer-test predictions:

* absolute: value = mean observed outcome
* relative: value = (m - m_min) / (m_max - m_min) within the learning
  context (range normalization); a degenerate context gives 0.5 to both
* hybrid(w): w * absolute-min-max-normalized + (1 - w) * relative
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .task import TaskSpec, build_task_spec

# values this close are treated as an exact tie (guards float noise in hybrid sums)
TIE_TOL = 1e-12

UNDEFINED = None


class ValuationKind(str, enum.Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"
    HYBRID = "hybrid"
    RANDOM = "random"


class ChoiceRule(str, enum.Enum):
    GREEDY = "greedy"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class ValuationPolicy:
    kind: ValuationKind
    weight: Optional[float] = None
    rule: ChoiceRule = ChoiceRule.GREEDY
    temperature: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ValuationKind(self.kind))
        object.__setattr__(self, "rule", ChoiceRule(self.rule))
        if self.kind is ValuationKind.HYBRID:
            if self.weight is None or not 0.0 <= self.weight <= 1.0:
                raise ValueError(f"hybrid weight must be in [0, 1], got {self.weight}")
        if self.rule is ChoiceRule.SOFTMAX and not (self.temperature and self.temperature > 0):
            raise ValueError("softmax needs a temperature > 0")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "rule": self.rule.value}
        if self.weight is not None:
            d["weight"] = self.weight
        if self.temperature is not None:
            d["temperature"] = self.temperature
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ValuationPolicy":
        return cls(d["kind"], d.get("weight"), d.get("rule", "greedy"), d.get("temperature"))

    @property
    def name(self) -> str:
        if self.kind is ValuationKind.HYBRID:
            return f"hybrid{self.weight:g}"
        return self.kind.value


@dataclass
class ObservationTable:
    """Observed outcomes per option, with the context of each observation round."""

    spec: TaskSpec = field(default_factory=build_task_spec)
    outcomes: dict = field(default_factory=dict)
    contexts: list = field(default_factory=list)

    def add_round(self, context_index: int, observed: dict) -> None:
        ctx = set(self.spec.context(context_index))
        if set(observed) != ctx:
            raise ValueError(f"round must report both options of context {context_index}, got {sorted(observed)}")
        for option, value in observed.items():
            self.outcomes.setdefault(option, []).append(value)
        self.contexts.append(context_index)

    def means(self) -> dict:
        return {o: sum(v) / len(v) for o, v in self.outcomes.items() if v}

    @classmethod
    def noise_free(cls, spec: Optional[TaskSpec] = None, repetitions: int = 5) -> "ObservationTable":
        """Table after a full learning phase where every draw equals the mean."""
        spec = spec or build_task_spec()
        obs = cls(spec)
        for _ in range(repetitions):
            for c, (lo, hi) in enumerate(spec.contexts):
                obs.add_round(c, {lo: spec.options[lo].mean_payoff, hi: spec.options[hi].mean_payoff})
        return obs


def absolute_values(obs: ObservationTable) -> dict:
    means = obs.means()
    return {i: means.get(i, UNDEFINED) for i in range(obs.spec.n_options)}


def relative_values(obs: ObservationTable) -> dict:
    means = obs.means()
    values = {}
    for lo, hi in obs.spec.contexts:
        if lo not in means or hi not in means:
            values[lo] = values[hi] = UNDEFINED
            continue
        m_lo, m_hi = means[lo], means[hi]
        top, bottom = max(m_lo, m_hi), min(m_lo, m_hi)
        if top == bottom:
            values[lo] = values[hi] = 0.5
        else:
            values[lo] = (m_lo - bottom) / (top - bottom)
            values[hi] = (m_hi - bottom) / (top - bottom)
    return values


def _minmax(values: dict) -> dict:
    defined = [v for v in values.values() if v is not UNDEFINED]
    if not defined:
        return dict(values)
    lo, hi = min(defined), max(defined)
    out = {}
    for k, v in values.items():
        if v is UNDEFINED:
            out[k] = UNDEFINED
        else:
            out[k] = 0.5 if hi == lo else (v - lo) / (hi - lo)
    return out


def hybrid_values(obs: ObservationTable, w: float) -> dict:
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weight must be in [0, 1], got {w}")
    a = _minmax(absolute_values(obs))
    r = relative_values(obs)
    out = {}
    for k in a:
        if a[k] is UNDEFINED or r[k] is UNDEFINED:
            out[k] = UNDEFINED
        else:
            out[k] = w * a[k] + (1 - w) * r[k]
    return out


def policy_values(policy: ValuationPolicy, obs: ObservationTable) -> dict:
    if policy.kind is ValuationKind.ABSOLUTE:
        return absolute_values(obs)
    if policy.kind is ValuationKind.RELATIVE:
        return relative_values(obs)
    if policy.kind is ValuationKind.HYBRID:
        return hybrid_values(obs, policy.weight)
    return {i: 0.0 for i in range(obs.spec.n_options)}


@dataclass(frozen=True)
class Decision:
    option: int
    undefined: bool = False


def _softmax_first(v1: float, v2: float, temperature: float) -> float:
    """P(first) for a two-option softmax, overflow-safe."""
    d = (v2 - v1) / temperature
    if d > 700:
        return 0.0
    if d < -700:
        return 1.0
    return 1.0 / (1.0 + math.exp(d))


def _uniform(rng) -> float:
    if isinstance(rng, float):
        return rng
    if callable(rng):
        rng = rng()
        if isinstance(rng, float):
            return rng
    return float(rng.random())


def decide(policy: ValuationPolicy, values: dict, pair: Sequence[int], rng) -> Decision:
    """Choose one option of ``pair``.

    ``rng`` is a Generator, a pre-drawn uniform in [0, 1), or a callable
    returning either. Exactly one uniform is consumed, and only when the
    choice is actually random (ties, undefined values, softmax, RANDOM).
    """
    a, b = pair
    if policy.kind is ValuationKind.RANDOM:
        return Decision(a if _uniform(rng) < 0.5 else b)
    va, vb = values.get(a), values.get(b)
    if va is UNDEFINED or vb is UNDEFINED:
        return Decision(a if _uniform(rng) < 0.5 else b, undefined=True)
    if policy.rule is ChoiceRule.SOFTMAX:
        p_first = _softmax_first(va, vb, policy.temperature)
        if p_first in (0.0, 1.0):
            return Decision(a if p_first == 1.0 else b)
        return Decision(a if _uniform(rng) < p_first else b)
    if math.isclose(va, vb, rel_tol=0.0, abs_tol=TIE_TOL):
        return Decision(a if _uniform(rng) < 0.5 else b)
    return Decision(a if va > vb else b)


def expected_choice_rates(values: Sequence[float]) -> np.ndarray:
    """Transfer choice rates of greedy play over all pairs, half credit on ties."""
    n = len(values)
    wins = np.zeros(n)
    for i, j in itertools.combinations(range(n), 2):
        if math.isclose(values[i], values[j], rel_tol=0.0, abs_tol=TIE_TOL):
            wins[i] += 0.5
            wins[j] += 0.5
        elif values[i] > values[j]:
            wins[i] += 1
        else:
            wins[j] += 1
    return wins / (n - 1)


def theoretical_choice_rates(kind: "ValuationKind | str", weight: Optional[float] = None, spec: Optional[TaskSpec] = None) -> np.ndarray:
    """Expected transfer choice rates after a noise-free learning phase."""
    kind = ValuationKind(kind)
    spec = spec or build_task_spec()
    if kind is ValuationKind.RANDOM:
        return np.full(spec.n_options, 0.5)
    obs = ObservationTable.noise_free(spec)
    values = policy_values(ValuationPolicy(kind, weight), obs)
    return expected_choice_rates([values[i] for i in range(spec.n_options)])


def response_for(letter: str, ratings: Optional[dict] = None) -> str:
    """Reply text a simulated agent sends back through the normal parser."""
    if not ratings:
        return f"I choose slot machine {letter}."
    parts = [f"Slot machine {k}: {v:g}" for k, v in ratings.items()]
    return ". ".join(parts) + f". I choose slot machine {letter}."
