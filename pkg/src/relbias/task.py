"""Bandit task structure, randomized schedules and outcome sampling.

Eight options are arranged in four fixed learning contexts (pairs). Means
rise in $3 steps from $15 to $36; within each context the lower option is
labelled L and the higher one H (``L15``, ``H18``, ... ``H36``).

Randomness is explicit: every function takes a ``numpy.random.Generator``.
:func:`session_streams` derives independent sub-streams from a master seed
so that swapping the agent never perturbs the task realization.
Normal draws use ``Generator.normal`` (Philox bit generator, numpy's
ziggurat sampler), then round half away from zero.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

LETTERS = "ABCDEFGH"

N_REPETITIONS = 5

# sub-stream identifiers under SeedSequence(master_seed, spawn_key=(run_index, stream))
STREAM_LETTERS = 0
STREAM_SCHEDULE = 1
STREAM_OUTCOMES = 2
STREAM_AGENT = 3


class Role(str, enum.Enum):
    LOW = "L"
    HIGH = "H"


@dataclass(frozen=True)
class OptionSpec:
    option_index: int
    mean_payoff: float
    payoff_sd: float
    context_index: int
    local_role: Role

    @property
    def label(self) -> str:
        """Short name such as ``L15`` or ``H36``."""
        return f"{self.local_role.value}{self.mean_payoff:g}"


@dataclass(frozen=True)
class TaskSpec:
    options: tuple[OptionSpec, ...]

    @property
    def n_options(self) -> int:
        return len(self.options)

    @property
    def n_contexts(self) -> int:
        return len(self.options) // 2

    def context(self, context_index: int) -> tuple[int, int]:
        """Option indices ``(low, high)`` of a learning context."""
        return (2 * context_index, 2 * context_index + 1)

    @property
    def contexts(self) -> list[tuple[int, int]]:
        return [self.context(c) for c in range(self.n_contexts)]

    @property
    def labels(self) -> list[str]:
        return [o.label for o in self.options]

    def option_by_label(self, label: str) -> OptionSpec:
        for o in self.options:
            if o.label == label:
                return o
        raise KeyError(label)

    def with_sd(self, sd: float) -> "TaskSpec":
        return build_task_spec(
            base=self.options[0].mean_payoff,
            step=self.options[1].mean_payoff - self.options[0].mean_payoff,
            sd=sd,
            n_contexts=self.n_contexts,
        )


def build_task_spec(base: float = 15, step: float = 3, sd: float = 1.0, n_contexts: int = 4) -> TaskSpec:
    if sd < 0:
        raise ValueError("payoff sd must be non-negative")
    options = tuple(
        OptionSpec(
            option_index=i,
            mean_payoff=base + step * i,
            payoff_sd=float(sd),
            context_index=i // 2,
            local_role=Role.HIGH if i % 2 else Role.LOW,
        )
        for i in range(2 * n_contexts)
    )
    return TaskSpec(options)


@dataclass(frozen=True)
class TaskInstance:
    """A task spec plus the random option -> letter bijection of one run."""

    spec: TaskSpec
    letters: tuple[str, ...]
    master_seed: Optional[int] = None

    def __post_init__(self):
        if len(self.letters) != self.spec.n_options or len(set(self.letters)) != len(self.letters):
            raise ValueError(f"letters must be a bijection over {self.spec.n_options} options: {self.letters}")

    def letter_of(self, option_index: int) -> str:
        return self.letters[option_index]

    def option_of(self, letter: str) -> int:
        try:
            return self.letters.index(letter)
        except ValueError:
            raise KeyError(f"letter {letter!r} is not assigned in this task") from None


def assign_letters(
    spec: TaskSpec,
    rng: np.random.Generator,
    permutation: Optional[Sequence[int]] = None,
    master_seed: Optional[int] = None,
) -> TaskInstance:
    """Randomly assign the letters A.. to the options.

    ``permutation`` (a permutation of ``range(n_options)``, giving the letter
    position of each option) bypasses the rng; tests use it to pin fixtures.
    """
    n = spec.n_options
    if permutation is None:
        permutation = rng.permutation(n)
    perm = [int(p) for p in permutation]
    if sorted(perm) != list(range(n)):
        raise ValueError(f"not a permutation of range({n}): {perm}")
    return TaskInstance(spec, tuple(LETTERS[p] for p in perm), master_seed)


@dataclass(frozen=True)
class LearningTrial:
    round_number: int
    context_index: int
    presented_first: int
    presented_second: int

    @property
    def options(self) -> tuple[int, int]:
        return (self.presented_first, self.presented_second)


@dataclass(frozen=True)
class TransferTrial:
    presented_first: int
    presented_second: int

    @property
    def options(self) -> tuple[int, int]:
        return (self.presented_first, self.presented_second)

    @property
    def pair(self) -> frozenset[int]:
        return frozenset(self.options)


@dataclass(frozen=True)
class OutcomeRecord:
    """Outcomes of one learning round, in prompt presentation order."""

    round_number: int
    entries: tuple[tuple[str, int], ...]


def make_learning_schedule(
    rng: np.random.Generator,
    spec: Optional[TaskSpec] = None,
    repetitions: int = N_REPETITIONS,
) -> list[LearningTrial]:
    spec = spec or build_task_spec()
    order = rng.permutation(np.repeat(np.arange(spec.n_contexts), repetitions))
    flips = rng.integers(0, 2, size=len(order))
    trials = []
    for k, (ctx, flip) in enumerate(zip(order, flips), start=1):
        low, high = spec.context(int(ctx))
        first, second = (high, low) if flip else (low, high)
        trials.append(LearningTrial(k, int(ctx), first, second))
    return trials


def make_transfer_schedule(rng: np.random.Generator, spec: Optional[TaskSpec] = None) -> list[TransferTrial]:
    spec = spec or build_task_spec()
    pairs = list(itertools.combinations(range(spec.n_options), 2))
    order = rng.permutation(len(pairs))
    flips = rng.integers(0, 2, size=len(pairs))
    trials = []
    for idx, flip in zip(order, flips):
        a, b = pairs[int(idx)]
        trials.append(TransferTrial(b, a) if flip else TransferTrial(a, b))
    return trials


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero (17.5 -> 18, -2.5 -> -3)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def sample_outcome(option: OptionSpec, rng: np.random.Generator) -> int:
    return round_half_away(rng.normal(option.mean_payoff, option.payoff_sd))


def stream(master_seed: int, run_index: int, stream_id: int) -> np.random.Generator:
    """Independent generator for one (run, purpose) combination.

    Philox is keyed with two words hashed from SeedSequence(master_seed,
    spawn_key=(run_index, stream_id)); counter-based, so streams never overlap.
    """
    seq = np.random.SeedSequence(master_seed, spawn_key=(run_index, stream_id))
    return np.random.Generator(np.random.Philox(key=seq.generate_state(2, dtype=np.uint64)))


@dataclass
class SessionStreams:
    letters: np.random.Generator
    schedule: np.random.Generator
    outcomes: np.random.Generator
    agent: np.random.Generator


def session_streams(master_seed: int, run_index: int = 0) -> SessionStreams:
    return SessionStreams(
        letters=stream(master_seed, run_index, STREAM_LETTERS),
        schedule=stream(master_seed, run_index, STREAM_SCHEDULE),
        outcomes=stream(master_seed, run_index, STREAM_OUTCOMES),
        agent=stream(master_seed, run_index, STREAM_AGENT),
    )
