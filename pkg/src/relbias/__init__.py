"""Contextual-bandit harness for measuring relative value bias in chat models."""

from .task import build_task_spec, TaskSpec, TaskInstance
from .prompts import Condition, parse_choice, render_choice_prompt
from .agents import ValuationPolicy, theoretical_choice_rates
from .engine import SessionConfig, run_session, run_batch, read_transcript, write_transcript
from .analysis import analyze, write_report

__version__ = "0.1.0"
