"""Simulation kernel: state, communication operators, step loop, and trace."""

from .comm import Delivery, broadcast, group_chat, one_to_one, update_tie
from .core import Simulator, compress_span, estimate_budget, initial_state, run, step
from .state import Coefficients, EvalSignal, RunConfig, SimulationState
from .trace import (
    Trace,
    TraceEvent,
    TraceWriter,
    iter_step_states,
    read_trace,
    replay,
    replay_events,
    write_trace,
)

__all__ = [
    "Coefficients",
    "Delivery",
    "EvalSignal",
    "RunConfig",
    "SimulationState",
    "Simulator",
    "Trace",
    "TraceEvent",
    "TraceWriter",
    "broadcast",
    "compress_span",
    "estimate_budget",
    "group_chat",
    "initial_state",
    "iter_step_states",
    "one_to_one",
    "read_trace",
    "replay",
    "replay_events",
    "run",
    "step",
    "update_tie",
    "write_trace",
]
