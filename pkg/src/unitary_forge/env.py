"""The synthesis MDP.

Inversion mode multiplies gates onto ``U^dag`` from the left until the state
is within ``epsilon`` of the identity (up to phase). Diagonalization mode
accepts gates on either side and stops as soon as the state is close to a
diagonal unitary, leaving the continuous phases to an explicit diagonal
block.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .gates import ActionSet, Circuit, GateAction
from .linalg import (
    canonicalize_batch,
    dagger,
    diagonal_distance,
    distance_to_identity,
    hs_distance,
    nearest_diagonal,
    polar_project,
    sample_perturbations,
)

MODES = ("inversion", "diagonalization")
REORTHO_EVERY = 64


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    n_qubits: int = 1
    mode: str = "inversion"
    epsilon: float = 1e-2
    max_steps: int = 25
    perturb_epsilon: float = 0.0
    perturb_side: str = "left"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.epsilon < 0.1:
            raise ValueError(f"epsilon must lie in (0, 0.1), got {self.epsilon}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.n_qubits not in (1, 2, 3):
            raise ValueError(f"n_qubits must be 1, 2 or 3, got {self.n_qubits}")
        if self.perturb_epsilon < 0 or self.perturb_epsilon >= 0.5:
            raise ValueError("perturb_epsilon must lie in [0, 0.5)")
        if self.perturb_side not in ("left", "right"):
            raise ValueError("perturb_side must be 'left' or 'right'")

    @property
    def side_mode(self) -> str:
        return "left_right" if self.mode == "diagonalization" else "inversion"

    def replace(self, **kw) -> "EnvConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class SynthState:
    matrix: np.ndarray
    target: np.ndarray
    mode: str = "inversion"
    left: list[GateAction] = field(default_factory=list)
    right: list[GateAction] = field(default_factory=list)
    steps_taken: int = 0
    terminal: bool = False

    @property
    def n_qubits(self) -> int:
        return self.matrix.shape[0].bit_length() - 1


@dataclass(frozen=True)
class StepOutcome:
    next_state: SynthState
    reward: float
    terminal: bool
    truncated: bool


def terminal_distance(matrices: np.ndarray, mode: str):
    """Distance that the terminal test compares against epsilon."""
    if mode == "inversion":
        return distance_to_identity(matrices)
    return diagonal_distance(matrices)


def is_terminal(matrices: np.ndarray, mode: str, epsilon: float):
    return terminal_distance(matrices, mode) <= epsilon


def reset(target: np.ndarray, cfg: EnvConfig) -> SynthState:
    dim = 1 << cfg.n_qubits
    if target.shape != (dim, dim):
        raise EnvError(f"target shape {target.shape} does not match {cfg.n_qubits} qubit(s)")
    s0 = dagger(target).copy()
    return SynthState(
        matrix=s0,
        target=np.array(target, dtype=np.complex128),
        mode=cfg.mode,
        terminal=bool(is_terminal(s0, cfg.mode, cfg.epsilon)),
    )


def step(state: SynthState, action: GateAction, cfg: EnvConfig) -> StepOutcome:
    if state.terminal:
        raise EnvError("cannot step a terminal state")
    if cfg.mode == "inversion" and action.side == "right":
        raise EnvError("right-side actions are only valid in diagonalization mode")
    if action.side == "right":
        matrix = state.matrix @ action.unitary
        left, right = state.left, state.right + [action]
    else:
        matrix = action.unitary @ state.matrix
        left, right = state.left + [action], state.right
    steps = state.steps_taken + 1
    if steps % REORTHO_EVERY == 0:
        matrix = polar_project(matrix)
    terminal = bool(is_terminal(matrix, cfg.mode, cfg.epsilon))
    nxt = SynthState(matrix, state.target, cfg.mode, left, right, steps, terminal)
    truncated = (not terminal) and steps >= cfg.max_steps
    return StepOutcome(nxt, 1.0 if terminal else -1.0, terminal, truncated)


def observe(state: SynthState, cfg: EnvConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Canonical form of the (optionally perturbed) state matrix."""
    m = state.matrix
    if cfg.perturb_epsilon > 0:
        if rng is None:
            raise EnvError("perturbation requires a random generator")
        p = sample_perturbations(cfg.n_qubits, cfg.perturb_epsilon, rng, 1)[0]
        m = p @ m if cfg.perturb_side == "left" else m @ p
    w, _ = canonicalize_batch(m)
    return w


def recompute_matrix(state: SynthState) -> np.ndarray:
    """Rebuild ``L U^dag R`` from the target and the action log."""
    m = dagger(state.target)
    for g in state.left:
        m = g.unitary @ m
    for g in state.right:
        m = m @ g.unitary
    return m


def extract_circuit(state: SynthState) -> Circuit:
    """Circuit implementing the target from a terminal state.

    Inversion: the applied gates in order. Diagonalization: left gates,
    then the inverse of the nearest diagonal, then the right gates in
    reverse order.
    """
    if not state.terminal:
        raise EnvError("extract_circuit needs a terminal state")
    n = state.n_qubits
    if state.mode == "inversion":
        return Circuit(n, list(state.left))
    _, theta = nearest_diagonal(state.matrix)
    gates = list(state.left) + list(reversed(state.right))
    return Circuit(n, gates, diag_theta=theta, diag_position=len(state.left))


def trace_record(outcome: StepOutcome, action: GateAction) -> dict:
    m = outcome.next_state.matrix
    return {
        "step": outcome.next_state.steps_taken,
        "action_id": action.action_id,
        "side": action.side,
        "reward": outcome.reward,
        "d_hs": float(distance_to_identity(m)),
        "d_diag": float(diagonal_distance(m)),
    }


def write_trace(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def run_actions(target: np.ndarray, action_ids, actions: ActionSet, cfg: EnvConfig):
    """Replay a fixed action sequence; returns the final state and its trace."""
    state = reset(target, cfg)
    records = []
    for aid in action_ids:
        out = step(state, actions[aid], cfg)
        records.append(trace_record(out, actions[aid]))
        state = out.next_state
        if out.terminal:
            break
    return state, records


def circuit_distance(circuit: Circuit, target: np.ndarray) -> float:
    return float(hs_distance(circuit.unitary(), target))
