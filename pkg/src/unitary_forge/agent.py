"""Fitted value iteration for the state-value synthesis agent, and a DQN
baseline trained on raw matrices.

Transitions are exact (``s' = a s`` or ``s' = s a``), so regression targets
are one-step Bellman backups over every action, evaluated with a
periodically synced copy of the network.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import network
from .encoding import Featurizer
from .env import EnvConfig, SynthState, is_terminal
from .gates import (
    ActionSet,
    GateAction,
    build_action_set,
    default_kinds,
    random_clifford_t_circuit,
    random_diag_target,
    unitary_of,
)
from .linalg import dagger, polar_project
from .network import MlpSpec, NetworkState

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "depth_bucket", "success_rate", "mean_episode_len", "loss", "eps", "toggles")


@dataclass(frozen=True)
class Toggles:
    canonicalize: bool = True
    perturb: bool = True
    nerf: bool = True

    def tag(self) -> str:
        return f"canonicalize={int(self.canonicalize)};perturb={int(self.perturb)};nerf={int(self.nerf)}"

    @classmethod
    def parse(cls, text: str) -> "Toggles":
        """``"101"`` (canonicalize, perturb, nerf) or ``"perturb=0,nerf=1"``."""
        text = text.strip()
        if text in ("all", "on"):
            return cls()
        if text in ("none", "off"):
            return cls(False, False, False)
        if len(text) == 3 and set(text) <= {"0", "1"}:
            return cls(*(c == "1" for c in text))
        vals = dataclasses.asdict(cls())
        for part in text.replace(";", ",").split(","):
            if not part:
                continue
            key, _, val = part.partition("=")
            key = key.strip()
            if key not in vals or val.strip() not in ("0", "1", "true", "false"):
                raise ValueError(f"bad toggle {part!r}")
            vals[key] = val.strip() in ("1", "true")
        return cls(**vals)

    @classmethod
    def grid(cls) -> list["Toggles"]:
        return [cls(bool(i & 4), bool(i & 2), bool(i & 1)) for i in range(7, -1, -1)]


@dataclass
class TrainConfig:
    gamma: float = 0.95
    iterations: int = 150
    episodes_per_iter: int = 64
    updates_per_iter: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    min_depth: int = 1
    start_max_depth: int = 3
    depth_cap: int = 10
    depth_step: int = 2
    promote_threshold: float = 0.7
    promote_window: int = 3
    eps_start: float = 1.0
    eps_min: float = 0.05
    eps_decay_frac: float = 1 / 3
    perturb_epsilon: float = 1e-4
    target_net_sync_every: int = 500
    buffer_capacity: int = 50_000
    horizon_factor: float = 2.5
    loss: str = "mse"
    grad_clip: float | None = 10.0
    nerf_L: int = 15
    nerf_input_scale: float = 1.0
    toggles: Toggles = field(default_factory=Toggles)
    exact_terminal_successors: bool = True
    workers: int = 1
    rollout_chunk: int = 16
    diag_max_outer_gates: int | None = None

    def __post_init__(self):
        if isinstance(self.toggles, dict):
            self.toggles = Toggles(**self.toggles)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.min_depth < 1 or self.start_max_depth < self.min_depth or self.depth_cap < self.start_max_depth:
            raise ValueError("need 1 <= min_depth <= start_max_depth <= depth_cap")
        if not 0.0 <= self.eps_min <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_min <= eps_start <= 1")
        if self.iterations < 0 or self.episodes_per_iter < 1 or self.batch_size < 1:
            raise ValueError("iterations, episodes_per_iter and batch_size must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0.0 < self.nerf_input_scale <= 1.0:
            raise ValueError("nerf_input_scale must lie in (0, 1]")

    def explore_eps(self, iteration: int) -> float:
        """Linear decay from ``eps_start`` to ``eps_min`` over the first part of training."""
        span = max(1, int(round(self.eps_decay_frac * self.iterations)))
        frac = min(1.0, iteration / span)
        return self.eps_start + (self.eps_min - self.eps_start) * frac

    def value_floor(self) -> float:
        return -1.0 / (1.0 - self.gamma) if self.gamma < 1.0 else -np.inf


@dataclass(frozen=True)
class SynthesisTask:
    """Everything fixed about a synthesis problem: MDP, gates, observation map."""

    env: EnvConfig
    actions: ActionSet
    featurizer: Featurizer

    @property
    def mode(self) -> str:
        return self.env.mode

    def terminal(self, mats):
        return is_terminal(mats, self.env.mode, self.env.epsilon)


def make_task(env: EnvConfig, kinds=None, toggles: Toggles | None = None, L: int = 15,
              perturb_epsilon: float = 0.0, input_scale: float = 1.0) -> SynthesisTask:
    toggles = toggles or Toggles()
    actions = build_action_set(env.n_qubits, kinds or default_kinds(env.n_qubits), env.side_mode)
    feat = Featurizer(
        env.n_qubits,
        canonicalize=toggles.canonicalize,
        nerf=toggles.nerf,
        L=L,
        perturb_epsilon=perturb_epsilon if toggles.perturb else 0.0,
        perturb_side=env.perturb_side,
        input_scale=input_scale,
    )
    return SynthesisTask(env, actions, feat)


@dataclass
class Transition:
    matrix: np.ndarray
    reward: float
    terminal: bool
    action_id: int = -1
    next_matrix: np.ndarray | None = None


class ReplayBuffer:
    """Ring buffer of state matrices (plus action/next state for Q-learning)."""

    def __init__(self, capacity: int, dim: int, with_next: bool = False):
        self.capacity = int(capacity)
        self.dim = dim
        self.with_next = with_next
        self.states = np.zeros((self.capacity, dim, dim), dtype=np.complex128)
        self.rewards = np.zeros(self.capacity)
        self.terminal = np.zeros(self.capacity, dtype=bool)
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.next_states = np.zeros((self.capacity, dim, dim), dtype=np.complex128) if with_next else None
        self.next_terminal = np.zeros(self.capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        self.push_many(t.matrix[None], np.array([t.reward]), np.array([t.terminal]),
                       np.array([t.action_id]), None if t.next_matrix is None else t.next_matrix[None])

    def push_many(self, states, rewards, terminal, actions=None, next_states=None, next_terminal=None):
        n = len(states)
        idx = (self.pos + np.arange(n)) % self.capacity
        self.states[idx] = states
        self.rewards[idx] = rewards
        self.terminal[idx] = terminal
        if actions is not None:
            self.actions[idx] = actions
        if self.with_next and next_states is not None:
            self.next_states[idx] = next_states
            self.next_terminal[idx] = next_terminal if next_terminal is not None else False
        self.pos = int((self.pos + n) % self.capacity)
        self.size = int(min(self.capacity, self.size + n))

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Indices drawn uniformly without replacement."""
        k = min(batch_size, self.size)
        return rng.choice(self.size, size=k, replace=False)

    def state_dict(self) -> dict:
        d = {
            "states": self.states[: self.size], "rewards": self.rewards[: self.size],
            "terminal": self.terminal[: self.size], "actions": self.actions[: self.size],
            "next_terminal": self.next_terminal[: self.size],
            "meta": np.array([self.capacity, self.pos, self.size, int(self.with_next)]),
        }
        if self.with_next:
            d["next_states"] = self.next_states[: self.size]
        return d

    @classmethod
    def from_state_dict(cls, d, dim: int) -> "ReplayBuffer":
        capacity, pos, size, with_next = (int(v) for v in d["meta"])
        buf = cls(capacity, dim, bool(with_next))
        buf.states[:size] = d["states"]
        buf.rewards[:size] = d["rewards"]
        buf.terminal[:size] = d["terminal"]
        buf.actions[:size] = d["actions"]
        buf.next_terminal[:size] = d["next_terminal"]
        if with_next:
            buf.next_states[:size] = d["next_states"]
        buf.pos, buf.size = pos, size
        return buf


# ---------------------------------------------------------------------------
# Policy and targets


def successor_values(net: NetworkState, task: SynthesisTask, mats: np.ndarray,
                     rng: np.random.Generator | None = None, perturb: bool = False):
    """Value of every one-gate successor; returns ``(values, successors)``."""
    succ = task.actions.successors(mats)
    feats = task.featurizer(succ, rng, perturb=perturb)
    b, a = succ.shape[:2]
    vals = network.forward(net, feats.reshape(b * a, -1)).reshape(b, a)
    return vals, succ


def select_action(net: NetworkState, state: SynthState, task: SynthesisTask,
                  explore_eps: float, rng: np.random.Generator, perturb: bool = False) -> GateAction:
    """Greedy action under V over all successors, or a uniform one with probability ``explore_eps``.

    Ties go to the lowest action id.
    """
    if state.terminal:
        raise ValueError("select_action on a terminal state")
    if explore_eps > 0 and rng.random() < explore_eps:
        return task.actions[int(rng.integers(len(task.actions)))]
    vals, _ = successor_values(net, task, state.matrix[None], rng, perturb)
    return task.actions[int(np.argmax(vals[0]))]


def compute_targets(task: SynthesisTask, mats: np.ndarray, terminal: np.ndarray,
                    net_target: NetworkState, gamma: float, exact_terminal: bool = True) -> np.ndarray:
    """One-step Bellman backups ``-1 + gamma * max_a V(a s)``; terminal states get +1.

    With ``exact_terminal`` a successor that is itself terminal is valued at
    exactly +1 instead of the network's estimate. Results are clipped to
    ``[-1 / (1 - gamma), 1]``.
    """
    mats = np.asarray(mats)
    terminal = np.asarray(terminal, dtype=bool)
    out = np.ones(len(mats))
    live = ~terminal
    if not live.any():
        return out
    if gamma == 0.0:
        out[live] = -1.0
        return out
    vals, succ = successor_values(net_target, task, mats[live])
    if exact_terminal:
        vals = np.where(task.terminal(succ), 1.0, vals)
    backed = -1.0 + gamma * vals.max(axis=1)
    floor = -1.0 / (1.0 - gamma) if gamma < 1.0 else -np.inf
    out[live] = np.clip(backed, floor, 1.0)
    return out


# ---------------------------------------------------------------------------
# Targets and curriculum


def sample_target(task: SynthesisTask, depth: int, rng: np.random.Generator) -> np.ndarray:
    n = task.env.n_qubits
    if task.mode == "diagonalization":
        return random_diag_target(n, max(2, depth), rng, total=max(2, depth))
    kinds_default = task.actions.kinds() == [k.value for k in default_kinds(n)]
    if n == 1 and kinds_default:
        return unitary_of(random_clifford_t_circuit(1, depth, rng))
    return unitary_of(random_clifford_t_circuit(n, depth, rng, task.actions))


@dataclass
class MetricsLog:
    toggles: str
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def final_success(self, depth: int | None = None) -> float:
        last = max(r["iteration"] for r in self.rows)
        vals = [r["success_rate"] for r in self.rows
                if r["iteration"] == last and (depth is None or r["depth_bucket"] == depth)]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([
                r["iteration"], r["depth_bucket"], _fmt(r["success_rate"]),
                _fmt(r["mean_episode_len"]), _fmt(r["loss"]), _fmt(r["eps"]), r["toggles"],
            ])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


# ---------------------------------------------------------------------------
# Trainers


class _Trainer:
    kind = "base"

    def __init__(self, cfg: TrainConfig, task: SynthesisTask, rng: np.random.Generator,
                 spec: MlpSpec | None = None):
        self.cfg = cfg
        self.task = task
        self.rng = rng
        spec = spec or MlpSpec(task.featurizer.input_dim, output_dim=self.output_dim())
        if spec.input_dim != task.featurizer.input_dim or spec.output_dim != self.output_dim():
            raise ValueError("network spec does not match the task's input/output widths")
        self.net = network.init_network(spec)
        self.target_net = self.net.copy()
        self.buffer = ReplayBuffer(cfg.buffer_capacity, task.actions.dim, with_next=self.kind == "dqn")
        self.iteration = 0
        self.updates = 0
        self.max_depth = cfg.start_max_depth
        self.promote_hist: list[tuple[int, int]] = []
        self.log = MetricsLog(cfg.toggles.tag() if self.kind == "dvnu" else "dqn")

    def output_dim(self) -> int:
        return 1

    # -- rollouts -----------------------------------------------------------

    def _rollout_all(self, targets, depths, eps):
        chunk = self.cfg.rollout_chunk
        seeds = self.rng.integers(2**63, size=math.ceil(len(targets) / chunk))
        snapshot = self.net.copy()
        jobs = [(targets[i : i + chunk], depths[i : i + chunk], int(s))
                for i, s in zip(range(0, len(targets), chunk), seeds)]
        run = lambda job: self._rollout_chunk(snapshot, job[0], job[1], eps, job[2])  # noqa: E731
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                return list(pool.map(run, jobs))
        return [run(j) for j in jobs]

    def _choose(self, net, mats, eps, rng):
        raise NotImplementedError

    def _rollout_chunk(self, net, targets, depths, eps, seed):
        rng = np.random.default_rng(seed)
        task = self.task
        mats = dagger(np.asarray(targets))
        horizon = np.ceil(self.cfg.horizon_factor * np.asarray(depths)).astype(int)
        term0 = task.terminal(mats)
        success = term0.copy()
        lengths = np.zeros(len(mats), dtype=int)
        active = ~term0
        stored = {"s": [mats.copy()], "t": [term0.copy()], "a": [], "n": [], "nt": []}
        step = 0
        while active.any():
            idx = np.flatnonzero(active)
            cur = mats[idx]
            actions, nxt, term, extra = self._choose(net, cur, eps, rng)
            step += 1
            if step % 64 == 0:
                nxt = np.stack([polar_project(m) for m in nxt])
            self._record(stored, cur, actions, nxt, term, extra)
            mats[idx] = nxt
            lengths[idx] += 1
            success[idx] |= term
            active[idx] = ~term & (lengths[idx] < horizon[idx])
        return success, lengths, stored

    def _record(self, stored, cur, actions, nxt, term, extra):
        raise NotImplementedError

    # -- main loop ----------------------------------------------------------

    def run_iteration(self) -> None:
        cfg = self.cfg
        it = self.iteration
        eps = cfg.explore_eps(it)
        depths = self.rng.integers(cfg.min_depth, self.max_depth + 1, size=cfg.episodes_per_iter)
        targets = np.stack([sample_target(self.task, int(d), self.rng) for d in depths])
        results = self._rollout_all(targets, depths, eps)
        success = np.concatenate([r[0] for r in results])
        lengths = np.concatenate([r[1] for r in results])
        for r in results:
            self._push(r[2])

        losses = []
        if len(self.buffer) >= min(cfg.batch_size, 32):
            for _ in range(cfg.updates_per_iter):
                losses.append(self._update())
                self.updates += 1
                if self.updates % cfg.target_net_sync_every == 0:
                    network.copy_weights(self.net, self.target_net)
        loss = float(np.mean(losses)) if losses else float("nan")

        for d in range(1, cfg.depth_cap + 1):
            sel = depths == d
            self.log.add(
                iteration=it, depth_bucket=d,
                success_rate=float(success[sel].mean()) if sel.any() else float("nan"),
                mean_episode_len=float(lengths[sel].mean()) if sel.any() else float("nan"),
                loss=loss, eps=eps, toggles=self.log.toggles,
            )
        at_max = depths == self.max_depth
        self.promote_hist.append((int(success[at_max].sum()), int(at_max.sum())))
        window = self.promote_hist[-cfg.promote_window :]
        hits, tries = sum(h for h, _ in window), sum(t for _, t in window)
        if tries and hits / tries > cfg.promote_threshold and self.max_depth < cfg.depth_cap:
            self.max_depth = min(cfg.depth_cap, self.max_depth + cfg.depth_step)
            self.promote_hist = []
            log.info("iteration %d: curriculum max depth -> %d", it, self.max_depth)
        log.debug("iteration %d: eps=%.3f loss=%.4g success=%.3f", it, eps, loss, success.mean())
        self.iteration += 1

    def run(self, iterations: int | None = None, callback=None) -> None:
        stop = self.cfg.iterations if iterations is None else self.iteration + iterations
        while self.iteration < stop:
            self.run_iteration()
            if callback is not None:
                callback(self)

    # -- checkpointing ------------------------------------------------------

    def scalar_state(self) -> dict:
        return {
            "kind": self.kind,
            "iteration": self.iteration,
            "updates": self.updates,
            "max_depth": self.max_depth,
            "promote_hist": self.promote_hist,
            "rng": self.rng.bit_generator.state,
            "metrics": self.log.rows,
        }

    def load_scalar_state(self, d: dict) -> None:
        self.iteration = int(d["iteration"])
        self.updates = int(d["updates"])
        self.max_depth = int(d["max_depth"])
        self.promote_hist = [tuple(x) for x in d["promote_hist"]]
        self.rng.bit_generator.state = d["rng"]
        self.log.rows = [dict(r) for r in d["metrics"]]


class DvnuTrainer(_Trainer):
    kind = "dvnu"

    def _choose(self, net, mats, eps, rng):
        vals, succ = successor_values(net, self.task, mats, rng, perturb=True)
        greedy = np.argmax(vals, axis=1)
        explore = rng.random(len(mats)) < eps
        rand = rng.integers(len(self.task.actions), size=len(mats))
        a = np.where(explore, rand, greedy)
        succ_term = self.task.terminal(succ)
        rows = np.arange(len(mats))
        return a, succ[rows, a], succ_term[rows, a], (succ, succ_term)

    def _record(self, stored, cur, actions, nxt, term, extra):
        succ, succ_term = extra
        stored["s"].append(nxt)
        stored["t"].append(term)
        # terminal states the model revealed but the policy did not take
        missed = succ_term.any(axis=1) & ~term
        if missed.any():
            first = np.argmax(succ_term, axis=1)
            rows = np.flatnonzero(missed)
            stored["s"].append(succ[rows, first[rows]])
            stored["t"].append(np.ones(len(rows), dtype=bool))

    def _push(self, stored):
        s = np.concatenate(stored["s"])
        t = np.concatenate(stored["t"])
        self.buffer.push_many(s, np.where(t, 1.0, -1.0), t)

    def _update(self) -> float:
        cfg = self.cfg
        idx = self.buffer.sample(cfg.batch_size, self.rng)
        mats = self.buffer.states[idx]
        term = self.buffer.terminal[idx]
        y = compute_targets(self.task, mats, term, self.target_net, cfg.gamma,
                            cfg.exact_terminal_successors)
        x = self.task.featurizer(mats, self.rng, perturb=True)
        return network.train_step(self.net, x, y[:, None], cfg.lr, loss=cfg.loss, grad_clip=cfg.grad_clip)


class DqnTrainer(_Trainer):
    """Q-learning over ``|A|`` outputs from the raw, un-canonicalized matrix."""

    kind = "dqn"

    def output_dim(self) -> int:
        return len(self.task.actions)

    def _choose(self, net, mats, eps, rng):
        q = network.forward(net, self.task.featurizer(mats))
        greedy = np.argmax(q, axis=1)
        explore = rng.random(len(mats)) < eps
        rand = rng.integers(len(self.task.actions), size=len(mats))
        a = np.where(explore, rand, greedy)
        nxt = np.stack([self.task.actions.apply(m, int(i)) for m, i in zip(mats, a)])
        return a, nxt, self.task.terminal(nxt), None

    def _record(self, stored, cur, actions, nxt, term, extra):
        stored["a"].append((cur, actions, nxt, term))

    def _push(self, stored):
        if not stored["a"]:
            return
        cur = np.concatenate([x[0] for x in stored["a"]])
        act = np.concatenate([x[1] for x in stored["a"]])
        nxt = np.concatenate([x[2] for x in stored["a"]])
        nterm = np.concatenate([x[3] for x in stored["a"]])
        self.buffer.push_many(cur, np.where(nterm, 1.0, -1.0), np.zeros(len(cur), bool), act, nxt, nterm)

    def _update(self) -> float:
        cfg = self.cfg
        idx = self.buffer.sample(cfg.batch_size, self.rng)
        b = self.buffer
        q_next = network.forward(self.target_net, self.task.featurizer(b.next_states[idx]))
        y = np.where(b.next_terminal[idx], 1.0, -1.0 + cfg.gamma * q_next.max(axis=1))
        y = np.clip(y, cfg.value_floor(), 1.0)
        x = self.task.featurizer(b.states[idx])
        return network.train_step(self.net, x, y, cfg.lr, action_ids=b.actions[idx],
                                  loss=cfg.loss, grad_clip=cfg.grad_clip)


def dvnu_task(cfg: TrainConfig, env: EnvConfig, kinds=None) -> SynthesisTask:
    return make_task(env, kinds, cfg.toggles, cfg.nerf_L, cfg.perturb_epsilon, cfg.nerf_input_scale)


def dqn_task(env: EnvConfig, kinds=None) -> SynthesisTask:
    return make_task(env, kinds, Toggles(False, False, False))


def train_dvnu(cfg: TrainConfig, env: EnvConfig, rng: np.random.Generator, kinds=None,
               hidden=(512, 256, 128), activation: str = "relu", callback=None):
    task = dvnu_task(cfg, env, kinds)
    spec = MlpSpec(task.featurizer.input_dim, tuple(hidden), 1, activation, int(rng.integers(2**31)))
    trainer = DvnuTrainer(cfg, task, rng, spec)
    trainer.run(callback=callback)
    return trainer.net, trainer.log


def train_dqn_baseline(cfg: TrainConfig, env: EnvConfig, rng: np.random.Generator, kinds=None,
                       hidden=(512, 256, 128), activation: str = "relu", callback=None):
    task = dqn_task(env, kinds)
    spec = MlpSpec(task.featurizer.input_dim, tuple(hidden), len(task.actions), activation,
                   int(rng.integers(2**31)))
    trainer = DqnTrainer(cfg, task, rng, spec)
    trainer.run(callback=callback)
    return trainer.net, trainer.log


def ablation_run(toggles: Toggles, cfg: TrainConfig, env: EnvConfig, rng: np.random.Generator, **kw):
    """The value-iteration pipeline with the named observation stages bypassed."""
    cfg = dataclasses.replace(cfg, toggles=toggles)
    return train_dvnu(cfg, env, rng, **kw)
