"""Inference-time search with a trained value network, the exhaustive BFS
oracle, and success-rate evaluation."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import network
from .agent import SynthesisTask, sample_target, successor_values
from .env import SynthState, extract_circuit, terminal_distance
from .gates import Circuit
from .linalg import canonicalize_batch, dagger, hs_distance, polar_project
from .network import NetworkState

NEAR_TIE = 1e-4
DEFAULT_NODE_BUDGET = 5_000_000
SUCCESS_COLUMNS = ("depth_bucket", "n_targets", "successes", "rate", "wilson_lo", "wilson_hi", "mean_len", "mean_ms")


class SearchError(RuntimeError):
    pass


class OracleBudgetError(SearchError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    strategy: str = "greedy"
    beam_width: int = 1
    max_steps: int | None = None
    restarts: int = 1
    seed: int = 0
    horizon_factor: float = 2.5
    epsilon: float | None = None

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown search strategy {self.strategy!r}")
        if self.beam_width < 1 or self.restarts < 1:
            raise ValueError("beam_width and restarts must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def width(self) -> int:
        return 1 if self.strategy == "greedy" else self.beam_width

    def steps_for(self, depth: int | None, default: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        if depth is not None:
            return int(math.ceil(self.horizon_factor * depth))
        return default


@dataclass
class SynthesisResult:
    success: bool
    circuit: Circuit | None
    distance: float
    steps: int
    restarts_used: int
    wall_ms: float = 0.0


def state_key(mats: np.ndarray, decimals: int = 6) -> list[bytes]:
    """Hash keys of canonical forms; ``+ 0.0`` folds signed zeros together."""
    w, _ = canonicalize_batch(np.asarray(mats).reshape((-1,) + mats.shape[-2:]))
    w = np.round(w, decimals) + 0.0
    return [row.tobytes() for row in w]


def _path_state(target, path, task: SynthesisTask) -> SynthState:
    acts = task.actions
    state = SynthState(dagger(target).copy(), np.asarray(target), task.mode)
    m = state.matrix
    for i, aid in enumerate(path):
        g = acts[aid]
        m = m @ g.unitary if g.side == "right" else g.unitary @ m
        if (i + 1) % 64 == 0:
            m = polar_project(m)
        (state.right if g.side == "right" else state.left).append(g)
    state.matrix = m
    state.steps_taken = len(path)
    state.terminal = bool(task.terminal(m))
    return state


def _circuit_from_path(target, path, task: SynthesisTask) -> Circuit:
    state = _path_state(target, path, task)
    if not state.terminal:
        raise SearchError("replayed path is not terminal")
    return extract_circuit(state)


def _pick(vals: np.ndarray, k: int, rng: np.random.Generator | None) -> np.ndarray:
    """Indices of the top ``k`` values; ties to the lowest index, or near-ties
    broken at random when ``rng`` is given."""
    if rng is None:
        order = np.lexsort((np.arange(len(vals)), -vals))
    else:
        vmax = vals.max()
        bucket = np.floor((vmax - vals) / NEAR_TIE)
        order = np.lexsort((rng.random(len(vals)), bucket))
    return order[:k]


def _search_once(net, target, task, width, steps, rng):
    frontier = [[]]
    mats = dagger(np.asarray(target))[None].copy()
    best = float(terminal_distance(mats[0], task.mode))
    if task.terminal(mats[0]):
        return [], best
    for t in range(steps):
        vals, succ = successor_values(net, task, mats)
        n_act = succ.shape[1]
        succ = succ.reshape((-1,) + succ.shape[2:])
        vals = vals.reshape(-1)
        dist = terminal_distance(succ, task.mode)
        best = min(best, float(dist.min()))
        hit = np.flatnonzero(dist <= task.env.epsilon)
        if hit.size:
            i = int(hit[0])
            return frontier[i // n_act] + [i % n_act], best
        if width > 1:
            # drop duplicate states so the beam is not filled with copies
            keys = state_key(succ)
            first = {}
            for i, k in enumerate(keys):
                first.setdefault(k, i)
            uniq = np.array(sorted(first.values()))
            chosen = uniq[_pick(vals[uniq], width, rng)]
        else:
            chosen = _pick(vals, 1, rng)
        frontier = [frontier[i // n_act] + [int(i % n_act)] for i in chosen]
        mats = succ[chosen]
        if (t + 1) % 64 == 0:
            mats = np.stack([polar_project(m) for m in mats])
    return None, best


def synthesize(net: NetworkState, target: np.ndarray, task: SynthesisTask,
               cfg: SearchConfig = SearchConfig(), depth_hint: int | None = None) -> SynthesisResult:
    """Search for a circuit within ``epsilon`` of ``target``.

    Restart 0 is deterministic; later restarts break value near-ties at random.
    Any returned circuit is re-checked against the target independently.
    """
    if net.spec.input_dim != task.featurizer.input_dim:
        raise SearchError(
            f"network expects {net.spec.input_dim} inputs, observation pipeline gives {task.featurizer.input_dim}"
        )
    target = np.asarray(target, dtype=np.complex128)
    if target.shape != (task.actions.dim,) * 2:
        raise SearchError(f"target shape {target.shape} does not match {task.env.n_qubits} qubit(s)")
    if cfg.epsilon is not None and cfg.epsilon != task.env.epsilon:
        task = dataclasses.replace(task, env=task.env.replace(epsilon=cfg.epsilon))
    t0 = time.perf_counter()
    steps = cfg.steps_for(depth_hint, task.env.max_steps)
    rng = np.random.default_rng(cfg.seed)
    best = math.inf
    for r in range(cfg.restarts):
        path, dist = _search_once(net, target, task, cfg.width, steps, rng if r > 0 else None)
        best = min(best, dist)
        if path is None:
            continue
        circuit = _circuit_from_path(target, path, task)
        err = float(hs_distance(circuit.unitary(), target))
        if err > task.env.epsilon + 1e-12:
            raise SearchError(f"internal error: extracted circuit misses target by {err:.3g}")
        ms = 1000 * (time.perf_counter() - t0)
        return SynthesisResult(True, circuit, err, len(path), r + 1, ms)
    ms = 1000 * (time.perf_counter() - t0)
    return SynthesisResult(False, None, best, steps, cfg.restarts, ms)


# ---------------------------------------------------------------------------
# Exhaustive oracle


@dataclass
class OracleResult:
    found: bool
    min_depth: int | None
    circuit: Circuit | None
    states_expanded: int
    max_merge_distance: float = 0.0
    action_ids: list[int] = field(default_factory=list)


def bfs_oracle(target: np.ndarray, task: SynthesisTask, max_depth: int,
               node_budget: int = DEFAULT_NODE_BUDGET, dedup: bool = True,
               audit: bool = False) -> OracleResult:
    """Breadth-first search for the shortest action sequence reaching a terminal state.

    States are merged by a hash of their canonical form (6 decimals). With
    ``audit`` the largest distance between any two merged states is reported.
    """
    target = np.asarray(target, dtype=np.complex128)
    mats = dagger(target)[None].copy()
    if task.terminal(mats[0]):
        return OracleResult(True, 0, _circuit_from_path(target, [], task), 0)
    acts = task.actions
    n_act = len(acts)
    parents: list[np.ndarray] = []
    moves: list[np.ndarray] = []
    seen: dict[bytes, np.ndarray] = {}
    if dedup:
        seen[state_key(mats)[0]] = mats[0]
    expanded = 0
    worst = 0.0
    for depth in range(1, max_depth + 1):
        if expanded + len(mats) * n_act > node_budget:
            raise OracleBudgetError(
                f"node budget {node_budget} exceeded at depth {depth} ({expanded} expanded so far)"
            )
        succ = acts.successors(mats).reshape((-1,) + mats.shape[1:])
        expanded += len(succ)
        par = np.repeat(np.arange(len(mats)), n_act)
        mv = np.tile(np.arange(n_act), len(mats))
        hit = np.flatnonzero(task.terminal(succ))
        if hit.size:
            parents.append(par)
            moves.append(mv)
            path = _trace(parents, moves, int(hit[0]))
            circ = _circuit_from_path(target, path, task)
            return OracleResult(True, depth, circ, expanded, worst, path)
        if dedup:
            keep = []
            for i, k in enumerate(state_key(succ)):
                rep = seen.get(k)
                if rep is None:
                    seen[k] = succ[i]
                    keep.append(i)
                elif audit:
                    worst = max(worst, float(hs_distance(rep, succ[i])))
            keep = np.array(keep, dtype=int)
        else:
            keep = np.arange(len(succ))
        parents.append(par[keep])
        moves.append(mv[keep])
        mats = succ[keep]
        if len(mats) == 0:
            break
    return OracleResult(False, None, None, expanded, worst)


def _trace(parents, moves, idx: int) -> list[int]:
    path = []
    for level in range(len(parents) - 1, -1, -1):
        path.append(int(moves[level][idx]))
        idx = int(parents[level][idx])
    return path[::-1]


# ---------------------------------------------------------------------------
# Evaluation


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n == 0:
        return float("nan"), float("nan")
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def random_policy_run(target, task: SynthesisTask, steps: int, rng: np.random.Generator):
    """Uniformly random actions; returns ``(success, length)``."""
    m = dagger(np.asarray(target))
    if task.terminal(m):
        return True, 0
    for t in range(steps):
        m = task.actions.apply(m, int(rng.integers(len(task.actions))))
        if task.terminal(m):
            return True, t + 1
    return False, steps


def distance_guided_run(target, task: SynthesisTask, steps: int):
    """Greedy descent on the terminal distance itself (no learning)."""
    m = dagger(np.asarray(target))[None]
    if task.terminal(m[0]):
        return True, 0
    for t in range(steps):
        succ = task.actions.successors(m)[0]
        d = terminal_distance(succ, task.mode)
        i = int(np.argmin(d))
        m = succ[i][None]
        if d[i] <= task.env.epsilon:
            return True, t + 1
    return False, steps


@dataclass
class SuccessTable:
    rows: list[dict]

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUCCESS_COLUMNS)
        for r in self.rows:
            w.writerow([
                r["depth_bucket"], r["n_targets"], r["successes"], f"{r['rate']:.6f}",
                f"{r['wilson_lo']:.6f}", f"{r['wilson_hi']:.6f}",
                "nan" if math.isnan(r["mean_len"]) else f"{r['mean_len']:.4f}",
                f"{r['mean_ms']:.3f}" if timing else "0",
            ])
        return buf.getvalue()

    def write_csv(self, path, timing: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv(timing))

    def rate(self, bucket) -> float:
        for r in self.rows:
            if r["depth_bucket"] == str(bucket):
                return r["rate"]
        raise KeyError(bucket)

    def pooled_rate(self, buckets) -> float:
        keys = {str(b) for b in buckets}
        sel = [r for r in self.rows if r["depth_bucket"] in keys]
        n = sum(r["n_targets"] for r in sel)
        return sum(r["successes"] for r in sel) / n if n else float("nan")


def _row(label, outcomes):
    n = len(outcomes)
    k = sum(1 for o in outcomes if o[0])
    lo, hi = wilson_interval(k, n)
    lens = [o[1] for o in outcomes if o[0]]
    return {
        "depth_bucket": str(label), "n_targets": n, "successes": k,
        "rate": k / n if n else float("nan"), "wilson_lo": lo, "wilson_hi": hi,
        "mean_len": float(np.mean(lens)) if lens else float("nan"),
        "mean_ms": float(np.mean([o[2] for o in outcomes])) if n else float("nan"),
    }


def make_eval_targets(task: SynthesisTask, depths, per_depth: int, rng: np.random.Generator):
    return [(int(d), sample_target(task, int(d), rng)) for d in depths for _ in range(per_depth)]


def evaluate_success(net: NetworkState | None, targets, task: SynthesisTask,
                     cfg: SearchConfig = SearchConfig(), random_control: bool = False,
                     distance_control: bool = False, control_seed: int = 0,
                     workers: int = 1) -> SuccessTable:
    """Success rate per depth bucket over ``(depth, target)`` pairs.

    Control rows (uniform random actions, greedy distance descent) share the
    step budgets and are labelled ``<depth>:random`` / ``<depth>:distance``.
    """
    targets = list(targets)
    depths = sorted({d for d, _ in targets})
    rows = []
    if net is not None:
        def one(item):
            d, u = item
            res = synthesize(net, u, task, cfg, depth_hint=d)
            return res.success, res.steps, res.wall_ms

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                outs = list(pool.map(one, targets))
        else:
            outs = [one(t) for t in targets]
        for d in depths:
            rows.append(_row(d, [o for (dd, _), o in zip(targets, outs) if dd == d]))
    if random_control:
        rng = np.random.default_rng(control_seed)
        for d in depths:
            outs = []
            for dd, u in targets:
                if dd == d:
                    t0 = time.perf_counter()
                    ok, n = random_policy_run(u, task, cfg.steps_for(d, task.env.max_steps), rng)
                    outs.append((ok, n, 1000 * (time.perf_counter() - t0)))
            rows.append(_row(f"{d}:random", outs))
    if distance_control:
        for d in depths:
            outs = []
            for dd, u in targets:
                if dd == d:
                    t0 = time.perf_counter()
                    ok, n = distance_guided_run(u, task, cfg.steps_for(d, task.env.max_steps))
                    outs.append((ok, n, 1000 * (time.perf_counter() - t0)))
            rows.append(_row(f"{d}:distance", outs))
    return SuccessTable(rows)


def value_of(net: NetworkState, task: SynthesisTask, mats) -> np.ndarray:
    return network.forward(net, task.featurizer(np.asarray(mats)))[..., 0]
