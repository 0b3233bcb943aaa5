"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py``; the lines are repeated in the
terminal summary. ``python3 tests/test_acceptance.py`` runs them without pytest.
"""

import json
import re
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from gradcheck import max_relative_error

from unitary_forge import network
from unitary_forge.agent import Toggles, TrainConfig, ablation_run, dvnu_task, make_task, train_dvnu
from unitary_forge.cli import EXIT_OK, main
from unitary_forge.config import RunConfig
from unitary_forge.env import EnvConfig
from unitary_forge.gates import GateKind, lift_gate
from unitary_forge.linalg import (
    canonicalize_batch,
    diagonal_distance,
    haar_unitary,
    hs_distance,
    sample_perturbations,
    save_unitary,
    unitary_from_json,
)
from unitary_forge.network import MlpSpec, init_network
from unitary_forge.phase_experiment import PhaseExperimentConfig, run_phase_experiment
from unitary_forge.search import SearchConfig, bfs_oracle, evaluate_success, make_eval_targets

DATA = Path(__file__).parent / "data"
RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line, flush=True)


def hs(a, b):
    # written out here rather than imported, so replay does not lean on the library
    dim = a.shape[0]
    return float(np.sqrt(max(0.0, 1.0 - abs(np.trace(a @ b.conj().T)) ** 2 / dim**2)))


# 1 ------------------------------------------------------------------------

def test_phase_invariance():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        u = haar_unitary(1 + i % 3, rng)
        phases = rng.uniform(0, 2 * np.pi, 6)
        stack = np.concatenate([u[None], np.exp(1j * phases)[:, None, None] * u])
        canon, _ = canonicalize_batch(stack)
        worst = max(worst, float(np.abs(canon[1:] - canon[0]).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10.0
    report(1, ok, f"phase invariance, max entry gap {worst:.2e} (<= 1e-9), {elapsed:.2f} s (< 10 s)")
    assert ok


# 2 ------------------------------------------------------------------------

def test_perturbation_bounds():
    rng = np.random.default_rng(2)
    worst_trace, worst_excess = 0.0, -np.inf
    for eps in (1e-2, 1e-4, 1e-6):
        for n in (1, 2, 3):
            count = 334 if n < 3 else 332
            ps = sample_perturbations(n, eps, rng, count)
            vs = np.stack([haar_unitary(n, rng) for _ in range(count)])
            d_pv = hs_distance(ps @ vs, vs)
            d_p = hs_distance(ps, np.eye(1 << n))
            worst_trace = max(worst_trace, float(np.abs(d_pv - d_p).max()))
            worst_excess = max(worst_excess, float((d_p - eps).max()))
    ok = worst_trace <= 1e-12 and worst_excess <= 0.0
    report(2, ok, f"perturbations, trace identity gap {worst_trace:.2e} (<= 1e-12), "
                  f"max d(P,I) - eps = {worst_excess:.2e} (<= 0)")
    assert ok


# 3 ------------------------------------------------------------------------

def test_diagonal_distance_soundness():
    rng = np.random.default_rng(3)
    grid = 2 * np.pi * np.arange(512) / 512
    z = np.exp(1j * grid)
    premises = violations = 0
    for _ in range(200):
        # a grid-aligned diagonal times a small rotation about an equatorial axis
        k = rng.integers(512)
        diag = np.exp(1j * rng.uniform(0, 2 * np.pi)) * np.diag([1.0, z[k]])
        delta = 10 ** rng.uniform(-6, -0.5)
        axis = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(delta), -1j * np.exp(-1j * axis) * np.sin(delta)],
                        [-1j * np.exp(1j * axis) * np.sin(delta), np.cos(delta)]])
        s = diag @ rot
        eps = 10 ** rng.uniform(-6, -0.5)
        # |Tr(s D_phi^dag)| over the whole relative-phase grid at once
        tr = np.abs(s[0, 0] + s[1, 1] * z.conj())
        grid_min = np.sqrt(np.maximum(0.0, 1.0 - tr.max() ** 2 / 4))
        if diagonal_distance(s) <= eps:
            premises += 1
            violations += grid_min > eps
    h2 = lift_gate(GateKind.H, [2], 3)
    tof = np.eye(8, dtype=complex)
    tof[6:, 6:] = [[0, 1], [1, 0]]
    d_tof = diagonal_distance(h2 @ tof.conj().T @ h2)
    ok = violations == 0 and premises > 0 and d_tof < 1e-12
    report(3, ok, f"diagonal distance, {violations} violations in {premises} cases with d_D <= eps; "
                  f"Toffoli with two H gives d_D = {d_tof:.1e} (< 1e-12)")
    assert ok


# 4 ------------------------------------------------------------------------

def test_gradient_check():
    rng = np.random.default_rng(4)
    cases = [("relu", "mse", 1), ("tanh", "mse", 1), ("relu", "huber", 1), ("tanh", "huber", 1),
             ("relu", "q", 5), ("tanh", "q", 5), ("relu", "xent", 5), ("tanh", "xent", 5)]
    worst, largest = 0.0, 0
    for i, (act, loss, out) in enumerate(cases):
        din = int(rng.integers(3, 12))
        hidden = tuple(int(h) for h in rng.integers(4, 24, size=rng.integers(1, 3)))
        net = init_network(MlpSpec(din, hidden, out, act, seed=i))
        for b in net.biases:
            b[...] = rng.normal(size=b.shape) * 0.1
        assert net.n_params() <= 1000
        largest = max(largest, net.n_params())
        x = rng.normal(size=(9, din))
        if loss == "q":
            err = max_relative_error(net, x, rng.normal(size=9), action_ids=rng.integers(out, size=9))
        elif loss == "xent":
            err = max_relative_error(net, x, rng.integers(out, size=9), loss="xent")
        else:
            err = max_relative_error(net, x, rng.normal(size=(9, 1)) * 2, loss=loss)
        worst = max(worst, err)
    ok = worst <= 1e-5
    report(4, ok, f"gradient check, max relative error {worst:.2e} (<= 1e-5) over {len(cases)} nets, "
                  f"largest {largest} parameters")
    assert ok


# 5 ------------------------------------------------------------------------

def test_oracle_golden_corpus():
    corpus = json.loads((DATA / "golden_oracle_1q.json").read_text())
    task = make_task(EnvConfig(epsilon=corpus["epsilon"]), corpus["gates"])
    mismatches = []
    for item in corpus["targets"]:
        res = bfs_oracle(unitary_from_json(item["unitary"]), task, corpus["max_depth"])
        if res.min_depth != item["min_depth"]:
            mismatches.append((item["id"], res.min_depth, item["min_depth"]))
    ok = not mismatches and len(corpus["targets"]) == 100
    report(5, ok, f"oracle equivalence, {len(corpus['targets']) - len(mismatches)}/{len(corpus['targets'])} "
                  f"golden depths recovered")
    assert ok, mismatches[:5]


# 6 ------------------------------------------------------------------------

DESK_SEEDS = (0, 1, 2, 3)


@pytest.fixture(scope="module")
def desk_runs():
    """Four seeds of the full 1-qubit pipeline with a depth-10 curriculum."""
    env = EnvConfig()
    cfg = TrainConfig(iterations=60, depth_cap=10)
    task = dvnu_task(cfg, env)
    t0 = time.perf_counter()
    nets = [train_dvnu(cfg, env, np.random.default_rng(s))[0] for s in DESK_SEEDS]
    return nets, task, cfg, time.perf_counter() - t0


def test_desk_scale_training(desk_runs):
    nets, task, _, train_s = desk_runs
    t0 = time.perf_counter()
    targets = make_eval_targets(task, [1, 2, 3, 4, 5], 100, np.random.default_rng(99))
    solvable = [(d, u) for d, u in targets if bfs_oracle(u, task, 5).found]
    deep = make_eval_targets(task, [10], 100, np.random.default_rng(100))
    shallow_rates, deep_rates, random_rates = [], [], []
    for net in nets:
        shallow_rates.append(evaluate_success(net, solvable, task).pooled_rate([1, 2, 3, 4, 5]))
        table = evaluate_success(net, deep, task, random_control=True)
        deep_rates.append(table.rate(10))
        random_rates.append(table.rate("10:random"))
    minutes = (train_s + time.perf_counter() - t0) / 60
    shallow, deep_rate, baseline = np.mean(shallow_rates), np.mean(deep_rates), np.mean(random_rates)
    ok = shallow >= 0.90 and deep_rate >= 3 * baseline and minutes <= 30
    report(6, ok, f"desk-scale training, depth<=5 success {shallow:.3f} (>= 0.90) per seed "
                  f"{[round(r, 3) for r in shallow_rates]}; depth 10 {deep_rate:.3f} vs random {baseline:.3f} "
                  f"(>= 3x); {minutes:.1f} min (<= 30)")
    assert ok


# 7 ------------------------------------------------------------------------

def test_ablation_direction():
    env = EnvConfig()
    cfg = TrainConfig(iterations=40, depth_cap=8)
    corners = {"on": Toggles(True, True, True), "off": Toggles(False, False, False)}
    rates = {k: [] for k in corners}
    for name, toggles in corners.items():
        task = make_task(env, toggles=toggles, L=cfg.nerf_L, perturb_epsilon=cfg.perturb_epsilon)
        targets = make_eval_targets(task, range(1, 9), 40, np.random.default_rng(98))
        for seed in DESK_SEEDS:
            net, _ = ablation_run(toggles, cfg, env, np.random.default_rng(seed), hidden=(256, 128))
            rates[name].append(evaluate_success(net, targets, task).pooled_rate(range(1, 9)))
    on, off = np.mean(rates["on"]), np.mean(rates["off"])
    ok = off - on <= 0.10
    note = "on >= off" if on >= off else "off ahead, within the 10-point noise band"
    report(7, ok, f"ablation, all-on {on:.3f} {[round(r, 3) for r in rates['on']]} vs all-off {off:.3f} "
                  f"{[round(r, 3) for r in rates['off']]} ({note})")
    assert ok


# 8 ------------------------------------------------------------------------

def test_phase_shift_classification():
    cfg = PhaseExperimentConfig()
    assert cfg.epochs == 250 and cfg.grid_points == 16 and cfg.n_qubits == 2
    res = run_phase_experiment(cfg)
    inv = [r["accuracy"] for r in res.rows if r["model"] == "invariant"]
    raw0 = res.accuracy_at("raw", 0.0)
    ok = len(inv) == 16 and min(inv) == 1.0 and raw0 >= 0.99
    report(8, ok, f"phase-shift classification, invariant min accuracy {min(inv):.3f} over {len(inv)} phases "
                  f"(= 1), raw at theta 0 {raw0:.3f} (>= 0.99)")
    assert ok


# 9 ------------------------------------------------------------------------

_GATES = {
    "h": np.array([[1, 1], [1, -1]]) / np.sqrt(2), "x": np.array([[0, 1], [1, 0]]),
    "y": np.array([[0, -1j], [1j, 0]]), "z": np.diag([1, -1]), "s": np.diag([1, 1j]),
    "sdg": np.diag([1, -1j]), "t": np.diag([1, np.exp(1j * np.pi / 4)]),
    "tdg": np.diag([1, np.exp(-1j * np.pi / 4)]),
}


def qasm_unitary(text: str) -> np.ndarray:
    """Matrix of a QASM program, qubit 0 the most significant index bit."""
    n = int(re.search(r"qreg q\[(\d+)\];", text).group(1))
    dim = 1 << n
    u = np.eye(dim, dtype=complex)
    bit = lambda i, q: (i >> (n - 1 - q)) & 1  # noqa: E731
    for line in text.splitlines():
        m = re.fullmatch(r"(\w+)(?:\(([^)]*)\))? (q\[\d+\](?:,q\[\d+\])*);", line.strip())
        if not m or m.group(1) in ("qreg", "include"):
            continue
        name, arg = m.group(1), m.group(2)
        qs = [int(q) for q in re.findall(r"\d+", m.group(3))]
        g = np.zeros((dim, dim), dtype=complex)
        if name in ("cx", "cz"):
            c, t = qs
            for i in range(dim):
                if name == "cx":
                    g[i ^ (bit(i, c) << (n - 1 - t)), i] = 1
                else:
                    g[i, i] = -1 if bit(i, c) and bit(i, t) else 1
        else:
            (q,) = qs
            small = np.diag([np.exp(-0.5j * float(arg)), np.exp(0.5j * float(arg))]) if name == "rz" else _GATES[name]
            for i in range(dim):
                for j in range(dim):
                    if all(bit(i, p) == bit(j, p) for p in range(n) if p != q):
                        g[i, j] = small[bit(i, q), bit(j, q)]
        u = g @ u
    return u


def test_end_to_end_replay(desk_runs, tmp_path, capsys):
    nets, _, cfg, _ = desk_runs
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    RunConfig.from_dict({"train": {"depth_cap": cfg.depth_cap, "iterations": cfg.iterations}}).save(run_dir / "config.json")
    network.save(nets[0], run_dir / "weights.dvnu")
    corpus = json.loads((DATA / "golden_oracle_1q.json").read_text())
    jobs = []
    for item in corpus["targets"]:
        path = tmp_path / f"{item['id']}.json"
        save_unitary(unitary_from_json(item["unitary"]), path)
        jobs.append((run_dir, path, []))
    # the 3-qubit diagonalization case goes through a freshly trained run
    code = main(["train", "--out", str(tmp_path / "diag"), "--mode", "diagonalization", "--qubits", "3",
                 "--epsilon", "1e-6", "--workers", "1", "--set", "train.iterations=1",
                 "--set", "train.episodes_per_iter=8", "--set", "train.updates_per_iter=2",
                 "--set", "net.hidden=[16]"])
    diag_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])
    assert code == EXIT_OK
    tof = np.eye(8, dtype=complex)
    tof[6:, 6:] = [[0, 1], [1, 0]]
    save_unitary(tof, tmp_path / "toffoli.json")
    jobs.append((diag_dir, tmp_path / "toffoli.json", ["--beam", "80", "--max-steps", "2"]))

    emitted = violations = 0
    worst = 0.0
    for rd, target_path, extra in jobs:
        main(["synth", "--weights", str(rd / "weights.dvnu"), "--target", str(target_path), *extra])
        capsys.readouterr()
        rep = json.loads((rd / "circuits" / f"{target_path.stem}.report.json").read_text())
        if not rep["success"]:
            continue
        emitted += 1
        target = json.loads(target_path.read_text())
        target = np.array(target["re"]) + 1j * np.array(target["im"])
        d = hs(qasm_unitary((rd / "circuits" / f"{target_path.stem}.qasm").read_text()), target)
        worst = max(worst, d)
        violations += d > 2 * rep["epsilon"]
    ok = violations == 0 and emitted > 0
    report(9, ok, f"end-to-end replay, {violations} violations over {emitted} emitted circuits "
                  f"({len(jobs)} targets), worst d_HS {worst:.2e}")
    assert ok


# 10 -----------------------------------------------------------------------

def test_determinism(tmp_path, capsys):
    small = ["--set", "train.iterations=4", "--set", "train.episodes_per_iter=16",
             "--set", "train.updates_per_iter=10", "--set", "net.hidden=[64,32]"]
    dirs = []
    for rep in range(2):
        code = main(["train", "--workers", "1", "--seed", "7", "--out", str(tmp_path / f"r{rep}"), *small])
        assert code == EXIT_OK
        dirs.append(Path(capsys.readouterr().out.strip().splitlines()[-1]))
    same = {f: (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in ("metrics.csv", "weights.dvnu")}
    ok = all(same.values())
    report(10, ok, "determinism, " + ", ".join(f"{f} {'identical' if v else 'differs'}" for f, v in same.items()))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
