"""Gate classification under global phase shifts.

Two small classifiers learn to name a gate from its matrix: one sees the
phase-canonical form, the other the raw matrix. Accuracy is then measured
with every gate multiplied by ``e^{i theta}`` on a grid of angles.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import network
from .encoding import raw_encode
from .gates import ALL_KINDS, build_action_set
from .linalg import canonicalize_batch
from .network import MlpSpec
from .search import state_key


@dataclass(frozen=True)
class PhaseExperimentConfig:
    n_qubits: int = 2
    epochs: int = 250
    samples_per_label: int = 64
    hidden: int = 128
    lr: float = 1e-3
    batch_size: int = 64
    grid_points: int = 16
    train_phases: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.train_phases not in ("random", "zero"):
            raise ValueError("train_phases must be 'random' or 'zero'")
        if self.epochs < 1 or self.samples_per_label < 1 or self.grid_points < 1:
            raise ValueError("epochs, samples_per_label and grid_points must be >= 1")


def gate_labels(n_qubits: int):
    """Distinct gates (up to global phase) with their labels."""
    acts = build_action_set(n_qubits, ALL_KINDS if n_qubits > 1 else ALL_KINDS[:8])
    labels, mats, seen = [], [], set()
    for a in acts:
        key = state_key(a.unitary[None])[0]
        if key in seen:
            continue
        seen.add(key)
        labels.append(a.label)
        mats.append(a.unitary)
    return labels, np.stack(mats)


def _features(mats: np.ndarray, invariant: bool) -> np.ndarray:
    if invariant:
        mats, _ = canonicalize_batch(mats)
    return raw_encode(mats)


def _fit(x, y, n_classes, cfg: PhaseExperimentConfig, seed: int):
    spec = MlpSpec(x.shape[1], (cfg.hidden,), n_classes, "relu", seed)
    net = network.init_network(spec)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), cfg.batch_size):
            b = order[i : i + cfg.batch_size]
            network.train_step(net, x[b], y[b], cfg.lr, loss="xent")
    return net


def accuracy(net, mats, labels, invariant: bool) -> float:
    logits = network.forward(net, _features(mats, invariant))
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class PhaseExperimentResult:
    labels: list[str]
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("theta", "model", "accuracy"))
        for r in self.rows:
            w.writerow((f"{r['theta']:.6f}", r["model"], f"{r['accuracy']:.6f}"))
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def accuracy_at(self, model: str, theta: float = 0.0) -> float:
        for r in self.rows:
            if r["model"] == model and abs(r["theta"] - theta) < 1e-12:
                return r["accuracy"]
        raise KeyError((model, theta))


def run_phase_experiment(cfg: PhaseExperimentConfig = PhaseExperimentConfig()) -> PhaseExperimentResult:
    names, gates = gate_labels(cfg.n_qubits)
    k = len(gates)
    rng = np.random.default_rng(cfg.seed)
    y = np.repeat(np.arange(k), cfg.samples_per_label)
    if cfg.train_phases == "random":
        phases = rng.uniform(0, 2 * np.pi, size=len(y))
    else:
        phases = np.zeros(len(y))
    train = gates[y] * np.exp(1j * phases)[:, None, None]
    models = {}
    for offset, (name, invariant) in enumerate((("invariant", True), ("raw", False))):
        models[name] = (_fit(_features(train, invariant), y, k, cfg, cfg.seed + offset), invariant)

    grid = 2 * np.pi * np.arange(cfg.grid_points) / cfg.grid_points
    rows = []
    labels = np.arange(k)
    for theta in grid:
        shifted = gates * np.exp(1j * theta)
        for name, (net, invariant) in models.items():
            rows.append({"theta": float(theta), "model": name,
                         "accuracy": accuracy(net, shifted, labels, invariant)})
    return PhaseExperimentResult(names, rows)
