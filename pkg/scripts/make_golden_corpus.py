"""Regenerate tests/data/golden_oracle_1q.json.

Minimum depths come from brute-force enumeration of every gate word up to
length 4, written here with its own gate matrices and distance so that it
shares no code with the package's search.
"""

import itertools
import json
from pathlib import Path

import numpy as np

R = 1 / np.sqrt(2)
W = np.exp(1j * np.pi / 4)
GATES = {
    "H": np.array([[R, R], [R, -R]], dtype=complex),
    "S": np.diag([1, 1j]),
    "Sdg": np.diag([1, -1j]),
    "T": np.diag([1, W]),
    "Tdg": np.diag([1, np.conj(W)]),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]]),
    "Z": np.diag([1, -1]).astype(complex),
}
EPSILON = 1e-2
MAX_DEPTH = 4


def distance(a, b):
    overlap = abs(np.trace(a @ b.conj().T)) ** 2 / 4
    return np.sqrt(max(0.0, 1.0 - overlap))


def word_unitary(word):
    u = np.eye(2, dtype=complex)
    for g in word:
        u = GATES[g] @ u
    return u


def min_depth(target):
    for depth in range(MAX_DEPTH + 1):
        for word in itertools.product(GATES, repeat=depth):
            if distance(word_unitary(word), target) <= EPSILON:
                return depth, list(word)
    return None, None


def main():
    rng = np.random.default_rng(20240611)
    names = list(GATES)
    quota = {d: 25 for d in range(1, MAX_DEPTH + 1)}
    targets = []
    while any(quota.values()):
        length = int(rng.integers(1, MAX_DEPTH + 3))
        word = [names[i] for i in rng.integers(len(names), size=length)]
        u = word_unitary(word)
        d, witness = min_depth(u)
        if not quota.get(d):
            continue
        quota[d] -= 1
        targets.append({
            "id": f"g{len(targets):03d}",
            "generated_word": word,
            "min_depth": d,
            "witness": witness,
            "unitary": {"n_qubits": 1, "re": u.real.tolist(), "im": u.imag.tolist()},
        })
    out = {"gates": names, "epsilon": EPSILON, "max_depth": MAX_DEPTH, "targets": targets}
    path = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden_oracle_1q.json"
    path.write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote {len(targets)} targets to {path}")


if __name__ == "__main__":
    main()
