"""Clifford+T gates, qubit placement, action sets, circuits and random
target generators."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .linalg import dagger, diagonal_from_angles

_R = 1 / np.sqrt(2)


class GateKind(str, enum.Enum):
    H = "H"
    X = "X"
    Y = "Y"
    Z = "Z"
    S = "S"
    Sdg = "Sdg"
    T = "T"
    Tdg = "Tdg"
    CNOT = "CNOT"
    CZ = "CZ"

    @property
    def arity(self) -> int:
        return 2 if self in (GateKind.CNOT, GateKind.CZ) else 1


BASE_MATRICES = {
    GateKind.H: np.array([[_R, _R], [_R, -_R]], dtype=np.complex128),
    GateKind.X: np.array([[0, 1], [1, 0]], dtype=np.complex128),
    GateKind.Y: np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    GateKind.Z: np.diag([1, -1]).astype(np.complex128),
    GateKind.S: np.diag([1, 1j]),
    GateKind.Sdg: np.diag([1, -1j]),
    GateKind.T: np.diag([1, np.exp(1j * np.pi / 4)]),
    GateKind.Tdg: np.diag([1, np.exp(-1j * np.pi / 4)]),
    GateKind.CNOT: np.array(
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=np.complex128
    ),
    GateKind.CZ: np.diag([1, 1, 1, -1]).astype(np.complex128),
}

INVERSE_KIND = {
    GateKind.H: GateKind.H,
    GateKind.X: GateKind.X,
    GateKind.Y: GateKind.Y,
    GateKind.Z: GateKind.Z,
    GateKind.S: GateKind.Sdg,
    GateKind.Sdg: GateKind.S,
    GateKind.T: GateKind.Tdg,
    GateKind.Tdg: GateKind.T,
    GateKind.CNOT: GateKind.CNOT,
    GateKind.CZ: GateKind.CZ,
}

CLIFFORD_KINDS = frozenset(
    {GateKind.H, GateKind.X, GateKind.Y, GateKind.Z, GateKind.S, GateKind.Sdg, GateKind.CNOT, GateKind.CZ}
)
ONE_QUBIT_KINDS = (
    GateKind.H, GateKind.X, GateKind.Y, GateKind.Z,
    GateKind.S, GateKind.Sdg, GateKind.T, GateKind.Tdg,
)
ALL_KINDS = ONE_QUBIT_KINDS + (GateKind.CNOT, GateKind.CZ)

# The 24 single-qubit Clifford elements modulo phase, as shortest words over
# {H, S, Sdg, X, Y, Z} in application order.
CLIFFORD_WORDS: tuple[tuple[str, ...], ...] = (
    (), ("H",), ("S",), ("Sdg",), ("X",), ("Y",), ("Z",),
    ("H", "S"), ("H", "Sdg"), ("H", "X"), ("H", "Y"), ("H", "Z"),
    ("S", "H"), ("S", "X"), ("S", "Y"), ("Sdg", "H"),
    ("H", "S", "H"), ("H", "S", "X"), ("H", "S", "Y"), ("H", "Sdg", "H"),
    ("S", "H", "Sdg"), ("S", "H", "Y"), ("S", "H", "Z"), ("Sdg", "H", "S"),
)


class GateError(ValueError):
    pass


def lift_gate(kind: GateKind, qubits, n_qubits: int) -> np.ndarray:
    """Embed a 1- or 2-qubit gate into ``n_qubits`` (qubit 0 most significant)."""
    kind = GateKind(kind)
    qubits = tuple(int(q) for q in qubits)
    if len(qubits) != kind.arity:
        raise GateError(f"{kind.value} acts on {kind.arity} qubit(s), got {list(qubits)}")
    if len(set(qubits)) != len(qubits):
        raise GateError(f"duplicate qubit indices {list(qubits)}")
    if any(q < 0 or q >= n_qubits for q in qubits):
        raise GateError(f"qubit index out of range for {n_qubits} qubit(s): {list(qubits)}")
    return _lift_cached(kind, qubits, n_qubits).copy()


@lru_cache(maxsize=None)
def _lift_cached(kind: GateKind, qubits: tuple[int, ...], n_qubits: int) -> np.ndarray:
    base = BASE_MATRICES[kind]
    k = len(qubits)
    rest = [q for q in range(n_qubits) if q not in qubits]
    # act on the named axes, then restore qubit order
    perm = list(qubits) + rest
    full = np.kron(base, np.eye(1 << (n_qubits - k)))
    full = full.reshape([2] * (2 * n_qubits))
    inv = np.argsort(perm)
    axes = list(inv) + [n_qubits + i for i in inv]
    full = full.transpose(axes)
    dim = 1 << n_qubits
    return full.reshape(dim, dim)


@dataclass(frozen=True)
class GateAction:
    kind: GateKind
    qubits: tuple[int, ...]
    unitary: np.ndarray = field(repr=False, compare=False)
    action_id: int = -1
    side: str | None = None

    @property
    def label(self) -> str:
        q = ",".join(str(i) for i in self.qubits)
        tag = f"@{self.side}" if self.side else ""
        return f"{self.kind.value}[{q}]{tag}"


def make_gate(kind, qubits, n_qubits: int, side: str | None = None, action_id: int = -1) -> GateAction:
    kind = GateKind(kind)
    qubits = tuple(int(q) for q in qubits)
    return GateAction(kind, qubits, lift_gate(kind, qubits, n_qubits), action_id, side)


@dataclass(frozen=True)
class ActionSet:
    n_qubits: int
    actions: tuple[GateAction, ...]
    side_mode: str = "inversion"

    def __post_init__(self):
        mats = np.stack([a.unitary for a in self.actions])
        mats.setflags(write=False)
        object.__setattr__(self, "matrices", mats)
        right = np.array([a.side == "right" for a in self.actions])
        right.setflags(write=False)
        object.__setattr__(self, "right_mask", right)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> GateAction:
        return self.actions[i]

    def __iter__(self):
        return iter(self.actions)

    @property
    def dim(self) -> int:
        return 1 << self.n_qubits

    def kinds(self) -> list[str]:
        seen = []
        for a in self.actions:
            if a.kind.value not in seen:
                seen.append(a.kind.value)
        return seen

    def successors(self, states: np.ndarray) -> np.ndarray:
        """All one-gate successors; shape ``(len(states), len(self), dim, dim)``.

        Left-side actions premultiply, right-side actions postmultiply.
        """
        states = np.asarray(states)
        left = np.einsum("aij,bjk->baik", self.matrices, states)
        if not self.right_mask.any():
            return left
        right = np.einsum("bij,ajk->baik", states, self.matrices)
        return np.where(self.right_mask[None, :, None, None], right, left)

    def apply(self, state: np.ndarray, action_id: int) -> np.ndarray:
        a = self.actions[action_id]
        return state @ a.unitary if a.side == "right" else a.unitary @ state


def build_action_set(n_qubits: int, kinds, side_mode: str = "inversion") -> ActionSet:
    if n_qubits not in (1, 2, 3):
        raise GateError(f"n_qubits must be 1, 2 or 3, got {n_qubits}")
    kinds = [GateKind(k) for k in kinds]
    if not kinds:
        raise GateError("empty gate kind list")
    if side_mode not in ("inversion", "left_right"):
        raise GateError(f"unknown side mode {side_mode!r}")
    placements = []
    for kind in kinds:
        if kind.arity == 1:
            placements.extend((kind, (q,)) for q in range(n_qubits))
        else:
            placements.extend(
                (kind, (a, b)) for a in range(n_qubits) for b in range(n_qubits) if a != b
            )
    sides = ("left", "right") if side_mode == "left_right" else (None,)
    actions = []
    seen = set()
    for side in sides:
        for kind, qubits in placements:
            if (kind, qubits, side) in seen:
                continue
            seen.add((kind, qubits, side))
            actions.append(make_gate(kind, qubits, n_qubits, side, action_id=len(actions)))
    return ActionSet(n_qubits, tuple(actions), side_mode)


def default_kinds(n_qubits: int) -> list[GateKind]:
    return list(ONE_QUBIT_KINDS) if n_qubits == 1 else list(ALL_KINDS)


@dataclass
class Circuit:
    """Gates in application order; ``diag_theta`` places ``D_theta^-1``
    before gate index ``diag_position`` when set."""

    n_qubits: int
    gates: list[GateAction] = field(default_factory=list)
    diag_theta: np.ndarray | None = None
    diag_position: int = 0

    def __len__(self) -> int:
        return len(self.gates)

    def unitary(self) -> np.ndarray:
        return unitary_of(self)

    def append(self, gate: GateAction) -> None:
        self.gates.append(gate)


def unitary_of(circuit: Circuit) -> np.ndarray:
    """``a_t ... a_1`` with the inverse diagonal block inserted at its marker."""
    dim = 1 << circuit.n_qubits
    u = np.eye(dim, dtype=np.complex128)
    for i, g in enumerate(circuit.gates):
        if circuit.diag_theta is not None and i == circuit.diag_position:
            u = dagger(diagonal_from_angles(circuit.diag_theta)) @ u
        u = g.unitary @ u
    if circuit.diag_theta is not None and circuit.diag_position >= len(circuit.gates):
        u = dagger(diagonal_from_angles(circuit.diag_theta)) @ u
    return u


def clifford_table() -> list[np.ndarray]:
    out = []
    for word in CLIFFORD_WORDS:
        u = np.eye(2, dtype=np.complex128)
        for g in word:
            u = BASE_MATRICES[GateKind(g)] @ u
        out.append(u)
    return out


def random_clifford_t_circuit(
    n_qubits: int, depth: int, rng: np.random.Generator, action_set: ActionSet | None = None
) -> Circuit:
    """Random Clifford+T circuit with exactly ``depth`` primitive gates.

    One qubit: a random Clifford element (as its word) followed by T or Tdg,
    repeated. More qubits: i.i.d. draws from ``action_set`` never placing a
    gate directly after its own inverse.
    """
    if depth < 1:
        raise GateError("depth must be >= 1")
    circ = Circuit(n_qubits)
    if n_qubits == 1 and action_set is None:
        while len(circ) < depth:
            word = CLIFFORD_WORDS[int(rng.integers(len(CLIFFORD_WORDS)))]
            for g in word:
                if len(circ) < depth:
                    circ.append(make_gate(g, (0,), 1))
            if len(circ) < depth:
                circ.append(make_gate(GateKind.T if rng.integers(2) == 0 else GateKind.Tdg, (0,), 1))
        return circ
    if action_set is None:
        action_set = build_action_set(n_qubits, default_kinds(n_qubits))
    pool = [a for a in action_set if a.side in (None, "left")]
    prev = None
    while len(circ) < depth:
        a = pool[int(rng.integers(len(pool)))]
        if prev is not None and a.qubits == prev.qubits and a.kind == INVERSE_KIND[prev.kind]:
            continue
        circ.append(make_gate(a.kind, a.qubits, n_qubits))
        prev = a
    return circ


def rz_tensor(thetas) -> np.ndarray:
    """``R_Z(theta_0) (x) ... (x) R_Z(theta_{n-1})`` with ``R_Z(t) = diag(1, e^{it})``."""
    out = np.ones(1, dtype=np.complex128)
    for t in thetas:
        out = np.kron(out, np.array([1.0, np.exp(1j * t)]))
    return np.diag(out)


def random_diag_target(
    n_qubits: int,
    max_outer_gates: int,
    rng: np.random.Generator,
    return_parts: bool = False,
    total: int | None = None,
):
    """``A . R_Z^{(x)n}(theta) . B`` with random Clifford+T circuits ``A`` and ``B``.

    The combined gate count of ``A`` and ``B`` is ``total`` when given,
    otherwise uniform in ``[2, max_outer_gates]``.
    """
    if max_outer_gates < 2:
        raise GateError("max_outer_gates must be >= 2")
    if total is None:
        total = int(rng.integers(2, max_outer_gates + 1))
    elif not 2 <= total <= max_outer_gates:
        raise GateError("total must lie in [2, max_outer_gates]")
    len_a = int(rng.integers(1, total))
    a = random_clifford_t_circuit(n_qubits, len_a, rng)
    b = random_clifford_t_circuit(n_qubits, total - len_a, rng)
    thetas = rng.uniform(0.0, 2 * np.pi, size=n_qubits)
    u = unitary_of(a) @ rz_tensor(thetas) @ unitary_of(b)
    if return_parts:
        return u, a, b, thetas
    return u


# ---------------------------------------------------------------------------
# Serialization


def circuit_to_json(circuit: Circuit) -> list:
    out: list = []
    for i, g in enumerate(circuit.gates):
        if circuit.diag_theta is not None and i == circuit.diag_position:
            out.append({"diag_theta": [float(t) for t in circuit.diag_theta]})
        out.append({"kind": g.kind.value, "qubits": list(g.qubits), "side": g.side})
    if circuit.diag_theta is not None and circuit.diag_position >= len(circuit.gates):
        out.append({"diag_theta": [float(t) for t in circuit.diag_theta]})
    return out


def circuit_from_json(items, n_qubits: int | None = None) -> Circuit:
    if not isinstance(items, list):
        raise GateError("circuit file must hold a JSON list")
    if n_qubits is None:
        n_qubits = 1
        for item in items:
            if isinstance(item, dict) and "diag_theta" in item:
                n_qubits = max(n_qubits, len(item["diag_theta"]).bit_length() - 1)
            elif isinstance(item, dict) and "qubits" in item:
                n_qubits = max(n_qubits, max(item["qubits"], default=0) + 1)
    circ = Circuit(n_qubits)
    for pos, item in enumerate(items):
        if not isinstance(item, dict):
            raise GateError(f"entry {pos}: expected an object")
        if "diag_theta" in item:
            if circ.diag_theta is not None:
                raise GateError(f"entry {pos}: more than one diagonal block")
            theta = np.asarray(item["diag_theta"], dtype=np.float64)
            if theta.shape != (1 << n_qubits,):
                raise GateError(f"entry {pos}: 'diag_theta' must have {1 << n_qubits} angles")
            circ.diag_theta = theta
            circ.diag_position = len(circ.gates)
            continue
        try:
            kind = GateKind(item["kind"])
        except (KeyError, ValueError):
            raise GateError(f"entry {pos}: bad or missing 'kind'") from None
        side = item.get("side")
        if side not in (None, "left", "right"):
            raise GateError(f"entry {pos}: bad 'side' {side!r}")
        circ.append(make_gate(kind, item.get("qubits", []), n_qubits, side))
    return circ


def save_circuit(circuit: Circuit, path) -> None:
    Path(path).write_text(json.dumps(circuit_to_json(circuit), indent=1))


def load_circuit(path, n_qubits: int | None = None) -> Circuit:
    return circuit_from_json(json.loads(Path(path).read_text()), n_qubits)


_QASM_NAMES = {
    GateKind.H: "h", GateKind.X: "x", GateKind.Y: "y", GateKind.Z: "z",
    GateKind.S: "s", GateKind.Sdg: "sdg", GateKind.T: "t", GateKind.Tdg: "tdg",
    GateKind.CNOT: "cx", GateKind.CZ: "cz",
}


def _wrap_angle(x: float) -> float:
    x = float(np.angle(np.exp(1j * x)))
    return np.pi if np.isclose(x, -np.pi) else x


def diagonal_ops(theta: np.ndarray, n_qubits: int) -> list[tuple]:
    """Decompose ``exp(+i theta . sigma)`` into CNOT ladders and RZ rotations.

    Ops are ``("cx", c, t)`` or ``("rz", angle, q)`` in application order,
    with ``rz(l) = exp(-i l Z / 2)``. The identity component is a global
    phase and is dropped.
    """
    ops: list[tuple] = []
    for k in range(1, 1 << n_qubits):
        lam = _wrap_angle(-2.0 * theta[k])
        if abs(lam) < 1e-12:
            continue
        support = [q for q in range(n_qubits) if (k >> (n_qubits - 1 - q)) & 1]
        last = support[-1]
        ladder = [("cx", q, last) for q in support[:-1]]
        ops.extend(ladder)
        ops.append(("rz", lam, last))
        ops.extend(reversed(ladder))
    return ops


def flat_ops(circuit: Circuit) -> list[tuple]:
    """Circuit as primitive ops ``(name, args...)`` in application order."""
    ops: list[tuple] = []

    def emit_diag():
        ops.extend(diagonal_ops(np.asarray(circuit.diag_theta), circuit.n_qubits))

    for i, g in enumerate(circuit.gates):
        if circuit.diag_theta is not None and i == circuit.diag_position:
            emit_diag()
        ops.append((_QASM_NAMES[g.kind],) + tuple(g.qubits))
    if circuit.diag_theta is not None and circuit.diag_position >= len(circuit.gates):
        emit_diag()
    return ops


def to_qasm(circuit: Circuit) -> str:
    lines = [
        "OPENQASM 2.0;",
        'include "qelib1.inc";',
        "// qubit 0 is the most significant bit of the unitary's index",
        f"qreg q[{circuit.n_qubits}];",
    ]
    for op in flat_ops(circuit):
        if op[0] == "rz":
            lines.append(f"rz({op[1]!r}) q[{op[2]}];")
        else:
            args = ",".join(f"q[{q}]" for q in op[1:])
            lines.append(f"{op[0]} {args};")
    return "\n".join(lines) + "\n"


def gate_counts(circuit: Circuit) -> dict:
    """Total, T, Clifford and residual-rotation counts of the flattened circuit.

    An RZ at an odd multiple of pi/4 counts as one T (it is T or Tdg up to a
    Clifford); multiples of pi/2 are Clifford; any other angle is reported
    under ``rz_count``.
    """
    t = cliff = rz = 0
    for op in flat_ops(circuit):
        name = op[0]
        if name in ("t", "tdg"):
            t += 1
        elif name == "rz":
            m = op[1] / (np.pi / 4)
            if abs(m - round(m)) > 1e-9:
                rz += 1
            elif round(m) % 2:
                t += 1
            else:
                cliff += 1
        else:
            cliff += 1
    return {"total": t + cliff + rz, "t_count": t, "clifford_count": cliff, "rz_count": rz}


def flat_unitary(circuit: Circuit) -> np.ndarray:
    """Unitary rebuilt from :func:`flat_ops`, up to global phase."""
    n = circuit.n_qubits
    u = np.eye(1 << n, dtype=np.complex128)
    names = {v: k for k, v in _QASM_NAMES.items()}
    for op in flat_ops(circuit):
        if op[0] == "rz":
            lam, q = op[1], op[2]
            m = np.diag([np.exp(-0.5j * lam), np.exp(0.5j * lam)])
            # rz on one qubit, lifted by hand
            full = np.kron(np.kron(np.eye(1 << q), m), np.eye(1 << (n - 1 - q)))
            u = full @ u
        else:
            u = lift_gate(names[op[0]], op[1:], n) @ u
    return u

