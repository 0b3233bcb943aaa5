"""Dense unitary algebra: distances, phase canonicalization, diagonal
distance and small random perturbations.

Unitaries are plain ``complex128`` numpy arrays of shape ``(2**n, 2**n)``.
Most functions also accept a leading batch axis, which the training loop
relies on for speed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNITARY_ATOL = 1e-10
MU_FLOOR = 1e-8
TIE_TOL = 1e-10
ZERO_REAL_TOL = 1e-12
NEAREST_DIAGONAL_GUARD = 2.0


class UnitaryError(ValueError):
    """Raised for malformed or non-unitary matrices."""


@dataclass(frozen=True)
class Perturbation:
    matrix: np.ndarray
    epsilon_bound: float


@dataclass(frozen=True)
class PhaseCanonicalForm:
    matrix: np.ndarray
    applied_phase: float


def n_qubits_of(u: np.ndarray) -> int:
    dim = u.shape[-1]
    n = dim.bit_length() - 1
    if dim < 2 or 1 << n != dim or u.shape[-2] != dim:
        raise UnitaryError(f"matrix of shape {u.shape} is not 2^n x 2^n")
    return n


def unitarity_error(u: np.ndarray) -> float:
    u = np.asarray(u)
    eye = np.eye(u.shape[-1])
    return float(np.max(np.abs(u @ np.conj(np.swapaxes(u, -1, -2)) - eye)))


def as_unitary(data, atol: float = UNITARY_ATOL) -> np.ndarray:
    """Validate ``data`` as a unitary and return it as complex128."""
    u = np.array(data, dtype=np.complex128)
    if u.ndim != 2:
        raise UnitaryError(f"expected a 2-d matrix, got {u.ndim} dimensions")
    n_qubits_of(u)
    if not np.all(np.isfinite(u)):
        raise UnitaryError("matrix has non-finite entries")
    err = unitarity_error(u)
    if err > atol:
        raise UnitaryError(f"matrix is not unitary (max |UU^dag - I| = {err:.3e})")
    return u


def dagger(u: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(u, -1, -2))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise UnitaryError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def _scalar_deviation(w: np.ndarray) -> np.ndarray:
    # ||w - (tr w / N) I||_F^2 / N equals 1 - |tr w|^2 / N^2 for unitary w, but
    # keeps full relative precision when w is close to a multiple of I
    dim = w.shape[-1]
    m = np.trace(w, axis1=-2, axis2=-1) / dim
    dev = w - m[..., None, None] * np.eye(dim)
    return np.clip(np.sum(np.abs(dev) ** 2, axis=(-2, -1)) / dim, 0.0, 1.0)


def hs_distance(a: np.ndarray, b: np.ndarray) -> float | np.ndarray:
    """Hilbert-Schmidt distance ``sqrt(1 - |Tr(a b^dag)|^2 / 4^n)``.

    Zero iff ``a`` and ``b`` agree up to a global phase. Broadcasts over a
    leading batch axis.
    """
    if a.shape[-2:] != b.shape[-2:]:
        raise UnitaryError(f"dimension mismatch: {a.shape} vs {b.shape}")
    # both product orders, so that swapping the arguments gives the identical float
    dev = np.minimum(_scalar_deviation(a @ dagger(b)), _scalar_deviation(b @ dagger(a)))
    val = np.sqrt(dev)
    return float(val) if np.ndim(val) == 0 else val


def distance_to_identity(u: np.ndarray) -> float | np.ndarray:
    val = np.sqrt(_scalar_deviation(u))
    return float(val) if np.ndim(val) == 0 else val


def _convention_entries(w: np.ndarray) -> np.ndarray:
    """Row-0 entry of each matrix picked by the first-maximum-magnitude rule."""
    row = w[:, 0, :]
    mags = np.abs(row)
    best = np.zeros(len(w), dtype=np.intp)
    best_mag = mags[:, 0].copy()
    for j in range(1, row.shape[1]):
        better = mags[:, j] > best_mag + TIE_TOL
        best[better] = j
        best_mag[better] = mags[better, j]
    return row[np.arange(len(w)), best]


def canonicalize_batch(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global-phase canonical forms of a stack of unitaries.

    Returns ``(w, phase)`` with ``w = exp(-i phase) * u``.
    """
    u = np.asarray(u, dtype=np.complex128)
    single = u.ndim == 2
    if single:
        u = u[None]
    mu = np.mean(u * u, axis=(-2, -1))
    phase = 0.5 * np.angle(mu)

    # mu' vanishes for e.g. diag(1, i); dephase by the convention entry itself
    degenerate = np.abs(mu) < MU_FLOOR
    if np.any(degenerate):
        phase[degenerate] = np.angle(_convention_entries(u[degenerate]))

    w = u * np.exp(-1j * phase)[:, None, None]
    entry = _convention_entries(w)
    flip = entry.real < -ZERO_REAL_TOL
    # real part numerically zero: the entry is +-i|x|, settle the sign on the imaginary part
    flip |= (np.abs(entry.real) <= ZERO_REAL_TOL) & (entry.imag < 0)
    w[flip] *= -1
    phase = np.where(flip, phase + np.pi, phase)
    phase = np.angle(np.exp(1j * phase))
    if single:
        return w[0], phase[0]
    return w, phase


def phase_canonicalize(u: np.ndarray) -> PhaseCanonicalForm:
    """Representative of ``u`` modulo global phase.

    Squares ``u`` element-wise, takes the phase of the mean, halves it and
    dephases ``u`` by its conjugate. The sign ambiguity left over is fixed
    by requiring the first maximum-magnitude entry of row 0 to have
    non-negative real part.
    """
    w, phase = canonicalize_batch(u)
    return PhaseCanonicalForm(matrix=w, applied_phase=float(phase))


def diagonal_distance(s: np.ndarray) -> float | np.ndarray:
    """Largest off-diagonal row norm, ``max_i sqrt(sum_{j != i} |s_ij|^2)``.

    Upper-bounds the distance from ``s`` to the closest diagonal unitary.
    """
    s = np.asarray(s)
    abs2 = np.abs(s) ** 2
    diag = np.abs(np.diagonal(s, axis1=-2, axis2=-1)) ** 2
    off = np.sum(abs2, axis=-1) - diag
    val = np.sqrt(np.max(np.maximum(off, 0.0), axis=-1))
    return float(val) if np.ndim(val) == 0 else val


def z_string_basis(n_qubits: int) -> np.ndarray:
    """Diagonals of all n-fold tensor products of I and Z, as a +-1 matrix.

    Row ``k`` holds the diagonal of the product whose Z factors sit on the
    qubits given by the bits of ``k`` (qubit 0 is the most significant bit).
    """
    dim = 1 << n_qubits
    idx = np.arange(dim)
    parity = np.array([bin(k & i).count("1") & 1 for k in idx for i in idx]).reshape(dim, dim)
    return 1 - 2 * parity.astype(np.float64)


def diagonal_from_angles(theta: np.ndarray) -> np.ndarray:
    """``exp(-i theta . sigma)`` for the I/Z tensor-product basis."""
    theta = np.asarray(theta, dtype=np.float64)
    n = len(theta).bit_length() - 1
    return np.diag(np.exp(-1j * (theta @ z_string_basis(n))))


def angles_from_phases(phases: np.ndarray) -> np.ndarray:
    """Angles ``theta`` with ``exp(-i theta . sigma) = diag(exp(i phases))``."""
    phases = np.asarray(phases, dtype=np.float64)
    basis = z_string_basis(len(phases).bit_length() - 1)
    # the basis is a symmetric Hadamard matrix: basis @ basis = dim * I
    return -(basis @ phases) / len(phases)


def nearest_diagonal(s: np.ndarray, min_diag: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Phase projection of the diagonal of a near-diagonal unitary.

    Returns ``(D, theta)`` with ``D = diag(s_ii / |s_ii|) = exp(-i theta . sigma)``.
    """
    d = np.diagonal(s).copy()
    mags = np.abs(d)
    if np.any(mags < min_diag):
        raise UnitaryError("state is not near-diagonal (vanishing diagonal entry)")
    phases = np.angle(d)
    theta = angles_from_phases(phases)
    return np.diag(np.exp(1j * phases)), theta


def sample_perturbations(
    n_qubits: int, epsilon: float, rng: np.random.Generator, count: int, bisect_steps: int = 60
) -> np.ndarray:
    """Stack of ``count`` random unitaries with ``d_HS(P, I)`` in ``[0.8 eps, eps]``.

    Each ``P = exp(-i delta H)`` for a random traceless unit-Frobenius
    Hermitian ``H``; ``delta`` is bisected onto the band.
    """
    if not 0.0 < epsilon < 0.5:
        raise ValueError(f"epsilon must lie in (0, 0.5), got {epsilon}")
    dim = 1 << n_qubits
    g = rng.standard_normal((count, dim, dim)) + 1j * rng.standard_normal((count, dim, dim))
    h = (g + dagger(g)) / 2
    # the trace part only contributes a global phase
    h -= (np.trace(h, axis1=1, axis2=2).real / dim)[:, None, None] * np.eye(dim)
    h /= np.linalg.norm(h, axis=(1, 2))[:, None, None]
    evals, evecs = np.linalg.eigh(h)

    def dist(delta: np.ndarray) -> np.ndarray:
        z = np.exp(-1j * delta[:, None] * evals)
        return np.sqrt(np.mean(np.abs(z - z.mean(axis=1, keepdims=True)) ** 2, axis=1))

    # bisection keeps dist(lo) < 0.8 eps and dist(hi) > eps
    top = np.max(np.abs(evals), axis=1)
    hi = 0.5 * np.pi / top
    hi = np.where(dist(hi) <= epsilon, np.pi / top, hi)
    lo = np.zeros(count)
    done = np.zeros(count, dtype=bool)
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        d = dist(mid)
        over = ~done & (d > epsilon)
        under = ~done & (d < 0.8 * epsilon)
        hit = ~done & ~over & ~under
        hi = np.where(over, mid, hi)
        lo = np.where(under | hit, mid, lo)
        done |= hit
        if done.all():
            break
    p = (evecs * np.exp(-1j * lo[:, None] * evals)[:, None, :]) @ dagger(evecs)
    if np.any(distance_to_identity(p) > epsilon):
        raise AssertionError("perturbation sampler overshot its bound")
    return p


def sample_perturbation(n_qubits: int, epsilon: float, rng: np.random.Generator) -> Perturbation:
    """Random unitary ``P`` with ``0.8 epsilon <= d_HS(P, I) <= epsilon``."""
    p = sample_perturbations(n_qubits, epsilon, rng, 1)[0]
    return Perturbation(matrix=p, epsilon_bound=epsilon)


def haar_unitary(n_qubits: int, rng: np.random.Generator) -> np.ndarray:
    dim = 1 << n_qubits
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def polar_project(u: np.ndarray) -> np.ndarray:
    """Closest unitary to ``u`` (removes accumulated round-off)."""
    w, _, vh = np.linalg.svd(u)
    return w @ vh


def unitary_to_json(u: np.ndarray) -> dict:
    return {
        "n_qubits": n_qubits_of(u),
        "re": np.real(u).tolist(),
        "im": np.imag(u).tolist(),
    }


def unitary_from_json(obj) -> np.ndarray:
    if not isinstance(obj, dict):
        raise UnitaryError("unitary file must hold a JSON object")
    for key in ("n_qubits", "re", "im"):
        if key not in obj:
            raise UnitaryError(f"missing field '{key}'")
    n = obj["n_qubits"]
    if not isinstance(n, int) or isinstance(n, bool) or not 1 <= n <= 3:
        raise UnitaryError(f"field 'n_qubits' must be an integer in 1..3, got {n!r}")
    dim = 1 << n
    try:
        re = np.array(obj["re"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise UnitaryError(f"field 're' is not a numeric matrix: {exc}") from None
    try:
        im = np.array(obj["im"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise UnitaryError(f"field 'im' is not a numeric matrix: {exc}") from None
    for key, arr in (("re", re), ("im", im)):
        if arr.shape != (dim, dim):
            raise UnitaryError(f"field '{key}' has shape {arr.shape}, expected {(dim, dim)}")
    return as_unitary(re + 1j * im, atol=1e-8)


def load_unitary(path) -> np.ndarray:
    with open(Path(path)) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UnitaryError(f"{path}: invalid JSON ({exc})") from None
    return unitary_from_json(obj)


def save_unitary(u: np.ndarray, path) -> None:
    Path(path).write_text(json.dumps(unitary_to_json(u)))
