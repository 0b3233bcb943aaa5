"""Frequency encoding of unitary observations and the observation pipeline
(canonicalize -> perturb -> encode) feeding the value network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import canonicalize_batch, sample_perturbations

DEFAULT_L = 15


def encoded_width(n_qubits: int, L: int = DEFAULT_L) -> int:
    return 2 * 4**n_qubits * 2 * L


def raw_width(n_qubits: int) -> int:
    return 2 * 4**n_qubits


def planes(u: np.ndarray) -> np.ndarray:
    """Stack real and imaginary planes: ``(..., d, d) -> (..., 2, d, d)``."""
    return np.stack([u.real, u.imag], axis=-3)


def nerf_encode(u: np.ndarray, L: int = DEFAULT_L) -> np.ndarray:
    """Map every real component ``x`` to ``sin(2^k pi x), cos(2^k pi x)``, k < L.

    Layout of the flattened output: (re/im plane, row, col, k, sin/cos).
    Accepts a leading batch axis.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    u = np.asarray(u)
    x = planes(u)
    freqs = np.pi * 2.0 ** np.arange(L)
    ang = x[..., None] * freqs
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    lead = u.shape[:-2]
    return enc.reshape(lead + (-1,))


def raw_encode(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u)
    return planes(u).reshape(u.shape[:-2] + (-1,))


@dataclass(frozen=True)
class Featurizer:
    """Turns stacks of state matrices into network inputs.

    Each stage can be switched off for ablations: without canonicalization
    the raw matrix is used, without NeRF the real/imaginary planes are
    flattened directly (width ``2 * 4^n``).

    Entries are multiplied by ``input_scale`` before the frequency map. The
    map has period 2, so at scale 1 the values +1 and -1 encode identically
    (canonical I and Z, or X and Y, are indistinguishable). A scale below 1
    separates them, which matters for gate sets that reach Z in a few steps.
    """

    n_qubits: int
    canonicalize: bool = True
    nerf: bool = True
    L: int = DEFAULT_L
    perturb_epsilon: float = 0.0
    perturb_side: str = "left"
    input_scale: float = 1.0

    @property
    def input_dim(self) -> int:
        return encoded_width(self.n_qubits, self.L) if self.nerf else raw_width(self.n_qubits)

    def __call__(
        self, mats: np.ndarray, rng: np.random.Generator | None = None, perturb: bool = False
    ) -> np.ndarray:
        mats = np.asarray(mats)
        lead = mats.shape[:-2]
        dim = mats.shape[-1]
        flat = mats.reshape((-1, dim, dim))
        if perturb and self.perturb_epsilon > 0:
            p = sample_perturbations(self.n_qubits, self.perturb_epsilon, rng, len(flat))
            flat = p @ flat if self.perturb_side == "left" else flat @ p
        if self.canonicalize:
            flat, _ = canonicalize_batch(flat)
        feats = nerf_encode(self.input_scale * flat, self.L) if self.nerf else raw_encode(flat)
        return feats.reshape(lead + (feats.shape[-1],))
