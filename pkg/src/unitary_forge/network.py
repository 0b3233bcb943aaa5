"""Small fp64 multilayer perceptron with hand-written backprop and Adam.

Used as the state-value head (one output) and as the Q-network of the DQN
baseline (one output per action).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DVNU"
FORMAT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NetworkError(RuntimeError):
    pass


class DivergenceError(NetworkError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...] = (512, 256, 128)
    output_dim: int = 1
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class NetworkState:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    adam_m: list[np.ndarray] = field(default_factory=list)
    adam_v: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if not self.adam_m:
            self.adam_m = [np.zeros_like(p) for p in self.params()]
            self.adam_v = [np.zeros_like(p) for p in self.params()]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [m.copy() for m in self.adam_m],
            [v.copy() for v in self.adam_v],
            self.step_count,
        )


def init_network(spec: MlpSpec) -> NetworkState:
    """He initialization for relu, Glorot for tanh; zero biases."""
    rng = np.random.default_rng(spec.seed)
    widths = spec.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        if spec.activation == "relu":
            scale = np.sqrt(2.0 / fan_in)
        else:
            scale = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    return NetworkState(spec, weights, biases)


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def forward(net: NetworkState, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[-1] != net.spec.input_dim:
        raise NetworkError(f"input width {x.shape[-1]} != network input_dim {net.spec.input_dim}")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = _act(h, net.spec.activation)
    return h[0] if single else h


def _loss_terms(err: np.ndarray, loss: str, delta: float):
    if loss == "mse":
        return err * err, 2.0 * err
    if loss == "huber":
        a = np.abs(err)
        quad = a <= delta
        val = np.where(quad, 0.5 * err * err, delta * (a - 0.5 * delta))
        grad = np.where(quad, err, delta * np.sign(err))
        return val, grad
    raise ValueError(f"unknown loss {loss!r}")


def loss_and_grads(
    net: NetworkState,
    x: np.ndarray,
    targets: np.ndarray,
    action_ids: np.ndarray | None = None,
    loss: str = "mse",
    huber_delta: float = 1.0,
):
    """Mean loss over the batch and its gradient for every parameter.

    With ``action_ids`` only the named output of each row is regressed
    (Q-learning); otherwise the whole output row is compared to ``targets``.
    ``loss="xent"`` treats the outputs as logits and ``targets`` as class ids.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise NetworkError("empty batch")
    zs, hs = [], [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        zs.append(z)
        h = _act(z, net.spec.activation) if i < last else z
        hs.append(h)
    out = hs[-1]
    if loss == "xent":
        labels = targets.astype(np.int64).reshape(n)
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(n)
        total = float(-logp[rows, labels].sum() / n)
        dout = np.exp(logp)
        dout[rows, labels] -= 1.0
        dout /= n
    elif action_ids is not None:
        rows = np.arange(n)
        err = out[rows, action_ids] - targets
        vals, g = _loss_terms(err, loss, huber_delta)
        dout = np.zeros_like(out)
        dout[rows, action_ids] = g / n
    else:
        err = out - targets.reshape(out.shape)
        vals, g = _loss_terms(err, loss, huber_delta)
        dout = g / n
        vals = vals.sum(axis=1)
    if loss != "xent":
        total = float(np.sum(vals) / n)

    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    delta = dout
    for i in range(last, -1, -1):
        grads_w[i] = hs[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * _act_grad(zs[i - 1], hs[i], net.spec.activation)
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    return total, grads


def train_step(
    net: NetworkState,
    x: np.ndarray,
    targets: np.ndarray,
    lr: float,
    action_ids: np.ndarray | None = None,
    loss: str = "mse",
    grad_clip: float | None = None,
) -> float:
    """One Adam update in place; returns the pre-update loss."""
    if not np.all(np.isfinite(targets)):
        raise DivergenceError("non-finite regression targets")
    value, grads = loss_and_grads(net, x, targets, action_ids, loss)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss ({value}) at step {net.step_count}")
    if grad_clip is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > grad_clip:
            grads = [g * (grad_clip / norm) for g in grads]
    net.step_count += 1
    t = net.step_count
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for p, g, m, v in zip(net.params(), grads, net.adam_m, net.adam_v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return value


def copy_weights(src: NetworkState, dst: NetworkState) -> None:
    for d, s in zip(dst.params(), src.params()):
        d[...] = s


# ---------------------------------------------------------------------------
# Weight files: magic, u32 version, u32 header length, JSON header, then
# little-endian fp64 tensors (weights/biases interleaved, then Adam m, then v).


def save(net: NetworkState, path) -> None:
    header = {
        "spec": net.spec.to_dict(),
        "step_count": net.step_count,
        "shapes": [list(p.shape) for p in net.params()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for group in (net.params(), net.adam_m, net.adam_v):
            for p in group:
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load(path) -> NetworkState:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise NetworkError(f"{path}: not a weight file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise NetworkError(f"{path}: unsupported format version {version}")
    if len(data) < 12 + hlen:
        raise NetworkError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except json.JSONDecodeError:
        raise NetworkError(f"{path}: corrupt header") from None
    spec_d = header["spec"]
    spec = MlpSpec(**{**spec_d, "hidden": tuple(spec_d["hidden"])})
    shapes = [tuple(s) for s in header["shapes"]]
    expected = [tuple(p.shape) for p in init_shapes(spec)]
    if shapes != expected:
        raise NetworkError(f"{path}: tensor shapes do not match the header spec")
    sizes = [int(np.prod(s)) for s in shapes]
    need = 8 * 3 * sum(sizes)
    body = data[12 + hlen :]
    if len(body) != need:
        raise NetworkError(f"{path}: truncated or oversized body ({len(body)} of {need} bytes)")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    groups, pos = [], 0
    for _ in range(3):
        tensors = []
        for s, k in zip(shapes, sizes):
            tensors.append(flat[pos : pos + k].reshape(s).copy())
            pos += k
        groups.append(tensors)
    params, m, v = groups
    return NetworkState(spec, params[0::2], params[1::2], m, v, int(header["step_count"]))


def init_shapes(spec: MlpSpec) -> list[np.ndarray]:
    widths = spec.widths
    out = []
    for a, b in zip(widths[:-1], widths[1:]):
        out += [np.empty((a, b)), np.empty(b)]
    return out
