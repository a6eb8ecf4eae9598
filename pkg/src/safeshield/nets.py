"""Minimal feedforward networks with exact reverse-mode gradients.

Two-hidden-layer tanh MLPs with linear, tanh or sigmoid output heads; a
diagonal-Gaussian policy with state-independent log-std; adaptive-moment
optimization; and a checksummed binary weight file format.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import WeightFileError

HEADS = ("linear", "tanh", "sigmoid")
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_MAGIC = b"SSNW"
_VERSION = 1


@dataclass
class MlpParams:
    """Weights and biases of a feedforward net with tanh hidden layers."""

    sizes: list[int]
    weights: list[np.ndarray]   # layer i: (sizes[i+1], sizes[i])
    biases: list[np.ndarray]    # layer i: (sizes[i+1],)
    head: str = "linear"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.sizes) - 1 or \
                len(self.biases) != len(self.weights):
            raise ValueError("layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i + 1], self.sizes[i]) or \
                    b.shape != (self.sizes[i + 1],):
                raise ValueError("parameter shapes do not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.head)

    def flat(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (for the optimizer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_mlp(n_in: int, n_out: int, head: str = "linear",
             hidden=(64, 64), rng=None, out_scale: float = 0.01
             ) -> MlpParams:
    """Xavier-initialized MLP; the output layer is scaled down so initial
    policy means sit near 0 and initial risk estimates near 0.5."""
    rng = rng or np.random.default_rng()
    sizes = [int(n_in), *[int(h) for h in hidden], int(n_out)]
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, (fan_out, fan_in))
        if i == len(sizes) - 2:
            w *= out_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(sizes, weights, biases, head)


def _head_fn(head: str, z: np.ndarray) -> np.ndarray:
    if head == "linear":
        return z
    if head == "tanh":
        return np.tanh(z)
    return 1.0 / (1.0 + np.exp(-z))   # sigmoid


def forward_cached(params: MlpParams, x: np.ndarray
                   ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass keeping post-activation values for backprop.

    x may be a single vector (n_in,) or a batch (N, n_in); the output and
    cache follow the same batching.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_in:
        raise ValueError(f"expected input size {params.n_in}, "
                         f"got {x.shape[-1]}")
    cache = [x]
    h = x
    n_layers = len(params.weights)
    for i in range(n_layers):
        z = h @ params.weights[i].T + params.biases[i]
        h = np.tanh(z) if i < n_layers - 1 else _head_fn(params.head, z)
        cache.append(h)
    return h, cache


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Deterministic network output for a vector or batch input."""
    out, _ = forward_cached(params, x)
    return out


def backprop(params: MlpParams, cache: list[np.ndarray],
             upstream: np.ndarray) -> list[np.ndarray]:
    """Exact gradients of sum(upstream * output) w.r.t. all parameters.

    cache comes from forward_cached on the same input. Batched inputs give
    gradients summed over the batch. Returns arrays in MlpParams.flat()
    order; the last entry of the returned list is the input gradient.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    out = cache[-1]
    if upstream.shape != out.shape:
        raise ValueError("upstream gradient shape mismatch")
    n_layers = len(params.weights)
    if params.head == "linear":
        delta = upstream
    elif params.head == "tanh":
        delta = upstream * (1.0 - out * out)
    else:
        delta = upstream * out * (1.0 - out)
    grads: list[np.ndarray] = []
    for i in range(n_layers - 1, -1, -1):
        h_prev = cache[i]
        if h_prev.ndim == 1:
            gw = np.outer(delta, h_prev)
            gb = delta.copy()
        else:
            gw = delta.T @ h_prev
            gb = delta.sum(axis=0)
        grads.append(gb)
        grads.append(gw)
        delta = delta @ params.weights[i]
        if i > 0:
            delta = delta * (1.0 - cache[i] * cache[i])
    grads.reverse()
    x_grad = delta
    grads.append(x_grad)
    return grads


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian over m-vectors: tanh-head mean network plus a
    state-independent log-std vector clamped to [-5, 2]."""

    net: MlpParams
    log_std: np.ndarray

    def __post_init__(self):
        if self.net.head != "tanh":
            raise ValueError("policy mean network must use a tanh head")
        self.log_std = np.clip(
            np.asarray(self.log_std, dtype=np.float64).reshape(-1),
            LOG_STD_MIN, LOG_STD_MAX)
        if self.log_std.shape[0] != self.net.n_out:
            raise ValueError("log-std length must equal action size")

    @property
    def n_actions(self) -> int:
        return self.net.n_out

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.net.copy(), self.log_std.copy())


def mean_action(policy: GaussianPolicy, obs: np.ndarray) -> np.ndarray:
    """Deterministic action: the tanh mean, always inside (-1, 1)."""
    return forward(policy.net, obs)


def gaussian_log_prob(m, mean, log_std) -> np.ndarray:
    """Diagonal Gaussian log-density; batched over leading dimensions."""
    std = np.exp(log_std)
    z = (m - mean) / std
    k = log_std.shape[-1]
    return (-0.5 * np.sum(z * z, axis=-1) - np.sum(log_std)
            - 0.5 * k * np.log(2.0 * np.pi))


def sample_action(policy: GaussianPolicy, obs: np.ndarray, rng
                  ) -> tuple[np.ndarray, float]:
    """Sample m ~ N(mean(obs), diag(std^2)); returns (m, log-probability).

    The sample is not clamped here; the action-space mapping clamps later
    and the log-probability refers to the unclamped sample.
    """
    mean = forward(policy.net, obs)
    std = np.exp(policy.log_std)
    m = mean + std * rng.standard_normal(policy.n_actions)
    return m, float(gaussian_log_prob(m, mean, policy.log_std))


def policy_entropy(policy: GaussianPolicy) -> float:
    k = policy.n_actions
    return float(np.sum(policy.log_std) + 0.5 * k * (1.0 + np.log(2 * np.pi)))


@dataclass
class OptimizerState:
    """Adaptive moment estimation over a fixed list of parameter arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, param_arrays: list[np.ndarray], lr: float = 3e-4
                   ) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in param_arrays],
                   [np.zeros_like(p) for p in param_arrays], lr=lr)


def adam_step(state: OptimizerState, param_arrays: list[np.ndarray],
              grads: list[np.ndarray]) -> None:
    """One in-place gradient-descent update (minimization)."""
    if len(param_arrays) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("parameter/gradient count mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(param_arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# weight files: little-endian, magic "SSNW", version, head tag, layer shapes,
# row-major float64 weights then biases per layer, optional log-std vector,
# trailing CRC32 of everything before it.

_HEAD_TAGS = {"linear": 0, "tanh": 1, "sigmoid": 2}
_TAG_HEADS = {v: k for k, v in _HEAD_TAGS.items()}


def save_weights(obj: MlpParams | GaussianPolicy, path) -> None:
    """Write a network (or policy with log-std) to a checksummed file."""
    if isinstance(obj, GaussianPolicy):
        params, log_std = obj.net, obj.log_std
    else:
        params, log_std = obj, None
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<IBI", _VERSION, _HEAD_TAGS[params.head],
                       len(params.weights))
    for w, b in zip(params.weights, params.biases):
        buf += struct.pack("<II", w.shape[0], w.shape[1])
        buf += np.ascontiguousarray(w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    n_std = 0 if log_std is None else log_std.shape[0]
    buf += struct.pack("<I", n_std)
    if log_std is not None:
        buf += np.ascontiguousarray(log_std, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_weights(path) -> MlpParams | GaussianPolicy:
    """Read a weight file; returns GaussianPolicy when a log-std is stored."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 17 or raw[:4] != _MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WeightFileError(f"{path}: checksum mismatch")
    off = 4
    try:
        version, head_tag, n_layers = struct.unpack_from("<IBI", body, off)
        off += 9
        if version != _VERSION:
            raise WeightFileError(f"{path}: unsupported version {version}")
        if head_tag not in _TAG_HEADS:
            raise WeightFileError(f"{path}: unknown head tag {head_tag}")
        weights, biases, sizes = [], [], []
        for i in range(n_layers):
            rows, cols = struct.unpack_from("<II", body, off)
            off += 8
            w = np.frombuffer(body, "<f8", rows * cols, off).reshape(
                rows, cols).copy()
            off += 8 * rows * cols
            b = np.frombuffer(body, "<f8", rows, off).copy()
            off += 8 * rows
            if sizes and sizes[-1] != cols:
                raise WeightFileError(f"{path}: layer shapes do not chain")
            if not sizes:
                sizes.append(cols)
            sizes.append(rows)
            weights.append(w)
            biases.append(b)
        (n_std,) = struct.unpack_from("<I", body, off)
        off += 4
        log_std = None
        if n_std:
            log_std = np.frombuffer(body, "<f8", n_std, off).copy()
            off += 8 * n_std
        if off != len(body):
            raise WeightFileError(f"{path}: trailing bytes")
    except (struct.error, ValueError) as exc:
        raise WeightFileError(f"{path}: truncated file") from exc
    params = MlpParams(sizes, weights, biases, _TAG_HEADS[head_tag])
    if log_std is None:
        return params
    return GaussianPolicy(params, log_std)
