"""Small dense network for the membership function, with its own Adam.

The network maps R^dim -> (0, 1): tanh hidden layers and a sigmoid output.
Everything is plain numpy so gradients can be checked against finite
differences and training is bit-reproducible.

Checkpoint byte layout (all little-endian)::

    offset  size        content
    0       8           magic b"CHIMODEL"
    8       4           uint32 format version (currently 1)
    12      4           uint32 number of layer dims L+1
    16      8*(L+1)     uint64 layer dims [dim, h1, ..., 1]
    ...     8*P         float64 parameters, per layer: W (n_out x n_in,
                        row-major) then b (n_out)
    ...     8           uint64 Adam step counter
    ...     8*4         float64 lr, beta1, beta2, eps
    ...     8*P         float64 first moments, parameter layout
    ...     8*P         float64 second moments, parameter layout

A payload whose length differs from the one implied by the dims is rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, DimensionError, NonFiniteError

# |pre-activation| cap on the output unit: keeps sigmoid strictly inside (0, 1)
Z_CAP = 30.0
CHI_CLAMP = 1e-6

MAGIC = b"CHIMODEL"
FORMAT_VERSION = 1


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class ChiModel:
    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or self.dims[-1] != 1 or min(self.dims) < 1:
            raise DimensionError(f"layer dims must be positive and end with 1, got {self.dims}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i + 1], self.dims[i]) or b.shape != (self.dims[i + 1],):
                raise DimensionError(f"layer {i} has shapes {w.shape}, {b.shape}")

    @property
    def dim(self) -> int:
        return self.dims[0]

    @property
    def n_params(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in zip(self.dims[:-1], self.dims[1:]))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {theta.shape}")
        pos = 0
        for p in self.params():
            p[...] = theta[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self) -> "ChiModel":
        return ChiModel(self.dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _check(self, x):
        # scalar or length-dim vector -> one point; for dim 1 a longer vector is a batch
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0:
            xb, single = x.reshape(1, 1), True
        elif x.ndim == 1 and self.dim == 1 and x.shape[0] != 1:
            xb, single = x.reshape(-1, 1), False
        elif x.ndim == 1:
            xb, single = x.reshape(1, -1), True
        else:
            xb, single = x, False
        if xb.ndim != 2 or xb.shape[1] != self.dim:
            raise DimensionError(f"model expects dim {self.dim}, got input shape {x.shape}")
        if not np.all(np.isfinite(xb)):
            raise NonFiniteError("non-finite model input")
        return xb, single

    def forward(self, x):
        """chi(x) for one point (returns float) or a batch ``(n, dim)``."""
        xb, single = self._check(x)
        out = _forward(self.weights, self.biases, xb)[0]
        return float(out[0]) if single else out

    __call__ = forward

    def grad_input(self, x):
        """Gradient of chi with respect to its input."""
        xb, single = self._check(x)
        _, g = forward_and_grad_input(self.weights, self.biases, xb)
        return g[0] if single else g


class AffineChi:
    """Reference chi(x) = w.x + c, optionally clipped to [0, 1].

    Not trainable; used where the exact eigenfunction is known (the
    harmonic system's is linear).
    """

    def __init__(self, w, c: float, clip: bool = False):
        self.w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        self.c = float(c)
        self.clip = clip

    @property
    def dim(self) -> int:
        return self.w.size

    @classmethod
    def on_interval(cls, lo: float, hi: float, clip: bool = False) -> "AffineChi":
        """The 1D map sending [lo, hi] onto [0, 1]."""
        return cls([1.0 / (hi - lo)], -lo / (hi - lo), clip=clip)

    def copy(self) -> "AffineChi":
        return AffineChi(self.w.copy(), self.c, self.clip)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 0 or (x.ndim == 1 and x.size == self.dim)
        xb = x.reshape(-1, self.dim)
        v = xb @ self.w + self.c
        if self.clip:
            v = np.clip(v, 0.0, 1.0)
        return float(v[0]) if single else v

    __call__ = forward

    def grad_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 0 or (x.ndim == 1 and x.size == self.dim)
        xb = x.reshape(-1, self.dim)
        g = np.broadcast_to(self.w, xb.shape).copy()
        if self.clip:
            v = xb @ self.w + self.c
            g[(v < 0.0) | (v > 1.0)] = 0.0
        return g[0] if single else g


def _forward(weights, biases, x):
    """Returns (chi, activations, output-clip mask)."""
    acts = [x]
    a = x
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.tanh(a @ w.T + b)
        acts.append(a)
    z = (a @ weights[-1].T + biases[-1])[:, 0]
    inside = np.abs(z) < Z_CAP
    chi = sigmoid(np.clip(z, -Z_CAP, Z_CAP))
    return chi, acts, inside


def forward_and_grad_input(weights, biases, x):
    """Vectorized chi and d chi / d x for a batch ``x`` of shape (n, dim)."""
    chi, acts, inside = _forward(weights, biases, x)
    delta = (chi * (1.0 - chi) * inside)[:, None] * weights[-1]
    for i in range(len(weights) - 2, -1, -1):
        delta = (delta * (1.0 - acts[i + 1] ** 2)) @ weights[i]
    return chi, delta


def param_gradients(model: ChiModel, xs, targets):
    """MSE loss and its gradient with respect to every parameter."""
    chi, acts, inside = _forward(model.weights, model.biases, xs)
    n = len(targets)
    resid = chi - targets
    loss = float(np.mean(resid ** 2))
    delta = (2.0 / n * resid * chi * (1.0 - chi) * inside)[:, None]
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (1.0 - acts[i] ** 2)
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    return loss, grads


def init_model(dims, seed: int = 0) -> ChiModel:
    """Glorot-uniform weights and zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return ChiModel(tuple(dims), weights, biases)


def zero_model(dims) -> ChiModel:
    return ChiModel(
        tuple(dims),
        [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
        [np.zeros(o) for o in dims[1:]],
    )


def default_dims(dim: int, hidden=(16, 16)) -> tuple[int, ...]:
    return (dim, *hidden, 1)


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: ChiModel, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(p) for p in model.params()],
            v=[np.zeros_like(p) for p in model.params()],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_update(params, grads, opt: OptimizerState) -> None:
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def train_batch(model: ChiModel, opt: OptimizerState, xs, targets) -> float:
    """One Adam step on the batch MSE; returns the loss before the step."""
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if len(targets) == 0:
        raise ValueError("empty training batch")
    if not np.all(np.isfinite(targets)):
        raise NonFiniteError("non-finite training target")
    xb, _ = model._check(xs)
    if xb.shape[0] != len(targets):
        raise DimensionError(f"{xb.shape[0]} inputs vs {len(targets)} targets")
    loss, grads = param_gradients(model, xb, targets)
    adam_update(model.params(), grads, opt)
    return loss


def fit(model: ChiModel, opt: OptimizerState, xs, targets, epochs: int) -> float:
    """``epochs`` full-batch steps; returns the last pre-step loss."""
    loss = float("nan")
    for _ in range(epochs):
        loss = train_batch(model, opt, xs, targets)
    return loss


def checkpoint_save(model: ChiModel, opt: OptimizerState | None = None) -> bytes:
    if opt is None:
        opt = OptimizerState.for_model(model)
    dims = np.asarray(model.dims, dtype="<u8")
    parts = [
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(dims)),
        dims.tobytes(),
        model.flat().astype("<f8").tobytes(),
        struct.pack("<Q4d", opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps),
        np.concatenate([a.ravel() for a in opt.m]).astype("<f8").tobytes(),
        np.concatenate([a.ravel() for a in opt.v]).astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def checkpoint_load(payload: bytes) -> tuple[ChiModel, OptimizerState]:
    buf = memoryview(bytes(payload))
    if len(buf) < 16 or bytes(buf[:8]) != MAGIC:
        raise CheckpointError("not a chi-model checkpoint (bad magic or too short)")
    version, n_dims = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    if n_dims < 2 or n_dims > 64:
        raise CheckpointError(f"implausible layer count {n_dims}")
    pos = 16
    if len(buf) < pos + 8 * n_dims:
        raise CheckpointError("truncated checkpoint (layer dims)")
    dims = tuple(int(d) for d in np.frombuffer(buf, dtype="<u8", count=n_dims, offset=pos))
    pos += 8 * n_dims
    if min(dims) < 1 or dims[-1] != 1:
        raise CheckpointError(f"invalid layer dims {dims}")
    n_params = sum((i + 1) * o for i, o in zip(dims[:-1], dims[1:]))
    expected = pos + 8 * n_params + 40 + 16 * n_params
    if len(buf) != expected:
        raise CheckpointError(f"checkpoint has {len(buf)} bytes, expected {expected}")
    theta = np.frombuffer(buf, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    pos += 8 * n_params
    step, lr, b1, b2, eps = struct.unpack_from("<Q4d", buf, pos)
    pos += 40
    m = np.frombuffer(buf, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    v = np.frombuffer(buf, dtype="<f8", count=n_params, offset=pos + 8 * n_params).astype(np.float64)

    model = zero_model(dims)
    model.set_flat(theta)
    opt = OptimizerState.for_model(model, lr=lr, beta1=b1, beta2=b2, eps=eps)
    opt.step = int(step)
    for dst, src in ((opt.m, m), (opt.v, v)):
        off = 0
        for a in dst:
            a[...] = src[off:off + a.size].reshape(a.shape)
            off += a.size
    return model, opt
