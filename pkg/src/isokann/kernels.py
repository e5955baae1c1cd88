"""Hot loops: batched controlled Euler-Maruyama with Girsanov log-weights.

Two implementations share one calling convention:

* ``_simulate_batch_nb`` -- numba, blocks of ``BLOCK`` shots per ``prange`` task.
* ``_simulate_batch_np`` -- numpy, all shots advanced together per step.

Each shot draws its increments from its own counter-based stream (see
:mod:`isokann.rng`), so results never depend on scheduling. The two
backends agree to floating-point rounding (libm differences), not bitwise.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import _backend
from ._backend import njit, prange
from .model import CHI_CLAMP, Z_CAP, forward_and_grad_input
from .rng import normal_nb, normals

DIVERGENCE_BOUND = 1e6
DENOM_FLOOR = 1e-8

POT_HARMONIC = 0
POT_DOUBLEWELL1D = 1
POT_DOUBLEWELL2D = 2
POT_TRIPLEWELL2D = 3
POT_FLAT = 4

CTRL_ZERO = 0
CTRL_CONSTANT = 1
CTRL_CHI = 2


class PackedControl(NamedTuple):
    """Array form of a control that both kernels understand."""

    kind: int
    const: np.ndarray  # (dim,)
    weights: np.ndarray  # flat network parameters
    dims: np.ndarray  # int64 layer dims
    a: float
    b: float
    sigma: float
    u_max: float
    time_dependent: bool
    tau: float


def zero_packed(dim: int) -> PackedControl:
    return PackedControl(CTRL_ZERO, np.zeros(dim), np.zeros(1), np.array([dim, 1], dtype=np.int64),
                         0.0, 0.0, 0.0, np.inf, False, 1.0)


# ---------------------------------------------------------------- potentials

def grad_v_np(kind: int, x: np.ndarray) -> np.ndarray:
    """Vectorized gradient for a batch ``x`` of shape (n, dim)."""
    if kind == POT_HARMONIC:
        return x.copy()
    if kind == POT_DOUBLEWELL1D:
        return 4.0 * x * (x * x - 1.0)
    if kind == POT_DOUBLEWELL2D:
        g = np.empty_like(x)
        g[:, 0] = 4.0 * x[:, 0] * (x[:, 0] * x[:, 0] - 1.0)
        g[:, 1] = x[:, 1]
        return g
    if kind == POT_TRIPLEWELL2D:
        px, py = x[:, 0], x[:, 1]
        e1 = np.exp(-px * px - (py - 1.0 / 3.0) ** 2)
        e2 = np.exp(-px * px - (py - 5.0 / 3.0) ** 2)
        e3 = np.exp(-(px - 1.0) ** 2 - py * py)
        e4 = np.exp(-(px + 1.0) ** 2 - py * py)
        g = np.empty_like(x)
        g[:, 0] = (-6.0 * px * e1 + 6.0 * px * e2 + 10.0 * (px - 1.0) * e3
                   + 10.0 * (px + 1.0) * e4 + 0.8 * px ** 3)
        g[:, 1] = (-6.0 * (py - 1.0 / 3.0) * e1 + 6.0 * (py - 5.0 / 3.0) * e2
                   + 10.0 * py * e3 + 10.0 * py * e4 + 0.8 * (py - 1.0 / 3.0) ** 3)
        return g
    if kind == POT_FLAT:
        return np.zeros_like(x)
    raise ValueError(f"unknown potential kind {kind}")


@njit(cache=True)
def _grad_v_nb(kind, x, g):
    if kind == 0:
        for j in range(x.shape[0]):
            g[j] = x[j]
    elif kind == 1:
        g[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0)
    elif kind == 2:
        g[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0)
        g[1] = x[1]
    elif kind == 3:
        px = x[0]
        py = x[1]
        e1 = math.exp(-px * px - (py - 1.0 / 3.0) ** 2)
        e2 = math.exp(-px * px - (py - 5.0 / 3.0) ** 2)
        e3 = math.exp(-(px - 1.0) ** 2 - py * py)
        e4 = math.exp(-(px + 1.0) ** 2 - py * py)
        g[0] = (-6.0 * px * e1 + 6.0 * px * e2 + 10.0 * (px - 1.0) * e3
                + 10.0 * (px + 1.0) * e4 + 0.8 * px ** 3)
        g[1] = (-6.0 * (py - 1.0 / 3.0) * e1 + 6.0 * (py - 5.0 / 3.0) * e2
                + 10.0 * py * e3 + 10.0 * py * e4 + 0.8 * (py - 1.0 / 3.0) ** 3)
    else:
        for j in range(x.shape[0]):
            g[j] = 0.0


# ---------------------------------------------------------------- control

@njit(cache=True)
def _chi_control_from_values(chi, grad, t, a, b, sigma, u_max, time_dep, tau, u):
    d = grad.shape[0]
    c = min(max(chi, CHI_CLAMP), 1.0 - CHI_CLAMP)
    if time_dep:
        at = a ** ((tau - t) / tau)
        cinf = b / (1.0 - a)
        h = at * (c - cinf) + cinf
        scale = at
    else:
        h = a * c + b
        scale = a
    gn = 0.0
    for j in range(d):
        gn += grad[j] * grad[j]
    gn = math.sqrt(gn)
    if h < DENOM_FLOOR:
        for j in range(d):
            u[j] = grad[j] / gn * u_max if gn > 0.0 else 0.0
        return
    un = 0.0
    for j in range(d):
        u[j] = sigma * scale * grad[j] / h
        un += u[j] * u[j]
    un = math.sqrt(un)
    if un > u_max:
        for j in range(d):
            u[j] *= u_max / un


# ---------------------------------------------------------------- network + paths

BLOCK = 64  # shots advanced in lockstep by one numba task


@njit(cache=True, inline="always")
def _tanh_nb(z):
    # a few ulp absolute error, about 4x cheaper than libm tanh; saturates cleanly
    return 1.0 - 2.0 / (math.exp(2.0 * z) + 1.0)


@njit(cache=True)
def _mlp_block_nb(w, dims, X, nb, acts, delta, tmp, zbuf, chi, grad):
    """chi and d chi/dx for the first ``nb`` columns of ``X`` (one shot per column).

    Loops run innermost over shots so they vectorize; every shot sees the
    same operations in the same order whatever block it lands in.
    """
    nl = dims.shape[0] - 1
    for i in range(dims[0]):
        for b in range(nb):
            acts[0, i, b] = X[i, b]
    off = 0
    for layer in range(nl):
        nin = dims[layer]
        nout = dims[layer + 1]
        boff = off + nin * nout
        for o in range(nout):
            bias = w[boff + o]
            for b in range(nb):
                zbuf[b] = bias
            for i in range(nin):
                wi = w[off + o * nin + i]
                for b in range(nb):
                    zbuf[b] += wi * acts[layer, i, b]
            if layer < nl - 1:
                for b in range(nb):
                    acts[layer + 1, o, b] = _tanh_nb(zbuf[b])
        off = boff + nout
    for b in range(nb):
        z = zbuf[b]
        zc = min(max(z, -Z_CAP), Z_CAP)
        c = 1.0 / (1.0 + math.exp(-zc))
        chi[b] = c
        delta[0, b] = c * (1.0 - c) if abs(z) < Z_CAP else 0.0
    for layer in range(nl - 1, -1, -1):
        nin = dims[layer]
        nout = dims[layer + 1]
        off -= nin * nout + nout
        for i in range(nin):
            for b in range(nb):
                tmp[i, b] = 0.0
            for o in range(nout):
                wv = w[off + o * nin + i]
                for b in range(nb):
                    tmp[i, b] += delta[o, b] * wv
            if layer > 0:
                for b in range(nb):
                    tmp[i, b] *= 1.0 - acts[layer, i, b] * acts[layer, i, b]
        for i in range(nin):
            for b in range(nb):
                delta[i, b] = tmp[i, b]
    for i in range(dims[0]):
        for b in range(nb):
            grad[i, b] = delta[i, b]


@njit(cache=True, parallel=True)
def _simulate_batch_nb(x0s, keys, dt, n_steps, sigma, pot_kind, ck, cconst, cw, cdims, ca, cb,
                       csig, cumax, ctime, ctau, out_end, out_logw, out_fail, states, record):
    n_shots, d = x0s.shape
    maxw = 1
    for i in range(cdims.shape[0]):
        maxw = max(maxw, cdims[i])
    nl1 = cdims.shape[0]
    sqdt = math.sqrt(dt)
    n_blocks = (n_shots + BLOCK - 1) // BLOCK
    for blk in prange(n_blocks):
        s0 = blk * BLOCK
        nb = min(BLOCK, n_shots - s0)
        X = np.empty((d, BLOCK))
        acts = np.empty((nl1, maxw, BLOCK))
        delta = np.empty((maxw, BLOCK))
        tmp = np.empty((maxw, BLOCK))
        zbuf = np.empty(BLOCK)
        chi = np.empty(BLOCK)
        grad = np.empty((d, BLOCK))
        logw = np.zeros(BLOCK)
        fail = np.full(BLOCK, -1, dtype=np.int64)
        x = np.empty(d)
        g = np.empty(d)
        u = np.zeros(d)
        gb = np.empty(d)
        for b in range(nb):
            for j in range(d):
                X[j, b] = x0s[s0 + b, j]
                if record:
                    states[s0 + b, 0, j] = x0s[s0 + b, j]
        alive = nb
        for k in range(n_steps):
            if alive == 0:
                break
            if ck == 2:
                _mlp_block_nb(cw, cdims, X, nb, acts, delta, tmp, zbuf, chi, grad)
            base = np.uint64(k) * np.uint64(d)
            for b in range(nb):
                if fail[b] >= 0:
                    continue
                for j in range(d):
                    x[j] = X[j, b]
                _grad_v_nb(pot_kind, x, g)
                if ck == 1:
                    for j in range(d):
                        u[j] = cconst[j]
                elif ck == 2:
                    for j in range(d):
                        gb[j] = grad[j, b]
                    _chi_control_from_values(chi[b], gb, k * dt, ca, cb, csig, cumax, ctime,
                                             ctau, u)
                key = keys[s0 + b]
                uxi = 0.0
                uu = 0.0
                norm2 = 0.0
                ok = True
                for j in range(d):
                    xi = normal_nb(key, base + np.uint64(j))
                    if ck != 0:
                        uxi += u[j] * xi
                        uu += u[j] * u[j]
                        drift = -g[j] + sigma * u[j]
                    else:
                        drift = -g[j]
                    x[j] = x[j] + drift * dt + sigma * sqdt * xi
                    if not math.isfinite(x[j]):
                        ok = False
                    norm2 += x[j] * x[j]
                if ck != 0:
                    if sigma == 0.0:
                        logw[b] += -0.5 * uu * dt
                    else:
                        logw[b] += -uxi * sqdt - 0.5 * uu * dt
                if not ok or math.sqrt(norm2) > DIVERGENCE_BOUND:
                    fail[b] = k + 1
                    alive -= 1
                    for j in range(d):
                        X[j, b] = 0.0  # keep the block's network evaluation finite
                    continue
                for j in range(d):
                    X[j, b] = x[j]
                    if record:
                        states[s0 + b, k + 1, j] = x[j]
        for b in range(nb):
            out_logw[s0 + b] = logw[b]
            out_fail[s0 + b] = fail[b]
            for j in range(d):
                out_end[s0 + b, j] = X[j, b] if fail[b] < 0 else np.nan


def unpack_weights(flat: np.ndarray, dims) -> tuple[list, list]:
    weights, biases = [], []
    off = 0
    for nin, nout in zip(dims[:-1], dims[1:]):
        weights.append(flat[off:off + nin * nout].reshape(nout, nin))
        off += nin * nout
        biases.append(flat[off:off + nout])
        off += nout
    return weights, biases


def chi_control_np(chi, grad, t, pc: PackedControl) -> np.ndarray:
    """Vectorized twin of ``_chi_control_from_values`` for a batch."""
    c = np.clip(chi, CHI_CLAMP, 1.0 - CHI_CLAMP)
    if pc.time_dependent:
        at = pc.a ** ((pc.tau - t) / pc.tau)
        cinf = pc.b / (1.0 - pc.a)
        h = at * (c - cinf) + cinf
        scale = at
    else:
        h = pc.a * c + pc.b
        scale = pc.a
    gn = np.sqrt(np.sum(grad * grad, axis=1))
    small = h < DENOM_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pc.sigma * scale * grad / h[:, None]
        if np.any(small):
            fallback = np.where(gn[:, None] > 0, grad / gn[:, None] * pc.u_max, 0.0)
            u = np.where(small[:, None], fallback, u)
        un = np.sqrt(np.sum(u * u, axis=1))
        over = (un > pc.u_max) & ~small
        u = np.where(over[:, None], u * (pc.u_max / un)[:, None], u)
    return u


def _simulate_batch_np(x0s, keys, dt, n_steps, sigma, pot_kind, pc, callable_control, record):
    n_shots, d = x0s.shape
    x = x0s.copy()
    logw = np.zeros(n_shots)
    fail = np.full(n_shots, -1, dtype=np.int64)
    states = np.empty((n_shots, n_steps + 1, d)) if record else None
    if record:
        states[:, 0] = x0s
    sqdt = math.sqrt(dt)
    if pc is not None and pc.kind == CTRL_CHI:
        cw, cb = unpack_weights(pc.weights, pc.dims)
    jidx = np.arange(d, dtype=np.uint64)
    active = np.ones(n_shots, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            g = grad_v_np(pot_kind, x)
            xi = normals(keys[:, None], np.uint64(k * d) + jidx[None, :])
            controlled = True
            if callable_control is not None:
                u = np.asarray(callable_control(x, k * dt), dtype=np.float64).reshape(n_shots, d)
            elif pc.kind == CTRL_CONSTANT:
                u = np.broadcast_to(pc.const, (n_shots, d))
            elif pc.kind == CTRL_CHI:
                chi, grad = forward_and_grad_input(cw, cb, x)
                u = chi_control_np(chi, grad, k * dt, pc)
            else:
                controlled = False
            if controlled:
                uu = np.sum(u * u, axis=1)
                if sigma == 0.0:
                    inc = -0.5 * uu * dt
                else:
                    inc = -np.sum(u * xi, axis=1) * sqdt - 0.5 * uu * dt
                logw = np.where(active, logw + inc, logw)
                drift = -g + sigma * u
            else:
                drift = -g
            xn = x + drift * dt + sigma * sqdt * xi
            bad = active & (~np.all(np.isfinite(xn), axis=1)
                            | (np.sqrt(np.sum(xn * xn, axis=1)) > DIVERGENCE_BOUND))
            if np.any(bad):
                fail[bad] = k + 1
                active &= ~bad
            x = np.where(active[:, None], xn, 0.0)
            if record:
                states[:, k + 1] = x
            if not np.any(active):
                break
    x[~active] = np.nan
    return x, logw, fail, states


def simulate_batch(x0s, keys, dt, n_steps, sigma, pot_kind, control=None, record=False,
                   backend=None):
    """Integrate ``len(x0s)`` shots; returns (endpoints, log_weights, fail_step, states).

    ``control`` is a :class:`PackedControl`, ``None`` (zero control) or a
    vectorized callable ``u(x, t)`` on ``(n_shots, dim)`` arrays (always run
    on the numpy path). ``fail_step[s]`` is -1 for healthy shots, else the index of the
    first non-finite / out-of-bounds state; endpoints of failed shots are NaN.
    """
    x0s = np.ascontiguousarray(x0s, dtype=np.float64)
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    n_shots, d = x0s.shape
    callable_control = None
    if control is None:
        pc = zero_packed(d)
    elif isinstance(control, PackedControl):
        pc = control
    else:
        pc = None
        callable_control = control
    backend = backend or _backend.BACKEND
    if backend == "numba" and callable_control is None:
        if not _backend.NUMBA_AVAILABLE:
            raise RuntimeError("numba backend requested but numba is not installed")
        end = np.empty((n_shots, d))
        logw = np.empty(n_shots)
        fail = np.empty(n_shots, dtype=np.int64)
        states = np.empty((n_shots, n_steps + 1, d)) if record else np.empty((1, n_steps + 1, d))
        _simulate_batch_nb(
            x0s, keys, float(dt), int(n_steps), float(sigma), int(pot_kind), int(pc.kind),
            np.ascontiguousarray(pc.const, dtype=np.float64),
            np.ascontiguousarray(pc.weights, dtype=np.float64),
            np.ascontiguousarray(pc.dims, dtype=np.int64),
            float(pc.a), float(pc.b), float(pc.sigma), float(pc.u_max), bool(pc.time_dependent),
            float(pc.tau), end, logw, fail, states, bool(record),
        )
        if record:
            for s in np.nonzero(fail >= 0)[0]:
                states[s, fail[s]:] = np.nan
        return end, logw, fail, (states if record else None)
    end, logw, fail, states = _simulate_batch_np(
        x0s, keys, float(dt), int(n_steps), float(sigma), int(pot_kind), pc, callable_control,
        record,
    )
    if record:
        for s in np.nonzero(fail >= 0)[0]:
            states[s, fail[s]:] = np.nan
    return end, logw, fail, states
