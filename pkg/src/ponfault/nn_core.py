"""Small dense/GRU engine with exact reverse-mode gradients.

Everything is float64 (forward passes also run in extended precision when
given np.longdouble arrays) and batched along the leading axis. Single samples
are accepted too (a missing batch axis is added and removed again).

GRU convention::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    h~ = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * h~
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GRU_BLOCKS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def _floats(x):
    """float64 array, except that extended-precision input stays extended."""
    x = np.asarray(x)
    return x if x.dtype == np.longdouble else x.astype(float, copy=False)


def sigmoid(x):
    # tanh form: never overflows and needs no branching
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x))


@dataclass
class GruLayerParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        H, I = self.W_z.shape
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (H, I):
                raise ValueError(f"{name} must be {(H, I)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (H, H):
                raise ValueError(f"{name} must be {(H, H)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (H,):
                raise ValueError(f"{name} must be {(H,)}")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> GruLayerParams:
        H, I = hidden_dim, input_dim
        return cls(
            *(np.zeros((H, I)) for _ in range(3)),
            *(np.zeros((H, H)) for _ in range(3)),
            *(np.zeros(H) for _ in range(3)),
        )

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in GRU_BLOCKS}


@dataclass
class DenseParams:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("DenseParams: W must be (out, in) and b (out,)")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def blocks(self) -> dict:
        return {"W": self.W, "b": self.b}


# ----------------------------------------------------------------------------
# GRU


def gru_cell_forward(x, h_prev, p: GruLayerParams):
    """One GRU step. ``x`` is (I,) or (B, I); ``h_prev`` matches with H."""
    x = _floats(x)
    h_prev = _floats(h_prev)
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden_dim:
        raise ValueError("gru_cell_forward: dimension mismatch")
    a_z = x @ p.W_z.T + h_prev @ p.U_z.T + p.b_z
    a_r = x @ p.W_r.T + h_prev @ p.U_r.T + p.b_r
    z = sigmoid(a_z)
    r = sigmoid(a_r)
    rh = r * h_prev
    a_h = x @ p.W_h.T + rh @ p.U_h.T + p.b_h
    c = np.tanh(a_h)
    h = h_prev + z * (c - h_prev)
    cache = {"x": x, "h_prev": h_prev, "z": z, "r": r, "c": c, "rh": rh,
             "a_z": a_z, "a_r": a_r, "a_h": a_h}
    return h, cache


@dataclass
class GruCache:
    X: np.ndarray  # (B, T, I)
    Hs: np.ndarray  # (B, T+1, H), Hs[:, 0] = h0
    Z: np.ndarray
    R: np.ndarray
    C: np.ndarray
    RH: np.ndarray
    squeeze: bool = False


def gru_layer_forward(X, p: GruLayerParams, h0=None):
    """Run a GRU layer over ``X`` of shape (T, I) or (B, T, I).

    Returns all hidden states (same leading shape, last axis H) and a cache
    for :func:`gru_layer_backward`.
    """
    X = _floats(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != p.input_dim:
        raise ValueError("gru_layer_forward: X must be (B, T, input_dim)")
    B, T, _ = X.shape
    if T < 1:
        raise ValueError("gru_layer_forward: empty sequence")
    Hd = p.hidden_dim
    dt = np.result_type(X, p.W_z)
    if h0 is None:
        h = np.zeros((B, Hd), dtype=dt)
    else:
        h = np.broadcast_to(_floats(h0), (B, Hd)).astype(dt)

    W = np.concatenate([p.W_z, p.W_r, p.W_h], axis=0)  # (3H, I)
    U_zr = np.concatenate([p.U_z, p.U_r], axis=0).T  # (H, 2H)
    U_hT = p.U_h.T
    A = X @ W.T + np.concatenate([p.b_z, p.b_r, p.b_h])  # (B, T, 3H)

    Hs = np.empty((B, T + 1, Hd), dtype=dt)
    Z = np.empty((B, T, Hd), dtype=dt)
    R = np.empty((B, T, Hd), dtype=dt)
    C = np.empty((B, T, Hd), dtype=dt)
    RH = np.empty((B, T, Hd), dtype=dt)
    Hs[:, 0] = h
    for t in range(T):
        a = A[:, t]
        zr = sigmoid(a[:, : 2 * Hd] + h @ U_zr)
        z = zr[:, :Hd]
        r = zr[:, Hd:]
        rh = r * h
        c = np.tanh(a[:, 2 * Hd:] + rh @ U_hT)
        h = h + z * (c - h)
        Z[:, t] = z
        R[:, t] = r
        C[:, t] = c
        RH[:, t] = rh
        Hs[:, t + 1] = h
    cache = GruCache(X, Hs, Z, R, C, RH, squeeze)
    out = Hs[:, 1:]
    return (out[0] if squeeze else out), cache


def gru_layer_backward(dH, cache: GruCache, p: GruLayerParams):
    """Backpropagation through time.

    ``dH`` holds dLoss/dh_t for every step (zeros where a state is unused).
    Returns ``(dX, grads, dh0)`` with ``grads`` keyed like ``GRU_BLOCKS``.
    """
    dH = np.asarray(dH, dtype=float)
    if cache.squeeze:
        dH = dH[None]
    B, T, Hd = cache.Z.shape
    if dH.shape != (B, T, Hd):
        raise ValueError("gru_layer_backward: dH shape does not match the cache")
    U_z, U_r, U_h = p.U_z, p.U_r, p.U_h
    U_zr = np.concatenate([U_z, U_r], axis=0)  # (2H, H)
    dA = np.empty((B, T, 3 * Hd))
    dh = np.zeros((B, Hd))
    Hs, Z, R, C = cache.Hs, cache.Z, cache.R, cache.C
    for t in range(T - 1, -1, -1):
        dh = dh + dH[:, t]
        h_prev = Hs[:, t]
        z, r, c = Z[:, t], R[:, t], C[:, t]
        da_h = dh * z * (1.0 - c * c)
        d_rh = da_h @ U_h
        da_z = dh * (c - h_prev) * z * (1.0 - z)
        da_r = d_rh * h_prev * r * (1.0 - r)
        dA[:, t, :Hd] = da_z
        dA[:, t, Hd: 2 * Hd] = da_r
        dA[:, t, 2 * Hd:] = da_h
        dh = dh * (1.0 - z) + d_rh * r + dA[:, t, : 2 * Hd] @ U_zr

    X = cache.X
    I = X.shape[2]
    dA2 = dA.reshape(B * T, 3 * Hd)
    dW = dA2.T @ X.reshape(B * T, I)
    Hp = Hs[:, :-1].reshape(B * T, Hd)
    dU_zr = dA2[:, : 2 * Hd].T @ Hp
    dU_h = dA2[:, 2 * Hd:].T @ cache.RH.reshape(B * T, Hd)
    db = dA2.sum(axis=0)
    W = np.concatenate([p.W_z, p.W_r, p.W_h], axis=0)
    dX = dA @ W
    grads = {
        "W_z": dW[:Hd], "W_r": dW[Hd: 2 * Hd], "W_h": dW[2 * Hd:],
        "U_z": dU_zr[:Hd], "U_r": dU_zr[Hd:], "U_h": dU_h,
        "b_z": db[:Hd], "b_r": db[Hd: 2 * Hd], "b_h": db[2 * Hd:],
    }
    if cache.squeeze:
        return dX[0], grads, dh[0]
    return dX, grads, dh


# ----------------------------------------------------------------------------
# dense, losses


def dense_forward(x, p: DenseParams):
    x = _floats(x)
    if x.shape[-1] != p.W.shape[1]:
        raise ValueError("dense_forward: shape mismatch")
    y = x @ p.W.T + p.b
    if p.activation == "tanh":
        y = np.tanh(y)
    return y, (x, y)


def dense_backward(dy, cache, p: DenseParams):
    x, y = cache
    dy = np.asarray(dy, dtype=float)
    if dy.shape != y.shape:
        raise ValueError("dense_backward: shape mismatch")
    if p.activation == "tanh":
        dy = dy * (1.0 - y * y)
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads = {"W": dy2.T @ x2, "b": dy2.sum(axis=0)}
    return dy @ p.W, grads


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, true_class):
    """Cross-entropy of softmax(logits) against integer labels.

    For a batch (B, K) the loss is the batch mean and ``dlogits`` is scaled
    accordingly.
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    L = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(true_class))
    K = L.shape[1]
    if K < 2:
        raise ValueError("need at least two classes")
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError(f"class index out of range for K={K}")
    m = L.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(L - m).sum(axis=1))
    rows = np.arange(len(y))
    losses = lse - L[rows, y]
    d = softmax(L)
    d[rows, y] -= 1.0
    n = len(y)
    if single:
        return float(losses[0]), d[0]
    return float(losses.mean()), d / n


def masked_mse(pred, target, mask):
    """Mean squared error over unmasked entries (empty mask gives 0)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError("masked_mse: shapes differ")
    n = max(1, int(mask.sum()))
    diff = np.where(mask, pred - target, 0.0)
    return float((diff * diff).sum() / n), 2.0 * diff / n


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, clip_norm: float | None = None):
    """Bias-corrected Adam update of ``params`` (name -> array) in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    if clip_norm is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = min(1.0, clip_norm / total) if total > 0 else 1.0
        grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ----------------------------------------------------------------------------
# initialisation and checking


def glorot_uniform(shape, rng):
    fan_out, fan_in = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(n: int, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_gru(input_dim: int, hidden_dim: int, rng) -> GruLayerParams:
    return GruLayerParams(
        *(glorot_uniform((hidden_dim, input_dim), rng) for _ in range(3)),
        *(orthogonal(hidden_dim, rng) for _ in range(3)),
        *(np.zeros(hidden_dim) for _ in range(3)),
    )


def init_dense(input_dim: int, output_dim: int, rng, activation="identity") -> DenseParams:
    return DenseParams(glorot_uniform((output_dim, input_dim), rng), np.zeros(output_dim), activation)


def init_params(shape_spec, seed: int = 0) -> dict:
    """Initialise named parameter blocks.

    ``shape_spec`` maps a name to ``("gru", input_dim, hidden_dim)`` or
    ``("dense", input_dim, output_dim[, activation])``. Blocks are created
    in the mapping's order from one seeded stream.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, spec in shape_spec.items():
        kind = spec[0]
        if kind == "gru":
            out[name] = init_gru(spec[1], spec[2], rng)
        elif kind == "dense":
            out[name] = init_dense(spec[1], spec[2], rng, *spec[3:])
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return out


@dataclass
class GradCheckReport:
    errors: dict  # block -> worst relative error
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failed(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed


def _central_difference(loss_fn, flat, i, step):
    orig = flat[i]
    flat[i] = orig + step
    lp = loss_fn()
    flat[i] = orig - step
    lm = loss_fn()
    flat[i] = orig
    return float((lp - lm) / (2.0 * step))


def grad_check(closure, params: dict, tolerance: float = 1e-5, n_coords: int = 50,
               step: float = 1e-5, seed: int = 0, analytic: dict | None = None,
               loss_fn=None, refine_fn=None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure()`` returns ``(loss, grads)`` for the current contents of
    ``params`` (name -> array, perturbed in place and restored). Up to
    ``n_coords`` random coordinates per block are checked. ``loss_fn()``,
    if given, is used for the perturbed evaluations instead of
    ``closure()[0]``; ``closure`` may then be None when ``analytic`` is set.
    ``refine_fn()``, a more precise loss, re-evaluates any coordinate whose
    error exceeds a tenth of the tolerance, so round-off in the cheap loss
    cannot masquerade as a gradient error.
    """
    rng = np.random.default_rng(seed)
    if analytic is None:
        _, analytic = closure()
    if loss_fn is None:
        loss_fn = lambda: closure()[0]
    errors = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"grad_check: block {name} must be contiguous")
        a_flat = np.asarray(analytic[name]).reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= n_coords else rng.choice(n, n_coords, replace=False)
        worst = 0.0
        for i in idx:
            a = a_flat[i]
            num = _central_difference(loss_fn, flat, i, step)
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if refine_fn is not None and err > 0.1 * tolerance:
                num = _central_difference(refine_fn, flat, i, step)
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tolerance)
