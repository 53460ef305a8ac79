"""Dense layers, activations, loss and optimizers with hand-written backward passes.

Everything here is plain numpy and dtype-agnostic: parameters are kept as
float32 at rest and promoted to float64 for training and gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeError

LOG_CLAMP = 1e-7


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    """Logistic sigmoid, clipped so outputs stay strictly inside (0, 1)."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    s = expit(x.astype(dtype, copy=False))
    info = np.finfo(dtype)
    return np.clip(s, info.tiny, 1 - info.epsneg)


def identity(x):
    return np.asarray(x)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": identity}


def activation_grad(name: str, out, grad_out):
    """Backpropagate ``grad_out`` through an activation given its output."""
    if name == "relu":
        return grad_out * (out > 0)
    if name == "sigmoid":
        return grad_out * out * (1 - out)
    if name == "identity":
        return grad_out
    raise ValueError(f"unknown activation {name!r}")


# -- initialisation ---------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


# -- fully connected ---------------------------------------------------------

def fc_forward(W, b, x, activation: str = "identity"):
    """``activation(W x + b)``. ``x`` may be a vector or a (T, in) row batch."""
    W = np.asarray(W)
    b = np.asarray(b)
    x = np.asarray(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"fc_forward: W {W.shape}, b {b.shape}, x {x.shape} are incompatible"
        )
    return ACTIVATIONS[activation](x @ W.T + b)


def fc_backward(W, x, out, grad_out, activation: str = "identity"):
    """Returns ``(dx, dW, db)`` for :func:`fc_forward` on a row batch."""
    x2 = np.atleast_2d(x)
    da = np.atleast_2d(activation_grad(activation, out, grad_out))
    dW = da.T @ x2
    db = da.sum(axis=0)
    dx = da @ W
    if np.ndim(x) == 1:
        dx = dx[0]
    return dx, dW, db


# -- dropout -----------------------------------------------------------------

def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float64):
    """Inverted-dropout mask: zeros with probability ``rate``, else ``1/(1-rate)``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1 - rate)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    x = np.asarray(x)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return x * dropout_mask(x.shape, rate, rng, x.dtype.type)


# -- GRU ---------------------------------------------------------------------

@dataclass
class GruLayerParams:
    """One GRU layer. Gate blocks are stacked in the order update, reset, candidate.

    ``W`` is (3H, input_dim), ``U`` is (3H, H) and ``b`` is (3H,).
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h3, _ = self.W.shape
        if h3 % 3 or self.U.shape != (h3, h3 // 3) or self.b.shape != (h3,):
            raise ShapeError(
                f"inconsistent GRU shapes W {self.W.shape}, U {self.U.shape}, b {self.b.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    def gate(self, name: str):
        """``(W_g, U_g, b_g)`` views for gate ``'z'``, ``'r'`` or ``'n'``."""
        H = self.hidden_dim
        i = "zrn".index(name)
        sl = slice(i * H, (i + 1) * H)
        return self.W[sl], self.U[sl], self.b[sl]

    @classmethod
    def from_gates(cls, gates):
        """Build from a mapping ``{'z': (W, U, b), 'r': ..., 'n': ...}``."""
        W = np.concatenate([gates[g][0] for g in "zrn"])
        U = np.concatenate([gates[g][1] for g in "zrn"])
        b = np.concatenate([gates[g][2] for g in "zrn"])
        return cls(W, U, b)

    @classmethod
    def init(cls, input_dim, hidden_dim, rng, dtype=np.float32):
        W = np.concatenate([glorot_uniform(rng, hidden_dim, input_dim, dtype) for _ in range(3)])
        U = np.concatenate([glorot_uniform(rng, hidden_dim, hidden_dim, dtype) for _ in range(3)])
        return cls(W, U, np.zeros(3 * hidden_dim, dtype=dtype))

    def astype(self, dtype):
        return GruLayerParams(self.W.astype(dtype), self.U.astype(dtype), self.b.astype(dtype))

    def copy(self):
        return GruLayerParams(self.W.copy(), self.U.copy(), self.b.copy())


def gru_step(p: GruLayerParams, x, h_prev):
    """Single GRU step; ``h_next = (1 - z) * h_prev + z * n``."""
    x = np.asarray(x)
    h_prev = np.asarray(h_prev)
    if x.shape != (p.input_dim,) or h_prev.shape != (p.hidden_dim,):
        raise ShapeError(
            f"gru_step: expected x ({p.input_dim},) and h_prev ({p.hidden_dim},), "
            f"got x {x.shape} and h_prev {h_prev.shape}"
        )
    H = p.hidden_dim
    a = p.W @ x + p.b
    zr = expit(a[: 2 * H] + p.U[: 2 * H] @ h_prev)
    z, r = zr[:H], zr[H:]
    n = np.tanh(a[2 * H:] + p.U[2 * H:] @ (r * h_prev))
    return (1 - z) * h_prev + z * n


@dataclass
class GruCache:
    X: np.ndarray
    hs: np.ndarray  # (T+1, H), hs[0] is the initial state
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray


def gru_forward(p: GruLayerParams, X, h0=None):
    """Run a layer over a (T, input_dim) sequence. Returns ``(states (T, H), cache)``."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != p.input_dim:
        raise ShapeError(f"gru_forward: expected (T, {p.input_dim}) input, got {X.shape}")
    T, H = X.shape[0], p.hidden_dim
    dtype = np.result_type(X, p.W)
    hs = np.zeros((T + 1, H), dtype=dtype)
    if h0 is not None:
        hs[0] = h0
    z = np.empty((T, H), dtype=dtype)
    r = np.empty((T, H), dtype=dtype)
    n = np.empty((T, H), dtype=dtype)
    xa = X @ p.W.T + p.b
    U_zr, U_n = p.U[: 2 * H], p.U[2 * H:]
    for t in range(T):
        h = hs[t]
        zr = expit(xa[t, : 2 * H] + U_zr @ h)
        zt, rt = zr[:H], zr[H:]
        nt = np.tanh(xa[t, 2 * H:] + U_n @ (rt * h))
        hs[t + 1] = (1 - zt) * h + zt * nt
        z[t], r[t], n[t] = zt, rt, nt
    return hs[1:], GruCache(X, hs, z, r, n)


def gru_backward(p: GruLayerParams, cache: GruCache, dH):
    """Backprop through :func:`gru_forward`.

    ``dH`` is the loss gradient w.r.t. every output state. Returns
    ``(dX, dh0, GruLayerParams-of-gradients)``.
    """
    X, hs, z, r, n = cache.X, cache.hs, cache.z, cache.r, cache.n
    T, H = z.shape
    U_zr_T = p.U[: 2 * H].T
    U_n_T = p.U[2 * H:].T
    da = np.empty((T, 3 * H), dtype=hs.dtype)
    dh_next = np.zeros(H, dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + dh_next
        h = hs[t]
        zt, rt, nt = z[t], r[t], n[t]
        dan = dh * zt * (1 - nt * nt)
        drh = U_n_T @ dan
        daz = dh * (nt - h) * zt * (1 - zt)
        dar = drh * h * rt * (1 - rt)
        da[t, :H] = daz
        da[t, H: 2 * H] = dar
        da[t, 2 * H:] = dan
        dh_next = dh * (1 - zt) + drh * rt + U_zr_T @ da[t, : 2 * H]
    h_prev = hs[:-1]
    dU = np.empty_like(p.U, dtype=hs.dtype)
    dU[: 2 * H] = da[:, : 2 * H].T @ h_prev
    dU[2 * H:] = da[:, 2 * H:].T @ (r * h_prev)
    grads = GruLayerParams(da.T @ X, dU, da.sum(axis=0))
    dX = da @ p.W
    return dX, dh_next, grads


# -- loss --------------------------------------------------------------------

def weighted_bce_loss(scores, labels, pos_weight: float = 1.0):
    """Mean weighted binary cross-entropy and its gradient w.r.t. ``scores``.

    ``loss = mean(-(pos_weight * y * log p + (1 - y) * log(1 - p)))`` with ``p``
    clamped to ``[1e-7, 1 - 1e-7]`` before the logs. The returned gradient is
    evaluated at the clamped ``p``.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ")
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    p = np.clip(scores, LOG_CLAMP, 1 - LOG_CLAMP)
    N = p.size
    loss = -(pos_weight * labels * np.log(p) + (1 - labels) * np.log1p(-p)).sum() / N
    grad = (-pos_weight * labels / p + (1 - labels) / (1 - p)) / N
    return float(loss), grad


def bce_grad_wrt_logits(scores, labels, pos_weight: float = 1.0):
    """Loss and gradient w.r.t. the pre-sigmoid logits of ``scores``."""
    loss, g = weighted_bce_loss(scores, labels, pos_weight)
    return loss, g * scores * (1 - scores)


# -- optimizers --------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD or Adam state over a dict of named parameter arrays."""

    learning_rate: float
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: dict, grads: dict):
    """Update ``params`` in place from ``grads`` (only keys present in ``grads``)."""
    state.step += 1
    lr = state.learning_rate
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: param {p.shape} vs grad {g.shape}")
        if state.kind == "sgd":
            p -= lr * g
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** state.step)
        v_hat = v / (1 - state.beta2 ** state.step)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# -- row-wise L2 normalisation with backward (used by the fused fc7 path) ----

def l2_rows(X):
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1)
    return X / safe, norms


def l2_rows_backward(Y, norms, dY):
    safe = np.where(norms > 0, norms, 1)
    dX = (dY - Y * (Y * dY).sum(axis=1, keepdims=True)) / safe
    return np.where(norms > 0, dX, 0)
