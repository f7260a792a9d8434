"""Differentiable neural primitives with hand-written analytic backward passes."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

LAYER_NORM_EPS = 1e-12
CHECKPOINT_MAGIC = b"RMVS"
CHECKPOINT_VERSION = 1


@dataclass
class Parameter:
    """A named trainable tensor with its gradient accumulator."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class LstmState:
    """Cell and hidden state; trailing dimension is the configured hidden size."""

    c: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.c.shape != self.h.shape:
            raise ValueError("c and h must share a shape")


def _val(p):
    return p.value if isinstance(p, Parameter) else np.asarray(p, dtype=np.float64)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# softmax


def softmax(x, axis=-1):
    """Row-stabilized softmax along `axis`.

    Args:
        x: array [..., n] of finite values.
    Returns:
        Array of the same shape; slices along `axis` are non-negative and sum to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(grad, y, axis=-1):
    """Gradient of softmax given its output `y` and upstream `grad`."""
    inner = np.sum(grad * y, axis=axis, keepdims=True)
    return y * (grad - inner)


# ---------------------------------------------------------------------------
# layer norm


def layer_norm_forward(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Returns (out, cache) where cache feeds layer_norm_backward.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm needs a last axis of size >= 2, got {d}")
    g, b = _val(gain), _val(bias)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * g + b, (xhat, inv_std, g)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_backward(grad, cache):
    """Returns (dx, dgain, dbias)."""
    xhat, inv_std, g = cache
    d = xhat.shape[-1]
    sum_axes = tuple(range(xhat.ndim - 1))
    dgain = np.sum(grad * xhat, axis=sum_axes)
    dbias = np.sum(grad, axis=sum_axes)
    gx = grad * g
    dx = inv_std * (
        gx
        - gx.mean(axis=-1, keepdims=True)
        - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# affine


def linear_forward(x, w, b):
    """y = x @ w + b over the trailing axis. Returns (y, cache)."""
    x = np.asarray(x, dtype=np.float64)
    wv, bv = _val(w), _val(b)
    if x.shape[-1] != wv.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {wv.shape[0]}")
    return x @ wv + bv, (x, wv)


def linear(x, w, b):
    return linear_forward(x, w, b)[0]


def linear_backward(grad, cache):
    """Returns (dx, dw, db)."""
    x, wv = cache
    dx = grad @ wv.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad.reshape(-1, grad.shape[-1])
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# self-attention


def self_attention_forward(x, wq, wk, wv):
    """Single-head self-attention S = softmax(Q Kᵀ) V, no scaling term.

    Args:
        x: [..., N, d] stacked token features (views along N).
    Returns:
        ((s, attn), cache): s is [..., N, d], attn rows sum to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    q_w, k_w, v_w = _val(wq), _val(wk), _val(wv)
    d = x.shape[-1]
    for name, w in (("WQ", q_w), ("WK", k_w), ("WV", v_w)):
        if w.shape != (d, d):
            raise ValueError(f"{name} shape {w.shape} does not match feature dim {d}")
    q = x @ q_w
    k = x @ k_w
    v = x @ v_w
    scores = q @ np.swapaxes(k, -1, -2)
    attn = softmax(scores, axis=-1)
    s = attn @ v
    return (s, attn), (x, q, k, v, attn, q_w, k_w, v_w)


def self_attention(x, wq, wk, wv):
    return self_attention_forward(x, wq, wk, wv)[0]


def self_attention_backward(grad_s, cache, grad_attn=None):
    """Returns (dx, dwq, dwk, dwv)."""
    x, q, k, v, attn, q_w, k_w, v_w = cache
    attn_t = np.swapaxes(attn, -1, -2)
    dv = attn_t @ grad_s
    dattn = grad_s @ np.swapaxes(v, -1, -2)
    if grad_attn is not None:
        dattn = dattn + grad_attn
    dscores = softmax_backward(dattn, attn)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    din = x.shape[-1]

    def _wgrad(dout):
        return x.reshape(-1, din).T @ dout.reshape(-1, din)

    dx = dq @ q_w.T + dk @ k_w.T + dv @ v_w.T
    return dx, _wgrad(dq), _wgrad(dk), _wgrad(dv)


def add_norm_forward(x, s, gain, bias):
    """LayerNorm(x + s). Returns (out, cache)."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.shape != s.shape:
        raise ValueError(f"add_norm shape mismatch: {x.shape} vs {s.shape}")
    return layer_norm_forward(x + s, gain, bias)


def add_norm(x, s, gain, bias):
    return add_norm_forward(x, s, gain, bias)[0]


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmParams:
    """Gate weights; each w_* is [in + hidden, hidden], right-multiplied."""

    w_z: Parameter
    b_z: Parameter
    w_f: Parameter
    b_f: Parameter
    w_u: Parameter
    b_u: Parameter
    w_o: Parameter
    b_o: Parameter

    def all(self):
        return [self.w_z, self.b_z, self.w_f, self.b_f,
                self.w_u, self.b_u, self.w_o, self.b_o]


def lstm_step_forward(f_k, state: LstmState, params: LstmParams):
    """One LSTM step.

    z = tanh(W[F_k, h] + b); forget/update/output gates via sigmoid;
    c' = z_f∘c + z_u∘z; h' = z_o∘tanh(c').

    Args:
        f_k: [..., in] point feature.
        state: previous LstmState with [..., hidden] fields.
    Returns:
        (LstmState, cache).
    """
    f_k = np.asarray(f_k, dtype=np.float64)
    if not (np.all(np.isfinite(f_k)) and np.all(np.isfinite(state.c)) and np.all(np.isfinite(state.h))):
        raise ValueError("lstm_step requires finite inputs")
    a = np.concatenate([f_k, state.h], axis=-1)
    z = np.tanh(a @ _val(params.w_z) + _val(params.b_z))
    zf = sigmoid(a @ _val(params.w_f) + _val(params.b_f))
    zu = sigmoid(a @ _val(params.w_u) + _val(params.b_u))
    zo = sigmoid(a @ _val(params.w_o) + _val(params.b_o))
    c_new = zf * state.c + zu * z
    tc = np.tanh(c_new)
    h_new = zo * tc
    cache = (a, z, zf, zu, zo, state.c, tc, f_k.shape[-1], params)
    return LstmState(c=c_new, h=h_new), cache


def lstm_step(f_k, state, params):
    return lstm_step_forward(f_k, state, params)[0]


def lstm_step_backward(grad_c, grad_h, cache):
    """Backward of one step.

    Args:
        grad_c, grad_h: upstream gradients w.r.t. the new state.
    Returns:
        (df_k, dstate_c, dstate_h, grads) with grads an 8-tuple matching LstmParams.all().
    """
    a, z, zf, zu, zo, c_prev, tc, in_dim, params = cache
    dzo = grad_h * tc
    dc = grad_c + grad_h * zo * (1.0 - tc * tc)
    dzf = dc * c_prev
    dzu = dc * z
    dz = dc * zu
    dc_prev = dc * zf
    # pre-activation grads
    pz = dz * (1.0 - z * z)
    pf = dzf * zf * (1.0 - zf)
    pu = dzu * zu * (1.0 - zu)
    po = dzo * zo * (1.0 - zo)
    a2 = a.reshape(-1, a.shape[-1])
    grads = []
    da = np.zeros_like(a)
    for pre, w in ((pz, params.w_z), (pf, params.w_f), (pu, params.w_u), (po, params.w_o)):
        p2 = pre.reshape(-1, pre.shape[-1])
        grads.append(a2.T @ p2)
        grads.append(p2.sum(axis=0))
        da += pre @ _val(w).T
    df = da[..., :in_dim]
    dh_prev = da[..., in_dim:]
    return df, dc_prev, dh_prev, tuple(grads)


# ---------------------------------------------------------------------------
# MLP


_ACTIVATIONS = {"relu", "tanh", "linear"}


def mlp_forward(x, layers, activation="relu"):
    """Affine stack with `activation` between layers; the final layer is linear.

    Args:
        layers: sequence of (W, b) pairs (Parameters or arrays), shapes chaining.
    Returns:
        (y, cache).
    """
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    x = np.asarray(x, dtype=np.float64)
    caches = []
    h = x
    n = len(layers)
    for i, (w, b) in enumerate(layers):
        h, lin_cache = linear_forward(h, w, b)
        act_cache = None
        if i < n - 1 and activation != "linear":
            if activation == "relu":
                act_cache = h > 0
                h = h * act_cache
            else:
                h = np.tanh(h)
                act_cache = h
        caches.append((lin_cache, act_cache))
    return h, (caches, activation)


def mlp_apply(x, layers, activation="relu"):
    return mlp_forward(x, layers, activation)[0]


def mlp_backward(grad, cache):
    """Returns (dx, grads) with grads a flat list [dW0, db0, dW1, db1, ...]."""
    caches, activation = cache
    grads = [None] * (2 * len(caches))
    g = grad
    for i in range(len(caches) - 1, -1, -1):
        lin_cache, act_cache = caches[i]
        if act_cache is not None:
            if activation == "relu":
                g = g * act_cache
            else:
                g = g * (1.0 - act_cache * act_cache)
        g, dw, db = linear_backward(g, lin_cache)
        grads[2 * i] = dw
        grads[2 * i + 1] = db
    return g, grads


# ---------------------------------------------------------------------------
# straight-through Gumbel gate


def gumbel_noise(shape, seed):
    """Deterministic Gumbel(0,1) draws from a counter-based Philox stream."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gate_forward(logits, noise, temperature=1.0):
    """Soft and hard gate decisions. Returns (hard, soft)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    soft = sigmoid((logits + noise) / temperature)
    hard = (soft > 0.5).astype(np.float64)
    return hard, soft


def gumbel_softmax_gate(logits, rng_seed, temperature=1.0):
    """Binary straight-through gate: soft = σ((logits + gumbel)/τ), hard = soft > 0.5.

    The gradient of `hard` w.r.t. `logits` is defined as the gradient of `soft`
    (straight-through); see gate_backward.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size < 1:
        raise ValueError("gate needs at least one logit")
    noise = gumbel_noise(logits.shape, rng_seed)
    return gate_forward(logits, noise, temperature)


def gate_backward(grad_hard, grad_soft, soft, temperature=1.0):
    """Straight-through backward: d(hard)/d(soft) := 1, then through the sigmoid.

    Args:
        grad_hard: upstream gradient arriving at the hard mask (may be None).
        grad_soft: upstream gradient arriving at the soft values (may be None).
    Returns:
        dlogits.
    """
    g = 0.0
    if grad_hard is not None:
        g = g + grad_hard
    if grad_soft is not None:
        g = g + grad_soft
    return g * soft * (1.0 - soft) / temperature


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: "OrderedDict[str, float]"
    passed: bool
    eps: float
    tol: float


def grad_check(op_closure, params, eps=1e-5, tol=1e-4):
    """Compare analytic gradients against central finite differences.

    Args:
        op_closure: () -> (loss, grads) where grads maps param name to an array
            of the parameter's shape. Must be deterministic.
        params: list of Parameter to perturb entry by entry.
    Returns:
        GradCheckReport; passes iff the max relative error < tol. The relative
        error denominator is floored at 1e-3 so finite-difference noise on
        near-zero entries does not dominate.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    loss0, analytic = op_closure()
    if not np.isfinite(loss0):
        raise ValueError("closure produced a non-finite loss")
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    per_param = OrderedDict()
    worst = 0.0
    for p in params:
        if p.name not in analytic:
            raise KeyError(f"closure returned no gradient for {p.name!r}")
        a = analytic[p.name]
        flat = p.value.reshape(-1)
        num = np.zeros(flat.shape[0])
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            lp = op_closure()[0]
            flat[i] = orig - eps
            lm = op_closure()[0]
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"non-finite loss while perturbing {p.name}[{i}]")
            num[i] = (lp - lm) / (2.0 * eps)
        af = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(af), np.abs(num)), 1e-3)
        err = float(np.max(np.abs(af - num) / denom)) if flat.size else 0.0
        per_param[p.name] = err
        worst = max(worst, err)
    return GradCheckReport(max_rel_err=worst, per_param=per_param,
                           passed=worst < tol, eps=eps, tol=tol)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, params):
    """Write parameters as little-endian binary: RMVS magic, u32 version, then
    per parameter u32 name length, name bytes, u32 rank, u32 dims, f64 payload."""
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name, p) for p in params]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, p in items:
            value = _val(p)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint. Returns OrderedDict[name, ndarray]."""
    out = OrderedDict()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
            out[name] = data.reshape(dims)
    return out
