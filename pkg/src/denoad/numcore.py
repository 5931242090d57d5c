"""Reverse-mode autodiff over numpy arrays, plus the optimizer stack.

Everything the trainer differentiates goes through the small op set
below.  Ops are fused at the granularity that matters for speed on a
CPU (layer norm, linear, softmax, the smoothed loss) and each carries
its analytic backward.  Training runs in float32; gradient checking
switches the same graph to float64 by converting parameters.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError

_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops executed inside build no graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Array node in the autodiff graph.

    grad is lazily allocated; leaves created with requires_grad=True
    (parameters) accumulate into .grad on backward().
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def astype(self, dtype):
        """Convert parameter storage in place (used by grad checking)."""
        self.data = self.data.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)
        return self

    def backward(self):
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free the graph as we go; parameters keep their grads
            node._backward = None
            node._parents = ()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _needs_graph(*tensors):
    return _GRAD_ENABLED and any(
        isinstance(t, Tensor) and (t.requires_grad or t._parents or t._backward)
        for t in tensors
    )


def _make(data, parents, backward_fn, track):
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not isinstance(t, Tensor) or not (t.requires_grad or t._parents or t._backward):
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    """Elementwise a + b with broadcasting; b may be a plain array."""
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.data.dtype)
    track = _needs_graph(a, b)
    out_data = a.data + bd

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, track)


def mul(a, b):
    """Elementwise a * b; b may be a Tensor, scalar, or array constant."""
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.data.dtype)
    track = _needs_graph(a, b)
    out_data = a.data * bd

    def backward(g):
        _accum(a, _unbroadcast(g * bd, a.data.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, track)


def reshape(a, shape):
    track = _needs_graph(a)
    src_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(src_shape))

    return _make(out_data, (a,), backward, track)


def transpose(a, axes):
    track = _needs_graph(a)
    inv = np.argsort(axes)
    out_data = np.transpose(a.data, axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(out_data, (a,), backward, track)


def matmul(a, b):
    """Batched matmul; leading dims of both operands must agree."""
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(
            f"matmul batch dims differ: {a.data.shape} vs {b.data.shape}"
        )
    track = _needs_graph(a, b)
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), backward, track)


def linear(x, w, b=None):
    """y = x @ w (+ b) with leading dims collapsed for BLAS."""
    track = _needs_graph(x, w, b)
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    out_data = y2.reshape(lead + (w.data.shape[-1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        _accum(w, x2.T @ g2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    return _make(out_data, (x, w, b), backward, track)


def relu(x):
    track = _needs_graph(x)
    mask = x.data > 0
    out_data = x.data * mask

    def backward(g):
        _accum(x, g * mask)

    return _make(out_data, (x,), backward, track)


def embedding(weight, ids):
    """Row gather weight[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    track = _needs_graph(weight)
    out_data = weight.data[ids]

    def backward(g):
        if not (weight.requires_grad or weight._parents or weight._backward):
            return
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.data.shape[-1]))
        _accum(weight, gw)

    return _make(out_data, (weight,), backward, track)


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer norm over the last axis with population variance."""
    track = _needs_graph(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gy - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _make(out_data, (x, gain, bias), backward, track)


def softmax(x):
    """Softmax over the last axis (numerically shifted)."""
    track = _needs_graph(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), backward, track)


def dropout(x, p, rng, train):
    """Inverted dropout; draws from rng only when active."""
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    track = _needs_graph(x)
    out_data = x.data * keep * scale

    def backward(g):
        _accum(x, g * keep * scale)

    return _make(out_data, (x,), backward, track)


def sum_all(x):
    track = _needs_graph(x)
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), backward, track)


def project_vocab(x, weight, delta=None):
    """Logits against a tied embedding table: x @ (weight + delta).T."""
    track = _needs_graph(x, weight, delta)
    w = weight.data if delta is None else weight.data + delta.data
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out_data = (x2 @ w.T).reshape(lead + (w.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accum(x, (g2 @ w).reshape(x.data.shape))
        gw = g2.T @ x2
        _accum(weight, gw)
        if delta is not None:
            _accum(delta, gw)

    return _make(out_data, (x, weight, delta), backward, track)


def label_smoothed_nll(logits, targets, smoothing, pad_id):
    """Mean label-smoothed negative log likelihood over non-pad targets.

    Smoothing mass is spread uniformly over the full vocabulary,
    including the gold index.  Positions whose target equals pad_id are
    excluded from both the loss and the gradient; a batch with no
    non-pad target is an error rather than a silent zero.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    if logits.data.shape[:-1] != targets.shape:
        raise ValueError(
            f"targets shape {targets.shape} does not match logits {logits.data.shape}"
        )
    flat_t = targets.reshape(-1)
    keep = flat_t != pad_id
    n = int(keep.sum())
    if n == 0:
        raise DataError("loss over a batch with no non-pad targets")
    track = _needs_graph(logits)

    x2 = logits.data.reshape(-1, logits.data.shape[-1])
    vocab = x2.shape[-1]
    zmax = x2.max(axis=-1, keepdims=True)
    z = x2 - zmax
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(x2.shape[0])
    gold = logp[rows, flat_t.clip(0, vocab - 1)]
    mean_lp = logp.mean(axis=-1)
    per_pos = -((1.0 - smoothing) * gold + smoothing * mean_lp)
    out_data = np.asarray((per_pos * keep).sum() / n, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        q = np.full_like(p, smoothing / vocab)
        q[rows, flat_t.clip(0, vocab - 1)] += 1.0 - smoothing
        gx = (p - q) * (keep[:, None].astype(p.dtype) / n)
        _accum(logits, (g * gx).reshape(logits.data.shape))

    return _make(out_data, (logits,), backward, track)


# --- learning-rate schedule ---


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup then polynomial decay to zero at total_updates."""

    warmup_updates: int
    total_updates: int
    max_lr: float
    power: float = 1.0

    def __post_init__(self):
        if self.total_updates < self.warmup_updates or self.warmup_updates < 0:
            raise ConfigError(
                f"bad schedule: warmup={self.warmup_updates} total={self.total_updates}"
            )
        if self.max_lr <= 0:
            raise ConfigError(f"max_lr must be positive, got {self.max_lr}")


def lr_at(step, sched):
    """Learning rate at an update step, counted from 0 to total inclusive."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    if step > sched.total_updates:
        raise NumericError(
            f"schedule exhausted: step {step} > total {sched.total_updates}"
        )
    if step <= sched.warmup_updates and sched.warmup_updates > 0:
        return sched.max_lr * step / sched.warmup_updates
    return _decay(step, sched)


def _decay(step, sched):
    span = sched.total_updates - sched.warmup_updates
    if span == 0:
        return 0.0
    frac = (sched.total_updates - step) / span
    return sched.max_lr * frac**sched.power


# --- optimizer ---


@dataclass
class AdamState:
    """First/second moments keyed by parameter name, plus shared step t."""

    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state, lr, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
    """One Adam update with decoupled weight decay, in place.

    All gradients are validated before any mutation: a non-finite value
    anywhere aborts with parameters, moments, and t untouched.  A
    missing gradient counts as zero (the moment tail still decays).
    """
    items = list(named_params.items())
    for name, p in items:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in '{name}'; step aborted")
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in items:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


class Adam:
    """Convenience wrapper binding a parameter dict to one AdamState."""

    def __init__(self, named_params, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
        self.params = dict(named_params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        adam_step(
            self.params,
            self.state,
            lr,
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )


# --- gradient checking ---


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    samples: int


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(loss_fn, named_params, rng, eps=1e-6, samples_per_param=4):
    """Compare analytic and central-difference gradients in float64.

    loss_fn must rebuild the same forward pass on every call (fix any
    rng it uses internally).  Parameters are expected to already be
    float64; float32 storage makes the comparison meaningless.
    """
    for name, p in named_params.items():
        if p.data.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters ('{name}')")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in named_params.items():
        analytic[name] = (
            np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True)
        )

    per_param = {}
    total_samples = 0
    for name, p in named_params.items():
        flat = p.data.reshape(-1)
        size = flat.shape[0]
        if size <= samples_per_param:
            idxs = np.arange(size)
        else:
            idxs = rng.choice(size, size=samples_per_param, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(loss_fn().item())
            flat[i] = orig - eps
            with no_grad():
                down = float(loss_fn().item())
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            worst = max(worst, _rel_err(a, numeric))
            total_samples += 1
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_err, per_param=per_param, samples=total_samples)
