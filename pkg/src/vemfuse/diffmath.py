"""Small dense-tensor engine with reverse-mode differentiation.

Every operation builds a node that remembers its parents and a closure
propagating the upstream gradient.  Records are dynamic: a new graph is
built per forward pass, which is what we need when densification changes
the message-passing topology every batch.

Training runs at float32; gradient checks and probabilistic identities use
float64 (pass float64 arrays and the dtype is preserved through every op).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12


class NonFiniteError(FloatingPointError, ValueError):
    """NaN or infinity where a finite value is required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    return as_tensor(a, like), as_tensor(b, like)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Create an output node; ``backward_fn`` maps the upstream gradient to
    one gradient per parent (``None`` for parents that need nothing)."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient is zero where the floor is active."""
    mask = x.data > floor
    return _node(np.where(mask, x.data, floor).astype(x.dtype), (x,),
                 lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z)).astype(z.dtype)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return _node(out, (x,), lambda g: (g * _sigmoid(x.data),))


# ----------------------------------------------------------------------
# linear algebra, shape and indexing
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs at least 1-d operands")
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = (bd @ g[..., None])[..., 0]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bd.ndim == 1:
            ga = g[..., :, None] * bd
            gb = np.swapaxes(ad, -1, -2) @ g[..., None]
            return ga, _unbroadcast(gb[..., 0], b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _node(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def index(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), bw)


def take(x: Tensor, ids) -> Tensor:
    """Gather rows ``x[ids]`` along the first axis (ids may be any shape)."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, ids.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (full,)

    return _node(x.data[ids], (x,), bw)


def index_add(src: Tensor, ids, size: int) -> Tensor:
    """Scatter-add rows of ``src`` into a zero tensor with ``size`` rows."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((size,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, ids, src.data)
    return _node(out, (src,), lambda g: (g[ids],))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def ccorr(a: Tensor, b: Tensor) -> Tensor:
    """Circular correlation along the last axis: c_k = sum_i a_i b_{(i+k) mod d}."""
    d = a.shape[-1]

    def corr(x, y):
        return np.fft.irfft(np.conj(np.fft.rfft(x)) * np.fft.rfft(y), n=d).astype(a.dtype)

    def conv(x, y):
        return np.fft.irfft(np.fft.rfft(x) * np.fft.rfft(y), n=d).astype(a.dtype)

    out = corr(a.data, b.data)
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(corr(g, b.data), a.shape),
                            _unbroadcast(conv(a.data, g), b.shape)))


# ----------------------------------------------------------------------
# distributions
# ----------------------------------------------------------------------
def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite logit")


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_finite(x.data)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        s = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - s) / temperature,)

    return _node(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_finite(x.data)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _node(out, (x,), bw)


def softmax_T(logits, temperature: float = 1.0) -> np.ndarray | Tensor:
    """Tempered softmax ``exp(l_i/T) / sum_j exp(l_j/T)`` along the last axis.

    Accepts a Tensor (returns a recorded Tensor) or a plain array.
    """
    if isinstance(logits, Tensor):
        return softmax(logits, -1, temperature)
    return softmax(Tensor(np.asarray(logits, dtype=np.float64)), -1, temperature).data


def _as_prob(p) -> np.ndarray:
    return np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)


def kl_div(p, q, eps: float = EPS):
    """KL(p || q) in nats along the last axis, with 0 ln 0 = 0 and q floored at eps.

    Tensors are differentiated; plain arrays return a float (or array for
    batched input).
    """
    if isinstance(p, Tensor) or isinstance(q, Tensor):
        p, q = as_tensor(p), as_tensor(q)
        if p.shape != q.shape:
            raise ValueError(f"length mismatch {p.shape} vs {q.shape}")
        pd = p.data
        safe_p = np.where(pd > 0, pd, 1.0)
        logp = Tensor(np.log(safe_p).astype(pd.dtype))
        if p.requires_grad:
            logp = log(add(mul(p, pd > 0), Tensor((pd <= 0).astype(pd.dtype))))
        terms = mul(p, sub(logp, log(clamp_min(q, eps))))
        return tsum(terms, axis=-1)
    pa, qa = _as_prob(p), _as_prob(q)
    if pa.shape != qa.shape:
        raise ValueError(f"length mismatch {pa.shape} vs {qa.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pa > 0, pa * (np.log(np.where(pa > 0, pa, 1.0)) - np.log(np.maximum(qa, eps))), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float | np.ndarray:
    """Shannon entropy in nats along the last axis (0 ln 0 = 0)."""
    pa = _as_prob(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pa > 0, pa * np.log(np.where(pa > 0, pa, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def cross_entropy(p, log_q) -> float | np.ndarray:
    """-sum_i p_i log_q_i along the last axis."""
    out = -(_as_prob(p) * np.asarray(log_q, dtype=np.float64)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    y = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    out = np.logaddexp(0.0, x).astype(x.dtype) - y * x
    return _node(out, (logits,), lambda g: (g * (_sigmoid(x) - y),))


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar ``loss``.

    Leaf gradients accumulate across calls; call :func:`zero_grad` between
    steps.  Intermediate gradients live only for the duration of the call.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not part of a recorded computation")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------
def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = 1e-5, n_coords: int = 20, seed: int = 0,
                      floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the computation from the current contents of
    ``params`` (which are perturbed in place and restored).  A random
    subset of ``n_coords`` coordinates per parameter is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    zero_grad(params)
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = loss_fn().item()
            flat[c] = orig - step
            down = loss_fn().item()
            flat[c] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    zero_grad(params)
    return worst


# ----------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------
class Adam:
    """Adaptive-moment optimizer with global-norm gradient clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return norm


# ----------------------------------------------------------------------
# checkpoints: flat binary blob + JSON manifest
# ----------------------------------------------------------------------
def save_checkpoint(prefix: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    blob_path = prefix.with_suffix(".bin")
    manifest_path = prefix.with_suffix(".json")
    entries = {}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            raw = arr.tobytes()
            entries[name] = {"shape": list(arr.shape), "dtype": arr.dtype.str,
                             "offset": offset, "nbytes": len(raw)}
            fh.write(raw)
            offset += len(raw)
    manifest = {"tensors": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return blob_path, manifest_path


def load_checkpoint(prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    manifest_path = prefix.with_suffix(".json")
    blob_path = prefix.with_suffix(".bin")
    if not manifest_path.exists() or not blob_path.exists():
        raise FileNotFoundError(f"checkpoint {prefix} not found")
    manifest = json.loads(manifest_path.read_text())
    raw = blob_path.read_bytes()
    arrays = {}
    for name, e in manifest["tensors"].items():
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[name] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})
