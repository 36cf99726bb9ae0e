"""Built-in feed-forward neural component.

A small MLP with tanh hidden layers and a [0,1]-valued head: elementwise
sigmoid, or softmax over fixed-width output groups (one-hot style atoms).
Reverse-mode gradients, AdamW with decoupled weight decay, BCE/MSE losses,
and a text checkpoint format round out what the learning algorithms need.
No external deep-learning runtime; everything is plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mlp",
    "AdamW",
    "NeuralBinding",
    "init_mlp",
    "forward",
    "forward_cached",
    "backward",
    "neural_loss",
    "bind_forward",
    "bind_backward",
    "save_mlp",
    "load_mlp",
]


@dataclass
class Mlp:
    sizes: list  # layer widths, input first
    head: str  # "sigmoid" | "softmax"
    group: int  # softmax group width (1 for sigmoid)
    params: list  # [W0, b0, W1, b1, ...], W shaped (n_out, n_in)

    @property
    def d_in(self):
        return self.sizes[0]

    @property
    def d_out(self):
        return self.sizes[-1]


def init_mlp(sizes, head="sigmoid", group=1, seed=0):
    """Xavier-uniform weights, zero biases, deterministic under ``seed``."""
    if head not in ("sigmoid", "softmax"):
        raise ValueError(f"unknown head {head!r}")
    if head == "softmax":
        if group < 2 or sizes[-1] % group:
            raise ValueError("softmax head needs output width divisible by group")
    else:
        group = 1
    rng = np.random.default_rng(seed)
    params = []
    for n_in, n_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        params.append(rng.uniform(-limit, limit, (n_out, n_in)))
        params.append(np.zeros(n_out))
    return Mlp(list(sizes), head, group, params)


def _head(mlp, z):
    if mlp.head == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    shape = z.shape[:-1] + (z.shape[-1] // mlp.group, mlp.group)
    zz = z.reshape(shape)
    zz = zz - zz.max(axis=-1, keepdims=True)
    e = np.exp(zz)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(z.shape)


def forward(mlp, x):
    """Outputs in [0,1]; ``x`` is (d_in,) or batched (B, d_in)."""
    return forward_cached(mlp, x)[0]


def forward_cached(mlp, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mlp.d_in:
        raise ValueError(f"input width {x.shape[-1]} != {mlp.d_in}")
    acts = [x]
    h = x
    n_layers = len(mlp.params) // 2
    for k in range(n_layers):
        w, b = mlp.params[2 * k], mlp.params[2 * k + 1]
        z = h @ w.T + b
        h = np.tanh(z) if k < n_layers - 1 else z
        acts.append(h)
    g = _head(mlp, h)
    return g, (acts, g)


def backward(mlp, cache, upstream):
    """Gradients of ``<upstream, g>`` w.r.t. every parameter array."""
    acts, g = cache
    upstream = np.asarray(upstream, dtype=float)
    if mlp.head == "sigmoid":
        dz = upstream * g * (1.0 - g)
    else:
        shape = g.shape[:-1] + (g.shape[-1] // mlp.group, mlp.group)
        p = g.reshape(shape)
        up = upstream.reshape(shape)
        dz = (p * (up - (up * p).sum(axis=-1, keepdims=True))).reshape(g.shape)
    grads = [None] * len(mlp.params)
    n_layers = len(mlp.params) // 2
    for k in reversed(range(n_layers)):
        h_in = acts[k]
        if dz.ndim == 1:
            grads[2 * k] = np.outer(dz, h_in)
            grads[2 * k + 1] = dz.copy()
        else:
            grads[2 * k] = dz.T @ h_in
            grads[2 * k + 1] = dz.sum(axis=0)
        if k:
            dz = (dz @ mlp.params[2 * k]) * (1.0 - acts[k] * acts[k])
    return grads


def neural_loss(g, t, kind="bce", mask=None):
    """Mean loss over labeled coordinates and its gradient in ``g``.

    ``mask`` selects the labeled coordinates; unlabeled ones contribute
    nothing and get zero gradient.
    """
    g = np.asarray(g, dtype=float)
    t = np.asarray(t, dtype=float)
    mask = np.ones(g.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    grad = np.zeros_like(g)
    if not n:
        return 0.0, grad
    if kind == "mse":
        d = np.where(mask, g - t, 0.0)
        loss = float((d * d).sum()) / n
        grad = 2.0 * d / n
    elif kind == "bce":
        gc = np.clip(g, 1e-12, 1.0 - 1e-12)
        terms = -(t * np.log(gc) + (1.0 - t) * np.log1p(-gc))
        loss = float(np.where(mask, terms, 0.0).sum()) / n
        grad = np.where(mask, (gc - t) / (gc * (1.0 - gc)), 0.0) / n
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return loss, grad


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam; moments allocated on first step."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        for p, gr, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * gr
            v *= self.beta2
            v += (1.0 - self.beta2) * gr * gr
            mh = m / (1.0 - self.beta1**t)
            vh = v / (1.0 - self.beta2**t)
            p -= self.lr * (mh / (np.sqrt(vh) + self.eps) + self.weight_decay * p)
        return params


@dataclass
class NeuralBinding:
    """Per-example inputs and the contiguous output block each row fills."""

    features: np.ndarray  # (n_examples, d_in)
    starts: np.ndarray  # (n_examples,) offset of each block in the flat g
    width: int  # block width == mlp.d_out

    @property
    def n_g(self):
        return len(self.starts) * self.width if len(self.starts) else 0


def bind_forward(mlp, binding):
    """Flat deep-atom vector (and cache) for all bound examples."""
    if not len(binding.starts):
        return np.zeros(0), None
    out, cache = forward_cached(mlp, binding.features)
    flat = np.zeros(int(binding.starts.max()) + binding.width)
    for row, s in enumerate(binding.starts):
        flat[s : s + binding.width] = out[row]
    return flat, cache


def bind_backward(mlp, binding, cache, d_g):
    """Parameter gradients from a flat upstream over the bound atoms."""
    up = np.zeros((len(binding.starts), binding.width))
    for row, s in enumerate(binding.starts):
        up[row] = d_g[s : s + binding.width]
    return backward(mlp, cache, up)


def save_mlp(mlp, path):
    """Plain-text checkpoint: header line, then one line per parameter."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("mlp\t1\t%s\t%d\t%s\n" % (mlp.head, mlp.group,
                                           ",".join(map(str, mlp.sizes))))
        for p in mlp.params:
            flat = " ".join(repr(float(v)) for v in np.ravel(p))
            fh.write("%s\t%s\n" % (",".join(map(str, p.shape)), flat))


def load_mlp(path):
    with open(path, encoding="utf-8") as fh:
        tag, ver, head, group, sizes = fh.readline().rstrip("\n").split("\t")
        if tag != "mlp" or ver != "1":
            raise ValueError(f"{path}: not a checkpoint file")
        mlp = Mlp(
            [int(s) for s in sizes.split(",")], head, int(group), []
        )
        for line in fh:
            shape, flat = line.rstrip("\n").split("\t")
            arr = np.array([float(v) for v in flat.split(" ")] or [], dtype=float)
            mlp.params.append(arr.reshape([int(s) for s in shape.split(",")]))
    return mlp
