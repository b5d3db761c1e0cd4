"""Per-bidder ReLU value networks: evaluation, ADAM training, interval bounds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NETWORK_SCHEMA = "dlica.value_network/1"


class ShapeError(ValueError):
    """Raised when array shapes do not chain through a network."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


def relu(v):
    return np.maximum(v, 0.0)


@dataclass(frozen=True)
class Architecture:
    """Layer widths ``[d_0, d_1, ..., d_K]`` with ``d_0 = m`` and ``d_K = 1``."""

    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("an architecture needs at least input and output layers")
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if dims[-1] != 1:
            raise ValueError(f"output layer must have width 1, got {dims[-1]}")

    @classmethod
    def from_hidden(cls, m: int, hidden: Sequence[int] = ()) -> "Architecture":
        return cls((m, *hidden, 1))

    @property
    def n_items(self) -> int:
        return self.layer_dims[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.layer_dims[1:-1]

    @property
    def depth(self) -> int:
        """Number of affine maps K."""
        return len(self.layer_dims) - 1


@dataclass(frozen=True, eq=False)
class ValueNetwork:
    """Fully connected ReLU network ``phi(W^{K-1} ... phi(W^0 x + b^0) ... + b^{K-1})``.

    ``weights[k]`` has shape ``(d_{k+1}, d_k)``. ``scale`` records the label
    normalization used during training; it is already folded into the output
    layer, so evaluation never multiplies by it.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    scale: float = 1.0

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        if len(ws) == 0 or len(ws) != len(bs):
            raise ShapeError("need one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2:
                raise ShapeError(f"layer {k}: weight matrix must be 2-d")
            if w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {k}: weight rows {w.shape[0]} != bias length {b.shape[0]}")
            if k > 0 and w.shape[1] != ws[k - 1].shape[0]:
                raise ShapeError(f"layer {k}: input width {w.shape[1]} != previous output {ws[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        if ws[-1].shape[0] != 1:
            raise ShapeError("output layer must have a single node")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def arch(self) -> Architecture:
        return Architecture((self.weights[0].shape[1], *(w.shape[0] for w in self.weights)))

    @property
    def n_items(self) -> int:
        return self.weights[0].shape[1]

    def __call__(self, bundle) -> float:
        return forward(self, bundle)

    def to_dict(self) -> dict:
        return {
            "schema": NETWORK_SCHEMA,
            "layer_dims": list(self.arch.layer_dims),
            "scale": self.scale,
            "layers": [
                {"weights": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ValueNetwork":
        if data.get("schema") != NETWORK_SCHEMA:
            raise ValueError(f"unsupported network schema {data.get('schema')!r}")
        net = cls(
            tuple(np.array(layer["weights"], dtype=np.float64).reshape(-1, d_in)
                  for layer, d_in in zip(data["layers"], data["layer_dims"][:-1])),
            tuple(np.array(layer["bias"], dtype=np.float64) for layer in data["layers"]),
            scale=data.get("scale", 1.0),
        )
        if list(net.arch.layer_dims) != list(data["layer_dims"]):
            raise ShapeError("layer_dims do not match the stored matrices")
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ValueNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def scaled_output(self, factor: float) -> "ValueNetwork":
        """Copy with the last layer multiplied by ``factor`` (> 0)."""
        if factor <= 0:
            raise ValueError("factor must be positive")
        ws = list(self.weights)
        bs = list(self.biases)
        ws[-1] = ws[-1] * factor
        bs[-1] = bs[-1] * factor
        return ValueNetwork(tuple(ws), tuple(bs), scale=self.scale * factor)


def zero_network(arch: Architecture) -> ValueNetwork:
    dims = arch.layer_dims
    return ValueNetwork(
        tuple(np.zeros((dims[k + 1], dims[k])) for k in range(arch.depth)),
        tuple(np.zeros(dims[k + 1]) for k in range(arch.depth)),
    )


def random_network(arch: Architecture, rng: np.random.Generator, bias_scale: float = 0.5) -> ValueNetwork:
    """He-scaled random weights with small random biases; used by tests and tools."""
    dims = arch.layer_dims
    ws = tuple(rng.normal(0.0, np.sqrt(2.0 / dims[k]), size=(dims[k + 1], dims[k])) for k in range(arch.depth))
    bs = tuple(rng.normal(0.0, bias_scale, size=dims[k + 1]) for k in range(arch.depth))
    return ValueNetwork(ws, bs)


def _as_batch(net: ValueNetwork, bundles) -> np.ndarray:
    X = np.asarray(bundles, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.n_items:
        raise ShapeError(f"expected bundles of length {net.n_items}, got shape {np.shape(bundles)}")
    return X


def forward_batch(net: ValueNetwork, bundles) -> np.ndarray:
    """Network values for each row of ``bundles``."""
    h = _as_batch(net, bundles)
    for w, b in zip(net.weights, net.biases):
        h = relu(h @ w.T + b)
    return h[:, 0]


def forward(net: ValueNetwork, bundle) -> float:
    x = np.asarray(bundle, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward takes a single bundle; use forward_batch for several")
    return float(forward_batch(net, x)[0])


def layer_outputs(net: ValueNetwork, bundle) -> list[np.ndarray]:
    """``[o^0, o^1, ..., o^K]`` for one bundle, with ``o^0`` the bundle itself."""
    o = _as_batch(net, bundle)[0]
    outs = [o]
    for w, b in zip(net.weights, net.biases):
        o = relu(w @ o + b)
        outs.append(o)
    return outs


def value_table(net: ValueNetwork) -> np.ndarray:
    """Values for all ``2^m`` bundles, indexed by bitmask (bit j = item j)."""
    m = net.n_items
    masks = np.arange(1 << m, dtype=np.int64)
    X = ((masks[:, None] >> np.arange(m)) & 1).astype(np.float64)
    return forward_batch(net, X)


# ---------------------------------------------------------------------------
# interval bounds
# ---------------------------------------------------------------------------


def preactivation_bounds(net: ValueNetwork) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sound ``(lo, hi)`` for every preactivation ``W^{k-1} o^{k-1} + b^{k-1}``, k = 1..K.

    Inputs range over the box [0, 1]^m, which contains every bundle.
    """
    lo = np.zeros(net.n_items)
    hi = np.ones(net.n_items)
    out = []
    for w, b in zip(net.weights, net.biases):
        wp = np.maximum(w, 0.0)
        wn = np.minimum(w, 0.0)
        pre_lo = wp @ lo + wn @ hi + b
        pre_hi = wp @ hi + wn @ lo + b
        out.append((pre_lo, pre_hi))
        lo, hi = relu(pre_lo), relu(pre_hi)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    l2_penalty: float = 1e-5
    dropout_rate: float | tuple[float, ...] = 0.0
    epochs: int = 300
    batch_size: int = 32
    rng_seed: int = 0
    beta1: float = field(default=0.9, repr=False)
    beta2: float = field(default=0.999, repr=False)
    eps: float = field(default=1e-8, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")
        rates = self.dropout_rate if isinstance(self.dropout_rate, tuple) else (self.dropout_rate,)
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def dropout_for(self, n_hidden: int) -> tuple[float, ...]:
        if isinstance(self.dropout_rate, tuple):
            if len(self.dropout_rate) != n_hidden:
                raise ValueError(f"need {n_hidden} dropout rates, got {len(self.dropout_rate)}")
            return self.dropout_rate
        return (float(self.dropout_rate),) * n_hidden


def mae_loss_and_grad(weights, biases, X, targets, l2: float = 0.0, dropout_masks=None):
    """Loss ``mean|N(x) - t| + l2 * sum ||W||^2`` and its (sub)gradient.

    ReLU and absolute-value kinks use subgradient 0. ``dropout_masks[k]`` (already
    divided by the keep probability) multiplies hidden layer k+1's output.
    """
    K = len(weights)
    acts = [X]
    pres = []
    h = X
    for k in range(K):
        pre = h @ weights[k].T + biases[k]
        pres.append(pre)
        h = relu(pre)
        if dropout_masks is not None and k < K - 1:
            h = h * dropout_masks[k]
        acts.append(h)
    pred = h[:, 0]
    resid = pred - targets
    n = X.shape[0]
    loss = np.abs(resid).mean() + l2 * sum(float(np.sum(w * w)) for w in weights)

    g_w = [None] * K
    g_b = [None] * K
    delta = (np.sign(resid) / n)[:, None]
    for k in range(K - 1, -1, -1):
        if dropout_masks is not None and k < K - 1:
            delta = delta * dropout_masks[k]
        delta = delta * (pres[k] > 0.0)
        g_w[k] = delta.T @ acts[k] + 2.0 * l2 * weights[k]
        g_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ weights[k]
    return float(loss), g_w, g_b


OUTPUT_INIT_GAIN = 0.1


def _init_params(dims, rng, output_bias):
    ws = [rng.normal(0.0, np.sqrt(2.0 / dims[k]), size=(dims[k + 1], dims[k])) for k in range(len(dims) - 1)]
    # keep the output preactivation near the mean label, so the output ReLU
    # starts active on every sample instead of dead on about half of them
    ws[-1] *= OUTPUT_INIT_GAIN
    bs = [np.zeros(dims[k + 1]) for k in range(len(dims) - 1)]
    bs[-1][:] = output_bias
    return ws, bs


def _mae(ws, bs, X, t) -> float:
    h = X
    for w, b in zip(ws, bs):
        h = relu(h @ w.T + b)
    return float(np.abs(h[:, 0] - t).mean())


def train(arch: Architecture, bundles, values=None, cfg: TrainConfig = TrainConfig()) -> ValueNetwork:
    """Fit a value network to bundle-value pairs with ADAM on the MAE loss.

    ``bundles`` is either a 0/1 matrix paired with ``values`` or an object
    with an ``as_arrays()`` method (a bid set) and ``values`` omitted.
    Labels are divided by their maximum during training and the factor is
    folded back into the output layer. The parameters with the lowest
    full-data training MAE seen at an epoch boundary (the initial ones
    included) are returned.
    """
    if values is None:
        if not hasattr(bundles, "as_arrays"):
            raise TypeError("values are required unless bundles is a bid set")
        bundles, values = bundles.as_arrays()
    X = np.asarray(bundles, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data is empty")
    if X.shape[1] != arch.n_items:
        raise ShapeError(f"bundles have {X.shape[1]} items, architecture expects {arch.n_items}")
    if X.shape[0] != y.shape[0]:
        raise ShapeError("bundles and values differ in length")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite training labels")

    rng = np.random.default_rng(cfg.rng_seed)
    top = float(np.max(np.abs(y)))
    if top == 0.0:
        # all-zero labels: the zero network fits them and every other bundle
        return zero_network(arch)
    scale = top
    t = y / scale
    dims = arch.layer_dims
    K = arch.depth
    rates = cfg.dropout_for(K - 1)
    ws, bs = _init_params(dims, rng, max(float(t.mean()), 0.0))

    m_w = [np.zeros_like(w) for w in ws]
    v_w = [np.zeros_like(w) for w in ws]
    m_b = [np.zeros_like(b) for b in bs]
    v_b = [np.zeros_like(b) for b in bs]
    b1, b2, eps, lr = cfg.beta1, cfg.beta2, cfg.eps, cfg.learning_rate
    step = 0

    best = _mae(ws, bs, X, t)
    best_params = ([w.copy() for w in ws], [b.copy() for b in bs])
    n = X.shape[0]
    bsz = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if bsz < n else np.arange(n)
        for start in range(0, n, bsz):
            idx = order[start:start + bsz]
            masks = None
            if any(r > 0 for r in rates):
                masks = [
                    (rng.random((idx.shape[0], dims[k + 1])) >= r) / (1.0 - r)
                    for k, r in enumerate(rates)
                ]
            loss, g_w, g_b = mae_loss_and_grad(ws, bs, X[idx], t[idx], cfg.l2_penalty, masks)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for k in range(K):
                m_w[k] = b1 * m_w[k] + (1 - b1) * g_w[k]
                v_w[k] = b2 * v_w[k] + (1 - b2) * g_w[k] ** 2
                ws[k] = ws[k] - lr * (m_w[k] / c1) / (np.sqrt(v_w[k] / c2) + eps)
                m_b[k] = b1 * m_b[k] + (1 - b1) * g_b[k]
                v_b[k] = b2 * v_b[k] + (1 - b2) * g_b[k] ** 2
                bs[k] = bs[k] - lr * (m_b[k] / c1) / (np.sqrt(v_b[k] / c2) + eps)
        err = _mae(ws, bs, X, t)
        if not np.isfinite(err):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        if err <= best:
            best = err
            best_params = ([w.copy() for w in ws], [b.copy() for b in bs])

    ws, bs = best_params
    ws[-1] = ws[-1] * scale
    bs[-1] = bs[-1] * scale
    return ValueNetwork(tuple(ws), tuple(bs), scale=scale)


def training_mae(net: ValueNetwork, bundles, values) -> float:
    return float(np.abs(forward_batch(net, bundles) - np.asarray(values, dtype=np.float64)).mean())
