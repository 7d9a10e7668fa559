"""Small numpy MLP: ReLU hidden layers, raw logits, inverted dropout, Adam.

Everything here is a pure function over explicit state. Batched inputs are
rows of a 2-D array; a 1-D input is treated as a single example.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

Layer = tuple[np.ndarray, np.ndarray]


@dataclass
class MlpParams:
    """Weights are stored [out x in], biases [out]."""

    layers: list[Layer]

    def __post_init__(self):
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ShapeError(f"layer {k} input dim {w.shape[1]} does not chain")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    def copy(self) -> MlpParams:
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in self.layers for a in (w, b)])

    def with_flat(self, vec: np.ndarray) -> MlpParams:
        out, pos = [], 0
        for w, b in self.layers:
            nw = vec[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            nb = vec[pos:pos + b.size].copy()
            pos += b.size
            out.append((nw.copy(), nb))
        return MlpParams(out)

    def equals(self, other: MlpParams) -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for k, (w, b) in enumerate(self.layers):
            arrays[f"w{k}"] = w
            arrays[f"b{k}"] = b
        return arrays

    @classmethod
    def from_arrays(cls, arrays) -> MlpParams:
        n = sum(1 for key in arrays if key.startswith("w"))
        return cls([(np.asarray(arrays[f"w{k}"], float), np.asarray(arrays[f"b{k}"], float))
                    for k in range(n)])


def init_params(layer_dims, rng_seed) -> MlpParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) != d or d < 1 for d in dims):
        raise ConfigError(f"invalid layer dims {dims!r}")
    rng = np.random.default_rng(rng_seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layers)


@dataclass
class ForwardCache:
    dims: list[int]
    single: bool
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)  # hidden pre-activations
    masks: list[np.ndarray | None] = field(default_factory=list)  # scaled dropout masks


def forward(params: MlpParams, x, train: bool = False, dropout: float = 0.0, rng=None):
    """Return (logits, cache). Dropout is applied to hidden units in train mode only."""
    if not 0.0 <= dropout < 1.0:
        raise ConfigError(f"dropout rate {dropout} outside [0, 1)")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != params.dims[0]:
        raise ShapeError(f"input shape {x.shape} does not match input dim {params.dims[0]}")
    use_mask = train and dropout > 0.0
    if use_mask and rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    cache = ForwardCache(dims=params.dims, single=single)
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        cache.inputs.append(h)
        a = h @ w.T + b
        if k == last:
            h = a
            break
        cache.preacts.append(a)
        h = np.maximum(a, 0.0)
        if use_mask:
            mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * mask
            cache.masks.append(mask)
        else:
            cache.masks.append(None)
    return (h[0] if single else h), cache


def backward(params: MlpParams, cache: ForwardCache, dlogits) -> list[Layer]:
    """Gradients of sum(dlogits * logits) w.r.t. every weight and bias."""
    if cache.dims != params.dims:
        raise ContractError(f"cache built for dims {cache.dims}, params have {params.dims}")
    g = np.asarray(dlogits, dtype=float)
    if cache.single:
        g = g[None, :]
    expected = (cache.inputs[0].shape[0], params.dims[-1])
    if g.shape != expected:
        raise ShapeError(f"dlogits shape {g.shape} != {expected}")
    grads: list[Layer] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        grads[k] = (g.T @ cache.inputs[k], g.sum(axis=0))
        if k == 0:
            break
        g = g @ w
        if cache.masks[k - 1] is not None:
            g = g * cache.masks[k - 1]
        g = g * (cache.preacts[k - 1] > 0)
    return grads


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target):
    """Per-example loss and gradient w.r.t. logits (no batch averaging).

    Accepts a logit vector with an int target, or a [n x C] matrix with an
    int array of targets.
    """
    z = np.asarray(logits, dtype=float)
    t = np.asarray(target)
    num_classes = z.shape[-1]
    if np.any(t < 0) or np.any(t >= num_classes):
        raise IndexError(f"target {target} out of range for {num_classes} classes")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1))
    probs = np.exp(shifted - logsumexp[..., None])
    if z.ndim == 1:
        loss = float(logsumexp - shifted[int(t)])
        grad = probs.copy()
        grad[int(t)] -= 1.0
        return loss, grad
    rows = np.arange(z.shape[0])
    loss = logsumexp - shifted[rows, t]
    grad = probs
    grad[rows, t] -= 1.0
    return loss, grad


@dataclass
class AdamState:
    m: list[Layer]
    v: list[Layer]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: MlpParams, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    return AdamState(m=zeros, v=[(z[0].copy(), z[1].copy()) for z in zeros],
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: MlpParams, grads, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One bias-corrected Adam update. Weight decay is added to the gradient (L2)."""
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if len(grads) != len(params.layers):
        raise ShapeError("gradient list does not match parameter layers")
    for gw, gb in grads:
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError("non-finite gradient passed to adam_step")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_layers, new_m, new_v = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(params.layers, grads, state.m, state.v):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"gradient shape {gw.shape} != parameter shape {w.shape}")
        updated = []
        for p, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            if weight_decay:
                g = g + weight_decay * p
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            p = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            updated.append((p, m, v))
        (pw, mw2, vw2), (pb, mb2, vb2) = updated
        new_layers.append((pw, pb))
        new_m.append((mw2, mb2))
        new_v.append((vw2, vb2))
    new_state = AdamState(m=new_m, v=new_v, step=t, beta1=b1, beta2=b2, eps=state.eps)
    return MlpParams(new_layers), new_state


def predict(params: MlpParams, x) -> np.ndarray:
    logits, _ = forward(params, x)
    return np.argmax(logits, axis=-1)
