"""Dense feedforward networks: exact forward evaluation and hand-derived gradients.

Everything here is pure and deterministic; models and weights are immutable
after construction, so they are safe to share across workers. Arrays are
64-bit floats throughout. Most functions accept a single input vector ``(d,)``
or a batch ``(n, d)`` and broadcast accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

LOSS_KINDS = ("margin", "cross_entropy")


class ShapeError(ValueError):
    """Dimension mismatch between an input and the model."""


def tensor(values, shape=None) -> Array:
    """Validate and freeze a float64 array: finite entries, optional reshape."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape entries must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite (no NaN/Inf)")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Dense:
    w: Array  # (out_dim, in_dim)
    b: Array  # (out_dim,)
    kind = "dense"

    def __post_init__(self):
        object.__setattr__(self, "w", tensor(self.w))
        object.__setattr__(self, "b", tensor(self.b))
        if self.w.ndim != 2 or self.b.ndim != 1:
            raise ShapeError("dense layer needs 2-D weights and 1-D bias")
        if self.w.shape[0] != self.b.shape[0]:
            raise ShapeError(
                f"bias length {self.b.shape[0]} != weight rows {self.w.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def apply(self, z: Array) -> Array:
        return z @ self.w.T + self.b

    def backward(self, g: Array, z_in: Array, z_out: Array) -> Array:
        return g @ self.w


@dataclass(frozen=True)
class Relu:
    dim: int
    kind = "relu"

    in_dim = property(lambda self: self.dim)
    out_dim = property(lambda self: self.dim)

    def apply(self, z: Array) -> Array:
        return np.maximum(z, 0.0)

    def backward(self, g: Array, z_in: Array, z_out: Array) -> Array:
        # subgradient convention: derivative is 0 at exactly 0
        return g * (z_in > 0.0)


@dataclass(frozen=True)
class Tanh:
    dim: int
    kind = "tanh"

    in_dim = property(lambda self: self.dim)
    out_dim = property(lambda self: self.dim)

    def apply(self, z: Array) -> Array:
        return np.tanh(z)

    def backward(self, g: Array, z_in: Array, z_out: Array) -> Array:
        return g * (1.0 - z_out * z_out)


Layer = Dense | Relu | Tanh


@dataclass(frozen=True)
class Model:
    """Ordered layer sequence realizing ``input -> logits``.

    A "cut" index c in [0, len(layers)] splits the model into the part before
    the cut (layers [0, c)) and after it (layers [c, n)); cut 0 is the input
    itself and cut n is the logits.
    """

    layers: tuple[Layer, ...]
    input_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be >= 2")
        cur = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != cur:
                raise ShapeError(
                    f"layer {i} expects in_dim {layer.in_dim}, chain gives {cur}"
                )
            cur = layer.out_dim
        if cur != self.num_classes:
            raise ShapeError(
                f"last layer out_dim {cur} != num_classes {self.num_classes}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def dim_at(self, cut: int) -> int:
        """Width of the activation at cut position `cut`."""
        self._check_cut(cut)
        return self.input_dim if cut == 0 else self.layers[cut - 1].out_dim

    def _check_cut(self, cut: int) -> None:
        if not 0 <= cut <= len(self.layers):
            raise ShapeError(f"cut {cut} out of range [0, {len(self.layers)}]")


def _check_width(x: Array, dim: int, what: str) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != dim:
        raise ShapeError(f"{what} must have width {dim}, got shape {x.shape}")
    return x


def forward(model: Model, x: Array) -> Array:
    """Logits for input x; accepts (d,) or a batch (n, d)."""
    z = _check_width(x, model.input_dim, "input")
    for layer in model.layers:
        z = layer.apply(z)
    return z


def forward_to(model: Model, cut: int, x: Array) -> Array:
    """Activation at `cut`: cut=0 returns x, cut=n returns logits."""
    model._check_cut(cut)
    z = _check_width(x, model.input_dim, "input")
    for layer in model.layers[:cut]:
        z = layer.apply(z)
    return z


def forward_from(model: Model, cut: int, hidden: Array) -> Array:
    """Logits from the activation at `cut` (the post-cut half of the model)."""
    model._check_cut(cut)
    z = _check_width(hidden, model.dim_at(cut), f"hidden at cut {cut}")
    for layer in model.layers[cut:]:
        z = layer.apply(z)
    return z


def _check_label(y: int, num_classes: int) -> int:
    y = int(y)
    if not 0 <= y < num_classes:
        raise ValueError(f"class index {y} out of range [0, {num_classes})")
    return y


def loss(logits: Array, y: int, kind: str = "margin") -> float:
    """Attack objective on a single logit vector.

    margin: f_y - max_{i != y} f_i, nonpositive iff y loses (a tie counts as
    a loss for y). cross_entropy: -log softmax_y, used for training only.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError(f"loss expects a 1-D logit vector, got {logits.shape}")
    y = _check_label(y, logits.shape[0])
    if kind == "margin":
        best_other = np.max(np.delete(logits, y))
        return float(logits[y] - best_other)
    if kind == "cross_entropy":
        m = logits.max()
        return float(m + np.log(np.sum(np.exp(logits - m))) - logits[y])
    raise ValueError(f"unknown loss kind {kind!r}")


def margin_batch(logits: Array, y) -> Array:
    """Row-wise margin loss; y is a scalar label or an (n,) label array."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, k = logits.shape
    ys = np.broadcast_to(np.asarray(y, dtype=np.intp), (n,))
    rows = np.arange(n)
    fy = logits[rows, ys]
    masked = logits.copy()
    masked[rows, ys] = -np.inf
    return fy - masked.max(axis=1)


def misclassified(logits: Array, y: int) -> bool:
    """True iff y does not strictly win (ties count against y)."""
    return loss(logits, y, "margin") <= 0.0


def predicted_label(logits: Array) -> int:
    """Argmax with lowest-index tie-break."""
    return int(np.argmax(logits))


def _loss_grad_logits(logits: Array, y, kind: str) -> Array:
    """d(loss)/d(logits); handles (K,) and (n, K) with scalar or per-row y."""
    squeeze = logits.ndim == 1
    logits = np.atleast_2d(logits)
    n, k = logits.shape
    ys = np.broadcast_to(np.asarray(y, dtype=np.intp), (n,))
    rows = np.arange(n)
    if kind == "margin":
        masked = logits.copy()
        masked[rows, ys] = -np.inf
        runner_up = masked.argmax(axis=1)  # re-evaluated every call
        g = np.zeros_like(logits)
        g[rows, ys] = 1.0
        g[rows, runner_up] -= 1.0
    elif kind == "cross_entropy":
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        g = e / e.sum(axis=1, keepdims=True)
        g[rows, ys] -= 1.0
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return g[0] if squeeze else g


def _grad_through(layers, z0: Array, y, kind: str) -> Array:
    """Gradient of loss(logits, y) with respect to z0, for logits = layers(z0)."""
    zs = [z0]
    for layer in layers:
        zs.append(layer.apply(zs[-1]))
    g = _loss_grad_logits(zs[-1], y, kind)
    for i in range(len(layers) - 1, -1, -1):
        g = layers[i].backward(g, zs[i], zs[i + 1])
    return g


def grad_input(model: Model, x: Array, y: int, kind: str = "margin") -> Array:
    """Gradient of the loss through the whole model with respect to the input."""
    x = _check_width(x, model.input_dim, "input")
    _check_label(np.min(y) if np.ndim(y) else y, model.num_classes)
    _check_label(np.max(y) if np.ndim(y) else y, model.num_classes)
    return _grad_through(model.layers, x, y, kind)


def grad_at_layer(model: Model, x: Array, cut: int, y: int, kind: str = "margin") -> Array:
    """Gradient of the loss through the post-cut half, taken at the cut activation."""
    model._check_cut(cut)
    h = forward_to(model, cut, x)
    _check_label(np.min(y) if np.ndim(y) else y, model.num_classes)
    _check_label(np.max(y) if np.ndim(y) else y, model.num_classes)
    return _grad_through(model.layers[cut:], h, y, kind)


def loss_and_param_grads(model: Model, x_batch: Array, y_batch: Array, kind: str = "cross_entropy"):
    """Mean loss over a batch plus per-layer parameter gradients.

    Returns (mean_loss, grads) where grads[i] is (dW, db) for dense layers
    and None for activations. Used by the trainer; the backward pass is the
    same hand-derived chain as grad_input.
    """
    x_batch = np.atleast_2d(_check_width(x_batch, model.input_dim, "input"))
    y_batch = np.asarray(y_batch, dtype=np.intp)
    n = x_batch.shape[0]
    zs = [x_batch]
    for layer in model.layers:
        zs.append(layer.apply(zs[-1]))
    logits = zs[-1]
    if kind == "cross_entropy":
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        mean_loss = float(np.mean(lse - shifted[np.arange(n), y_batch]))
    else:
        mean_loss = float(np.mean(margin_batch(logits, y_batch)))
    g = _loss_grad_logits(logits, y_batch, kind) / n
    grads: list[tuple[Array, Array] | None] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Dense):
            grads[i] = (g.T @ zs[i], g.sum(axis=0))
        g = layer.backward(g, zs[i], zs[i + 1])
    return mean_loss, grads
