"""Differentiable client objectives with analytic gradients.

Three kinds of client risk are supported:

* ``softmax`` -- multinomial logistic regression on raw features,
* ``mlp`` -- one hidden layer (tanh or relu) followed by a softmax head,
* ``quadratic`` -- the closed-form bowl ``0.5 * |theta - c|**2`` whose
  stationary points are known exactly, used for toy geometry experiments.

Classifier losses are the mean cross-entropy over the batch, which keeps the
learning-rate scale independent of the dataset size (client data sizes still
enter through the aggregation weights). A quadratic client's center ``c`` is
the mean of its batch feature rows, so a single shared spec supports clients
with different bowls; when no batch is given the spec's declared center is
used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RandomStream, as_param_vec

__all__ = [
    "Batch",
    "ModelSpec",
    "accuracy",
    "grad",
    "init_params",
    "loss",
    "sgd_n",
]

KINDS = ("softmax", "mlp", "quadratic")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; the parameter dimension is a function of it."""

    kind: str
    input_dim: int = 0
    n_classes: int = 0
    hidden: int = 0
    activation: str = "tanh"
    center: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "quadratic":
            if len(self.center) < 1:
                raise ValueError("quadratic spec requires a nonempty center")
        else:
            if self.input_dim < 1 or self.n_classes < 2:
                raise ValueError("classifier spec requires input_dim >= 1, n_classes >= 2")
            if self.kind == "mlp":
                if self.hidden < 1:
                    raise ValueError("mlp spec requires hidden >= 1")
                if self.activation not in ACTIVATIONS:
                    raise ValueError(f"unknown activation {self.activation!r}")

    @staticmethod
    def softmax(input_dim: int, n_classes: int) -> "ModelSpec":
        return ModelSpec(kind="softmax", input_dim=input_dim, n_classes=n_classes)

    @staticmethod
    def mlp(input_dim: int, n_classes: int, hidden: int, activation: str = "tanh") -> "ModelSpec":
        return ModelSpec(
            kind="mlp",
            input_dim=input_dim,
            n_classes=n_classes,
            hidden=hidden,
            activation=activation,
        )

    @staticmethod
    def quadratic(center) -> "ModelSpec":
        vec = as_param_vec(center, name="center")
        return ModelSpec(kind="quadratic", center=tuple(float(x) for x in vec))

    @property
    def dim(self) -> int:
        if self.kind == "softmax":
            return (self.input_dim + 1) * self.n_classes
        if self.kind == "mlp":
            return (self.input_dim + 1) * self.hidden + (self.hidden + 1) * self.n_classes
        return len(self.center)

    @property
    def center_vec(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "quadratic":
            d["center"] = list(self.center)
        else:
            d["input_dim"] = self.input_dim
            d["n_classes"] = self.n_classes
            if self.kind == "mlp":
                d["hidden"] = self.hidden
                d["activation"] = self.activation
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        kind = d.get("kind")
        if kind == "quadratic":
            return ModelSpec.quadratic(d["center"])
        if kind == "softmax":
            return ModelSpec.softmax(int(d["input_dim"]), int(d["n_classes"]))
        if kind == "mlp":
            return ModelSpec.mlp(
                int(d["input_dim"]),
                int(d["n_classes"]),
                int(d["hidden"]),
                d.get("activation", "tanh"),
            )
        raise ValueError(f"unknown model kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Batch:
    """Feature matrix (rows are examples) plus integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labs = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("features must be a nonempty 2-D matrix")
        if labs.shape != (feats.shape[0],):
            raise ValueError("labels must be one integer per feature row")
        if np.any(labs < 0):
            raise ValueError("labels must be nonnegative class indices")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])


def _check_theta(spec: ModelSpec, theta) -> np.ndarray:
    theta = as_param_vec(theta, name="theta")
    if theta.size != spec.dim:
        raise ValueError(f"theta has dim {theta.size}, spec requires {spec.dim}")
    return theta


def _check_batch(spec: ModelSpec, batch: Batch) -> Batch:
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch has {batch.features.shape[1]} features, spec requires {spec.input_dim}"
        )
    if np.any(batch.labels >= spec.n_classes):
        raise ValueError("batch contains labels outside [0, n_classes)")
    return batch


def _unpack_softmax(spec: ModelSpec, theta: np.ndarray):
    c, p = spec.n_classes, spec.input_dim
    return theta[: c * p].reshape(c, p), theta[c * p :]


def _unpack_mlp(spec: ModelSpec, theta: np.ndarray):
    p, h, c = spec.input_dim, spec.hidden, spec.n_classes
    o = 0
    w1 = theta[o : o + h * p].reshape(h, p)
    o += h * p
    b1 = theta[o : o + h]
    o += h
    w2 = theta[o : o + c * h].reshape(c, h)
    o += c * h
    b2 = theta[o : o + c]
    return w1, b1, w2, b2


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _logits(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    if spec.kind == "softmax":
        w, b = _unpack_softmax(spec, theta)
        return x @ w.T + b
    w1, b1, w2, b2 = _unpack_mlp(spec, theta)
    return _activate(spec, x @ w1.T + b1) @ w2.T + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _quad_center(spec: ModelSpec, batch: Batch | None) -> np.ndarray:
    if batch is None:
        return spec.center_vec
    if batch.features.shape[1] != len(spec.center):
        raise ValueError(
            f"batch has {batch.features.shape[1]} features, quadratic center has {len(spec.center)}"
        )
    return batch.features.mean(axis=0)


def init_params(spec: ModelSpec, rng: RandomStream) -> np.ndarray:
    """Initial parameters: uniform weights in +-1/sqrt(fan_in), zero biases.

    Quadratic clients start from the canonical zero vector. Deterministic
    given the stream identity.
    """
    if spec.kind == "quadratic":
        return np.zeros(spec.dim)
    g = rng.generator()
    if spec.kind == "softmax":
        bound = 1.0 / np.sqrt(spec.input_dim)
        w = g.uniform(-bound, bound, size=(spec.n_classes, spec.input_dim))
        return np.concatenate([w.ravel(), np.zeros(spec.n_classes)])
    bound1 = 1.0 / np.sqrt(spec.input_dim)
    bound2 = 1.0 / np.sqrt(spec.hidden)
    w1 = g.uniform(-bound1, bound1, size=(spec.hidden, spec.input_dim))
    w2 = g.uniform(-bound2, bound2, size=(spec.n_classes, spec.hidden))
    return np.concatenate(
        [w1.ravel(), np.zeros(spec.hidden), w2.ravel(), np.zeros(spec.n_classes)]
    )


def loss(spec: ModelSpec, theta, batch: Batch | None) -> float:
    """Mean cross-entropy over the batch; quadratic kind returns 0.5*|theta - c|^2."""
    theta = _check_theta(spec, theta)
    if spec.kind == "quadratic":
        diff = theta - _quad_center(spec, batch)
        return 0.5 * float(np.dot(diff, diff))
    if batch is None:
        raise ValueError("classifier loss requires a batch")
    batch = _check_batch(spec, batch)
    logp = _log_softmax(_logits(spec, theta, batch.features))
    return float(-logp[np.arange(batch.size), batch.labels].mean())


def grad(spec: ModelSpec, theta, batch: Batch | None) -> np.ndarray:
    """Analytic gradient of :func:`loss` at theta."""
    theta = _check_theta(spec, theta)
    if spec.kind == "quadratic":
        return theta - _quad_center(spec, batch)
    if batch is None:
        raise ValueError("classifier gradient requires a batch")
    batch = _check_batch(spec, batch)
    x, y = batch.features, batch.labels
    n = batch.size
    if spec.kind == "softmax":
        z = _logits(spec, theta, x)
        probs = np.exp(_log_softmax(z))
        probs[np.arange(n), y] -= 1.0
        gz = probs / n
        return np.concatenate([(gz.T @ x).ravel(), gz.sum(axis=0)])
    w1, b1, w2, b2 = _unpack_mlp(spec, theta)
    pre = x @ w1.T + b1
    act = _activate(spec, pre)
    probs = np.exp(_log_softmax(act @ w2.T + b2))
    probs[np.arange(n), y] -= 1.0
    gz = probs / n
    gw2 = gz.T @ act
    gb2 = gz.sum(axis=0)
    gact = gz @ w2
    if spec.activation == "tanh":
        gpre = gact * (1.0 - act * act)
    else:
        gpre = gact * (pre > 0.0)
    gw1 = gpre.T @ x
    gb1 = gpre.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def sgd_n(
    spec: ModelSpec,
    theta,
    data: Batch,
    n: int,
    lr: float,
    batch_size: int,
    rng: RandomStream,
    *,
    unit: str = "epochs",
) -> np.ndarray:
    """Mini-batch SGD from theta; returns the new parameters, input unchanged.

    ``n`` counts epochs by default (``unit="steps"`` counts raw mini-batch
    steps instead). Each epoch visits a fresh full permutation of the data
    drawn from the client's stream; the final short batch is kept. Bitwise
    deterministic given identical inputs and stream identity.
    """
    if not isinstance(n, int) or n < 1:
        raise ValueError("n must be a positive integer")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if unit not in ("epochs", "steps"):
        raise ValueError(f"unknown unit {unit!r}")
    theta = _check_theta(spec, theta).copy()
    bs = min(batch_size, data.size)
    g = rng.generator()
    if unit == "epochs":
        for _ in range(n):
            perm = g.permutation(data.size)
            for start in range(0, data.size, bs):
                theta -= lr * grad(spec, theta, data.subset(perm[start : start + bs]))
        return theta
    steps_done = 0
    while True:
        perm = g.permutation(data.size)
        for start in range(0, data.size, bs):
            theta -= lr * grad(spec, theta, data.subset(perm[start : start + bs]))
            steps_done += 1
            if steps_done == n:
                return theta


def accuracy(spec: ModelSpec, theta, data: Batch) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if spec.kind == "quadratic":
        raise ValueError("accuracy is undefined for quadratic clients")
    theta = _check_theta(spec, theta)
    data = _check_batch(spec, data)
    predicted = np.argmax(_logits(spec, theta, data.features), axis=1)
    return float((predicted == data.labels).mean())
