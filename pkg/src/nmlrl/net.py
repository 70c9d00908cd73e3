"""Small feedforward binary classifier with hand-written backprop.

Parameters live in one flat float64 vector, laid out layer by layer as
``W`` (fan_in x fan_out, row-major) followed by ``b``.  Every routine here
also accepts a *stack* of parameter vectors with shape ``(M, P)`` so that
many adapted copies of a model can be evaluated in one vectorised pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_TAG = "mlp-v1"


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_sizes: tuple[int, ...] = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden_sizes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [int(self.input_dim), *self.hidden_sizes, 1]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_sizes)

    def slices(self):
        """(weight_slice, bias_slice, fan_in, fan_out) for each layer."""
        out = []
        off = 0
        for fi, fo in self.layer_sizes:
            w = slice(off, off + fi * fo)
            off += fi * fo
            b = slice(off, off + fo)
            off += fo
            out.append((w, b, fi, fo))
        return out


@dataclass(frozen=True, eq=False)
class MlpModel:
    arch: MlpArchitecture
    params: np.ndarray = field(repr=False)
    rng_seed: int = 0

    def __post_init__(self):
        p = np.ascontiguousarray(self.params, dtype=np.float64)
        if p.shape != (self.arch.n_params,):
            raise ValueError(
                f"expected {self.arch.n_params} parameters, got shape {p.shape}"
            )
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def with_params(self, params) -> "MlpModel":
        return MlpModel(self.arch, np.array(params, dtype=np.float64), self.rng_seed)

    def equals(self, other: "MlpModel") -> bool:
        return (
            self.arch == other.arch
            and self.rng_seed == other.rng_seed
            and self.params.tobytes() == other.params.tobytes()
        )


def init_model(arch: MlpArchitecture, seed: int) -> MlpModel:
    """He-uniform weights, zero biases, drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    params = np.zeros(arch.n_params)
    for w, _, fi, fo in arch.slices():
        bound = np.sqrt(6.0 / fi)
        params[w] = rng.uniform(-bound, bound, size=fi * fo)
    return MlpModel(arch, params, int(seed))


# ---------------------------------------------------------------- core math


def _layers(arch, params):
    """Weight/bias views; a leading stack axis of ``params`` is preserved."""
    lead = params.shape[:-1]
    return [
        (params[..., w].reshape(*lead, fi, fo), params[..., b])
        for w, b, fi, fo in arch.slices()
    ]


def _bias(b, h):
    # b: (..., fo) -> broadcastable against h: (..., B, fo)
    return b[..., None, :] if b.ndim > 1 else b


def logits(arch, params, X):
    """Logits for inputs ``X`` (..., B, d) under ``params`` (..., P) -> (..., B)."""
    h = np.asarray(X, dtype=np.float64)
    layers = _layers(arch, params)
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + _bias(b, h), 0.0)
    W, b = layers[-1]
    return (h @ W + _bias(b, h))[..., 0]


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce(z, y, w):
    """Weighted BCE per example from logits, and its derivative w.r.t. the logit.

    softplus keeps the loss finite without clamping p, so a confidently wrong
    example still gets the gradient w * (p - y).
    """
    loss = w * (y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z))
    dz = w * (sigmoid(z) - y)
    return loss, dz


def loss_and_grad(arch, params, X, y, w, per_example=False):
    """Weighted BCE summed over the batch axis, and its exact gradient.

    Shapes: params (..., P); X (..., B, d); y, w (..., B).  Returns
    ``(loss (...), grad (..., P))``, or with ``per_example`` the unsummed
    ``(loss (..., B), grad (..., B, P))``.
    """
    X = np.asarray(X, dtype=np.float64)
    layers = _layers(arch, params)
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + _bias(b, h), 0.0)
        acts.append(h)
    W, b = layers[-1]
    z = (h @ W + _bias(b, h))[..., 0]
    loss, dz = _bce(z, np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64))

    lead = np.broadcast_shapes(params.shape[:-1], dz.shape[:-1])
    if per_example:
        grad = np.zeros(lead + dz.shape[-1:] + (arch.n_params,))
    else:
        grad = np.zeros(lead + (arch.n_params,))
    delta = dz[..., None]  # (..., B, fo=1)
    slices = arch.slices()
    for li in range(len(layers) - 1, -1, -1):
        ws, bs, fi, fo = slices[li]
        a = acts[li]
        if per_example:
            gW = a[..., :, :, None] * delta[..., :, None, :]
            grad[..., ws] = gW.reshape(gW.shape[:-2] + (fi * fo,))
            grad[..., bs] = delta
        else:
            gW = np.swapaxes(a, -1, -2) @ delta
            grad[..., ws] = gW.reshape(gW.shape[:-2] + (fi * fo,))
            grad[..., bs] = delta.sum(axis=-2)
        if li > 0:
            Wl = layers[li][0]
            delta = (delta @ np.swapaxes(Wl, -1, -2)) * (acts[li] > 0)
    if per_example:
        return loss, grad
    return loss.sum(axis=-1), grad


# ---------------------------------------------------------------- public ops


_P_MIN = np.finfo(np.float64).tiny
_P_MAX = np.nextafter(1.0, 0.0)


def _check_x(arch, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != arch.input_dim:
        raise ValueError(f"expected {arch.input_dim} features, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    return x


def forward(model: MlpModel, x) -> np.ndarray | float:
    """p(y=1|x).  Accepts a single vector or a (B, d) batch.

    Saturated logits are pulled back to the nearest doubles inside (0, 1).
    """
    x = _check_x(model.arch, x)
    single = x.ndim == 1
    p = sigmoid(logits(model.arch, model.params, np.atleast_2d(x)))
    p = np.clip(p, _P_MIN, _P_MAX)
    return float(p[0]) if single else p


def _unpack_batch(arch, batch):
    if isinstance(batch, tuple) and len(batch) == 3 and isinstance(batch[0], np.ndarray):
        X, y, w = batch
    else:
        batch = list(batch)
        if not batch:
            return np.zeros((0, arch.input_dim)), np.zeros(0), np.zeros(0)
        X = np.array([b[0] for b in batch], dtype=np.float64)
        y = np.array([b[1] for b in batch], dtype=np.float64)
        w = np.array([b[2] for b in batch], dtype=np.float64)
    X = _check_x(arch, np.atleast_2d(np.asarray(X, dtype=np.float64)).reshape(-1, arch.input_dim))
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("labels must lie in [0, 1]")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    return X, y, w


def weighted_bce_loss(model: MlpModel, batch) -> float:
    """Sum of w * BCE over ``batch`` (list of (x, y, w) or an (X, y, w) tuple)."""
    X, y, w = _unpack_batch(model.arch, batch)
    if len(y) == 0:
        return 0.0
    loss, _ = loss_and_grad(model.arch, model.params, X, y, w)
    return float(loss)


def gradient(model: MlpModel, batch) -> np.ndarray:
    X, y, w = _unpack_batch(model.arch, batch)
    if len(y) == 0:
        return np.zeros(model.arch.n_params)
    _, g = loss_and_grad(model.arch, model.params, X, y, w)
    return g


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")

    def apply(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated parameters; Adam moments advance in place."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape:
            raise ValueError(f"gradient shape {grad.shape} != params shape {params.shape}")
        if not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(grad))
            raise ValueError(f"non-finite gradient at {len(bad)} coordinates (first: {bad[:5].tolist()})")
        if self.learning_rate == 0:
            return params.copy()
        g = grad + self.weight_decay * params if self.weight_decay else grad
        if self.kind == "sgd":
            return params - self.learning_rate * g
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)


def step(model: MlpModel, opt: OptimizerState, grad) -> MlpModel:
    return model.with_params(opt.apply(model.params, grad))


# ---------------------------------------------------------------- persistence


def to_bytes(model: MlpModel) -> bytes:
    hidden = ",".join(str(h) for h in model.arch.hidden_sizes)
    header = f"{CHECKPOINT_TAG} {model.arch.input_dim} {hidden} {model.rng_seed}\n"
    return header.encode("ascii") + model.params.astype("<f8").tobytes()


def from_bytes(blob: bytes) -> MlpModel:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError("corrupted checkpoint: missing header line")
    try:
        tag, d, hidden, seed = blob[:nl].decode("ascii").split(" ")
        if tag != CHECKPOINT_TAG:
            raise ValueError(f"unknown checkpoint tag {tag!r}")
        hs = tuple(int(h) for h in hidden.split(",")) if hidden else ()
        arch = MlpArchitecture(int(d), hs)
    except (UnicodeDecodeError, ValueError) as exc:
        raise ValueError(f"corrupted checkpoint header: {exc}") from exc
    body = blob[nl + 1:]
    if len(body) != 8 * arch.n_params:
        raise ValueError(
            f"corrupted checkpoint: expected {8 * arch.n_params} bytes of parameters, got {len(body)}"
        )
    return MlpModel(arch, np.frombuffer(body, dtype="<f8").astype(np.float64), int(seed))


snapshot = to_bytes
restore = from_bytes


def save(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load(path) -> MlpModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
