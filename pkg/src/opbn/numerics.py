"""Dense MLP layers with hand-derived gradients, flat parameter views,
optimizers (Adam, RMSProp with momentum), and a finite-difference gradient
checker. Everything is float64; batches are row-major (B, dim) arrays.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

ACTIVATIONS = ("tanh", "identity")


@dataclass
class Layer:
    """One affine layer: out = act(x @ w.T + b). w is (out, in), b is (out,)."""

    w: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ShapeError(f"layer wants w (out,in) and b (out,), got {self.w.shape} / {self.b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpTape:
    """Activation cache from one forward pass; consumed by Mlp.backward."""

    mlp: "Mlp"
    inputs: list[np.ndarray]   # per layer: the (B, in) input it saw
    outputs: list[np.ndarray]  # per layer: the (B, out) post-activation output


class Mlp:
    """A fixed stack of affine+activation layers with exact manual gradients."""

    def __init__(self, layers: list[Layer]):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[0] != nxt.w.shape[1]:
                raise ShapeError(f"layer dims do not chain: {prev.w.shape} -> {nxt.w.shape}")
        self.layers = layers

    @classmethod
    def build(cls, sizes: list[int], rng: np.random.Generator, final_activation: str = "identity") -> "Mlp":
        """Xavier-uniform initialized net with tanh hidden layers.

        sizes = [in, hidden..., out]; the final layer uses final_activation
        (identity by default so it can emit means and log-stds).
        """
        layers = []
        for k, (nin, nout) in enumerate(zip(sizes, sizes[1:])):
            limit = np.sqrt(6.0 / (nin + nout))
            w = rng.uniform(-limit, limit, size=(nout, nin))
            act = final_activation if k == len(sizes) - 2 else "tanh"
            layers.append(Layer(w, np.zeros(nout), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
        """Run the batch (B, in) through the net; returns output and tape."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input {x.shape} does not match in_dim {self.in_dim}")
        inputs, outputs = [], []
        for layer in self.layers:
            inputs.append(x)
            a = x @ layer.w.T + layer.b
            x = np.tanh(a) if layer.activation == "tanh" else a
            outputs.append(x)
        return x, MlpTape(self, inputs, outputs)

    def backward(self, tape: MlpTape, grad_out: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Exact gradients from a forward tape.

        grad_out is dL/d(output), shape (B, out). Returns per-layer
        (w_grad, b_grad) pairs (accumulated over batch rows) and dL/d(input).
        """
        if tape.mlp is not self or len(tape.inputs) != len(self.layers):
            raise ContractError("tape does not belong to this net")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != tape.outputs[-1].shape:
            raise ShapeError(f"upstream grad {g.shape} does not match output {tape.outputs[-1].shape}")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation == "tanh":
                g = g * (1.0 - tape.outputs[k] ** 2)
            grads[k] = (g.T @ tape.inputs[k], g.sum(axis=0))
            g = g @ layer.w
        return grads, g

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.w, layer.b])
        return out

    def param_names(self, prefix: str = "mlp") -> list[str]:
        out = []
        for k in range(len(self.layers)):
            out.extend([f"{prefix}.layer{k}.w", f"{prefix}.layer{k}.b"])
        return out


def flatten(arrays: list[np.ndarray]) -> np.ndarray:
    """Concatenate arrays into one float64 vector (fixed order, bit-exact)."""
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten_into(flat: np.ndarray, arrays: list[np.ndarray]) -> None:
    """Copy a flat vector back into the arrays it was flattened from."""
    total = sum(a.size for a in arrays)
    if flat.shape != (total,):
        raise ShapeError(f"flat vector {flat.shape} does not match layout size {total}")
    off = 0
    for a in arrays:
        a[...] = flat[off:off + a.size].reshape(a.shape)
        off += a.size


@dataclass
class ParamLayout:
    """Names, shapes and offsets of a flattened parameter vector."""

    names: list[str]
    shapes: list[tuple[int, ...]]
    offsets: list[int]
    total: int

    @classmethod
    def of(cls, names: list[str], arrays: list[np.ndarray]) -> "ParamLayout":
        offsets, off = [], 0
        for a in arrays:
            offsets.append(off)
            off += a.size
        return cls(list(names), [a.shape for a in arrays], offsets, off)

    def locate(self, flat_index: int) -> str:
        """Human-readable position of a flat-vector coordinate."""
        for name, shape, off in zip(reversed(self.names), reversed(self.shapes), reversed(self.offsets)):
            if flat_index >= off:
                local = np.unravel_index(flat_index - off, shape) if shape else ()
                return f"{name}{list(local)}"
        return f"<offset {flat_index}>"


def global_norm_clip(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale the gradient vector down so its L2 norm is at most max_norm."""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


class Adam:
    """Adam with bias correction, operating in place on a flat float64 vector."""

    algorithm = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, params: np.ndarray, grads: np.ndarray, layout: ParamLayout | None = None) -> None:
        _check_finite(grads, self.algorithm, layout)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        size = 0 if self.m is None else self.m.size
        return {"m": self.m if self.m is not None else np.zeros(size),
                "v": self.v if self.v is not None else np.zeros(size)}

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        self.m = arrays["m"].copy()
        self.v = arrays["v"].copy()


class RmsPropMomentum:
    """RMSProp with a classical momentum buffer on the preconditioned step."""

    algorithm = "rmsprop-momentum"

    def __init__(self, lr: float = 1e-3, decay: float = 0.9, momentum: float = 0.9, eps: float = 1e-8):
        self.lr = lr
        self.decay = decay
        self.momentum = momentum
        self.eps = eps
        self.t = 0
        self.cache: np.ndarray | None = None
        self.mom: np.ndarray | None = None

    def step(self, params: np.ndarray, grads: np.ndarray, layout: ParamLayout | None = None) -> None:
        _check_finite(grads, self.algorithm, layout)
        if self.cache is None:
            self.cache = np.zeros_like(params)
            self.mom = np.zeros_like(params)
        self.t += 1
        self.cache = self.decay * self.cache + (1.0 - self.decay) * grads**2
        self.mom = self.momentum * self.mom + self.lr * grads / (np.sqrt(self.cache) + self.eps)
        params -= self.mom

    def state_arrays(self) -> dict[str, np.ndarray]:
        size = 0 if self.cache is None else self.cache.size
        return {"cache": self.cache if self.cache is not None else np.zeros(size),
                "mom": self.mom if self.mom is not None else np.zeros(size)}

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        self.cache = arrays["cache"].copy()
        self.mom = arrays["mom"].copy()


def make_optimizer(algorithm: str, lr: float, **kwargs):
    if algorithm == "adam":
        return Adam(lr=lr, **kwargs)
    if algorithm == "rmsprop-momentum":
        return RmsPropMomentum(lr=lr, **kwargs)
    raise ValueError(f"unknown optimizer {algorithm!r}")


def _check_finite(grads: np.ndarray, op_name: str, layout: ParamLayout | None) -> None:
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        where = layout.locate(int(bad[0])) if layout is not None else f"offset {int(bad[0])}"
        raise NonFiniteError(f"{op_name}: non-finite gradient at {where} ({bad.size} entries total)")


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    max_rel_err: float
    worst_index: int
    analytic_at_worst: float
    fd_at_worst: float
    n_params: int
    tol: float
    nonfinite_points: list[int] = field(default_factory=list)
    layout: ParamLayout | None = None

    @property
    def ok(self) -> bool:
        return not self.nonfinite_points and self.max_rel_err < self.tol

    def describe(self) -> str:
        where = self.layout.locate(self.worst_index) if self.layout else f"offset {self.worst_index}"
        lines = [f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) at {where}: "
                 f"analytic {self.analytic_at_worst:.6e} vs fd {self.fd_at_worst:.6e}"]
        if self.nonfinite_points:
            lines.append(f"non-finite loss when perturbing coordinates {self.nonfinite_points[:5]}")
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines)


def grad_check(loss_fn, params: np.ndarray, h: float = 1e-5, tol: float = 1e-6,
               layout: ParamLayout | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Central-difference check of a deterministic scalar loss.

    loss_fn maps a flat parameter vector to (value, gradient). Relative error
    per coordinate is |analytic - fd| / max(|analytic|, |fd|, floor); the
    floor keeps coordinates whose true gradient vanishes (where fd carries
    only ~|loss|*eps/h of cancellation noise) from reporting spurious errors.
    """
    params = np.asarray(params, dtype=np.float64)
    _, analytic = loss_fn(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ShapeError(f"gradient {analytic.shape} does not match params {params.shape}")
    fd = np.zeros_like(params)
    nonfinite = []
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        up, _ = loss_fn(p)
        p[i] -= 2 * h
        down, _ = loss_fn(p)
        if not (np.isfinite(up) and np.isfinite(down)):
            nonfinite.append(i)
            continue
        fd[i] = (up - down) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    rel = np.abs(analytic - fd) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_err=float(rel[worst]),
        worst_index=worst,
        analytic_at_worst=float(analytic[worst]),
        fd_at_worst=float(fd[worst]),
        n_params=params.size,
        tol=tol,
        nonfinite_points=nonfinite,
        layout=layout,
    )
