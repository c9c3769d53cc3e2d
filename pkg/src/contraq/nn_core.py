"""Minimal dense-network machinery shared by every learned component.

Small fully connected nets (2 hidden layers of 32 or 64 units) are all this
project needs, so forward, backprop, Adam, and finite differencing are kept
in plain numpy. Inputs may be single vectors of shape (d,) or batches of
shape (n, d); parameter gradients are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "tanh")


class ContractError(ValueError):
    """Raised when an operation is called with inconsistent shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces or receives NaN/inf values."""


@dataclass
class Mlp:
    """Dense ReLU network with per-layer weight matrices of shape (out, in).

    ``output_scale`` only matters for the ``tanh`` output activation, where
    the output is ``scale * tanh(z)``.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    output_scale: float = 1.0

    def __post_init__(self):
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ContractError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unsupported output activation {self.output_activation!r}")
        if len(self.layer_sizes) < 2:
            raise ContractError("need at least input and output layer sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_out, n_in = self.layer_sizes[i + 1], self.layer_sizes[i]
            if w.shape != (n_out, n_in):
                raise ContractError(f"layer {i} weight shape {w.shape} != ({n_out}, {n_in})")
            if b.shape != (n_out,):
                raise ContractError(f"layer {i} bias shape {b.shape} != ({n_out},)")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
            self.output_scale,
        )

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


@dataclass
class ParamGrads:
    """Gradients mirroring an Mlp's weights and biases."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def scale(self, factor: float) -> "ParamGrads":
        return ParamGrads([w * factor for w in self.weights], [b * factor for b in self.biases])

    def add_(self, other: "ParamGrads") -> None:
        for i, w in enumerate(other.weights):
            self.weights[i] += w
        for i, b in enumerate(other.biases):
            self.biases[i] += b

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p * p)) for p in self.parameters())))


def zero_grads(net: Mlp) -> ParamGrads:
    return ParamGrads([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


def init_mlp(
    layer_sizes: list[int],
    rng: np.random.Generator,
    output_activation: str = "identity",
    output_scale: float = 1.0,
    final_layer_gain: float = 1.0,
) -> Mlp:
    """He-style uniform init from a seeded generator; biases start at zero.

    ``final_layer_gain`` < 1 shrinks the last layer so freshly initial.ized
    nets predict near zero, which keeps recursive rollouts tame early in
    training.
    """
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        n_in, n_out = layer_sizes[i], layer_sizes[i + 1]
        bound = np.sqrt(6.0 / n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        if i == n_layers - 1:
            w *= final_layer_gain
        weights.append(w)
        biases.append(np.zeros(n_out))
    return Mlp(list(layer_sizes), weights, biases, "relu", output_activation, output_scale)


def _as_batch(x: np.ndarray, n_expected: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n_expected:
        raise ContractError(f"{what} has shape {x.shape}, expected (*, {n_expected})")
    return x, single


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Deterministic forward pass; accepts (d,) or (n, d) inputs."""
    y, _ = _forward_cached(net, x, keep_cache=False)
    return y


def _forward_cached(net: Mlp, x: np.ndarray, keep_cache: bool = True):
    a, single = _as_batch(x, net.n_inputs, "input")
    pre_acts = []
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        if keep_cache:
            pre_acts.append(z)
        if i < n_layers - 1:
            a = np.maximum(z, 0.0)
        elif net.output_activation == "tanh":
            a = net.output_scale * np.tanh(z)
        else:
            a = z
    out = a[0] if single else a
    cache = pre_acts if keep_cache else None
    return out, cache


def backward(net: Mlp, x: np.ndarray, output_gradient: np.ndarray) -> tuple[ParamGrads, np.ndarray]:
    """Backpropagate ``output_gradient`` (dLoss/dOutput) through the net.

    Returns parameter gradients (summed over the batch) and the gradient
    with respect to the input, matching central finite differences away
    from ReLU kinks.
    """
    xb, single = _as_batch(x, net.n_inputs, "input")
    gb, gsingle = _as_batch(output_gradient, net.n_outputs, "output_gradient")
    if single != gsingle or xb.shape[0] != gb.shape[0]:
        raise ContractError("input and output_gradient batch shapes disagree")

    n_layers = len(net.weights)
    activations = [xb]
    _, pre_acts = _forward_cached(net, xb)
    for i, z in enumerate(pre_acts[:-1]):
        activations.append(np.maximum(z, 0.0))

    if net.output_activation == "tanh":
        t = np.tanh(pre_acts[-1])
        delta = gb * net.output_scale * (1.0 - t * t)
    else:
        delta = gb

    w_grads: list[np.ndarray] = [None] * n_layers
    b_grads: list[np.ndarray] = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        w_grads[i] = delta.T @ activations[i]
        b_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (pre_acts[i - 1] > 0.0)
    input_grad = delta @ net.weights[0]
    if single:
        input_grad = input_grad[0]
    return ParamGrads(w_grads, b_grads), input_grad


@dataclass
class AdamState:
    """Adam accumulators for one net; shapes mirror the parameters."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, learning_rate: float = 0.001) -> "AdamState":
        params = net.parameters()
        return cls(
            learning_rate=learning_rate,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(net: Mlp, grads: ParamGrads, state: AdamState) -> tuple[Mlp, AdamState]:
    """One Adam update with bias correction, in place on ``net``.

    A non-finite gradient rejects the whole step before any mutation.
    """
    glist = grads.parameters()
    params = net.parameters()
    if len(glist) != len(params):
        raise ContractError("gradient structure does not match parameters")
    for g, p in zip(glist, params):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if not grads.all_finite():
        raise NonFiniteError("non-finite gradient; Adam step rejected")

    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    b1, b2 = state.beta1, state.beta2
    correction = np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for i, (p, g) in enumerate(zip(params, glist)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p -= lr * correction * state.m[i] / (np.sqrt(state.v[i]) + state.eps_adam)
    return net, state


def jacobian_fd(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of a vector function at ``x``.

    Entry (i, j) is (f_i(x + h e_j) - f_i(x - h e_j)) / (2 h). Raises
    NonFiniteError naming the offending coordinate if an evaluation is not
    finite.
    """
    if h <= 0.0:
        raise ContractError("finite-difference step h must be positive")
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    cols = []
    for j in range(n):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(f(xp), dtype=float)
        fm = np.asarray(f(xm), dtype=float)
        if not np.all(np.isfinite(fp)) or not np.all(np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value while perturbing coordinate {j}")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Plain-text weight persistence: header `mlpv1 <n_layers> <hidden>:<output>`,
# then per layer a dimensions line, the row-major weights, and the biases.
# %.17g printing makes the round trip bit exact for float64.
# ---------------------------------------------------------------------------

def _fmt(values: np.ndarray) -> str:
    return " ".join("%.17g" % v for v in np.asarray(values, dtype=float).ravel())


def write_mlp(fh, net: Mlp) -> None:
    n_layers = len(net.weights)
    act = f"{net.hidden_activation}:{net.output_activation}"
    fh.write(f"mlpv1 {n_layers} {act}\n")
    if net.output_activation == "tanh":
        fh.write("output_scale %.17g\n" % net.output_scale)
    for w, b in zip(net.weights, net.biases):
        fh.write(f"layer {w.shape[0]} {w.shape[1]}\n")
        fh.write(_fmt(w) + "\n")
        fh.write(_fmt(b) + "\n")


def read_mlp(fh) -> Mlp:
    header = fh.readline().split()
    if len(header) != 3 or header[0] != "mlpv1":
        raise ValueError(f"bad mlp header: {header!r}")
    n_layers = int(header[1])
    hidden_act, output_act = header[2].split(":")
    pos = fh.tell()
    line = fh.readline().split()
    output_scale = 1.0
    if line and line[0] == "output_scale":
        output_scale = float(line[1])
    else:
        fh.seek(pos)
    weights, biases = [], []
    sizes = None
    for _ in range(n_layers):
        dims = fh.readline().split()
        if len(dims) != 3 or dims[0] != "layer":
            raise ValueError(f"bad layer header: {dims!r}")
        n_out, n_in = int(dims[1]), int(dims[2])
        w = np.array([float(v) for v in fh.readline().split()]).reshape(n_out, n_in)
        b = np.array([float(v) for v in fh.readline().split()])
        if sizes is None:
            sizes = [n_in]
        elif sizes[-1] != n_in:
            raise ValueError("layer dimensions do not chain")
        sizes.append(n_out)
        weights.append(w)
        biases.append(b)
    return Mlp(sizes, weights, biases, hidden_act, output_act, output_scale)


def save_mlp(path, net: Mlp) -> None:
    with open(path, "w") as fh:
        write_mlp(fh, net)


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return read_mlp(fh)
