"""MLP building blocks on top of the tape autodiff."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tape, Tensor, concat, no_record

ACTIVATIONS = ("linear", "relu", "softplus", "sigmoid")


def positional_encode(x, n_freq: int, include_input: bool = True) -> Tensor:
    """Lift ``x`` (..., D) to ``[x, sin(2^k pi x), cos(2^k pi x)]`` per frequency k.

    Layout is input first (optional), then for each k the D sines followed by
    the D cosines.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    x = x if isinstance(x, Tensor) else Tensor(x)
    parts = [x] if include_input else []
    for k in range(n_freq):
        xk = x * (math.pi * 2.0**k)
        parts.append(xk.sin())
        parts.append(xk.cos())
    if not parts:
        return Tensor(np.zeros(x.shape[:-1] + (0,)))
    return concat(parts, axis=-1) if len(parts) > 1 else parts[0]


def encoded_dim(d: int, n_freq: int, include_input: bool = True) -> int:
    return d * (2 * n_freq + (1 if include_input else 0))


@dataclass
class MlpParams:
    """Weights (out x in) and biases of a fully connected net.

    ``skip_in`` lists layer indices whose input is ``concat(h, x) / sqrt(2)``
    where ``x`` is the network input.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]
    skip_in: tuple[int, ...] = ()
    softplus_beta: float = 100.0

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        d_in = self.in_dim
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            expected = w.shape[1]
            if k > 0:
                prev = self.weights[k - 1].shape[0]
                if k in self.skip_in:
                    prev += d_in
                if prev != expected:
                    raise DimensionError(
                        f"layer {k} expects {expected} inputs but receives {prev}"
                    )
            if b.shape != (w.shape[0],):
                raise DimensionError(f"layer {k} bias shape {b.shape} != ({w.shape[0]},)")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{k}"] = w.data
            out[f"b{k}"] = b.data
        return out

    def describe(self) -> dict:
        return {
            "dims": [list(w.shape) for w in self.weights],
            "activations": list(self.activations),
            "skip_in": list(self.skip_in),
            "softplus_beta": self.softplus_beta,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], description: dict) -> "MlpParams":
        n = len(description["dims"])
        return cls(
            weights=[Tensor(arrays[f"w{k}"].copy(), requires_grad=True) for k in range(n)],
            biases=[Tensor(arrays[f"b{k}"].copy(), requires_grad=True) for k in range(n)],
            activations=list(description["activations"]),
            skip_in=tuple(description["skip_in"]),
            softplus_beta=float(description["softplus_beta"]),
        )


def _activate(h: Tensor, act: str, beta: float) -> Tensor:
    if act == "relu":
        return h.relu()
    if act == "softplus":
        return h.softplus(beta)
    if act == "sigmoid":
        return h.sigmoid()
    return h


def mlp_forward(params: MlpParams, x: Tensor, tape: Tape | None = None) -> Tensor:
    """Run the net on rows of ``x`` (N, in); ops go onto ``tape`` if given."""
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match first layer weight shape "
            f"{params.weights[0].shape}"
        )
    if tape is not None:
        with tape:
            return _forward(params, x)
    return _forward(params, x)


def _forward(params: MlpParams, x: Tensor, n_layers: int | None = None) -> Tensor:
    h = x
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    layers = list(zip(params.weights, params.biases, params.activations))[:n_layers]
    for k, (w, b, act) in enumerate(layers):
        if k in params.skip_in:
            h = concat([h, x], axis=-1) * inv_sqrt2
        h = _activate(h @ w.T + b, act, params.softplus_beta)
    if n_layers is not None and n_layers in params.skip_in:
        h = concat([h, x], axis=-1) * inv_sqrt2
    return h


def fit_readout(
    params: MlpParams,
    encode,
    x: np.ndarray,
    target: np.ndarray,
    target_grad: np.ndarray | None = None,
    ridge: float = 1e-9,
    eps: float = 1e-5,
) -> None:
    """Least-squares refit of output row 0 of the last layer.

    ``encode`` maps raw points to network inputs.  Hidden layers are left
    untouched; the row and its bias are replaced so the first output matches
    ``target`` (and, if given, its spatial gradient matches ``target_grad``)
    as closely as the hidden features allow.
    """
    depth = len(params.weights) - 1

    def hidden(p):
        with no_record():
            return _forward(params, Tensor(encode(p)), n_layers=depth).data

    h = hidden(x)
    rows = [np.hstack([h, np.ones((len(h), 1))])]
    rhs = [target]
    if target_grad is not None:
        for k in range(3):
            step = np.zeros(3)
            step[k] = eps
            dh = (hidden(x + step) - hidden(x - step)) / (2 * eps)
            rows.append(np.hstack([dh, np.zeros((len(dh), 1))]))
            rhs.append(target_grad[:, k])
    a = np.vstack(rows)
    y = np.concatenate(rhs)
    coef = np.linalg.solve(a.T @ a + ridge * len(a) * np.eye(a.shape[1]), a.T @ y)
    w = params.weights[-1].data.copy()
    b = params.biases[-1].data.copy()
    w[0] = coef[:-1]
    b[0] = coef[-1]
    params.weights[-1].data = w
    params.biases[-1].data = b


def geometric_init(
    in_dim: int,
    raw_dim: int,
    hidden: list[int],
    out_dim: int,
    radius: float,
    skip_in: tuple[int, ...],
    rng: np.random.Generator,
    softplus_beta: float = 100.0,
) -> MlpParams:
    """Initialise an SDF net so that its first output approximates ``|x| - radius``.

    The first ``raw_dim`` input columns are the raw coordinates; encoded
    columns start at zero weight so the field begins smooth.
    """
    dims = [in_dim] + hidden + [out_dim]
    n_layers = len(dims) - 1
    weights, biases = [], []
    for k in range(n_layers):
        d_out = dims[k + 1]
        d_in = dims[k] + (in_dim if k in skip_in else 0)
        if k == n_layers - 1:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(d_in), 1e-4, (d_out, d_in))
            b = np.zeros(d_out)
            b[0] = -radius
        else:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(d_out), (d_out, d_in))
            b = np.zeros(d_out)
            if k == 0:
                w[:, raw_dim:] = 0.0
            elif k in skip_in:
                # encoded part of the re-injected input
                w[:, d_in - (in_dim - raw_dim):] = 0.0
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
    acts = ["softplus"] * (n_layers - 1) + ["linear"]
    return MlpParams(weights, biases, acts, tuple(skip_in), softplus_beta)


def kaiming_uniform_init(
    in_dim: int,
    hidden: list[int],
    out_dim: int,
    rng: np.random.Generator,
    hidden_act: str = "relu",
    out_act: str = "sigmoid",
) -> MlpParams:
    dims = [in_dim] + hidden + [out_dim]
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / d_in)
        weights.append(Tensor(rng.uniform(-bound, bound, (d_out, d_in)), requires_grad=True))
        biases.append(Tensor(np.zeros(d_out), requires_grad=True))
    acts = [hidden_act] * (len(dims) - 2) + [out_act]
    return MlpParams(weights, biases, acts)
