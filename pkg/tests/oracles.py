"""Independent reference implementations used to cross-check the package."""

import numpy as np


def central_fd(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise relative error.  Magnitudes below ``floor`` are treated as
    ``floor``: central differences with h = 1e-5 carry roughly 1e-10 of absolute
    round-off, so entries near zero cannot be compared relatively."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def softplus(z, beta):
    return np.logaddexp(0.0, beta * z) / beta


def plain_mlp(weights, biases, acts, x, skip_in=(), beta=100.0):
    """Straight numpy forward pass with no tape."""
    act = {"linear": lambda z: z, "relu": lambda z: np.maximum(z, 0.0),
           "softplus": lambda z: softplus(z, beta), "sigmoid": lambda z: 1.0 / (1.0 + np.exp(-z))}
    h = x
    for k, (w, b, a) in enumerate(zip(weights, biases, acts)):
        if k in skip_in:
            h = np.concatenate([h, x], axis=-1) / np.sqrt(2.0)
        h = act[a](h @ w.T + b)
    return h


def brute_force_pr(pred: np.ndarray, gt: np.ndarray, tau: float) -> tuple[float, float]:
    d = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    return float(np.mean(d.min(axis=1) <= tau)), float(np.mean(d.min(axis=0) <= tau))


def neus_weights_reference(d: np.ndarray, s: float) -> np.ndarray:
    """Scalar-loop discrete NeuS weights for one ray."""
    phi = 1.0 / (1.0 + np.exp(-s * d))
    w = []
    trans = 1.0
    for i in range(len(d) - 1):
        alpha = max((phi[i] - phi[i + 1]) / (phi[i] + 1e-12), 0.0)
        w.append(trans * alpha)
        trans *= 1.0 - alpha * (1.0 - 1e-7)
    return np.array(w)
