"""Small fully-connected networks with hand-written backprop.

Parameters live in one flat vector. For each layer the weight matrix
``W`` (shape ``(fan_out, fan_in)``, row-major) is followed by the bias
``b``; layers are stored in order.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .regression import DivergenceError

Activation = Literal["relu", "tanh", "identity"]
Squash = Literal["none", "unit"]
_SQUASH_EPS = 1e-12


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes include the input dimension: ``(in, h1, ..., out)``.

    ``residual=True`` adds a skip connection around every layer whose
    fan-in equals its fan-out, and around the whole stack when the input
    and output dimensions agree. ``output_squash="unit"`` sends the output
    through a logistic sigmoid into (0, 1).
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    residual: bool = False
    output_squash: Squash = "none"
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        acts = tuple(a.lower() for a in self.activations)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("need at least one layer with positive sizes")
        if len(acts) != len(sizes) - 1:
            raise ValueError("one activation per layer")
        if any(a not in ("relu", "tanh", "identity") for a in acts):
            raise ValueError(f"unknown activation in {acts}")
        if self.output_squash not in ("none", "unit"):
            raise ValueError(f"unknown squash {self.output_squash!r}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "activations", acts)
        shapes, off = [], 0
        for fin, fout in zip(sizes[:-1], sizes[1:]):
            shapes.append((off, off + fout * fin, off + fout * fin + fout, fin, fout))
            off += fout * fin + fout
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def n_params(self) -> int:
        return self._shapes[-1][2]

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    @property
    def global_skip(self) -> bool:
        return self.residual and self.sizes[0] == self.sizes[-1]

    def fingerprint(self) -> str:
        text = (f"sizes={'-'.join(map(str, self.sizes))};act={','.join(self.activations)};"
                f"residual={int(self.residual)};squash={self.output_squash}")
        return text + ";sha=" + hashlib.sha256(text.encode()).hexdigest()[:12]

    def layers(self, params: np.ndarray):
        """Yield ``(W, b, activation, skip)`` views into ``params``."""
        for (w0, b0, b1, fin, fout), act in zip(self._shapes, self.activations):
            yield (params[w0:b0].reshape(fout, fin), params[b0:b1], act,
                   self.residual and fin == fout)


def init_params(spec: NetworkSpec, seed: int, last_scale: float = 1.0) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``last_scale`` shrinks the final layer; 0 makes the network start as
    its skip path (or as zero without one).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    p = np.zeros(spec.n_params)
    n_layers = len(spec._shapes)
    for i, (w0, b0, _, fin, _) in enumerate(spec._shapes):
        bound = 1.0 / np.sqrt(fin)
        w = rng.uniform(-bound, bound, size=b0 - w0)
        p[w0:b0] = w * (last_scale if i == n_layers - 1 else 1.0)
    return p


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _dact(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0).astype(float)
    if name == "tanh":
        return 1.0 - post * post
    return np.ones_like(pre)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # clipped so that saturated outputs stay strictly inside (0, 1)
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * x)), _SQUASH_EPS, 1.0 - _SQUASH_EPS)


def _as_batch(spec: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (..., {spec.input_dim})")
    return xb, single


def _check_params(spec: NetworkSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
    return params


def _forward_cache(spec: NetworkSpec, params: np.ndarray, xb: np.ndarray):
    h = xb
    cache = []
    for W, b, act, skip in spec.layers(params):
        pre = h @ W.T + b
        post = _act(act, pre)
        out = h + post if skip else post
        cache.append((h, pre, post))
        h = out
    if spec.global_skip:
        h = h + xb
    y = _sigmoid(h) if spec.output_squash == "unit" else h
    return y, cache


def forward(spec: NetworkSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate on one input vector or a batch of row vectors."""
    params = _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    y, _ = _forward_cache(spec, params, xb)
    return y[0] if single else y


@dataclass
class Tape:
    """Activations kept from a forward pass for a later reverse pass."""

    x: np.ndarray
    y: np.ndarray
    cache: list
    single: bool


def forward_tape(spec: NetworkSpec, params: np.ndarray, x) -> Tape:
    params = _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    y, cache = _forward_cache(spec, params, xb)
    return Tape(xb, y, cache, single)


def backward_tape(spec: NetworkSpec, params: np.ndarray, tape: Tape, upstream,
                  need_params: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Reverse pass over a recorded forward pass; see :func:`backward`."""
    up = np.asarray(upstream, dtype=float)
    up = up[None, :] if tape.single else up
    y = tape.y
    if up.shape != y.shape:
        raise ValueError(f"upstream has shape {up.shape}, expected {y.shape}")
    g = up * y * (1.0 - y) if spec.output_squash == "unit" else up
    gx_skip = g if spec.global_skip else None
    grad = np.zeros_like(params) if need_params else None
    layers = list(spec.layers(params))
    for (w0, b0, b1, _, _), (W, _, act, skip), (h, pre, post) in zip(
            reversed(spec._shapes), reversed(layers), reversed(tape.cache)):
        dpre = g * _dact(act, pre, post)
        if need_params:
            grad[w0:b0] = (dpre.T @ h).ravel()
            grad[b0:b1] = dpre.sum(axis=0)
        g = dpre @ W + (g if skip else 0.0)
    if gx_skip is not None:
        g = g + gx_skip
    if not np.all(np.isfinite(g)) or (need_params and not np.all(np.isfinite(grad))):
        raise DivergenceError("non-finite gradient")
    return grad, (g[0] if tape.single else g)


def backward(spec: NetworkSpec, params: np.ndarray, x, upstream
             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse pass for the scalar ``sum(output * upstream)``.

    Returns ``(output, grad_params, grad_input)``; the parameter gradient is
    summed over the batch.
    """
    tape = forward_tape(spec, params, x)
    grad, gx = backward_tape(spec, np.asarray(params, dtype=float), tape, upstream)
    return (tape.y[0] if tape.single else tape.y), grad, gx


def gradient(spec: NetworkSpec, params: np.ndarray, x, upstream) -> np.ndarray:
    """Gradient of ``sum(output * upstream)`` with respect to the parameters."""
    return backward(spec, params, x, upstream)[1]


def input_gradient(spec: NetworkSpec, params: np.ndarray, x, upstream) -> np.ndarray:
    """Gradient of ``sum(output * upstream)`` with respect to the input."""
    return backward(spec, params, x, upstream)[2]


def polyak_update(target: np.ndarray, live: np.ndarray, weight: float) -> np.ndarray:
    """``weight * live + (1 - weight) * target``."""
    target, live = np.asarray(target, dtype=float), np.asarray(live, dtype=float)
    if target.shape != live.shape:
        raise ValueError("target and live parameters have different layouts")
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    return weight * live + (1.0 - weight) * target


@dataclass
class OptimizerState:
    """SGD or Adam; Adam keeps first/second moment buffers."""

    method: Literal["sgd", "adam"]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    @classmethod
    def create(cls, method: str, learning_rate: float, n_params: int, **kw) -> "OptimizerState":
        method = method.lower()
        if method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {method!r}")
        if not learning_rate > 0:
            raise ValueError("learning rate must be positive")
        st = cls(method, learning_rate, **kw)
        if method == "adam":
            st.m = np.zeros(n_params)
            st.v = np.zeros(n_params)
        return st

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated parameters; moment buffers are updated in place."""
        if self.method == "sgd":
            return params - self.learning_rate * grad
        if self.m is None or self.m.shape != params.shape:
            raise ValueError("optimizer buffers do not match the parameters")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)


def save_params(spec: NetworkSpec, params: np.ndarray, path: str | Path | None = None) -> str:
    """One double per line under a ``# <fingerprint>`` header."""
    params = _check_params(spec, params)
    buf = io.StringIO()
    buf.write(f"# {spec.fingerprint()}\n")
    buf.write("value\n")
    for v in params:
        buf.write(f"{v:.17g}\n")
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def load_params(spec: NetworkSpec, text_or_path: str | Path) -> np.ndarray:
    text = str(text_or_path)
    if not text.startswith("#"):
        text = Path(text_or_path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != f"# {spec.fingerprint()}":
        raise ValueError("parameter file does not match this network spec")
    if lines[1] != "value":
        raise ValueError("missing 'value' header")
    return _check_params(spec, np.array([float(v) for v in lines[2:] if v]))


def mlp(sizes: Sequence[int], hidden: str = "relu", residual: bool = False,
        squash: Squash = "none") -> NetworkSpec:
    """Hidden layers share one activation; the output layer is linear."""
    n = len(sizes) - 1
    return NetworkSpec(tuple(sizes), tuple([hidden] * (n - 1) + ["identity"]), residual, squash)
