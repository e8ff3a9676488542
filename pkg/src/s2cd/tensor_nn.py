"""Minimal dense-network engine.

Fully connected tanh networks over float64 numpy arrays with a flat
parameter vector, exact reverse-mode gradients, three output heads
(softmax policy, scalar value, per-action vector) and an AdamW-style
optimizer with linear learning-rate decay. Everything is double precision
so finite-difference gradient checks hold to tight tolerances.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class Head(str, Enum):
    SOFTMAX_POLICY = "softmax_policy"
    SCALAR_VALUE = "scalar_value"
    VECTOR_VALUE = "vector_value"


class GradientError(RuntimeError):
    """Raised when an update would consume non-finite gradients."""


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)
    head: Head = Head.SCALAR_VALUE
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "head", Head(self.head))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.head is Head.SCALAR_VALUE and self.output_dim != 1:
            raise ValueError("scalar value head requires output_dim == 1")
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activations are supported")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        return sum((fi + 1) * fo for fi, fo in zip(self.dims, self.dims[1:]))


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for reproducibility
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class DenseNet:
    """An MLP whose parameters live in one flat float64 vector."""

    def __init__(self, spec: NetSpec, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
        self.spec = spec
        self.params = params
        self._layout = []
        offset = 0
        for fan_in, fan_out in zip(spec.dims, spec.dims[1:]):
            self._layout.append((offset, fan_in, fan_out))
            offset += (fan_in + 1) * fan_out

    @classmethod
    def create(cls, spec: NetSpec, rng: np.random.Generator) -> "DenseNet":
        """Orthogonal hidden layers; the final layer of a policy head is
        scaled down so initial action probabilities start near uniform."""
        chunks = []
        n_layers = len(spec.dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(spec.dims, spec.dims[1:])):
            last = i == n_layers - 1
            if last:
                gain = 0.01 if spec.head is Head.SOFTMAX_POLICY else 1.0
            else:
                gain = np.sqrt(2.0)
            w = _orthogonal(rng, fan_in, fan_out, gain)
            chunks.append(w.reshape(-1))
            chunks.append(np.zeros(fan_out))
        return cls(spec, np.concatenate(chunks))

    def copy(self) -> "DenseNet":
        return DenseNet(self.spec, self.params.copy())

    def _weights(self, params: np.ndarray, layer: int) -> tuple[np.ndarray, np.ndarray]:
        offset, fan_in, fan_out = self._layout[layer]
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        b = params[offset + fan_in * fan_out : offset + (fan_in + 1) * fan_out]
        return w, b

    def forward(self, x: np.ndarray, params: np.ndarray | None = None):
        """Run the network; returns (output, cache) where cache suffices for
        an exact backward pass. Accepts a single input or a batch."""
        params = self.params if params is None else params
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input dim {self.spec.input_dim}, got {h.shape[1]}")
        if not np.all(np.isfinite(h)):
            raise ValueError("non-finite network input")
        activations = [h]
        n_layers = len(self._layout)
        for layer in range(n_layers):
            w, b = self._weights(params, layer)
            z = h @ w + b
            if layer < n_layers - 1:
                h = np.tanh(z)
                activations.append(h)
            else:
                h = z
        logits = h
        if self.spec.head is Head.SOFTMAX_POLICY:
            out = _softmax(logits)
        elif self.spec.head is Head.SCALAR_VALUE:
            out = logits[:, 0]
        else:
            out = logits
        cache = (activations, logits, out, squeeze)
        if squeeze:
            return (out[0] if self.spec.head is not Head.SCALAR_VALUE else float(out[0])), cache
        return out, cache

    def backward(self, cache, out_grad: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Exact gradient of sum(out * out_grad) w.r.t. every parameter."""
        activations, logits, out, squeeze = cache
        g = np.asarray(out_grad, dtype=np.float64)
        if squeeze:
            g = g[None] if g.ndim == 0 else g[None, :]
        if self.spec.head is Head.SOFTMAX_POLICY:
            p = out  # cached in batch form regardless of squeeze
            if g.shape != p.shape:
                raise ValueError("output gradient shape mismatch with cached forward")
            dz = p * (g - np.sum(g * p, axis=1, keepdims=True))
        elif self.spec.head is Head.SCALAR_VALUE:
            if g.ndim != 1 or g.shape[0] != logits.shape[0]:
                raise ValueError("output gradient shape mismatch with cached forward")
            dz = g[:, None]
        else:
            if g.shape != logits.shape:
                raise ValueError("output gradient shape mismatch with cached forward")
            dz = g
        return self.backward_from_logits(cache, dz, params=params)

    def backward_from_logits(self, cache, logits_grad: np.ndarray,
                             params: np.ndarray | None = None) -> np.ndarray:
        """Backward pass seeded at the pre-head layer. Policy losses that
        differentiate through log-softmax analytically enter here."""
        params = self.params if params is None else params
        activations, logits, _, _ = cache
        dz = np.asarray(logits_grad, dtype=np.float64)
        if dz.shape != logits.shape:
            raise ValueError("logits gradient shape mismatch with cached forward")
        grads = np.zeros_like(params)
        n_layers = len(self._layout)
        for layer in range(n_layers - 1, -1, -1):
            offset, fan_in, fan_out = self._layout[layer]
            w, _ = self._weights(params, layer)
            h_prev = activations[layer]
            grads[offset : offset + fan_in * fan_out] = (h_prev.T @ dz).reshape(-1)
            grads[offset + fan_in * fan_out : offset + (fan_in + 1) * fan_out] = dz.sum(axis=0)
            if layer > 0:
                dz = (dz @ w.T) * (1.0 - h_prev * h_prev)
        return grads

    def policy_log_probs(self, cache) -> np.ndarray:
        """Stable log-softmax of the cached logits (batch, actions)."""
        _, logits, _, squeeze = cache
        lp = log_softmax(logits)
        return lp[0] if squeeze else lp


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    # keep log-prob computations finite for extreme logits
    return np.clip(p, 1e-300, 1.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class OptimState:
    """Decoupled-weight-decay adaptive-moment optimizer state."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    base_lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: bool = True

    @classmethod
    def for_net(cls, net: DenseNet, base_lr: float = 0.0005, weight_decay: float = 0.0,
                lr_decay: bool = True) -> "OptimState":
        n = net.spec.n_params
        return cls(m=np.zeros(n), v=np.zeros(n), base_lr=base_lr,
                   weight_decay=weight_decay, lr_decay=lr_decay)


def adamw_step(state: OptimState, params: np.ndarray, grads: np.ndarray,
               progress: float) -> np.ndarray:
    """One optimizer update; returns the new parameter vector.

    ``progress`` in [0, 1] drives the linear learning-rate decay. NaN or
    infinite gradients abort the update.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter/gradient/moment length mismatch")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise GradientError(f"{bad} non-finite gradient entries; update aborted")
    lr = state.base_lr * (1.0 - progress) if state.lr_decay else state.base_lr
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * params)


CHECKPOINT_FORMAT = 1


def save_net(net: DenseNet, path: str | Path) -> None:
    """Versioned JSON checkpoint. float64 values round-trip bit-exactly
    because json emits the shortest repr of each double."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "spec": {
            "input_dim": net.spec.input_dim,
            "output_dim": net.spec.output_dim,
            "hidden": list(net.spec.hidden),
            "head": net.spec.head.value,
            "activation": net.spec.activation,
        },
        "params": net.params.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_net(path: str | Path) -> DenseNet:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')}")
    s = payload["spec"]
    spec = NetSpec(input_dim=s["input_dim"], output_dim=s["output_dim"],
                   hidden=tuple(s["hidden"]), head=Head(s["head"]),
                   activation=s["activation"])
    return DenseNet(spec, np.array(payload["params"], dtype=np.float64))
