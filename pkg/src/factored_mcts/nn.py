"""Minimal dense-network kernel with hand-written backward passes.

Everything needed to train the models in this package: dense layers, relu /
sigmoid / softmax, MSE / cross-entropy / L1 losses, a straight-through
Gumbel-Sigmoid for differentiable Bernoulli sampling, and Adam with decoupled
weight decay plus global-norm gradient clipping.  Parameters are float32
throughout; gradients accumulate into each parameter's ``grad`` buffer.

Inputs are batch-first 2-D arrays.  The code is dtype-generic on purpose: the
finite-difference oracle re-runs the same forward/backward in float64 to check
the analytic gradients against central differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

# Probabilities entering logit() are clamped here; the Gumbel-Sigmoid formula
# is singular at p in {0, 1}.
PROB_EPS = 1e-6

CHECKPOINT_MAGIC = b"FMCK"
CHECKPOINT_VERSION = 1


class NumericFaultError(FloatingPointError):
    """A computation produced NaN or Inf."""


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericFaultError(f"non-finite values in {what}")
    return x


class ParamTensor:
    """A named learnable array with an accumulated-gradient buffer."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, dy, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign for stability at large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Dense:
    """Affine layer ``y = x @ w + b`` with weights of shape (fan_in, fan_out)."""

    def __init__(self, w: ParamTensor, b: ParamTensor):
        self.w = w
        self.b = b

    @classmethod
    def create(cls, rng: np.random.Generator, fan_in: int, fan_out: int,
               name: str, scale: float | None = None) -> Dense:
        if scale is None:
            scale = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(np.float32)
        b = np.zeros(fan_out, dtype=np.float32)
        return cls(ParamTensor(f"{name}.w", w), ParamTensor(f"{name}.b", b))

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.w.data + self.b.data
        return check_finite(y, f"output of {self.w.name[:-2]}")

    def backward(self, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        self.w.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.data.T

    def params(self) -> list[ParamTensor]:
        return [self.w, self.b]


class MLP:
    """Dense stack with relu between layers and a configurable output head.

    ``forward`` returns the output plus an opaque cache; ``backward`` consumes
    the cache and an output gradient, accumulates parameter gradients and
    returns the input gradient.  Multiple forwards may be held open at once
    (one cache each), which the unrolled training loop relies on.
    """

    def __init__(self, layers: list[Dense], output_activation: str = "linear"):
        if output_activation not in ("linear", "sigmoid"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layers = layers
        self.output_activation = output_activation

    @classmethod
    def create(cls, rng: np.random.Generator, sizes: list[int], name: str,
               output_activation: str = "linear") -> MLP:
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            scale = np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
            layers.append(Dense.create(rng, fan_in, fan_out, f"{name}.{i}", scale))
        return cls(layers, output_activation)

    @property
    def input_width(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def output_width(self) -> int:
        return self.layers[-1].w.shape[1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ValueError(
                f"expected input of shape (batch, {self.input_width}), got {x.shape}")
        cache = []
        h = x
        for i, layer in enumerate(self.layers):
            pre = layer.forward(h)
            cache.append((h, pre))
            h = relu(pre) if i < len(self.layers) - 1 else pre
        if self.output_activation == "sigmoid":
            h = sigmoid(h)
        cache.append(h)
        return h, cache

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward without keeping a cache (inference path)."""
        return self.forward(x)[0]

    def backward(self, cache: list, dy: np.ndarray) -> np.ndarray:
        out = cache[-1]
        if self.output_activation == "sigmoid":
            dy = sigmoid_backward(out, dy)
        for i in range(len(self.layers) - 1, -1, -1):
            x, pre = cache[i]
            if i < len(self.layers) - 1:
                dy = relu_backward(pre, dy)
            dy = self.layers[i].backward(x, dy)
        return dy

    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params()]


# ---------------------------------------------------------------------------
# Straight-through Gumbel-Sigmoid
# ---------------------------------------------------------------------------

def gumbel_sigmoid_st(p: np.ndarray, u: np.ndarray, beta: float
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binary sample from Bernoulli(p) with a differentiable surrogate.

    Returns ``(hard, relaxed, grad_dp)`` where ``relaxed`` is
    sigmoid((logit(p) + logit(u)) / beta) for uniform noise ``u``, ``hard`` is
    1 where relaxed > 0.5 (strict), and ``grad_dp`` is d(relaxed)/dp.  The
    straight-through contract is that the forward pass propagates ``hard``
    while the backward pass routes gradients through ``relaxed``; callers do
    that by multiplying upstream mask gradients with ``grad_dp``.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    p = np.asarray(p)
    u = np.asarray(u)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    uc = np.clip(u, PROB_EPS, 1.0 - PROB_EPS)
    logits = (np.log(pc) - np.log1p(-pc) + np.log(uc) - np.log1p(-uc)) / beta
    relaxed = sigmoid(logits)
    hard = (relaxed > 0.5).astype(p.dtype)
    grad_dp = relaxed * (1.0 - relaxed) / (beta * pc * (1.0 - pc))
    # Where the clamp was active, p no longer influences the sample.
    grad_dp = np.where((p > PROB_EPS) & (p < 1.0 - PROB_EPS), grad_dp, 0.0)
    return hard, relaxed, grad_dp


# ---------------------------------------------------------------------------
# Losses (each returns the scalar loss and the gradient w.r.t. its first arg)
# ---------------------------------------------------------------------------

def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def cross_entropy(logits: np.ndarray, target_dist: np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Mean over rows of -sum(target * log_softmax(logits))."""
    if logits.shape != target_dist.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {target_dist.shape}")
    logits2 = np.atleast_2d(logits)
    target2 = np.atleast_2d(target_dist)
    row_sums = target2.sum(axis=1)
    if np.any(target2 < -1e-7) or np.any(np.abs(row_sums - 1.0) > 1e-4):
        raise ValueError("target_dist rows must be probability vectors")
    logp = log_softmax(logits2, axis=1)
    loss = float(np.mean(-(target2 * logp).sum(axis=1)))
    grad = (softmax(logits2, axis=1) - target2) / logits2.shape[0]
    return loss, grad.reshape(logits.shape)


def l1(values: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of absolute values; subgradient sign(x) with sign(0) = 0."""
    values = np.asarray(values)
    return float(np.abs(values).sum()), np.sign(values)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def clip_global_norm(params: list[ParamTensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = np.float32(max_norm / norm)
        for p in params:
            p.grad *= scale
    return norm


@dataclass
class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Gradient clipping by global norm happens inside :meth:`step`, before the
    moment updates; weight decay is applied directly to the weights, scaled by
    the learning rate, independent of the adaptive step.
    """

    params: list[ParamTensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    max_grad_norm: float = 100.0
    step_count: int = 0
    _m: list[np.ndarray] = field(default_factory=list)
    _v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the
        pre-clip global gradient norm."""
        norm = clip_global_norm(self.params, self.max_grad_norm)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            check_finite(g, f"gradient of {p.name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.float32(self.learning_rate) * update
            if self.weight_decay:
                p.data -= np.float32(self.learning_rate * self.weight_decay) * p.data
            check_finite(p.data, f"updated {p.name}")
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_check(loss_and_grad, params: list[ParamTensor],
                            h: float = 1e-4, max_coords: int = 200,
                            rng: np.random.Generator | None = None,
                            check_params: list[ParamTensor] | None = None) -> dict:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad()`` must zero the gradients, run forward + backward and
    return the scalar loss; it is re-evaluated (for its value only) under
    coordinate perturbations.  The whole check runs in float64: every tensor
    in ``params`` is temporarily promoted so the loss surface is smooth at the
    difference scale, then restored bit-exactly.  ``check_params`` restricts
    which tensors are actually differenced (default: all of ``params``).

    Returns a report dict with ``max_rel_err`` and the worst coordinate.
    """
    if check_params is None:
        check_params = params
    saved = [(p.data, p.grad) for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
        p.grad = np.zeros_like(p.data)
    try:
        loss_and_grad()
        analytic = [p.grad.copy() for p in check_params]
        gmax = max((float(np.max(np.abs(g))) for g in analytic), default=0.0)
        floor = max(1e-6, 1e-4 * gmax)
        report = {"max_rel_err": 0.0, "worst": None, "coords_checked": 0}
        check_rng = rng or np.random.default_rng(0)
        for p, grads in zip(check_params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if flat.size > max_coords:
                idx = check_rng.choice(flat.size, size=max_coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_and_grad())
                flat[i] = orig - h
                down = float(loss_and_grad())
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                a = float(grads.reshape(-1)[i])
                rel = abs(a - fd) / max(abs(a), abs(fd), floor)
                report["coords_checked"] += 1
                if rel > report["max_rel_err"]:
                    report["max_rel_err"] = rel
                    report["worst"] = (p.name, int(i), a, fd)
        return report
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data = data
            p.grad = grad


# ---------------------------------------------------------------------------
# Checkpoint format: manifest JSON + flat little-endian float32 payload
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: list[ParamTensor], meta: dict | None = None) -> None:
    """Write parameters to ``path``.

    Layout: magic, version, manifest length (uint64 LE), UTF-8 JSON manifest
    (format version, optional metadata, per-tensor name / shape / byte
    offset), then the concatenated float32 little-endian payload.  Round
    trips are bit-exact.
    """
    entries = []
    payload = bytearray()
    for p in params:
        entries.append({
            "name": p.name,
            "shape": list(p.shape),
            "offset": len(payload),
        })
        payload.extend(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (meta, {tensor name: float32 array})."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(blob_len).decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
        payload = f.read()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return manifest.get("meta", {}), tensors
