"""Fully connected classifier with hand-written forward and backward passes.

Parameters live in one flat vector carved into named segments (one weight
matrix and one bias vector per layer, in order), which is what the parameter
partitioning operates on.  Hidden activations are ReLU; the output layer is
fused softmax plus cross-entropy, evaluated in log-sum-exp form.  Frozen
segments are realized as exactly-zero gradient entries over the full-length
vector, never as a shortened vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import FrozenSet, List, Tuple

import numpy as np

__all__ = [
    "ModelError",
    "NonFiniteLossError",
    "Segment",
    "MlpSpec",
    "ParamVector",
    "Batch",
    "full_mask",
    "init_params",
    "loss_and_grad",
    "evaluate",
]


class ModelError(ValueError):
    """Invalid model specification or input."""


class NonFiniteLossError(FloatingPointError):
    """Loss or gradient overflowed; reported distinctly, never clamped."""


@dataclass(frozen=True)
class Segment:
    """One named contiguous block of the flat parameter vector."""

    name: str
    offset: int
    length: int
    shape: Tuple[int, ...]


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: layer widths (input first), activation, seed."""

    layer_widths: Tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ModelError("need at least input and output widths")
        if any(w < 1 for w in widths):
            raise ModelError(f"all widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise ModelError(f"unsupported activation {self.activation!r}")

    @property
    def layer_count(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def segment_count(self) -> int:
        return 2 * self.layer_count

    def segments(self) -> Tuple[Segment, ...]:
        """Weight and bias segments, alternating, in layer order."""
        out: List[Segment] = []
        offset = 0
        for layer, (fan_in, fan_out) in enumerate(
            zip(self.layer_widths[:-1], self.layer_widths[1:])
        ):
            w_len = fan_out * fan_in
            out.append(Segment(f"layer{layer}.weight", offset, w_len, (fan_out, fan_in)))
            offset += w_len
            out.append(Segment(f"layer{layer}.bias", offset, fan_out, (fan_out,)))
            offset += fan_out
        return tuple(out)

    @property
    def param_count(self) -> int:
        return sum(seg.length for seg in self.segments())


@dataclass
class ParamVector:
    """Flat parameter vector plus its segment table."""

    values: np.ndarray
    segments: Tuple[Segment, ...]

    def __post_init__(self):
        total = sum(seg.length for seg in self.segments)
        if self.values.shape != (total,):
            raise ModelError(
                f"values length {self.values.shape} does not cover segments ({total})"
            )

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def segment_view(self, index: int) -> np.ndarray:
        """Shaped view (no copy) of one segment."""
        seg = self.segments[index]
        return self.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)

    def segment_slice(self, index: int) -> slice:
        seg = self.segments[index]
        return slice(seg.offset, seg.offset + seg.length)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)


@dataclass(frozen=True)
class Batch:
    """Inputs (samples x features, values in [0, 1] for image data) and
    integer class targets."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        t = np.asarray(self.targets)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", t)
        if x.ndim != 2:
            raise ModelError(f"inputs must be 2-D, got shape {x.shape}")
        if t.shape != (x.shape[0],):
            raise ModelError("targets length must match inputs row count")
        if not np.all(np.isfinite(x)):
            raise ModelError("inputs contain non-finite entries")
        if t.size and (not np.issubdtype(t.dtype, np.integer) or t.min() < 0):
            raise ModelError("targets must be non-negative class indices")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def full_mask(spec_or_params) -> FrozenSet[int]:
    """Mask with every segment trainable."""
    if isinstance(spec_or_params, MlpSpec):
        return frozenset(range(spec_or_params.segment_count))
    return frozenset(range(len(spec_or_params.segments)))


def init_params(spec: MlpSpec) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Deterministic for a fixed spec seed.
    """
    rng = np.random.default_rng(spec.seed)
    segments = spec.segments()
    values = np.zeros(sum(seg.length for seg in segments))
    params = ParamVector(values, segments)
    for layer in range(spec.layer_count):
        fan_in = spec.layer_widths[layer]
        bound = 1.0 / np.sqrt(fan_in)
        w = params.segment_view(2 * layer)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        # biases stay zero
    return params


def _forward(params: ParamVector, inputs: np.ndarray):
    """Returns (pre-activations per layer, post-activations per layer).

    ``post[0]`` is the input; ``pre[-1]`` are the logits.
    """
    layer_count = len(params.segments) // 2
    pre = []
    post = [inputs]
    for layer in range(layer_count):
        w = params.segment_view(2 * layer)
        b = params.segment_view(2 * layer + 1)
        z = post[-1] @ w.T + b
        pre.append(z)
        if layer < layer_count - 1:
            post.append(np.maximum(z, 0.0))
    return pre, post


def _log_softmax_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and the softmax probabilities, stably."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    p = logits.shape[0]
    loss = float(-log_probs[np.arange(p), targets].mean())
    return loss, exp / total


def loss_and_grad(params: ParamVector, batch: Batch, mask: FrozenSet[int]):
    """Mean softmax cross-entropy and its gradient w.r.t. the flat vector.

    Gradient entries of segments outside ``mask`` are exactly zero.  Raises
    :class:`NonFiniteLossError` if the loss overflows.
    """
    if len(batch) == 0:
        raise ModelError("batch must be non-empty")
    if not np.all(np.isfinite(params.values)):
        raise ModelError("parameters contain non-finite entries")
    if not mask <= set(range(len(params.segments))):
        raise ModelError("mask references unknown segments")

    pre, post = _forward(params, batch.inputs)
    loss, probs = _log_softmax_loss(pre[-1], batch.targets)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is not finite: {loss}")

    p = len(batch)
    layer_count = len(params.segments) // 2
    grad = np.zeros_like(params.values)

    delta = probs
    delta[np.arange(p), batch.targets] -= 1.0
    delta /= p
    for layer in reversed(range(layer_count)):
        w = params.segment_view(2 * layer)
        g_params = ParamVector(grad, params.segments)
        g_params.segment_view(2 * layer)[...] = delta.T @ post[layer]
        g_params.segment_view(2 * layer + 1)[...] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ w) * (pre[layer - 1] > 0.0)

    if not np.all(np.isfinite(grad)):
        raise NonFiniteLossError("gradient is not finite")
    for index in range(len(params.segments)):
        if index not in mask:
            grad[params.segment_slice(index)] = 0.0
    return loss, grad


def evaluate(params: ParamVector, batch: Batch):
    """Mean loss and argmax accuracy; prediction ties go to the smallest
    class index."""
    if len(batch) == 0:
        raise ModelError("batch must be non-empty")
    pre, _ = _forward(params, batch.inputs)
    loss, _ = _log_softmax_loss(pre[-1], batch.targets)
    predictions = np.argmax(pre[-1], axis=1)
    accuracy = float(np.mean(predictions == batch.targets))
    return loss, accuracy
