"""Recurrent attentive refinement: spatial attention gate + ConvLSTM cell, cascaded.

Each step scores every position with a 3x3 convolution of the input plus one
of the previous hidden state, a tanh, and a 1x1 reduction to one channel; a
softmax over all positions turns the scores into an attention map. The input
reweighted by (h*w) times that map drives a convolutional LSTM cell, and the
next step attends over input + hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvKernel,
    ShapeError,
    Tensor,
    add,
    add_bias,
    channel_slice,
    conv2d,
    hadamard,
    scale,
    sigmoid,
    spatial_softmax,
    tanh,
)

GATES = ("i", "f", "o", "g")


@dataclass
class AttentionParams:
    input_kernel: ConvKernel
    hidden_kernel: ConvKernel
    score_kernel: ConvKernel
    bias: Tensor

    @property
    def channels(self) -> int:
        return self.input_kernel.in_channels

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.input": self.input_kernel.weight,
            f"{prefix}.hidden": self.hidden_kernel.weight,
            f"{prefix}.score": self.score_kernel.weight,
            f"{prefix}.bias": self.bias,
        }


@dataclass
class CellParams:
    """Gate kernels stacked along the output axis in the order i, f, o, g."""

    input_kernel: ConvKernel
    hidden_kernel: ConvKernel
    bias: Tensor

    @property
    def channels(self) -> int:
        return self.input_kernel.in_channels

    def gate_slice(self, gate: str) -> slice:
        c = self.channels
        k = GATES.index(gate)
        return slice(k * c, (k + 1) * c)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.input": self.input_kernel.weight, f"{prefix}.hidden": self.hidden_kernel.weight,
                f"{prefix}.bias": self.bias}


@dataclass
class RannState:
    hidden: Tensor
    memory: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.memory.shape:
            raise ShapeError(f"hidden {tuple(self.hidden.shape)} != memory {tuple(self.memory.shape)}")

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "RannState":
        return cls(Tensor(np.zeros((n, c, h, w))), Tensor(np.zeros((n, c, h, w))))


@dataclass(frozen=True)
class RannConfig:
    cascade_depth: int = 2
    channels: int = 64
    tied: bool = True
    fusion_mode: str = "add"

    def __post_init__(self):
        if self.cascade_depth < 1:
            raise ValueError("cascade_depth must be >= 1")
        if self.fusion_mode != "add":
            raise ValueError(f"unsupported fusion mode {self.fusion_mode!r}")


@dataclass
class RannParams:
    """One (attention, cell) pair per step; a single pair when weights are tied."""

    steps: list[tuple[AttentionParams, CellParams]]

    def for_step(self, t: int) -> tuple[AttentionParams, CellParams]:
        return self.steps[0] if len(self.steps) == 1 else self.steps[t]

    def named(self, prefix: str = "rann") -> dict[str, Tensor]:
        out = {}
        for s, (ap, cp) in enumerate(self.steps):
            out.update(ap.named(f"{prefix}.step{s}.attn"))
            out.update(cp.named(f"{prefix}.step{s}.cell"))
        return out


def init_attention(rng: np.random.Generator, c: int) -> AttentionParams:
    return AttentionParams(
        input_kernel=ConvKernel.uniform(rng, c, c, 3, bias=False),
        hidden_kernel=ConvKernel.uniform(rng, c, c, 3, bias=False),
        score_kernel=ConvKernel.uniform(rng, 1, c, 1, bias=False),
        bias=Tensor(np.zeros((1, c, 1, 1)), requires_grad=True),
    )


def init_cell(rng: np.random.Generator, c: int, forget_bias: float = 1.0) -> CellParams:
    bias = np.zeros((1, 4 * c, 1, 1))
    bias[:, c:2 * c] = forget_bias
    return CellParams(
        input_kernel=ConvKernel.uniform(rng, 4 * c, c, 3, bias=False),
        hidden_kernel=ConvKernel.uniform(rng, 4 * c, c, 3, bias=False),
        bias=Tensor(bias, requires_grad=True),
    )


def init_rann(cfg: RannConfig, rng: np.random.Generator) -> RannParams:
    n_sets = 1 if cfg.tied else cfg.cascade_depth
    return RannParams([(init_attention(rng, cfg.channels), init_cell(rng, cfg.channels))
                       for _ in range(n_sets)])


def rann_from_named(named: dict[str, Tensor], prefix: str = "rann") -> RannParams:
    steps = []
    s = 0
    while f"{prefix}.step{s}.attn.input" in named:
        a, c = f"{prefix}.step{s}.attn", f"{prefix}.step{s}.cell"
        ap = AttentionParams(ConvKernel(named[f"{a}.input"]), ConvKernel(named[f"{a}.hidden"]),
                             ConvKernel(named[f"{a}.score"]), named[f"{a}.bias"])
        cp = CellParams(ConvKernel(named[f"{c}.input"]), ConvKernel(named[f"{c}.hidden"]), named[f"{c}.bias"])
        steps.append((ap, cp))
        s += 1
    return RannParams(steps)


def attend(features: Tensor, hidden: Tensor | None, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Return the attention map (n,1,h,w) and the input reweighted by (h*w) times it.

    ``hidden=None`` stands for an all-zero hidden state.
    """
    n, c, h, w = features.shape
    if c != p.channels:
        raise ShapeError(f"attend: input has {c} channels, params expect {p.channels}")
    pre = conv2d(features, p.input_kernel, padding=1)
    if hidden is not None:
        if hidden.shape != features.shape:
            raise ShapeError(f"attend: hidden {tuple(hidden.shape)} != input {tuple(features.shape)}")
        pre = add(pre, conv2d(hidden, p.hidden_kernel, padding=1))
    score = conv2d(tanh(add_bias(pre, p.bias)), p.score_kernel)
    attention = spatial_softmax(score)
    return attention, scale(hadamard(features, attention), float(h * w))


def ann_step(attended: Tensor, state: RannState | None, p: CellParams) -> RannState:
    """One ConvLSTM update. ``state=None`` stands for zero hidden state and memory."""
    c = p.channels
    if attended.shape.c != c:
        raise ShapeError(f"ann_step: input has {attended.shape.c} channels, params expect {c}")
    z = conv2d(attended, p.input_kernel, padding=1)
    if state is not None:
        if state.hidden.shape != attended.shape:
            raise ShapeError(f"ann_step: state {tuple(state.hidden.shape)} != input {tuple(attended.shape)}")
        z = add(z, conv2d(state.hidden, p.hidden_kernel, padding=1))
    z = add_bias(z, p.bias)
    gates = sigmoid(channel_slice(z, 0, 3 * c))
    candidate = tanh(channel_slice(z, 3 * c, 4 * c))
    input_gate = channel_slice(gates, 0, c)
    forget_gate = channel_slice(gates, c, 2 * c)
    output_gate = channel_slice(gates, 2 * c, 3 * c)
    memory = hadamard(input_gate, candidate)
    if state is not None:
        memory = add(hadamard(forget_gate, state.memory), memory)
    return RannState(hadamard(output_gate, tanh(memory)), memory)


def rann_forward(features: Tensor, cfg: RannConfig, params: RannParams,
                 attention_maps: list[Tensor] | None = None) -> Tensor:
    """Run the cascade from a zero state and return the final hidden state.

    Each step's attention map is appended to ``attention_maps`` when given.
    """
    if features.shape.c != cfg.channels:
        raise ShapeError(f"rann: input has {features.shape.c} channels, config says {cfg.channels}")
    state: RannState | None = None
    for t in range(cfg.cascade_depth):
        ap, cp = params.for_step(t)
        if state is None:
            attention, attended = attend(features, None, ap)
        else:
            attention, attended = attend(add(features, state.hidden), state.hidden, ap)
        if attention_maps is not None:
            attention_maps.append(attention)
        state = ann_step(attended, state, cp)
    return state.hidden
