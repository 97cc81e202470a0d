"""Recurrent affine conditioning core.

One LSTM-style controller is threaded through every fusion point of the
generator. At each fusion point a pair of layer-specific one-hidden-layer
MLP heads turns the current hidden state into per-channel scale/shift
parameters, which modulate the feature map before a convolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError


class ControllerState(NamedTuple):
    h: torch.Tensor       # (..., hidden_width)
    c_cell: torch.Tensor  # (..., hidden_width)


class AffineParams(NamedTuple):
    gamma: torch.Tensor   # (..., channels)
    beta: torch.Tensor    # (..., channels)


@dataclass
class GateTrace:
    """Per-step gate activations collected during a traced forward pass."""

    enabled: bool = True
    records: list[dict] = field(default_factory=list)

    def record(self, step: int, gates: dict[str, torch.Tensor]) -> None:
        if not self.enabled:
            return
        for kind, values in gates.items():
            flat = values.detach().reshape(-1)
            self.records.append({
                "step": step,
                "gate_kind": kind,
                "values": [float(v) for v in flat],
            })


def log_gate_activations(trace: GateTrace, sink: IO[str]) -> None:
    """Write one structured line per (step, gate_kind, channel) activation."""
    if not trace.enabled:
        return
    for rec in trace.records:
        for channel, value in enumerate(rec["values"]):
            sink.write(json.dumps({
                "step": rec["step"],
                "gate_kind": rec["gate_kind"],
                "channel": channel,
                "value": value,
            }) + "\n")


def affine_transform(fm: torch.Tensor, params: AffineParams) -> torch.Tensor:
    """Channel-wise scale and shift broadcast over all spatial positions.

    Accepts (C, H, W) with (C,) params or (B, C, H, W) with (B, C) params.
    """
    gamma, beta = params
    if fm.dim() == 3:
        if gamma.shape != (fm.shape[0],) or beta.shape != (fm.shape[0],):
            raise InvalidInputError(
                f"affine width {tuple(gamma.shape)} does not match {fm.shape[0]} channels")
        return gamma[:, None, None] * fm + beta[:, None, None]
    if fm.dim() == 4:
        if gamma.shape != fm.shape[:2] or beta.shape != fm.shape[:2]:
            raise InvalidInputError(
                f"affine shape {tuple(gamma.shape)} does not match batch channels {tuple(fm.shape[:2])}")
        return gamma[:, :, None, None] * fm + beta[:, :, None, None]
    raise InvalidInputError(f"expected 3d or 4d feature map, got {fm.dim()}d")


class RecurrentController(nn.Module):
    """LSTM cell driven by the sentence embedding, seeded from the noise vector.

    The gate transform consumes concat(s, h_prev) and emits four hidden-width
    slices ordered (input, forget, output, candidate).
    """

    def __init__(self, noise_width: int, sentence_width: int, hidden_width: int):
        super().__init__()
        self.noise_width = noise_width
        self.sentence_width = sentence_width
        self.hidden_width = hidden_width
        self.init_h = nn.Linear(noise_width, hidden_width)
        self.init_c = nn.Linear(noise_width, hidden_width)
        self.gates = nn.Linear(sentence_width + hidden_width, 4 * hidden_width)

    def init_state(self, z: torch.Tensor) -> ControllerState:
        if z.shape[-1] != self.noise_width:
            raise InvalidInputError(
                f"noise width {z.shape[-1]} does not match configured {self.noise_width}")
        return ControllerState(self.init_h(z), self.init_c(z))

    def step(self, state: ControllerState, s: torch.Tensor,
             trace: GateTrace | None = None, step_index: int = 0) -> ControllerState:
        if s.shape[-1] != self.sentence_width:
            raise InvalidInputError(
                f"sentence width {s.shape[-1]} does not match configured {self.sentence_width}")
        if state.h.shape[-1] != self.hidden_width:
            raise InvalidInputError(
                f"state width {state.h.shape[-1]} does not match configured {self.hidden_width}")
        pre = self.gates(torch.cat([s, state.h], dim=-1))
        i, f, o, u = pre.chunk(4, dim=-1)
        i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
        u = torch.tanh(u)
        c_new = f * state.c_cell + i * u
        h_new = o * torch.tanh(c_new)
        if trace is not None:
            trace.record(step_index, {"input": i, "forget": f, "output": o})
        return ControllerState(h_new, c_new)


class AffineHead(nn.Module):
    """Two one-hidden-layer MLPs mapping a hidden state to (gamma, beta).

    Hidden width equals the target channel count; each fusion point owns an
    independent head because channel counts differ per layer.
    """

    def __init__(self, input_width: int, channels: int):
        super().__init__()
        self.channels = channels
        self.gamma_mlp = nn.Sequential(
            nn.Linear(input_width, channels), nn.LeakyReLU(0.2),
            nn.Linear(channels, channels))
        self.beta_mlp = nn.Sequential(
            nn.Linear(input_width, channels), nn.LeakyReLU(0.2),
            nn.Linear(channels, channels))

    def forward(self, h: torch.Tensor) -> AffineParams:
        return AffineParams(self.gamma_mlp(h), self.beta_mlp(h))


class AffineHeadBank(nn.Module):
    """Registry of layer-specific heads, addressed by fusion-layer index."""

    def __init__(self, input_width: int, channel_schedule: list[int]):
        super().__init__()
        self.heads = nn.ModuleList(
            AffineHead(input_width, ch) for ch in channel_schedule)

    def predict(self, h: torch.Tensor, layer_index: int) -> AffineParams:
        if not 0 <= layer_index < len(self.heads):
            raise InvalidInputError(
                f"no affine head registered for layer {layer_index}")
        return self.heads[layer_index](h)


@dataclass
class RATBlockConfig:
    channels: int
    sub_units: int = 2
    hidden_width: int = 64
    sentence_width: int = 64

    def __post_init__(self):
        if self.sub_units < 1:
            raise InvalidInputError("a block needs at least one affine/conv sub-unit")
        if min(self.channels, self.hidden_width, self.sentence_width) < 1:
            raise InvalidInputError("all widths must be >= 1")


class RATBlock(nn.Module):
    """A stack of (controller step -> affine -> conv -> nonlinearity) units.

    The controller and affine heads are owned by the caller so the recurrent
    state forms one chain across all blocks; this module only owns its convs.
    """

    def __init__(self, cfg: RATBlockConfig, kernel_size: int = 3):
        super().__init__()
        self.cfg = cfg
        pad = kernel_size // 2
        self.convs = nn.ModuleList(
            nn.Conv2d(cfg.channels, cfg.channels, kernel_size, padding=pad)
            for _ in range(cfg.sub_units))

    def forward(self, fm: torch.Tensor, state: ControllerState, s: torch.Tensor,
                controller: RecurrentController, heads: AffineHeadBank,
                first_layer_index: int, trace: GateTrace | None = None,
                step_counter: list[int] | None = None):
        """Returns (feature map, advanced controller state)."""
        for k, conv in enumerate(self.convs):
            layer_index = first_layer_index + k
            state = controller.step(state, s, trace=trace, step_index=layer_index)
            params = heads.predict(state.h, layer_index)
            fm = affine_transform(fm, params)
            fm = F.leaky_relu(conv(fm), 0.2)
            if step_counter is not None:
                step_counter[0] += 1
        return fm, state
