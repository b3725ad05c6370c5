"""Desk-scale CNNs with named feature taps, and the Conv-LSTM extractor.

Both teacher and student are plain staged conv nets: each stage holds
``blocks_per_stage`` conv3x3+relu blocks, stages after the first open
with stride 2, and a tap captures the activation at the end of every
stage. The head is global average pooling into a linear classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# CNN


@dataclass(frozen=True)
class CnnSpec:
    name: str
    role: str  # "teacher" or "student"
    stage_widths: tuple[int, ...]
    blocks_per_stage: int
    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 4

    @property
    def tap_names(self) -> tuple[str, ...]:
        return tuple(f"stage{i + 1}" for i in range(len(self.stage_widths)))


ARCHITECTURES = {
    # wide teacher / thin student pairing at CPU-trainable size
    "wide3": CnnSpec(name="wide3", role="teacher", stage_widths=(32, 64, 128), blocks_per_stage=2),
    "thin3": CnnSpec(name="thin3", role="student", stage_widths=(8, 16, 32), blocks_per_stage=1),
    # small pair for fast sweeps and CI
    "wide3-small": CnnSpec(name="wide3-small", role="teacher", stage_widths=(16, 32, 64), blocks_per_stage=1),
    "thin3-small": CnnSpec(name="thin3-small", role="student", stage_widths=(4, 8, 16), blocks_per_stage=1),
}


def make_spec(arch: str, *, role: str | None = None, num_classes: int | None = None,
              input_shape: tuple[int, int, int] | None = None,
              stage_widths: tuple[int, ...] | None = None,
              blocks_per_stage: int | None = None) -> CnnSpec:
    if arch not in ARCHITECTURES:
        raise ContractError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    spec = ARCHITECTURES[arch]
    updates = {}
    if role is not None:
        updates["role"] = role
    if num_classes is not None:
        updates["num_classes"] = num_classes
    if input_shape is not None:
        updates["input_shape"] = tuple(input_shape)
    if stage_widths is not None:
        updates["stage_widths"] = tuple(stage_widths)
    if blocks_per_stage is not None:
        updates["blocks_per_stage"] = blocks_per_stage
    return replace(spec, **updates) if updates else spec


def _kaiming_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)


def _kaiming_linear(rng: np.random.Generator, cin: int, cout: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / cin)
    return (rng.standard_normal((cin, cout)) * std).astype(dtype)


class CnnModel:
    """A staged conv net with feature taps. Parameters live in ``params``."""

    def __init__(self, spec: CnnSpec, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None, trainable: bool = True):
        self.spec = spec
        if params is not None:
            self.params = params
        else:
            if rng is None:
                raise ContractError("CnnModel needs either an rng or explicit params")
            self.params = self._init_params(rng)
        if not trainable:
            self.freeze()

    def _init_params(self, rng) -> dict[str, Tensor]:
        dtype = T.get_default_dtype()
        params: dict[str, Tensor] = {}
        cin = self.spec.input_shape[0]
        for s, width in enumerate(self.spec.stage_widths):
            for b in range(self.spec.blocks_per_stage):
                params[f"s{s}b{b}.w"] = Tensor(_kaiming_conv(rng, width, cin, 3, dtype), requires_grad=True)
                params[f"s{s}b{b}.b"] = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
                cin = width
        feat = self.spec.stage_widths[-1] if self.spec.stage_widths else self.spec.input_shape[0]
        params["fc.w"] = Tensor(_kaiming_linear(rng, feat, self.spec.num_classes, dtype), requires_grad=True)
        params["fc.b"] = Tensor(np.zeros(self.spec.num_classes, dtype=dtype), requires_grad=True)
        return params

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def forward(self, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        """Returns (logits, taps); taps maps stage name -> activation."""
        if x.data.ndim != 4 or x.shape[1:] != tuple(self.spec.input_shape):
            raise DimensionError(
                f"batch shape {x.shape} does not match spec input {self.spec.input_shape}"
            )
        taps: dict[str, Tensor] = {}
        h = x
        for s in range(len(self.spec.stage_widths)):
            for b in range(self.spec.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                h = T.conv2d(h, self.params[f"s{s}b{b}.w"], bias=self.params[f"s{s}b{b}.b"],
                             stride=stride, padding=1)
                h = T.relu(h)
            taps[f"stage{s + 1}"] = h
        pooled = T.global_avg_pool(h)
        logits = T.linear(pooled, self.params["fc.w"], self.params["fc.b"])
        return logits, taps

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(f"checkpoint tensor {name!r} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.copy()

    def snapshot(self) -> dict[str, Tensor]:
        """Frozen deep copy of the current parameters."""
        return {name: Tensor(p.data.copy(), requires_grad=False, dtype=p.data.dtype)
                for name, p in self.params.items()}

    def with_params(self, params: dict[str, Tensor]) -> "CnnModel":
        return CnnModel(self.spec, params=params)


# ---------------------------------------------------------------------------
# Conv-LSTM

_GATES = ("i", "f", "c", "o")


class ConvLstm:
    """Convolutional LSTM over single-channel maps, with a relu'd 1x1 head.

    Gate equations (no peepholes):
        i = sigmoid(Wxi*x + Whi*h + bi)      f = sigmoid(Wxf*x + Whf*h + bf)
        g = tanh(Wxc*x + Whc*h + bc)         o = sigmoid(Wxo*x + Who*h + bo)
        c' = f.c + i.g                       h' = o.tanh(c')
    Same-padding convolutions keep the spatial extent across steps.
    """

    def __init__(self, hidden_channels: int = 16, kernel_size: int = 3,
                 input_channels: int = 1, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        if kernel_size % 2 != 1:
            raise ContractError(f"kernel_size must be odd for same-padding, got {kernel_size}")
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.input_channels = input_channels
        self._pad = kernel_size // 2
        if params is not None:
            self.params = params
        else:
            if rng is None:
                raise ContractError("ConvLstm needs either an rng or explicit params")
            dtype = T.get_default_dtype()
            hc, k = hidden_channels, kernel_size
            self.params = {}
            for gate in _GATES:
                self.params[f"w_x{gate}"] = Tensor(_kaiming_conv(rng, hc, input_channels, k, dtype),
                                                   requires_grad=True)
                self.params[f"w_h{gate}"] = Tensor(_kaiming_conv(rng, hc, hc, k, dtype), requires_grad=True)
                self.params[f"b_{gate}"] = Tensor(np.zeros(hc, dtype=dtype), requires_grad=True)
            self.params["head_w"] = Tensor(_kaiming_conv(rng, 1, hc, 1, dtype), requires_grad=True)
            self.params["head_b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def zero_state(self, n: int, h: int, w: int) -> tuple[Tensor, Tensor]:
        dtype = self.params["head_w"].data.dtype
        z = np.zeros((n, self.hidden_channels, h, w), dtype=dtype)
        return Tensor(z.copy()), Tensor(z.copy())

    def _gate(self, gate: str, x: Tensor, h: Tensor) -> Tensor:
        a = T.conv2d(x, self.params[f"w_x{gate}"], bias=self.params[f"b_{gate}"],
                     stride=1, padding=self._pad)
        b = T.conv2d(h, self.params[f"w_h{gate}"], stride=1, padding=self._pad)
        return T.add(a, b)

    def cell_step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
            raise DimensionError(f"cell input extent {x.shape} does not match state {h.shape}")
        i = T.sigmoid(self._gate("i", x, h))
        f = T.sigmoid(self._gate("f", x, h))
        g = T.tanh(self._gate("c", x, h))
        o = T.sigmoid(self._gate("o", x, h))
        c_next = T.add(T.mul(f, c), T.mul(i, g))
        h_next = T.mul(o, T.tanh(c_next))
        return h_next, c_next

    def predict(self, seq: list[Tensor]) -> Tensor:
        """Run the cell over a [N,1,H,W] sequence and map the final hidden
        state through the relu'd 1x1 head; returns a nonnegative [N,H,W]."""
        if not seq:
            raise ContractError("knowledge sequence is empty")
        shape0 = seq[0].shape
        for t, entry in enumerate(seq):
            if entry.shape != shape0:
                raise ContractError(f"ragged sequence: entry {t} has shape {entry.shape}, expected {shape0}")
            if entry.data.ndim != 4 or entry.shape[1] != self.input_channels:
                raise DimensionError(f"sequence entries must be [N,{self.input_channels},H,W], got {entry.shape}")
        n, _, hh, ww = shape0
        state = self.zero_state(n, hh, ww)
        for entry in seq:
            state = self.cell_step(entry, state)
        out = T.conv2d(state[0], self.params["head_w"], bias=self.params["head_b"], stride=1, padding=0)
        out = T.relu(out)
        return T.reshape(out, (n, hh, ww))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.asarray(arrays[name], dtype=p.data.dtype).copy()
