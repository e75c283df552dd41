"""Spiking layers, the temporal attention gate, the voting decoder, and model assembly.

Every layer maps a time-major batch ``(T, N, *features)`` to another one and
implements its own backward pass; gradients through time are exact for this
feed-forward stack because the only recurrence lives inside the neuron layers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, StateError
from .spike_engine import (LifParams, SurrogateSpec, backprop_neurons, encode_constant_rate,
                           run_neurons, sigmoid)

# value kinds flowing between layers
REAL, CURRENT, SPIKES = "real", "current", "spikes"


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(x, kh, kw, s):
    """``(B, C, H, W)`` -> strided view ``(B, C, Ho, Wo, kh, kw)``."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]


def _scatter_taps(target, tap_grads, kh, kw, s, ho, wo):
    """Add per-tap gradients ``(..., Ho, Wo, kh, kw)`` back onto the input grid."""
    for i in range(kh):
        for j in range(kw):
            target[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += tap_grads[..., i, j]


class Layer:
    kind = "layer"
    synaptic = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.in_shape: tuple = ()
        self.out_shape: tuple = ()
        self.input_kind = REAL
        self._cache = None

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g, need_input_grad=True):
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv"
    synaptic = True

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0, rng=None,
                 gain=1.0, dtype=np.float32):
        super().__init__()
        self.kh, self.kw = _pair(kernel)
        self.stride, self.padding = int(stride), int(padding)
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        rng = rng or np.random.default_rng(0)
        bound = gain / np.sqrt(in_channels * self.kh * self.kw)
        self.params["weight"] = rng.uniform(-bound, bound, (out_channels, in_channels, self.kh, self.kw)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        # set by the model when the input is the constant-rate encoding
        self.time_invariant = False

    def output_hw(self, h, w):
        p, s = self.padding, self.stride
        ho = (h + 2 * p - self.kh) // s + 1
        wo = (w + 2 * p - self.kw) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {self.kh}x{self.kw} does not fit input {h}x{w} with padding {p}")
        return ho, wo

    def _im2col(self, x):
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = _windows(x, self.kh, self.kw, self.stride)
        b, c, ho, wo = win.shape[:4]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, -1)
        return cols, x.shape

    def _conv(self, x):
        cols, padded = self._im2col(x)
        b = x.shape[0]
        ho, wo = self.output_hw(x.shape[2], x.shape[3])
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.params["bias"]
        return out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2), (cols, padded, b, ho, wo)

    def forward(self, x):
        if x.shape[2:] != self.in_shape:
            raise ShapeError(f"conv expects input features {self.in_shape}, got {x.shape[2:]}")
        t, n = x.shape[:2]
        if self.time_invariant:
            y, cache = self._conv(x[0])
            out = np.broadcast_to(y[None], (t,) + y.shape)
        else:
            y, cache = self._conv(x.reshape((t * n,) + x.shape[2:]))
            out = y.reshape((t, n) + y.shape[1:])
        self._cache = (t, n) + cache
        return out

    def backward(self, g, need_input_grad=True):
        if self._cache is None:
            raise StateError("conv backward called before forward")
        t, n, cols, padded, b, ho, wo = self._cache
        if self.time_invariant:
            g = g.sum(axis=0)
        g2 = g.reshape(b, self.out_channels, ho * wo).transpose(0, 2, 1).reshape(-1, self.out_channels)
        self._accumulate("weight", (g2.T @ cols).reshape(self.params["weight"].shape))
        self._accumulate("bias", g2.sum(axis=0))
        if not need_input_grad:
            return None
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        dcols = (g2 @ wmat).reshape(b, ho, wo, self.in_channels, self.kh, self.kw).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros(padded, dtype=g.dtype)
        _scatter_taps(dx, dcols, self.kh, self.kw, self.stride, ho, wo)
        p = self.padding
        if p:
            dx = dx[:, :, p:-p, p:-p]
        if self.time_invariant:
            return np.broadcast_to(dx[None] / t, (t,) + dx.shape)
        return dx.reshape((t, n) + dx.shape[1:])

    def fanout(self) -> np.ndarray:
        """Output accumulations fed by each input element, shape ``in_shape``."""
        c, h, w = self.in_shape
        p, s = self.padding, self.stride
        ho, wo = self.output_hw(h, w)
        cover = np.zeros((1, 1, h + 2 * p, w + 2 * p), dtype=np.int64)
        ones = np.ones((1, 1, ho, wo, self.kh, self.kw), dtype=np.int64)
        _scatter_taps(cover, ones, self.kh, self.kw, s, ho, wo)
        cover = cover[0, 0, p:p + h, p:p + w]
        return np.broadcast_to(cover * self.out_channels, (c, h, w)).copy()


class Linear(Layer):
    kind = "fc"
    synaptic = True

    def __init__(self, in_features, out_features, rng=None, gain=1.0, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = gain / np.sqrt(in_features)
        self.in_features, self.out_features = int(in_features), int(out_features)
        self.params["weight"] = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x):
        if x.shape[2:] != (self.in_features,):
            raise ShapeError(f"fc expects {self.in_features} input features, got {x.shape[2:]}")
        t, n = x.shape[:2]
        x2 = x.reshape(t * n, -1)
        self._cache = (t, n, x2)
        return (x2 @ self.params["weight"].T + self.params["bias"]).reshape(t, n, -1)

    def backward(self, g, need_input_grad=True):
        if self._cache is None:
            raise StateError("fc backward called before forward")
        t, n, x2 = self._cache
        g2 = g.reshape(t * n, -1)
        self._accumulate("weight", g2.T @ x2)
        self._accumulate("bias", g2.sum(axis=0))
        if not need_input_grad:
            return None
        return (g2 @ self.params["weight"]).reshape(t, n, -1)

    def fanout(self) -> np.ndarray:
        return np.full(self.in_shape, self.out_features, dtype=np.int64)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[:2] + (-1,))

    def backward(self, g, need_input_grad=True):
        return g.reshape(self._cache)


class _Pool(Layer):
    def __init__(self, kernel=2, stride=None):
        super().__init__()
        self.kh, self.kw = _pair(kernel)
        self.stride = int(stride) if stride else self.kh
        self.frozen_arg = None
        self.last_arg = None

    def output_hw(self, h, w):
        if h < self.kh or w < self.kw:
            raise ShapeError(f"pooling window {self.kh}x{self.kw} larger than slice {h}x{w}")
        return (h - self.kh) // self.stride + 1, (w - self.kw) // self.stride + 1


class MaxPool2d(_Pool):
    kind = "maxpool"

    def forward(self, x):
        t, n = x.shape[:2]
        xb = x.reshape((t * n,) + x.shape[2:])
        win = _windows(xb, self.kh, self.kw, self.stride)
        flat = win.reshape(win.shape[:4] + (-1,))
        arg = flat.argmax(axis=-1) if self.frozen_arg is None else self.frozen_arg
        self.last_arg = arg
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return out.reshape((t, n) + out.shape[1:])

    def backward(self, g, need_input_grad=True):
        shape, arg = self._cache
        t, n = shape[:2]
        gb = g.reshape((t * n,) + g.shape[2:])
        ho, wo = gb.shape[2:]
        taps = (arg[..., None] == np.arange(self.kh * self.kw)) * gb[..., None]
        dx = np.zeros((t * n,) + shape[2:], dtype=g.dtype)
        _scatter_taps(dx, taps.reshape(taps.shape[:4] + (self.kh, self.kw)), self.kh, self.kw, self.stride, ho, wo)
        return dx.reshape(shape)


class AvgPool2d(_Pool):
    kind = "avgpool"

    def forward(self, x):
        t, n = x.shape[:2]
        xb = x.reshape((t * n,) + x.shape[2:])
        out = _windows(xb, self.kh, self.kw, self.stride).mean(axis=(-2, -1))
        self._cache = x.shape
        return out.reshape((t, n) + out.shape[1:])

    def backward(self, g, need_input_grad=True):
        shape = self._cache
        t, n = shape[:2]
        gb = g.reshape((t * n,) + g.shape[2:]) / (self.kh * self.kw)
        ho, wo = gb.shape[2:]
        taps = np.broadcast_to(gb[..., None, None], gb.shape + (self.kh, self.kw))
        dx = np.zeros((t * n,) + shape[2:], dtype=g.dtype)
        _scatter_taps(dx, taps, self.kh, self.kw, self.stride, ho, wo)
        return dx.reshape(shape)


class TemporalAttention(Layer):
    """Scalar gate per time step: ``out_t = X_t * (1 + sigmoid(w * mean(M_t) + b))``.

    ``M_t = alpha * avgpool(X_t) + beta * maxpool(X_t)`` over ``kh x kw`` windows
    with stride ``s``; the mean runs over channels and window positions.
    """

    kind = "temporal_attention"

    def __init__(self, kernel=2, stride=2, alpha=0.5, beta=0.5, dtype=np.float32):
        super().__init__()
        self.kh, self.kw = _pair(kernel)
        self.stride = int(stride)
        self.params["alpha"] = np.array(alpha, dtype=dtype)
        self.params["beta"] = np.array(beta, dtype=dtype)
        self.params["gate_weight"] = np.array(0.0, dtype=dtype)
        self.params["gate_bias"] = np.array(0.0, dtype=dtype)
        self.frozen_arg = None
        self.last_arg = None

    def output_hw(self, h, w):
        if h < self.kh or w < self.kw:
            raise ShapeError(f"attention window {self.kh}x{self.kw} larger than slice {h}x{w}")
        return (h - self.kh) // self.stride + 1, (w - self.kw) // self.stride + 1

    def gate(self, x):
        """Per-slice quantities ``(f_avg, f_max, argmax, m_mean, T_w)`` for ``(B, C, H, W)``."""
        self.output_hw(*x.shape[2:])
        win = _windows(x, self.kh, self.kw, self.stride)
        flat = win.reshape(win.shape[:4] + (-1,))
        f_avg = flat.mean(axis=-1)
        arg = flat.argmax(axis=-1) if self.frozen_arg is None else self.frozen_arg
        self.last_arg = arg
        f_max = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        p = self.params
        m = p["alpha"] * f_avg + p["beta"] * f_max
        m_mean = m.mean(axis=(1, 2, 3))
        t_w = sigmoid(p["gate_weight"] * m_mean + p["gate_bias"]).astype(x.dtype)
        return f_avg, f_max, arg, m_mean, t_w

    def forward(self, x):
        t, n = x.shape[:2]
        xb = x.reshape((t * n,) + x.shape[2:])
        f_avg, f_max, arg, m_mean, t_w = self.gate(xb)
        self._cache = (x.shape, xb, f_avg, f_max, arg, m_mean, t_w)
        self.last_gate = t_w.reshape(t, n)
        return (xb * (1 + t_w)[:, None, None, None]).reshape(x.shape)

    def backward(self, g, need_input_grad=True):
        if self._cache is None:
            raise StateError("attention backward called before forward")
        shape, xb, f_avg, f_max, arg, m_mean, t_w = self._cache
        p = self.params
        gb = g.reshape(xb.shape)
        g_tw = (gb * xb).sum(axis=(1, 2, 3))
        g_z = g_tw * t_w * (1 - t_w)
        self._accumulate("gate_weight", np.asarray((g_z * m_mean).sum()))
        self._accumulate("gate_bias", np.asarray(g_z.sum()))
        g_mm = g_z * p["gate_weight"] / f_avg[0].size
        g_m = np.broadcast_to(g_mm[:, None, None, None], f_avg.shape)
        self._accumulate("alpha", np.asarray((g_m * f_avg).sum()))
        self._accumulate("beta", np.asarray((g_m * f_max).sum()))
        dx = gb * (1 + t_w)[:, None, None, None]
        ho, wo = f_avg.shape[2:]
        k = self.kh * self.kw
        taps = np.broadcast_to((p["alpha"] * g_m / k)[..., None], g_m.shape + (k,)).copy()
        taps += (arg[..., None] == np.arange(k)) * (p["beta"] * g_m)[..., None]
        _scatter_taps(dx, taps.reshape(taps.shape[:4] + (self.kh, self.kw)), self.kh, self.kw, self.stride, ho, wo)
        return dx.reshape(shape)

    def mac_count(self) -> int:
        """Multiply-accumulates of one gate evaluation on one time slice."""
        c, h, w = self.in_shape
        ho, wo = self.output_hw(h, w)
        m = c * ho * wo
        # window sums, the alpha/beta blend, the global mean, affine+sigmoid, rescaling
        return m * self.kh * self.kw + 2 * m + m + 2 + c * h * w


class SpikingNeurons(Layer):
    """LIF (or IF, with ``decay=1, R=1``) population driven by its input current."""

    kind = "lif"

    def __init__(self, params: LifParams = LifParams(), surrogate: SurrogateSpec = SurrogateSpec(),
                 kind="lif"):
        super().__init__()
        self.kind = kind
        self.neuron = params
        self.surrogate = surrogate
        self.smooth = False
        self.frozen_resets = None
        self.last_spikes = None

    def forward(self, x):
        x = np.ascontiguousarray(x)
        out, cache = run_neurons(x, self.neuron, self.surrogate, self.smooth, self.frozen_resets)
        self._cache = cache
        self.last_spikes = cache[1]
        return out

    def backward(self, g, need_input_grad=True):
        if self._cache is None:
            raise StateError("neuron backward called before forward")
        return backprop_neurons(g, self._cache, self.neuron, self.surrogate)


class Vote(Layer):
    """Class scores: spikes averaged over time and over each class's neuron group."""

    kind = "vote"

    def __init__(self, group=1):
        super().__init__()
        self.group = int(group)

    def forward(self, x):
        t, n, f = x.shape
        if f % self.group:
            raise ShapeError(f"{f} output neurons not divisible by vote group size {self.group}")
        self._cache = x.shape
        return x.reshape(t, n, f // self.group, self.group).mean(axis=(0, 3))

    def backward(self, g, need_input_grad=True):
        t, n, f = self._cache
        gg = np.broadcast_to(g[None, :, :, None] / (t * self.group), (t, n, f // self.group, self.group))
        return gg.reshape(t, n, f)


def voting_forward(spikes, group=1):
    """Class scores for one sample from a ``(T, n_class * group)`` spike record."""
    spikes = np.asarray(spikes, dtype=np.float64)
    t, f = spikes.shape
    if f % group:
        raise ShapeError(f"{f} output neurons not divisible by vote group size {group}")
    return spikes.reshape(t, f // group, group).mean(axis=(0, 2))


def predict(scores) -> np.ndarray:
    """Argmax over classes; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(scores, axis=-1)


def spiking_conv_forward(spikes, weight, bias, stride=1, padding=0):
    """Event-driven convolution of a binary ``(T, Cin, H, W)`` record.

    Each active input element adds its kernel column to the output positions it
    feeds, so the arithmetic is accumulate-only.
    """
    spikes = np.asarray(spikes)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    t_steps, cin, h, w = spikes.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"weight expects {wcin} input channels, spikes have {cin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.empty((t_steps, cout, ho, wo), dtype=np.result_type(weight, bias))
    out[...] = bias[None, :, None, None]
    for t, c, y, x in zip(*np.nonzero(spikes)):
        for i in range(kh):
            oy, ry = divmod(y + padding - i, stride)
            if ry or not 0 <= oy < ho:
                continue
            for j in range(kw):
                ox, rx = divmod(x + padding - j, stride)
                if rx or not 0 <= ox < wo:
                    continue
                out[t, :, oy, ox] += weight[:, c, i, j]
    return out


def temporal_attention_forward(x, alpha=0.5, beta=0.5, gate_weight=0.0, gate_bias=0.0,
                               kernel=2, stride=2):
    """Apply the attention gate to a ``(T, C, H, W)`` tensor for one sample."""
    x = np.asarray(x)
    layer = TemporalAttention(kernel, stride, alpha, beta, dtype=x.dtype)
    layer.params["gate_weight"][...] = gate_weight
    layer.params["gate_bias"][...] = gate_bias
    layer.in_shape = layer.out_shape = x.shape[1:]
    return layer.forward(x[:, None])[:, 0]


# ---------------------------------------------------------------------------
# configuration and assembly

@dataclass
class LayerSpec:
    kind: str
    out_channels: int | None = None
    out_features: int | None = None
    kernel: int = 3
    stride: int | None = None
    padding: int = 0
    group: int = 1

    @classmethod
    def from_dict(cls, d) -> "LayerSpec":
        d = dict(d)
        if "kind" not in d:
            raise ConfigError(f"layer spec without 'kind': {d}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)} in layer spec {d}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class ModelConfig:
    """Declarative layer stack plus neuron constants.

    ``n_class`` and ``input_shape`` may stay ``None`` until the dataset is
    known. An fc layer with ``out_features`` unset sizes itself to
    ``n_class * vote_group``.
    """

    layers: list = field(default_factory=list)
    time_steps: int = 4
    decay: float = 0.5
    resistance: float = 1.0
    threshold: float = 1.0
    reset_mode: str = "zero"
    surrogate: str = "atan"
    surrogate_alpha: float = 2.0
    vote_group: int = 1
    init_gain: float = 1.0
    attention_alpha: float = 0.5
    attention_beta: float = 0.5
    n_class: int | None = None
    input_shape: tuple | None = None

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        if self.input_shape is not None:
            self.input_shape = tuple(int(v) for v in self.input_shape)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [l.to_dict() for l in self.layers]
        if self.input_shape is not None:
            d["input_shape"] = list(self.input_shape)
        return d


def default_model_config(**overrides) -> ModelConfig:
    """The shipped desk-scale stack (``configs/desk.json``)."""
    text = resources.files("wispike").joinpath("configs/desk.json").read_text(encoding="utf-8")
    d = json.loads(text)["model"]
    d.update(overrides)
    return ModelConfig.from_dict(d)


class Model:
    def __init__(self, layers: list[Layer], config: ModelConfig, dtype=np.float32):
        self.layers = layers
        self.dtype = np.dtype(dtype)
        self.config = config
        self.time_steps = config.time_steps
        self._forwarded = False
        neuron_idx = [i for i, l in enumerate(layers) if isinstance(l, SpikingNeurons)]
        # embeddings for the contrastive head come from the last hidden spiking layer
        self.tap = neuron_idx[-2] if len(neuron_idx) >= 2 else None

    @property
    def n_class(self) -> int:
        return self.config.n_class

    @property
    def tap_features(self) -> int:
        return int(np.prod(self.layers[self.tap].out_shape)) if self.tap is not None else 0

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": l.grads[k] for i, l in enumerate(self.layers) for k in l.params}

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def set_smooth(self, smooth: bool = True):
        for l in self.layers:
            if isinstance(l, SpikingNeurons):
                l.smooth = smooth

    def freeze_branches(self, frozen: bool = True):
        """Replay the discrete choices of the last forward pass (neuron resets and
        max-pool winners) in later passes.

        The backward pass treats those choices as constants, so a finite-difference
        check has to hold them fixed to probe the same function.
        """
        for l in self.layers:
            if isinstance(l, SpikingNeurons):
                l.frozen_resets = l.last_spikes.copy() if frozen else None
            elif hasattr(l, "frozen_arg"):
                l.frozen_arg = l.last_arg.copy() if frozen else None

    def neuron_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, SpikingNeurons)]

    def forward(self, x):
        """Class scores for a static batch ``(N, C, H, W)``, constant-rate encoded."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.layers[0].in_shape:
            raise ShapeError(f"model expects samples of shape {self.layers[0].in_shape}, got {x.shape[1:]}")
        if isinstance(self.layers[0], Conv2d):
            # every time slice is identical, so the first conv runs once
            xt = np.broadcast_to(x[None], (self.time_steps,) + x.shape)
            return self.forward_timed(xt, _time_invariant=True)
        return self.forward_timed(encode_constant_rate(x, self.time_steps))

    def forward_timed(self, xt, _time_invariant=False):
        """Class scores for an already time-major batch ``(T, N, C, H, W)``."""
        if isinstance(self.layers[0], Conv2d):
            self.layers[0].time_invariant = _time_invariant
        self.inputs = [None] * len(self.layers)
        h = xt
        for i, layer in enumerate(self.layers):
            self.inputs[i] = h
            h = layer.forward(h)
        self._forwarded = True
        return h

    def tap_output(self):
        if self.tap is None:
            raise ConfigError("model has no hidden spiking layer to tap for embeddings")
        spikes = self.inputs[self.tap + 1]
        return spikes.reshape(spikes.shape[:2] + (-1,)).mean(axis=0)

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def backward(self, grad_scores, tap_grad=None):
        """Accumulate parameter gradients from d(loss)/d(scores) and optionally
        d(loss)/d(time-averaged tap features)."""
        if not self._forwarded:
            raise StateError("backward called before forward")
        g = np.asarray(grad_scores, dtype=self.inputs[-1].dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            if tap_grad is not None and i == self.tap:
                out = self.inputs[i + 1]
                extra = np.broadcast_to(tap_grad[None] / out.shape[0], out.shape[:2] + (tap_grad.shape[1],))
                g = g + extra.reshape(out.shape).astype(g.dtype)
            g = self.layers[i].backward(g, need_input_grad=i > 0)
        self._forwarded = False


def build_model(config: ModelConfig, input_shape=None, n_class=None, seed: int = 0,
                dtype=np.float32) -> Model:
    """Instantiate and type-check a layer stack.

    Value kinds are tracked along the chain: neuron layers must consume a
    current produced by conv/fc, the vote must read spikes and close the stack.
    """
    input_shape = tuple(input_shape or config.input_shape or ())
    n_class = n_class or config.n_class
    if len(input_shape) != 3:
        raise ConfigError(f"input_shape must be (C, H, W), got {input_shape}")
    if not n_class:
        raise ConfigError("n_class is required")
    config.input_shape, config.n_class = input_shape, n_class
    if not config.layers:
        raise ConfigError("empty layer stack")
    rng = np.random.default_rng(seed)
    neuron = LifParams(config.decay, config.resistance, config.threshold, config.reset_mode)
    surrogate = SurrogateSpec(config.surrogate, config.surrogate_alpha)
    shape, kind, prev = input_shape, REAL, "encoder"
    layers = []
    for idx, spec in enumerate(config.layers):
        pair = f"{prev} -> {spec.kind} (layer {idx})"
        spatial = len(shape) == 3
        if prev == "vote":
            raise ConfigError(f"vote must be the last layer: {pair}")
        if spec.kind == "conv":
            if not spatial:
                raise ConfigError(f"conv needs a (C, H, W) input: {pair}")
            if not spec.out_channels:
                raise ConfigError(f"conv needs out_channels: {pair}")
            layer = Conv2d(shape[0], spec.out_channels, spec.kernel, spec.stride or 1, spec.padding,
                           rng, config.init_gain, dtype)
            ho, wo = layer.output_hw(*shape[1:])
            out, kind_out = (spec.out_channels, ho, wo), CURRENT
        elif spec.kind == "fc":
            if spatial:
                raise ConfigError(f"fc needs a flat input, insert flatten: {pair}")
            width = spec.out_features or n_class * config.vote_group
            layer = Linear(shape[0], width, rng, config.init_gain, dtype)
            out, kind_out = (width,), CURRENT
        elif spec.kind in ("lif", "if"):
            if kind != CURRENT:
                raise ConfigError(f"{spec.kind} neurons must follow a conv or fc layer: {pair}")
            params = neuron if spec.kind == "lif" else LifParams.integrate_and_fire(config.threshold, config.reset_mode)
            layer = SpikingNeurons(params, surrogate, kind=spec.kind)
            out, kind_out = shape, SPIKES
        elif spec.kind in ("maxpool", "avgpool"):
            if not spatial:
                raise ConfigError(f"{spec.kind} needs a (C, H, W) input: {pair}")
            cls = MaxPool2d if spec.kind == "maxpool" else AvgPool2d
            layer = cls(spec.kernel, spec.stride)
            out, kind_out = (shape[0],) + layer.output_hw(*shape[1:]), kind
        elif spec.kind == "temporal_attention":
            if not spatial:
                raise ConfigError(f"temporal_attention needs a (C, H, W) input: {pair}")
            layer = TemporalAttention(spec.kernel, spec.stride or spec.kernel,
                                      config.attention_alpha, config.attention_beta, dtype)
            layer.output_hw(*shape[1:])
            out, kind_out = shape, kind
        elif spec.kind == "flatten":
            layer = Flatten()
            out, kind_out = (int(np.prod(shape)),), kind
        elif spec.kind == "vote":
            if prev not in ("lif", "if"):
                raise ConfigError(f"vote must read spikes from lif/if neurons: {pair}")
            if shape[0] != n_class * config.vote_group:
                raise ConfigError(f"vote input has {shape[0]} neurons, expected n_class * group = "
                                  f"{n_class * config.vote_group}: {pair}")
            layer = Vote(config.vote_group)
            out, kind_out = (n_class,), REAL
        else:
            raise ConfigError(f"unknown layer kind {spec.kind!r} (layer {idx})")
        layer.in_shape, layer.out_shape, layer.input_kind = tuple(shape), tuple(out), kind
        layers.append(layer)
        shape, kind, prev = out, kind_out, spec.kind
    if prev != "vote":
        raise ConfigError(f"stack must end with vote, last pair is {config.layers[-2].kind if len(config.layers) > 1 else 'encoder'} -> {prev}")
    model = Model(layers, config, dtype)
    for layer in layers:
        layer.zero_grad()
    return model

