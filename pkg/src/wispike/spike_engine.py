"""Spike encoding, LIF/IF neuron dynamics and surrogate gradients.

Time-major arrays are plain numpy arrays whose leading axis is the time step:
``(T, ...)``. Spike arrays hold exactly 0.0 or 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, ShapeError

RESET_MODES = ("zero", "subtract")


def encode_constant_rate(x: np.ndarray, time_steps: int) -> np.ndarray:
    """Replicate a static input over ``time_steps`` steps: ``(T, *x.shape)``."""
    if int(time_steps) != time_steps or time_steps < 1:
        raise InvalidConfig(f"time_steps must be a positive integer, got {time_steps}")
    x = np.asarray(x)
    return np.repeat(x[None], int(time_steps), axis=0)


@dataclass(frozen=True)
class LifParams:
    decay: float = 0.5  # exp(-dt / tau_m)
    resistance: float = 1.0
    threshold: float = 1.0
    reset_mode: str = "zero"

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise InvalidConfig(f"decay must lie in (0, 1], got {self.decay}")
        if self.resistance <= 0:
            raise InvalidConfig(f"resistance must be positive, got {self.resistance}")
        if self.threshold <= 0:
            raise InvalidConfig(f"threshold must be positive, got {self.threshold}")
        if self.reset_mode not in RESET_MODES:
            raise InvalidConfig(f"reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}")

    @classmethod
    def integrate_and_fire(cls, threshold: float = 1.0, reset_mode: str = "zero") -> "LifParams":
        return cls(decay=1.0, resistance=1.0, threshold=threshold, reset_mode=reset_mode)


@dataclass
class NeuronState:
    v: np.ndarray
    spike_count: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "NeuronState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=np.int64), 0)


@dataclass(frozen=True)
class SurrogateSpec:
    """Smooth stand-in for the Heaviside derivative.

    ``grad`` is used in the backward pass; ``primitive`` is its antiderivative,
    shifted to run from 0 to 1, and replaces the Heaviside in smooth mode.
    """

    kind: str = "atan"
    alpha: float = 2.0

    def __post_init__(self):
        if self.kind not in ("atan", "sigmoid"):
            raise InvalidConfig(f"surrogate kind must be 'atan' or 'sigmoid', got {self.kind!r}")
        if not self.alpha > 0:
            raise InvalidConfig(f"surrogate sharpness must be positive, got {self.alpha}")

    def grad(self, x):
        a = self.alpha
        x = np.abs(x)  # even by construction, bit for bit
        if self.kind == "atan":
            return (a / 2) / (1 + (np.pi * a * x / 2) ** 2)
        s = _sigmoid(a * x)
        return a * s * (1 - s)

    def primitive(self, x):
        a = self.alpha
        if self.kind == "atan":
            return 0.5 + np.arctan(np.pi * a * x / 2) / np.pi
        return _sigmoid(a * x)


def _sigmoid(x):
    x = np.asarray(x)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out if out.ndim else out[()]


sigmoid = _sigmoid


def surrogate_grad(v_minus_thresh, spec: SurrogateSpec = SurrogateSpec()):
    return spec.grad(np.asarray(v_minus_thresh, dtype=np.float64))


def _charge(v, current, p: LifParams):
    return v * p.decay + p.resistance * current


def _fire(u, p: LifParams):
    return (u >= p.threshold).astype(u.dtype)


def _reset(u, fired, p: LifParams):
    if p.reset_mode == "zero":
        return u * (1 - fired)
    return u - p.threshold * fired


def lif_step(state: NeuronState, current, p: LifParams = LifParams()):
    """Advance one time step; returns ``(spikes, new_state)``."""
    current = np.asarray(current, dtype=state.v.dtype)
    if current.shape != state.v.shape:
        raise ShapeError(f"input current shape {current.shape} does not match membrane {state.v.shape}")
    u = _charge(state.v, current, p)
    fired = _fire(u, p)
    new = NeuronState(_reset(u, fired, p), state.spike_count + fired.astype(np.int64), state.step + 1)
    return fired, new


def if_step(state: NeuronState, current, v_th: float = 1.0, reset_mode: str = "zero"):
    return lif_step(state, current, LifParams.integrate_and_fire(v_th, reset_mode))


def run_neurons(currents: np.ndarray, p: LifParams, surrogate: SurrogateSpec | None = None,
                smooth: bool = False, resets: np.ndarray | None = None):
    """Simulate a population over the leading time axis of ``currents``.

    Returns ``(outputs, cache)``. Outputs are hard spikes, or the surrogate
    primitive of ``u - V_th`` in smooth mode. Resets follow the hard threshold
    crossing and are excluded from differentiation; passing ``resets`` replays
    a recorded reset pattern instead, which is what a finite-difference check
    of the detached reset must hold fixed.
    """
    surrogate = surrogate or SurrogateSpec()
    steps = currents.shape[0]
    v = np.zeros(currents.shape[1:], dtype=currents.dtype)
    out = np.empty_like(currents)
    pre = np.empty_like(currents)
    fired_all = np.empty_like(currents)
    for t in range(steps):
        u = _charge(v, currents[t], p)
        fired = _fire(u, p) if resets is None else resets[t]
        pre[t] = u
        fired_all[t] = fired
        out[t] = surrogate.primitive(u - p.threshold) if smooth else fired
        v = _reset(u, fired, p)
    return out, (pre, fired_all)


def backprop_neurons(grad_out: np.ndarray, cache, p: LifParams, surrogate: SurrogateSpec | None = None):
    """BPTT through :func:`run_neurons`; returns the gradient w.r.t. the input currents."""
    surrogate = surrogate or SurrogateSpec()
    pre, fired = cache
    grad_in = np.empty_like(grad_out)
    g_v = np.zeros_like(grad_out[0])
    for t in range(grad_out.shape[0] - 1, -1, -1):
        g_u = grad_out[t] * surrogate.grad(pre[t] - p.threshold).astype(grad_out.dtype)
        if p.reset_mode == "zero":
            g_u += g_v * (1 - fired[t])
        else:
            g_u += g_v
        grad_in[t] = p.resistance * g_u
        g_v = p.decay * g_u
    return grad_in


def is_binary(x) -> bool:
    x = np.asarray(x)
    return bool(np.all((x == 0) | (x == 1)))

