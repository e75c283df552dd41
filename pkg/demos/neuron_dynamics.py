"""LIF and IF neurons stepped by hand, plus the surrogate derivative used in training.

    python3 demos/neuron_dynamics.py
"""
import numpy as np

from wispike.spike_engine import LifParams, NeuronState, SurrogateSpec, if_step, lif_step, run_neurons


def trace(step, current, steps):
    state = NeuronState.zeros((1,))
    rows = []
    for _ in range(steps):
        s, state = step(state, np.array([current]))
        rows.append((int(s[0]), round(float(state.v[0]), 6)))
    return rows


# leaky neuron, half the membrane survives each step
p = LifParams(decay=0.5, resistance=1.0, threshold=1.0, reset_mode="zero")
print("LIF I=0.6  (spike, membrane):", trace(lambda st, i: lif_step(st, i, p), 0.6, 6))

# no leak: 0.4 per step crosses 1.0 on the third step
print("IF  I=0.4  (spike, membrane):", trace(lambda st, i: if_step(st, i, 1.0), 0.4, 6))
print("IF  I=2.0 subtract reset    :", trace(lambda st, i: if_step(st, i, 1.0, "subtract"), 2.0, 4))

# a whole population over T steps at once
currents = np.random.default_rng(0).uniform(0, 1, size=(8, 5))
spikes, _ = run_neurons(currents, p)
print("\npopulation spikes (T x neurons):\n", spikes.astype(int))
print("per-neuron rate:", spikes.mean(axis=0))

for kind in ("atan", "sigmoid"):
    spec = SurrogateSpec(kind, 2.0)
    xs = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    print(f"\n{kind} surrogate at {xs.tolist()}:", np.round(spec.grad(xs), 4).tolist())
