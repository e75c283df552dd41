"""Firing-rate instrumentation and the AC/MAC energy model.

Energy constants are the 45 nm figures: 0.9 pJ per accumulate (AC) and
4.6 pJ per multiply-accumulate (MAC). Synaptic layers fed by spikes cost one AC
per (input event, output accumulation) pair; layers fed by real values, and
the attention gate's arithmetic, cost MACs. Neuron updates and pooling
comparisons are not costed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRate, InvalidSpikes, StateError

AC_PJ = 0.9
MAC_PJ = 4.6
OPTIMAL_BAND = (0.1, 0.3)


@dataclass
class LayerRates:
    mean: float
    std: float = 0.0

    @property
    def in_band(self) -> bool:
        return OPTIMAL_BAND[0] <= self.mean <= OPTIMAL_BAND[1]


def firing_rate(record) -> float:
    """Mean over neurons of spike count / T for a binary ``(T, ...)`` record."""
    record = np.asarray(record)
    if record.ndim < 1 or record.shape[0] < 1:
        raise InvalidSpikes("spike record needs a leading time axis")
    if not np.all((record == 0) | (record == 1)):
        raise InvalidSpikes("spike record contains values other than 0 and 1")
    t = record.shape[0]
    n = record[0].size
    # integer total over T * n rounds once, so the result is the correctly rounded rate
    return int(np.count_nonzero(record)) / (t * n)


def firing_rate_stats(per_neuron_rates) -> LayerRates:
    r = np.asarray(per_neuron_rates, dtype=np.float64).ravel()
    return LayerRates(float(r.mean()), float(r.std()))


def rates_from_counts(counts, windows: int) -> LayerRates:
    """Layer rate from integer per-neuron spike counts over ``windows`` = T x samples.

    The mean is the integer total over ``windows * neurons``, which equals
    :func:`firing_rate` on the concatenated spike record exactly.
    """
    counts = np.asarray(counts, dtype=np.int64).ravel()
    mean = int(counts.sum()) / (windows * counts.size)
    return LayerRates(mean, float((counts / windows).std()))


def layer_rates(model) -> list[LayerRates]:
    """Rates of every neuron layer over the last forward batch."""
    out = []
    for idx in model.neuron_layers():
        spikes = model.layers[idx].last_spikes
        if spikes is None:
            raise StateError("no forward pass recorded")
        t, n = spikes.shape[:2]
        out.append(rates_from_counts(np.count_nonzero(spikes, axis=(0, 1)), t * n))
    return out


@dataclass
class LayerEnergy:
    index: int
    kind: str
    acs: float = 0.0
    macs: float = 0.0


@dataclass
class EnergyReport:
    """Per-inference operation counts; ``paper_convention`` drops MACs from the energy."""

    layers: list[LayerEnergy] = field(default_factory=list)
    mode: str = "dynamic"
    paper_convention: bool = False
    params: int = 0
    input_shape: tuple = ()

    @property
    def acs(self) -> float:
        return float(sum(l.acs for l in self.layers))

    @property
    def macs(self) -> float:
        return float(sum(l.macs for l in self.layers))

    def layer_energy(self, layer: LayerEnergy) -> float:
        return AC_PJ * layer.acs + (0.0 if self.paper_convention else MAC_PJ * layer.macs)

    @property
    def energy_pj(self) -> float:
        return AC_PJ * self.acs + (0.0 if self.paper_convention else MAC_PJ * self.macs)

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "kind", "acs", "macs", "energy_pj"])
        for l in self.layers:
            wr.writerow([l.index, l.kind, repr(float(l.acs)), repr(float(l.macs)), repr(self.layer_energy(l))])
        wr.writerow(["total", self.mode + ("/acs-only" if self.paper_convention else ""),
                     repr(self.acs), repr(self.macs), repr(self.energy_pj)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode, "paper_convention": self.paper_convention,
            "layers": [{"layer": l.index, "kind": l.kind, "acs": l.acs, "macs": l.macs,
                        "energy_pj": self.layer_energy(l)} for l in self.layers],
            "total": {"acs": self.acs, "macs": self.macs, "energy_pj": self.energy_pj},
        }, indent=2)


def energy_pj(acs: float, macs: float) -> float:
    return AC_PJ * acs + MAC_PJ * macs


def _is_event_layer(layer) -> bool:
    from .layers import SPIKES

    return layer.input_kind == SPIKES


def count_dynamic(model, x=None, paper_convention: bool = False, batch_size: int = 64) -> EnergyReport:
    """Count the operations of instrumented forward passes, averaged per sample.

    With ``x`` the model is run over it in batches and event counts are summed
    as integers before averaging; without ``x`` the last recorded pass is counted.
    """
    if x is None:
        if getattr(model, "inputs", None) is None:
            raise StateError("model has no recorded forward pass")
        batches = [None]
    else:
        batches = [x[i:i + batch_size] for i in range(0, len(x), batch_size)]
    t = model.time_steps
    event_totals: dict[int, int] = {}
    n_total = 0
    for xb in batches:
        if xb is not None:
            model.forward(xb)
        n_total += model.inputs[0].shape[1]
        for i, layer in enumerate(model.layers):
            if layer.synaptic and _is_event_layer(layer):
                events = np.count_nonzero(model.inputs[i], axis=(0, 1)).astype(np.int64)
                event_totals[i] = event_totals.get(i, 0) + int((events * layer.fanout()).sum())
    report = EnergyReport(mode="dynamic", paper_convention=paper_convention, params=model.n_params,
                          input_shape=model.layers[0].in_shape)
    for i, layer in enumerate(model.layers):
        if layer.synaptic:
            if _is_event_layer(layer):
                report.layers.append(LayerEnergy(i, layer.kind, acs=event_totals[i] / n_total))
            else:
                report.layers.append(LayerEnergy(i, layer.kind, macs=float(t * layer.fanout().sum())))
        elif layer.kind == "temporal_attention":
            report.layers.append(LayerEnergy(i, layer.kind, macs=float(t * layer.mac_count())))
    return report


def input_rates(model) -> dict[int, np.ndarray]:
    """Exact per-element input event rates of each spike-fed synaptic layer."""
    out = {}
    t = model.time_steps
    for i, layer in enumerate(model.layers):
        if layer.synaptic and _is_event_layer(layer):
            inp = model.inputs[i]
            out[i] = np.count_nonzero(inp, axis=(0, 1)) / (t * inp.shape[1])
    return out


def count_static(model, rates: dict, time_steps: int | None = None,
                 paper_convention: bool = False) -> EnergyReport:
    """Theoretical counts from input firing rates.

    ``rates`` maps each spike-fed synaptic layer index to its input rate,
    either one number or a per-element map of the layer's input shape. Per-element
    rates measured on one sample reproduce :func:`count_dynamic` exactly.
    """
    t = time_steps or model.time_steps
    report = EnergyReport(mode="static", paper_convention=paper_convention, params=model.n_params,
                          input_shape=model.layers[0].in_shape)
    for i, layer in enumerate(model.layers):
        if layer.synaptic:
            fan = layer.fanout()
            if _is_event_layer(layer):
                if i not in rates:
                    raise InvalidRate(f"no input rate given for layer {i} ({layer.kind})")
                r = np.asarray(rates[i], dtype=np.float64)
                if np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
                    raise InvalidRate(f"rates for layer {i} must lie in [0, 1]")
                expected = np.broadcast_to(r, fan.shape) * t
                report.layers.append(LayerEnergy(i, layer.kind, acs=float((expected * fan).sum())))
            else:
                report.layers.append(LayerEnergy(i, layer.kind, macs=float(t * fan.sum())))
        elif layer.kind == "temporal_attention":
            report.layers.append(LayerEnergy(i, layer.kind, macs=float(t * layer.mac_count())))
    return report


class DenseBaseline:
    """Conventional CNN mirroring a spiking stack: neurons become ReLU, the
    attention gate and vote are dropped, and a single pass replaces T steps."""

    def __init__(self, model_config, input_shape, n_class, seed: int = 0):
        from .layers import Conv2d, Flatten, Linear, MaxPool2d, AvgPool2d

        rng = np.random.default_rng(seed)
        shape = tuple(input_shape)
        self.layers = []
        for spec in model_config.layers:
            if spec.kind == "conv":
                layer = Conv2d(shape[0], spec.out_channels, spec.kernel, spec.stride or 1, spec.padding, rng)
                out = (spec.out_channels,) + layer.output_hw(*shape[1:])
            elif spec.kind == "fc":
                width = spec.out_features or n_class
                layer = Linear(shape[0], width, rng)
                out = (width,)
            elif spec.kind in ("maxpool", "avgpool"):
                layer = (MaxPool2d if spec.kind == "maxpool" else AvgPool2d)(spec.kernel, spec.stride)
                out = (shape[0],) + layer.output_hw(*shape[1:])
            elif spec.kind == "flatten":
                layer, out = Flatten(), (int(np.prod(shape)),)
            elif spec.kind in ("lif", "if"):
                layer, out = "relu", shape
            else:
                continue
            if not isinstance(layer, str):
                layer.in_shape, layer.out_shape = shape, out
            self.layers.append(layer)
            shape = out
        # the final ReLU before the vote is not part of a conventional classifier head
        if self.layers and self.layers[-1] == "relu":
            self.layers.pop()
        self.input_shape = tuple(input_shape)
        self.n_class = n_class

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers if not isinstance(l, str))

    def forward(self, x):
        h = np.asarray(x, dtype=np.float32)[None]
        for layer in self.layers:
            h = np.maximum(h, 0) if isinstance(layer, str) else layer.forward(h)
        return h[0]

    def energy(self) -> EnergyReport:
        report = EnergyReport(mode="dense", params=self.n_params, input_shape=self.input_shape)
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, str) and layer.synaptic:
                report.layers.append(LayerEnergy(i, layer.kind, macs=float(layer.fanout().sum())))
        return report


def compare_energy(snn: EnergyReport, baseline: EnergyReport, snn_accuracy=None, baseline_accuracy=None,
                   names=("Spiking network", "CNN baseline")):
    """Energy ratio SNN/baseline and Table-VI-shaped rows."""
    ratio = snn.energy_pj / baseline.energy_pj if baseline.energy_pj else float("inf")
    rows = []
    for name, rep, acc in ((names[0], snn, snn_accuracy), (names[1], baseline, baseline_accuracy)):
        rows.append({
            "algorithm": name,
            "input_size": "x".join(str(d) for d in rep.input_shape),
            "energy_pj": rep.energy_pj,
            "accuracy": acc,
            "macs": None if (rep.paper_convention or rep.macs == 0) else rep.macs,
            "acs": rep.acs if rep.acs else None,
            "params": rep.params,
        })
    return ratio, rows


def format_table(rows) -> str:
    """Plain-text comparison table; missing entries print as ``-``."""
    head = ["Algorithm", "Input size", "Energy (pJ)", "Accuracy", "MACs", "ACs", "Param"]

    def fmt_count(v):
        return "-" if v is None else f"{v / 1e6:.3f} M"

    lines = []
    for r in rows:
        acc = "-" if r["accuracy"] is None else f"{100 * r['accuracy']:.2f}%"
        lines.append([r["algorithm"], r["input_size"], f"{r['energy_pj']:.4g}", acc,
                      fmt_count(r["macs"]), fmt_count(r["acs"]), f"{r['params'] / 1e6:.3f} M"])
    widths = [max(len(str(c)) for c in col) for col in zip(head, *lines)]
    out = [" | ".join(h.ljust(w) for h, w in zip(head, widths))]
    out.append("-+-".join("-" * w for w in widths))
    out += [" | ".join(str(c).ljust(w) for c, w in zip(line, widths)) for line in lines]
    return "\n".join(out)
