"""Operation counts and energy of a trained network against a matched dense CNN.

    python3 demos/energy_report.py RUNDIR/checkpoint.wspk DATA/manifest.csv

Without arguments a quick 3-epoch model is trained first.
"""
import sys
import tempfile
from pathlib import Path

from wispike.csi_data import generate_benchmark, read_manifest
from wispike.telemetry import DenseBaseline, compare_energy, count_dynamic, format_table, layer_rates
from wispike.training import default_config, evaluate, load_checkpoint, train

if len(sys.argv) == 3:
    tm = load_checkpoint(sys.argv[1]).trained
    man = read_manifest(sys.argv[2])
else:
    tmp = Path(tempfile.mkdtemp(prefix="wispike_energy_"))
    man = generate_benchmark(tmp, n_atoms=4, per_class=30, seed=0)
    cfg = default_config()
    cfg.manifest, cfg.epochs = str(tmp / "manifest.csv"), 3
    tm = train(cfg).trained

x, y = man.split("test").load()
acc = evaluate(tm, (x, y)).accuracy
baseline = DenseBaseline(tm.model.config, tm.model.layers[0].in_shape, tm.model.n_class).energy()

for paper_convention in (False, True):
    snn = count_dynamic(tm.model, x, paper_convention=paper_convention)
    ratio, rows = compare_energy(snn, baseline, acc)
    label = "ACs only" if paper_convention else "ACs + first-layer MACs"
    print(f"\n[{label}]")
    print(snn.to_csv())
    print(format_table(rows))
    print(f"ratio {ratio:.4f}")

# rates of the last forward pass (the test split)
for i, r in enumerate(layer_rates(tm.model)):
    print(f"spiking layer {i}: rate {r.mean:.3f} +- {r.std:.3f}  {'in' if r.in_band else 'outside'} 0.1-0.3 band")
