"""Train the desk-scale spiking network on a small synthetic benchmark and evaluate it.

Takes about fifteen seconds on one CPU.

    python3 demos/train_and_evaluate.py [outdir]
"""
import logging
import sys
import tempfile
from pathlib import Path

from wispike.csi_data import generate_benchmark
from wispike.training import default_config, evaluate, load_checkpoint, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="wispike_train_"))

man = generate_benchmark(out / "data", n_atoms=4, per_class=60, actions=1, seed=0)

cfg = default_config()          # T=4, Adam lr 0.01, batch 32, tau 0.07
cfg.manifest = str(out / "data" / "manifest.csv")
cfg.epochs = 8
result = train(cfg, out / "run", progress=True)

for rec in result.history[-2:]:
    rates = ", ".join(f"{r.mean:.3f}" for r in rec.rates)
    print(f"epoch {rec.epoch} {rec.split:5s} loss {rec.loss:.4f} acc {rec.accuracy:.3f}  firing rates [{rates}]")

# reload from disk and evaluate again; the numbers match the in-memory model
ck = load_checkpoint(result.checkpoint)
m = evaluate(ck.trained, man)
print(f"\nreloaded checkpoint: accuracy {m.accuracy:.3f}, macro F1 {m.f1:.3f}")
print(m.confusion)
print("run directory:", out / "run")
