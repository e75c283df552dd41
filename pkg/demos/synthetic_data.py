"""Synthetic CSI: one atomic action, a composed two-action sample, and a small benchmark.

    python3 demos/synthetic_data.py [outdir]
"""
import sys
import tempfile
from pathlib import Path

from wispike.csi_data import (action_catalog, activity_density, compose_multi_action, generate_benchmark,
                              read_csi_file, synthesize_sample, write_csi_file)

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="wispike_demo_"))
out.mkdir(parents=True, exist_ok=True)

catalog = action_catalog(4, sample_rate=100.0)
for spec in catalog:
    print(f"atom {spec.action_id}: doppler band {spec.doppler_band[0]:.1f}-{spec.doppler_band[1]:.1f} Hz")

walk = synthesize_sample([catalog[0]], noise_sigma=0.1, seed=1, sample_rate=100.0)
wave = synthesize_sample([catalog[3]], noise_sigma=0.1, seed=2, sample_rate=100.0)
print("\nsingle sample shape", walk.shape, "duration", walk.duration, "s")

both = compose_multi_action([walk, wave], n_atoms=4)
print("composed:", both.shape, "atoms", both.label.atoms, "class", both.label.class_index)
squeezed = compose_multi_action([walk, wave], target_width=walk.shape[2], n_atoms=4)
print("resampled to one sample's width:", squeezed.shape, "rate", squeezed.sample_rate)

# busier signals stay above threshold for longer
for eps in (0.1, 0.3, 0.6):
    print(f"activity density eps={eps}: single {activity_density(walk, eps):.2f}s, "
          f"double {activity_density(both, eps):.2f}s")

write_csi_file(both, out / "double.csit")
assert read_csi_file(out / "double.csit").values.tobytes() == both.values.tobytes()

man = generate_benchmark(out / "bench", n_atoms=3, per_class=10, actions=2, seed=0)
print(f"\nbenchmark: {len(man.entries)} samples, {man.n_classes} classes, written under {out / 'bench'}")
print("class names:", man.class_names)
