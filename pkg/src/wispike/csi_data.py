"""CSI samples: normalization, the ``.csit`` file format, synthetic generation,
multi-action composition and activity density.

Sample values are amplitude tensors of shape ``(C, H, W)`` = antenna pairs x
subcarriers x packets, stored as float32 so that file round trips are exact.
"""

from __future__ import annotations

import csv
import io
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal.windows import tukey

from .errors import FormatError, InvalidSample, InvalidSpec, InvalidThreshold, ShapeError

MAGIC = b"CSIT"
FORMAT_VERSION = 1
# Refuse headers whose payload would exceed 1 GiB.
MAX_PAYLOAD_BYTES = 1 << 30
MAX_ATOMS = 1024
FULL_SCALE_SHAPE = (3, 114, 500)
SINUSOIDS_PER_ACTION = 4


@dataclass(frozen=True)
class CompositeLabel:
    """Ordered tuple of atomic action ids plus its index in the composite class set."""

    atoms: tuple[int, ...]
    class_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(int(a) for a in self.atoms))
        if len(self.atoms) < 1:
            raise InvalidSample("a label needs at least one atomic action")
        if any(a < 0 for a in self.atoms):
            raise InvalidSample(f"atomic action ids must be non-negative, got {self.atoms}")
        if self.class_index < 0:
            raise InvalidSample(f"class_index must be non-negative, got {self.class_index}")

    @property
    def is_single(self) -> bool:
        return len(self.atoms) == 1


@dataclass
class CsiSample:
    values: np.ndarray
    label: CompositeLabel
    sample_rate: float = 500.0
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidSample(f"values must have shape (C, H, W) with all dims >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise InvalidSample("values contain NaN or infinity")
        if not (self.sample_rate > 0 and np.isfinite(self.sample_rate)):
            raise InvalidSample(f"sample_rate must be a positive finite number, got {self.sample_rate}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def duration(self) -> float:
        return self.values.shape[2] / self.sample_rate


@dataclass(frozen=True)
class SyntheticActionSpec:
    action_id: int
    doppler_band: tuple[float, float]
    amplitude: float = 1.0
    duration: float = 1.0

    def __post_init__(self):
        low, high = self.doppler_band
        if not low < high:
            raise InvalidSpec(f"doppler band needs low < high, got {self.doppler_band}")
        if low < 0:
            raise InvalidSpec("doppler frequencies must be non-negative")
        if self.amplitude < 0:
            raise InvalidSpec(f"amplitude must be >= 0, got {self.amplitude}")
        if self.duration <= 0:
            raise InvalidSpec(f"duration must be positive, got {self.duration}")


def normalize_mean_subtract(x: CsiSample) -> CsiSample:
    """Subtract the scalar mean over all C*H*W entries."""
    values = np.asarray(x.values)
    if not np.isfinite(values).all():
        raise InvalidSample("cannot normalize a sample with non-finite values")
    mu = values.mean(dtype=np.float64)
    out = (values.astype(np.float64) - mu).astype(np.float32)
    return CsiSample(out, x.label, x.sample_rate, x.source_id)


# ---------------------------------------------------------------------------
# .csit binary format

def encode_csi(sample: CsiSample) -> bytes:
    c, h, w = sample.shape
    atoms = sample.label.atoms
    header = struct.pack("<4sIIIII", MAGIC, FORMAT_VERSION, c, h, w, len(atoms))
    header += struct.pack(f"<{len(atoms)}I", *atoms)
    header += struct.pack("<If", sample.label.class_index, sample.sample_rate)
    return header + np.ascontiguousarray(sample.values, dtype="<f4").tobytes()


def decode_csi(buf: bytes, source_id: str = "") -> CsiSample:
    """Parse a ``.csit`` byte string. Any defect raises FormatError with its offset."""

    def u32(offset: int, what: str) -> int:
        if len(buf) < offset + 4:
            raise FormatError(f"truncated header while reading {what}", len(buf))
        return struct.unpack_from("<I", buf, offset)[0]

    if len(buf) < 4:
        raise FormatError("truncated header while reading magic", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    version = u32(4, "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    dims = []
    for offset, name in ((8, "C"), (12, "H"), (16, "W")):
        d = u32(offset, name)
        if d < 1:
            raise FormatError(f"dimension {name} must be >= 1, got {d}", offset)
        dims.append(d)
    c, h, w = dims
    if c * h * w * 4 > MAX_PAYLOAD_BYTES:
        raise FormatError(f"dimension overflow: {c}x{h}x{w} exceeds the payload limit", 8)
    m = u32(20, "atom count")
    if m < 1 or m > MAX_ATOMS:
        raise FormatError(f"atom count must be in 1..{MAX_ATOMS}, got {m}", 20)
    atoms = tuple(u32(24 + 4 * i, f"atom {i}") for i in range(m))
    off = 24 + 4 * m
    class_index = u32(off, "class_index")
    off += 4
    if len(buf) < off + 4:
        raise FormatError("truncated header while reading sample_rate", len(buf))
    (rate,) = struct.unpack_from("<f", buf, off)
    if not (np.isfinite(rate) and rate > 0):
        raise FormatError(f"sample_rate must be positive and finite, got {rate}", off)
    off += 4
    expected = c * h * w * 4
    actual = len(buf) - off
    if actual < expected:
        raise FormatError(f"payload too short: expected {expected} bytes, got {actual}", off)
    if actual > expected:
        raise FormatError(f"{actual - expected} trailing bytes after payload of {expected} bytes", off + expected)
    values = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=off)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite value in payload", off + 4 * int(bad[0]))
    values = values.astype(np.float32).reshape(c, h, w)
    return CsiSample(values, CompositeLabel(atoms, class_index), float(rate), source_id)


def write_csi_file(sample: CsiSample, path) -> None:
    path = Path(path)
    # exclusive create of a temp file, then atomic rename over the target
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "xb") as fh:
        fh.write(encode_csi(sample))
    tmp.replace(path)


def read_csi_file(path) -> CsiSample:
    path = Path(path)
    return decode_csi(path.read_bytes(), source_id=path.stem)


# ---------------------------------------------------------------------------
# synthetic generation

def _seed_int(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def synthesize_sample(
    specs: Sequence[SyntheticActionSpec],
    noise_sigma: float = 0.0,
    seed: int = 0,
    *,
    n_antennas: int = 3,
    n_subcarriers: int = 114,
    sample_rate: float = 500.0,
    drift: float = 0.0,
    class_index: int = 0,
    source_id: str = "",
) -> CsiSample:
    """Generate a CSI block in which each spec occupies its own time segment.

    The static part is a per-subcarrier multipath profile (optionally with a
    slow multiplicative drift). Each action adds a tapered sum of
    ``SINUSOIDS_PER_ACTION`` sinusoids whose frequencies are drawn from its
    doppler band and whose phases rotate across subcarriers.
    """
    if not specs:
        raise InvalidSpec("synthesize_sample needs at least one action spec")
    if noise_sigma < 0:
        raise InvalidSpec(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    widths = [max(1, int(round(s.duration * sample_rate))) for s in specs]
    width = sum(widths)
    c, h = n_antennas, n_subcarriers
    t = np.arange(width) / sample_rate

    delay = rng.uniform(0.5, 2.0)
    psi = rng.uniform(0, 2 * np.pi, size=(c, 1))
    profile = 1.0 + 0.3 * np.cos(2 * np.pi * delay * np.arange(h)[None, :] / h + psi)
    values = np.repeat(profile[:, :, None], width, axis=2)
    if drift:
        f_d = rng.uniform(0.05, 0.2)
        values = values * (1.0 + drift * np.sin(2 * np.pi * f_d * t + rng.uniform(0, 2 * np.pi)))

    start = 0
    sub = np.arange(h)[None, :, None]
    for spec, w_k in zip(specs, widths):
        freqs = rng.uniform(*spec.doppler_band, size=SINUSOIDS_PER_ACTION)
        theta = rng.uniform(0, 2 * np.pi, size=SINUSOIDS_PER_ACTION)
        rho = rng.uniform(0, 1, size=SINUSOIDS_PER_ACTION)
        chi = rng.uniform(0, 2 * np.pi, size=(SINUSOIDS_PER_ACTION, c))
        tk = t[:w_k][None, None, :]
        wave = np.zeros((c, h, w_k))
        for j in range(SINUSOIDS_PER_ACTION):
            phase = theta[j] + 2 * np.pi * rho[j] * sub / h + chi[j][:, None, None]
            wave += np.sin(2 * np.pi * freqs[j] * tk + phase)
        envelope = tukey(w_k, alpha=0.25) if w_k > 2 else np.ones(w_k)
        values[:, :, start:start + w_k] += 0.5 * spec.amplitude * wave * envelope * profile[:, :, None]
        start += w_k

    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    label = CompositeLabel(tuple(s.action_id for s in specs), class_index)
    return CsiSample(values.astype(np.float32), label, sample_rate, source_id)


def composite_class_index(atoms: Sequence[int], n_atoms: int) -> int:
    """Lexicographic index of an ordered atom tuple among all ``n_atoms**M`` tuples."""
    index = 0
    for a in atoms:
        if not 0 <= a < n_atoms:
            raise InvalidSample(f"atom id {a} outside catalog of {n_atoms}")
        index = index * n_atoms + int(a)
    return index


def compose_multi_action(
    samples: Sequence[CsiSample],
    target_width: int | None = None,
    n_atoms: int | None = None,
) -> CsiSample:
    """Concatenate samples along the packet axis, optionally resampling to ``target_width``.

    Resampling preserves total duration, so the output sample rate scales by
    ``target_width / sum(W_i)``.
    """
    if len(samples) < 2:
        raise ShapeError("compose_multi_action needs at least two samples")
    c, h, _ = samples[0].shape
    for s in samples[1:]:
        if s.shape[:2] != (c, h):
            raise ShapeError(f"antenna/subcarrier mismatch: {samples[0].shape[:2]} vs {s.shape[:2]}")
        if s.sample_rate != samples[0].sample_rate:
            raise ShapeError(f"sample rate mismatch: {samples[0].sample_rate} vs {s.sample_rate}")
    values = np.concatenate([s.values for s in samples], axis=2)
    rate = samples[0].sample_rate
    total = values.shape[2]
    if target_width is not None:
        if target_width < 1:
            raise ShapeError(f"target_width must be >= 1, got {target_width}")
        values = resample_linear(values, target_width)
        rate = rate * target_width / total
    atoms = tuple(itertools.chain.from_iterable(s.label.atoms for s in samples))
    n = n_atoms if n_atoms is not None else max(atoms) + 1
    label = CompositeLabel(atoms, composite_class_index(atoms, n))
    source = "+".join(s.source_id for s in samples)
    return CsiSample(values, label, rate, source)


def resample_linear(values: np.ndarray, width: int) -> np.ndarray:
    """Linear interpolation along the last axis onto ``width`` evenly spaced points."""
    n = values.shape[-1]
    if width == n:
        return values.copy()
    if n == 1:
        return np.repeat(values, width, axis=-1)
    pos = np.linspace(0.0, n - 1, width)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - i0
    v = values.astype(np.float64)
    out = v[..., i0] * (1.0 - frac) + v[..., i0 + 1] * frac
    return out.astype(values.dtype)


def activity_profile(x: CsiSample) -> np.ndarray:
    """Per-packet mean absolute deviation from each subcarrier's temporal median."""
    v = x.values.astype(np.float64)
    med = np.median(v, axis=2, keepdims=True)
    return np.abs(v - med).mean(axis=(0, 1))


def activity_density(x: CsiSample, epsilon: float) -> float:
    """Seconds during which the activity profile exceeds ``epsilon``."""
    if not epsilon > 0:
        raise InvalidThreshold(f"epsilon must be > 0, got {epsilon}")
    delta = activity_profile(x)
    return int(np.count_nonzero(delta > epsilon)) / x.sample_rate


# ---------------------------------------------------------------------------
# manifests and benchmarks

@dataclass
class ManifestEntry:
    path: str
    label: CompositeLabel
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: dict[int, str] = field(default_factory=dict)
    root: Path = Path(".")

    @property
    def n_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return max(e.label.class_index for e in self.entries) + 1

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == name], self.class_names, self.root)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean-subtracted values stacked to ``(N, C, H, W)`` and their class indices."""
        if not self.entries:
            return np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64)
        xs, ys = [], []
        for e in self.entries:
            s = normalize_mean_subtract(read_csi_file(self.resolve(e)))
            xs.append(s.values)
            ys.append(s.label.class_index)
        return np.stack(xs), np.asarray(ys, dtype=np.int64)

    def validate(self) -> None:
        for e in self.entries:
            read_csi_file(self.resolve(e))
        used = sorted({e.label.class_index for e in self.entries})
        if self.class_names and not set(used) <= set(self.class_names):
            raise InvalidSample("manifest uses class indices missing from its class table")
        if not self.class_names and used != list(range(len(used))):
            raise InvalidSample("class indices are not dense 0..K-1")


def _atoms_str(atoms: Iterable[int]) -> str:
    return "|".join(str(a) for a in atoms)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    buf = io.StringIO(newline="")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["path", "class_index", "atoms", "split"])
    for e in manifest.entries:
        wr.writerow([e.path, e.label.class_index, _atoms_str(e.label.atoms), e.split])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    if manifest.class_names:
        buf = io.StringIO(newline="")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class_index", "name"])
        for k in sorted(manifest.class_names):
            wr.writerow([k, manifest.class_names[k]])
        (path.parent / "classes.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            atoms = tuple(int(a) for a in row["atoms"].split("|"))
            entries.append(ManifestEntry(row["path"], CompositeLabel(atoms, int(row["class_index"])), row["split"]))
    names = {}
    classes = path.parent / "classes.csv"
    if classes.exists():
        with open(classes, encoding="utf-8", newline="") as fh:
            names = {int(r["class_index"]): r["name"] for r in csv.DictReader(fh)}
    return DatasetManifest(entries, names, path.parent)


def action_catalog(n_atoms: int, actions: int = 1, sample_rate: float = 48.0,
                   low: float = 1.0, duration: float = 1.0) -> list[SyntheticActionSpec]:
    """Disjoint doppler bands for ``n_atoms`` actions.

    Bands stay below 40% of Nyquist divided by ``actions`` so that resampling
    an M-action concatenation back to one action's width cannot alias.
    """
    top = 0.8 * (sample_rate / 2) / actions
    if top <= low:
        raise InvalidSpec(f"sample rate {sample_rate} too low for {actions}-action composition")
    edges = np.linspace(low, top, n_atoms + 1)
    margin = 0.15 * (edges[1] - edges[0])
    return [
        SyntheticActionSpec(k, (float(edges[k] + margin), float(edges[k + 1] - margin)), 1.0, duration)
        for k in range(n_atoms)
    ]


def generate_benchmark(
    out_dir,
    n_atoms: int,
    per_class: int,
    actions: int = 1,
    seed: int = 0,
    *,
    test_fraction: float = 0.2,
    n_antennas: int = 3,
    n_subcarriers: int = 8,
    width: int = 48,
    noise_sigma: float = 0.2,
) -> DatasetManifest:
    """Write a synthetic benchmark of every ordered ``actions``-tuple over ``n_atoms`` atoms.

    Each class gets ``per_class`` samples; ``round(per_class * test_fraction)``
    of them, picked by a seeded permutation, go to the test split. Multi-action
    samples are single-action samples concatenated and resampled back to ``width``.
    """
    if actions not in (1, 2, 3):
        raise InvalidSpec(f"actions must be 1, 2 or 3, got {actions}")
    if n_atoms < 1 or per_class < 1:
        raise InvalidSpec("n_atoms and per_class must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rate = float(width)  # one second per atomic action
    catalog = action_catalog(n_atoms, actions, sample_rate=rate)
    n_test = int(round(per_class * test_fraction))
    entries = []
    names = {}
    idx = 0
    for cls, atoms in enumerate(itertools.product(range(n_atoms), repeat=actions)):
        names[cls] = "-".join(f"a{a}" for a in atoms)
        order = np.random.default_rng([seed, cls]).permutation(per_class)
        test_set = set(order[:n_test].tolist())
        for k in range(per_class):
            parts = [
                synthesize_sample([catalog[a]], noise_sigma, _seed_int(seed, idx, pos),
                                  n_antennas=n_antennas, n_subcarriers=n_subcarriers,
                                  sample_rate=rate, source_id=f"s{idx:05d}_{pos}")
                for pos, a in enumerate(atoms)
            ]
            if actions == 1:
                sample = parts[0]
                sample.label = CompositeLabel(atoms, cls)
            else:
                sample = compose_multi_action(parts, target_width=width, n_atoms=n_atoms)
            assert sample.label.class_index == cls
            name = f"s{idx:05d}.csit"
            target = out_dir / name
            if target.exists():
                target.unlink()
            write_csi_file(sample, target)
            entries.append(ManifestEntry(name, sample.label, "test" if k in test_set else "train"))
            idx += 1
    manifest = DatasetManifest(entries, names, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
