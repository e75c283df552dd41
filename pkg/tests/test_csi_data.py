import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wispike.csi_data import (CompositeLabel, CsiSample, SyntheticActionSpec, activity_density,
                              activity_profile, compose_multi_action, composite_class_index, decode_csi,
                              encode_csi, generate_benchmark, normalize_mean_subtract, read_csi_file,
                              read_manifest, synthesize_sample, write_csi_file)
from wispike.errors import FormatError, InvalidSample, InvalidSpec, InvalidThreshold, ShapeError


def sample(values, atoms=(0,), rate=500.0, idx=0):
    return CsiSample(np.asarray(values, dtype=np.float32), CompositeLabel(atoms, idx), rate)


# --- normalization ---------------------------------------------------------

def test_mean_subtract_arithmetic_sequence():
    out = normalize_mean_subtract(sample([[[1, 2, 3]]]))
    assert out.values.tolist() == [[[-1.0, 0.0, 1.0]]]


def test_mean_subtract_constant_is_zero():
    out = normalize_mean_subtract(sample(np.full((2, 3, 4), 7.25)))
    assert np.all(out.values == 0)


def test_mean_subtract_rejects_nonfinite():
    s = sample(np.ones((1, 1, 3)))
    s.values[0, 0, 1] = np.nan
    with pytest.raises(InvalidSample):
        normalize_mean_subtract(s)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 4), st.integers(1, 8), st.integers(1, 32))
def test_mean_subtract_zero_mean(seed, c, h, w):
    rng = np.random.default_rng(seed)
    x = sample(rng.normal(3.0, 2.0, (c, h, w)))
    out = normalize_mean_subtract(x).values
    # independent summation order: sort, then accumulate in python floats
    total = 0.0
    for v in sorted(out.ravel().tolist()):
        total += v
    scale = max(1.0, float(np.abs(x.values).max()))
    assert abs(total / out.size) <= 1e-6 * scale
    assert out.shape == (c, h, w)


def test_sample_invariants():
    with pytest.raises(InvalidSample):
        sample(np.ones((1, 0, 3)))
    with pytest.raises(InvalidSample):
        sample(np.ones((1, 1, 3)), rate=0.0)
    with pytest.raises(InvalidSample):
        CompositeLabel(())
    s = sample(np.ones((3, 114, 500)))
    assert s.duration == 1.0


# --- .csit format -----------------------------------------------------------

def test_roundtrip_full_scale(tmp_path):
    rng = np.random.default_rng(0)
    s = sample(rng.normal(size=(3, 114, 500)), atoms=(2, 5), idx=17)
    write_csi_file(s, tmp_path / "a.csit")
    back = read_csi_file(tmp_path / "a.csit")
    assert back.values.tobytes() == s.values.tobytes()
    assert back.label == s.label and back.sample_rate == 500.0 and back.source_id == "a"


def test_header_layout_matches_documented_fields():
    s = sample(np.zeros((2, 3, 4)), atoms=(1, 4), rate=100.0, idx=9)
    buf = encode_csi(s)
    assert buf[:4] == b"CSIT"
    assert struct.unpack_from("<IIIIIII", buf, 4) == (1, 2, 3, 4, 2, 1, 4)
    assert struct.unpack_from("<I", buf, 32)[0] == 9
    assert struct.unpack_from("<f", buf, 36)[0] == 100.0
    assert len(buf) == 40 + 2 * 3 * 4 * 4


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 8), st.integers(1, 16), st.integers(1, 64), st.integers(0, 2 ** 31),
       st.lists(st.integers(0, 2 ** 32 - 1), min_size=1, max_size=4))
def test_roundtrip_property(c, h, w, seed, atoms):
    rng = np.random.default_rng(seed)
    s = sample(rng.normal(size=(c, h, w)) * 10 ** rng.uniform(-3, 3), atoms=atoms, rate=float(rng.uniform(1, 1e4)))
    back = decode_csi(encode_csi(s))
    assert back.values.tobytes() == s.values.tobytes()
    assert back.label == s.label
    assert back.sample_rate == np.float32(s.sample_rate)


def test_bad_magic_offset_zero():
    buf = bytearray(encode_csi(sample(np.ones((1, 2, 3)))))
    buf[1:2] = b"X"
    with pytest.raises(FormatError) as e:
        decode_csi(bytes(buf))
    assert e.value.offset == 0


def test_short_payload_names_lengths():
    buf = encode_csi(sample(np.ones((3, 114, 500))))[:-4]
    with pytest.raises(FormatError) as e:
        decode_csi(buf)
    assert "expected 684000" in str(e.value) and "got 683996" in str(e.value)
    assert e.value.offset == 36


def test_write_is_exclusive_and_atomic(tmp_path):
    s = sample(np.ones((1, 1, 2)))
    target = tmp_path / "x.csit"
    write_csi_file(s, target)
    write_csi_file(sample(np.full((1, 1, 2), 2.0)), target)
    assert read_csi_file(target).values.tolist() == [[[2.0, 2.0]]]
    assert not (tmp_path / "x.csit.tmp").exists()


# --- synthesis ---------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(InvalidSpec):
        SyntheticActionSpec(0, (5.0, 5.0))
    with pytest.raises(InvalidSpec):
        SyntheticActionSpec(0, (1.0, 2.0), duration=0)
    with pytest.raises(InvalidSpec):
        SyntheticActionSpec(0, (1.0, 2.0), amplitude=-1)
    with pytest.raises(InvalidSpec):
        synthesize_sample([SyntheticActionSpec(0, (1, 2))], noise_sigma=-0.1)


def test_synthesis_deterministic():
    spec = [SyntheticActionSpec(3, (10.0, 20.0), 1.0, 1.0)]
    a = synthesize_sample(spec, 0.0, seed=11)
    b = synthesize_sample(spec, 0.0, seed=11)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.shape == (3, 114, 500) and a.label.atoms == (3,)
    c = synthesize_sample(spec, 0.3, seed=11)
    d = synthesize_sample(spec, 0.3, seed=11)
    assert c.values.tobytes() == d.values.tobytes()


def test_zero_amplitude_is_static():
    s = synthesize_sample([SyntheticActionSpec(0, (10.0, 20.0), 0.0, 1.0)], 0.0, seed=2)
    for eps in (1e-6, 1e-3, 0.5):
        assert activity_density(s, eps) == 0


def test_spectral_energy_sits_in_declared_bands():
    # oracle: plain DFT of one subcarrier row per segment
    rate = 500.0
    specs = [SyntheticActionSpec(0, (20.0, 40.0), 1.0, 1.0), SyntheticActionSpec(1, (120.0, 160.0), 1.0, 1.0)]
    s = synthesize_sample(specs, 0.0, seed=5, sample_rate=rate)
    row = s.values[0, 10].astype(np.float64)
    for k, (lo, hi) in enumerate([(20.0, 40.0), (120.0, 160.0)]):
        seg = row[k * 500:(k + 1) * 500]
        seg = seg - seg.mean()
        n = seg.size
        freqs = np.arange(n // 2 + 1) * rate / n
        power = np.abs(np.fft.rfft(seg)) ** 2
        band = (freqs >= lo - 3) & (freqs <= hi + 3)
        assert power[band].sum() / power.sum() > 0.8


def test_dft_oracle_agrees_with_fft_on_short_segment():
    # keeps the FFT shortcut above honest against the direct sum
    rng = np.random.default_rng(0)
    seg = rng.normal(size=48)
    direct = np.array([abs(sum(seg[j] * np.exp(-2j * np.pi * k * j / 48) for j in range(48))) ** 2
                       for k in range(25)])
    np.testing.assert_allclose(direct, np.abs(np.fft.rfft(seg)) ** 2, rtol=1e-9)


# --- composition ---------------------------------------------------------------

def test_compose_concatenates():
    a = sample(np.ones((3, 114, 500)), atoms=(1,))
    b = sample(np.full((3, 114, 500), 2.0), atoms=(4,))
    out = compose_multi_action([a, b])
    assert out.shape == (3, 114, 1000) and out.label.atoms == (1, 4)
    assert out.sample_rate == 500.0


def test_compose_resamples_to_target():
    a = sample(np.ones((3, 114, 500)), atoms=(1,))
    b = sample(np.full((3, 114, 500), 2.0), atoms=(4,))
    out = compose_multi_action([a, b], target_width=500)
    assert out.shape == (3, 114, 500) and out.label.atoms == (1, 4)
    assert out.duration == pytest.approx(2.0)


def test_three_atoms_and_class_count():
    parts = [sample(np.full((1, 2, 5), float(i)), atoms=(i,)) for i in (3, 0, 5)]
    out = compose_multi_action(parts, n_atoms=6)
    assert out.label.atoms == (3, 0, 5)
    idx = {composite_class_index(t, 6) for t in np.ndindex(6, 6, 6)}
    assert idx == set(range(216))
    assert out.label.class_index == 3 * 36 + 0 * 6 + 5


def test_compose_mismatch():
    with pytest.raises(ShapeError):
        compose_multi_action([sample(np.ones((1, 2, 3))), sample(np.ones((1, 3, 3)))])
    with pytest.raises(ShapeError):
        compose_multi_action([sample(np.ones((1, 2, 3))), sample(np.ones((1, 2, 3)), rate=100.0)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=2, max_size=4), st.integers(0, 2 ** 31))
def test_compose_preserves_values_verbatim(widths, seed):
    rng = np.random.default_rng(seed)
    parts = [sample(rng.normal(size=(2, 3, w)), atoms=(i,)) for i, w in enumerate(widths)]
    out = compose_multi_action(parts)
    start = 0
    for p in parts:
        w = p.shape[2]
        assert out.values[:, :, start:start + w].tobytes() == p.values.tobytes()
        start += w


# --- activity density ---------------------------------------------------------

def test_density_constant_is_zero():
    assert activity_density(sample(np.full((2, 3, 40), 4.0)), 1e-9) == 0


def test_density_counts_packets():
    v = np.zeros((1, 1, 500))
    v[0, 0, 200:300] = 5.0
    assert activity_density(sample(v, rate=100.0), 1.0) == 1.0


def test_density_threshold_validation():
    with pytest.raises(InvalidThreshold):
        activity_density(sample(np.ones((1, 1, 3))), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 2.0), st.floats(1e-3, 2.0))
def test_density_monotone_in_epsilon(seed, e1, e2):
    rng = np.random.default_rng(seed)
    s = sample(rng.normal(size=(2, 3, 50)))
    lo, hi = sorted((e1, e2))
    assert activity_density(s, lo) >= activity_density(s, hi)


def test_double_is_denser_than_constituents():
    rate = 500.0
    a = synthesize_sample([SyntheticActionSpec(0, (10.0, 30.0), 1.0, 1.0)], 0.0, seed=1, sample_rate=rate)
    b = synthesize_sample([SyntheticActionSpec(1, (60.0, 90.0), 1.0, 1.0)], 0.0, seed=2, sample_rate=rate)
    double = compose_multi_action([a, b], target_width=500)
    eps = 0.05

    def brute(x):
        v = x.values.astype(np.float64)
        count = 0
        for t in range(v.shape[2]):
            d = np.mean([abs(v[i, j, t] - np.median(v[i, j])) for i in range(v.shape[0])
                         for j in range(v.shape[1])])
            count += d > eps
        return count / x.sample_rate

    assert brute(a) == activity_density(a, eps)
    assert brute(double) == activity_density(double, eps)
    assert brute(double) >= 0.9 * max(brute(a), brute(b))


def test_activity_profile_shape():
    assert activity_profile(sample(np.ones((2, 3, 7)))).shape == (7,)


# --- benchmark generation -------------------------------------------------------------

def test_benchmark_single_action(tmp_path):
    man = generate_benchmark(tmp_path / "d", n_atoms=4, per_class=10, actions=1, seed=7)
    assert len(man.entries) == 40 and man.n_classes == 4
    back = read_manifest(tmp_path / "d" / "manifest.csv")
    back.validate()
    assert [e.label for e in back.entries] == [e.label for e in man.entries]
    x, y = back.load()
    assert x.shape == (40, 3, 8, 48) and sorted(set(y.tolist())) == [0, 1, 2, 3]
    assert len(back.split("test").entries) == 8


def test_benchmark_two_actions_has_nine_classes(tmp_path):
    man = generate_benchmark(tmp_path / "d", n_atoms=3, per_class=2, actions=2, seed=0)
    assert man.n_classes == 9
    assert {e.label.atoms for e in man.entries} == {(a, b) for a in range(3) for b in range(3)}


def test_benchmark_bytes_deterministic(tmp_path):
    generate_benchmark(tmp_path / "a", 3, 4, 2, seed=3)
    generate_benchmark(tmp_path / "b", 3, 4, 2, seed=3)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_manifest_header(tmp_path):
    generate_benchmark(tmp_path / "d", 2, 2, 2, seed=0)
    first = (tmp_path / "d" / "manifest.csv").read_text(encoding="utf-8").splitlines()
    assert first[0] == "path,class_index,atoms,split"
    assert "|" in first[1]
