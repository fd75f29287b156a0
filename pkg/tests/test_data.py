import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from motiondiff.data import (
    MotionDataset,
    SyntheticConfig,
    decode_container,
    displacement_bound,
    encode_container,
    generate_synthetic,
    read_container,
    to_csv,
    window,
    window_array,
    window_count,
    write_container,
)
from motiondiff.errors import (
    BadMagic,
    SequenceTooShort,
    ShapeInconsistent,
    TruncatedFile,
    VersionMismatch,
)
from motiondiff.skeleton import build_skeleton, canonical_skeleton
from motiondiff.spectral import dct_basis, residual_encode

SMALL = SyntheticConfig(num_sequences=4, frames=40)


def test_generation_is_deterministic_per_seed():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    assert a.equals(b)
    c = generate_synthetic(SyntheticConfig(num_sequences=4, frames=40, seed=1))
    assert not a.equals(c)
    assert len(a.sequences) == 4 and a.sequences[0].shape == (40, 17, 3)


def test_sequence_streams_are_independent_of_count():
    short = generate_synthetic(SyntheticConfig(num_sequences=2, frames=40))
    assert short.sequences[1].tobytes() == generate_synthetic(SMALL).sequences[1].tobytes()


def test_zero_amplitude_gives_constant_sequences():
    cfg = SyntheticConfig(
        num_sequences=3,
        frames=30,
        amplitude=(0.0, 0.0),
        gait_amplitude=(0.0, 0.0),
        drift_amplitude=(0.0, 0.0),
    )
    ds = generate_synthetic(cfg)
    basis = dct_basis(30)
    for s in ds.sequences:
        assert np.all(s == s[0])
        coeffs = residual_encode(s, s[9], basis, 20)
        assert np.max(np.abs(coeffs.coeffs)) < 1e-12


def test_bone_lengths_follow_rest_pose_without_motion():
    cfg = SyntheticConfig(num_sequences=1, frames=2, amplitude=(0, 0), gait_amplitude=(0, 0), drift_amplitude=(0, 0))
    pose = generate_synthetic(cfg).sequences[0][0]
    sk = canonical_skeleton()
    lengths = [np.linalg.norm(pose[v] - pose[p]) for v, p in enumerate(sk.parent) if p is not None]
    assert min(lengths) > 0.05


@pytest.mark.parametrize("families", [("sinusoidal",), ("gait",), ("drift",), ("sinusoidal", "drift", "gait")])
def test_displacement_bound(families):
    cfg = SyntheticConfig(num_sequences=10, frames=200, families=families)
    ds = generate_synthetic(cfg)
    bound = displacement_bound(cfg)
    worst = max(np.max(np.linalg.norm(np.diff(s, axis=0), axis=-1)) for s in ds.sequences)
    assert 0 < worst <= bound


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(families=("spline",))
    with pytest.raises(ValueError):
        SyntheticConfig(amplitude=(0.2, 0.1))
    with pytest.raises(ValueError):
        SyntheticConfig(frames=0)


def test_generic_skeleton():
    sk = build_skeleton([(0, 1), (1, 2), (0, 3)], root=0, V=4)
    ds = generate_synthetic(SyntheticConfig(num_sequences=2, frames=10), sk)
    assert ds.sequences[0].shape == (10, 4, 3)


# --- windowing -----------------------------------------------------------------


def dataset_of(lengths, V=2):
    rng = np.random.default_rng(0)
    return MotionDataset(25.0, [rng.normal(size=(n, V, 3)) for n in lengths])


def test_window_examples():
    H, F, s = 3, 4, 2
    assert len(window(dataset_of([H + F]), H, F, 5)) == 1
    assert len(window(dataset_of([H + F + s]), H, F, s)) == 2
    with pytest.raises(SequenceTooShort):
        window(dataset_of([H + F - 1, 20]), H, F, 1)


@given(
    lengths=st.lists(st.integers(10, 40), min_size=1, max_size=4),
    H=st.integers(1, 5),
    F=st.integers(0, 5),
    stride=st.integers(1, 7),
)
def test_window_count_formula(lengths, H, F, stride):
    ds = dataset_of(lengths)
    pairs = window(ds, H, F, stride)
    assert len(pairs) == sum(window_count(n, H, F, stride) for n in lengths)
    expected = sum((n - H - F) // stride + 1 for n in lengths)
    assert len(pairs) == expected
    # enumerate start offsets directly
    i = 0
    for seq in ds.sequences:
        for lo in range(0, len(seq) - H - F + 1, stride):
            hist, full = pairs[i]
            assert np.array_equal(full, seq[lo : lo + H + F]) and np.array_equal(hist, full[:H])
            i += 1


def test_default_protocol_window_counts():
    ds = generate_synthetic(SyntheticConfig()).with_split(0.2)
    train = window_array(ds, 25, 100, 5, "train")
    test = window_array(ds, 25, 100, 5, "test")
    assert train.shape == (64 * 26, 125, 17, 3) and test.shape == (16 * 26, 125, 17, 3)
    assert ds.splits[-16:] == ["test"] * 16 and ds.splits[63] == "train"


# --- container -----------------------------------------------------------------


def test_container_roundtrip(tmp_path):
    ds = generate_synthetic(SMALL)
    path = tmp_path / "d.smdm"
    write_container(ds, path)
    back = read_container(path, canonical_skeleton())
    assert back.equals(ds)
    assert encode_container(back) == encode_container(ds)
    assert path.read_bytes()[:5] == b"SMDM1"


def test_container_ragged_and_empty():
    ds = dataset_of([3, 7, 1])
    assert decode_container(encode_container(ds)).equals(ds)
    empty = MotionDataset(30.0, [], skeleton=build_skeleton([(0, 1)], root=0, V=2))
    back = decode_container(encode_container(empty))
    assert back.fps == 30.0 and back.sequences == []


def test_container_errors():
    blob = encode_container(dataset_of([5, 6]))
    with pytest.raises(BadMagic):
        decode_container(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatch):
        decode_container(blob[:4] + b"2" + blob[5:])
    cut = 5 + 16 + 4 + 8 * 5 * 2 * 3 + 4 + 17
    with pytest.raises(TruncatedFile) as err:
        decode_container(blob[:cut])
    assert err.value.offset == 5 + 16 + 4 + 8 * 5 * 2 * 3 + 4
    with pytest.raises(ShapeInconsistent):
        decode_container(blob + b"\0")
    with pytest.raises(ShapeInconsistent):
        decode_container(blob, canonical_skeleton())


def test_dataset_validation():
    with pytest.raises(ShapeInconsistent):
        MotionDataset(25.0, [np.zeros((3, 2, 3)), np.zeros((3, 3, 3))])
    with pytest.raises(ShapeInconsistent):
        MotionDataset(25.0, [np.full((3, 2, 3), np.inf)])
    with pytest.raises(ShapeInconsistent):
        MotionDataset(25.0, [np.zeros((3, 2, 3))], skeleton=canonical_skeleton())


def test_csv_export():
    ds = MotionDataset(25.0, [np.arange(12, dtype=float).reshape(2, 2, 3)])
    lines = to_csv(ds).splitlines()
    assert lines[0] == "seq,frame,joint,x,y,z"
    assert lines[1] == "0,0,0,0.0,1.0,2.0"
    assert lines[-1] == "0,1,1,9.0,10.0,11.0"
    assert len(lines) == 1 + 4
