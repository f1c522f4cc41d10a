import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradfix.errors import (
    CheckpointFormatError,
    ChecksumError,
    CongruenceError,
    NumericError,
    TruncatedCheckpointError,
)
from gradfix.param_space import (
    MaskVector,
    ParamVector,
    SignVector,
    TaskVector,
    add_scaled,
    agreement_stats,
    apply_mask,
    diff,
    load_checkpoint,
    load_mask,
    load_signs,
    save_checkpoint,
    save_mask,
    save_signs,
    sign_of,
)


def pv(values, cls=ParamVector, name="w"):
    values = np.asarray(values)
    return cls([name], [values.shape], values.reshape(-1))


def test_diff_example():
    tau = diff(pv([1.5, 0.0]), pv([1.0, 0.5]))
    assert isinstance(tau, TaskVector)
    np.testing.assert_array_equal(tau.values, [0.5, -0.5])
    assert np.all(diff(pv([1.0, 2.0]), pv([1.0, 2.0])).values == 0)


def test_diff_shape_mismatch():
    a = ParamVector(["fc.w"], [(2, 2)], [1.0, 2, 3, 4])
    b = ParamVector(["fc.w"], [(4,)], [1.0, 2, 3, 4])
    with pytest.raises(CongruenceError):
        diff(a, b)


def test_congruence_checks_names_and_order():
    a = ParamVector(["a", "b"], [(1,), (1,)], [1.0, 2.0])
    b = ParamVector(["b", "a"], [(1,), (1,)], [1.0, 2.0])
    with pytest.raises(CongruenceError):
        diff(a, b)


def test_add_scaled_examples():
    out = add_scaled(pv([1.0, 1.0]), pv([0.2, -0.2], TaskVector), -1)
    np.testing.assert_allclose(out.values, [0.8, 1.2])
    theta = pv([1.0, -3.0])
    assert add_scaled(theta, pv([5.0, 5.0], TaskVector), 0) == theta
    with pytest.raises(NumericError):
        add_scaled(pv([1e308]), pv([1e308], TaskVector), 10.0)


def test_non_finite_values_rejected():
    with pytest.raises((NumericError, ValueError)):
        pv([1.0, np.inf])


def test_sign_of_examples():
    np.testing.assert_array_equal(sign_of(pv([0.5, -0.2, 0.0])).values, [1, -1, 0])
    np.testing.assert_array_equal(sign_of(pv([1e-13, -1e-13]), 1e-12).values, [0, 0])
    assert np.all(sign_of(pv([0.1, 2.0, 3.0])).values == 1)
    with pytest.raises(ValueError):
        sign_of(pv([1.0]), -1.0)


def test_apply_mask_examples():
    m = pv(np.array([1, 0, 1], dtype=np.int8), MaskVector)
    np.testing.assert_allclose(apply_mask(m, pv([0.5, -0.2, 0.3], TaskVector)).values, [0.5, 0, 0.3])
    fa = MaskVector(["w"], [(2,)], np.array([-1, 1], dtype=np.int8), kind="signed")
    np.testing.assert_allclose(apply_mask(fa, pv([0.4, -0.4], TaskVector)).values, [-0.4, -0.4])
    zero = pv(np.zeros(3, dtype=np.int8), MaskVector)
    assert np.all(apply_mask(zero, pv([1.0, 2.0, 3.0], TaskVector)).values == 0)


def test_binary_mask_rejects_signed_values():
    with pytest.raises(ValueError):
        pv(np.array([-1, 1], dtype=np.int8), MaskVector)


def test_agreement_stats_examples():
    s1 = pv(np.array([1, -1, 1], dtype=np.int8), SignVector)
    s2 = pv(np.array([1, 1, 1], dtype=np.int8), SignVector)
    [(name, frac, n)] = agreement_stats(s1, s2)
    assert name == "whole" and frac == pytest.approx(2 / 3) and n == 3
    assert agreement_stats(s1, s1)[0][1] == 1.0
    assert agreement_stats(s1, -s1)[0][1] == 0.0


def test_agreement_excludes_zeros():
    s1 = pv(np.array([1, 0, 1], dtype=np.int8), SignVector)
    s2 = pv(np.array([1, 1, 0], dtype=np.int8), SignVector)
    assert agreement_stats(s1, s2)[0][1:] == (1.0, 1)


def test_agreement_per_segment():
    s = SignVector(["a", "b"], [(2,), (1,)], np.array([1, -1, 0], dtype=np.int8))
    out = agreement_stats(s, s, "per_segment")
    assert out == [("a", 1.0, 2), ("b", 0.0, 0)]


def test_segment_views_are_read_only():
    v = ParamVector(["a", "b"], [(2, 2), (3,)], np.arange(7.0))
    np.testing.assert_array_equal(v["a"], [[0, 1], [2, 3]])
    with pytest.raises(ValueError):
        v["b"][0] = 5.0


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def param_vectors(draw, n_min=1):
    k = draw(st.integers(1, 3))
    shapes = [tuple(draw(st.lists(st.integers(1, 3), min_size=1, max_size=2))) for _ in range(k)]
    size = int(sum(np.prod(s) for s in shapes))
    values = draw(hnp.arrays(np.float64, size, elements=finite))
    return ParamVector([f"s{i}" for i in range(k)], shapes, values)


@given(param_vectors(), st.data())
def test_diff_add_scaled_closure(theta, data):
    delta = data.draw(hnp.arrays(np.float64, theta.size, elements=finite))
    moved = add_scaled(theta, theta.like(delta, cls=TaskVector), 1.0)
    recovered = diff(moved, theta)
    np.testing.assert_allclose(recovered.values, (theta.values + delta) - theta.values, rtol=0, atol=0)


@given(param_vectors(), st.data())
def test_binary_mask_idempotent(tau, data):
    bits = data.draw(hnp.arrays(np.int8, tau.size, elements=st.integers(0, 1)))
    m = tau.like(bits, cls=MaskVector)
    t = tau.like(tau.values, cls=TaskVector)
    assert apply_mask(m, apply_mask(m, t)) == apply_mask(m, t)


@given(param_vectors())
def test_sign_is_odd(v):
    assert sign_of(-v) == -sign_of(v)


@given(param_vectors())
def test_self_agreement_is_one(v):
    s = sign_of(v)
    for _, frac, n in agreement_stats(s, s, "per_segment"):
        assert frac == (1.0 if n else 0.0)


@given(param_vectors())
def test_checkpoint_round_trip(tmp_path_factory, v):
    path = tmp_path_factory.mktemp("ckpt") / "v.gfx"
    save_checkpoint(v, path)
    loaded = load_checkpoint(path)
    assert loaded == v
    assert loaded.values.tobytes() == v.values.tobytes()


def test_sign_and_mask_round_trip(tmp_path):
    s = SignVector(["a"], [(3,)], np.array([1, 0, -1], dtype=np.int8))
    save_signs(s, tmp_path / "s")
    assert load_signs(tmp_path / "s") == s
    for kind, vals in (("binary", [1, 0, 1]), ("signed", [-1, 0, 1])):
        m = MaskVector(["a"], [(3,)], np.array(vals, dtype=np.int8), kind=kind)
        save_mask(m, tmp_path / kind)
        back = load_mask(tmp_path / kind)
        assert back == m and back.kind == kind


def test_checkpoint_corruption(tmp_path):
    v = ParamVector(["a", "b"], [(2,), (2, 2)], np.arange(6.0))
    path = tmp_path / "v.gfx"
    save_checkpoint(v, path)
    raw = path.read_bytes()

    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "magic")

    (tmp_path / "trunc").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(tmp_path / "trunc")

    flipped = bytearray(raw)
    flipped[-10] ^= 0xFF
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "flip")

    # a sign file is not a checkpoint
    save_signs(sign_of(v), tmp_path / "s")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "s")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    v = pv([1.0, 2.0])
    save_checkpoint(v, tmp_path / "v.gfx")
    save_checkpoint(v, tmp_path / "v.gfx")
    assert os.listdir(tmp_path) == ["v.gfx"]
