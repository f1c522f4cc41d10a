import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradfix.bounds import (
    CHUNK_TRIALS,
    NoiseChannel,
    bound_grid,
    compare_mean_vs_majority,
    exact_binomial_success,
    hoeffding_bound,
    normal_cdf,
    per_sample_alignment_p,
    simulate_vote_success,
    wilson_interval,
    write_bound_csv,
)


def test_hoeffding_examples():
    assert hoeffding_bound(0.6, 25) == pytest.approx(1 - math.exp(-0.5), abs=1e-15)
    assert round(hoeffding_bound(0.6, 25), 4) == 0.3935
    assert all(hoeffding_bound(0.5, n) == 0 for n in (1, 7, 100))
    for bad in ((0.4, 3), (1.1, 3), (0.6, 0), (0.6, 2.5)):
        with pytest.raises(ValueError):
            hoeffding_bound(*bad)


def test_hoeffding_monotone():
    ps = np.linspace(0.5, 1.0, 21)
    Ns = range(1, 60)
    grid = np.array([[hoeffding_bound(p, n) for n in Ns] for p in ps])
    assert np.all(np.diff(grid, axis=0) >= 0) and np.all(np.diff(grid, axis=1) >= 0)


def test_normal_cdf():
    assert normal_cdf(0.0) == 0.5
    assert abs(normal_cdf(1.0) - 0.841344746) < 1e-7
    assert per_sample_alignment_p(1.0, NoiseChannel(signal=1.0)) == pytest.approx(0.841344746, abs=1e-7)
    assert per_sample_alignment_p(-2.0, NoiseChannel(signal=1.0, sigma=2.0)) == pytest.approx(0.841344746, abs=1e-7)
    assert per_sample_alignment_p(1e3, NoiseChannel(signal=1.0)) == 1.0


@given(st.floats(1e-6, 50), st.floats(0.1, 10), st.sampled_from(["gaussian", "student_t"]))
def test_alignment_above_half(g, sigma, noise):
    ch = NoiseChannel(signal=1.0, noise=noise, sigma=sigma, nu=2.0 if noise == "student_t" else None)
    assert per_sample_alignment_p(g, ch) > 0.5


def test_channel_validation():
    with pytest.raises(ValueError):
        per_sample_alignment_p(0.0, NoiseChannel(signal=1.0))
    for kw in (dict(p=0.5), dict(p=1.2), dict(signal=0.0), dict(signal=1.0, sigma=0.0), dict(signal=1.0, noise="student_t"), dict(p=0.7, true_sign=0)):
        with pytest.raises(ValueError):
            NoiseChannel(**kw)


def test_exact_binomial():
    p, N = 0.6, 25
    direct = sum(math.comb(N, k) * p**k * (1 - p) ** (N - k) for k in range(13, 26))
    assert exact_binomial_success(p, N) == pytest.approx(direct, rel=1e-12)
    # even N: a 2-2 split is a failure
    assert exact_binomial_success(0.5, 4) == pytest.approx(5 / 16)


@pytest.mark.parametrize("p", [0.55, 0.6, 0.7, 0.9])
def test_exact_monotone_in_odd_n(p):
    vals = [exact_binomial_success(p, n) for n in range(1, 102, 2)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert all(v >= hoeffding_bound(p, n) for v, n in zip(vals, range(1, 102, 2)))


def test_simulation_examples():
    assert simulate_vote_success(NoiseChannel(p=1.0), 5, 3000, 0).rate == 1.0
    sim = simulate_vote_success(NoiseChannel(p=0.6), 25, 100_000, 1)
    assert sim.rate >= hoeffding_bound(0.6, 25)
    lo, hi = sim.interval
    assert lo <= exact_binomial_success(0.6, 25) <= hi


def test_simulation_determinism_and_chunking():
    ch = NoiseChannel(p=0.7)
    a = simulate_vote_success(ch, 5, 2 * CHUNK_TRIALS + 17, 3)
    assert a == simulate_vote_success(ch, 5, 2 * CHUNK_TRIALS + 17, 3)
    # the first chunk's result is a prefix of the longer run
    short = simulate_vote_success(ch, 5, CHUNK_TRIALS, 3)
    long = simulate_vote_success(ch, 5, 2 * CHUNK_TRIALS, 3)
    assert short.successes <= long.successes


def test_even_n_ties_fail():
    # with p = 1/2 + tiny and N = 2 about half the draws tie
    sim = simulate_vote_success(NoiseChannel(p=0.5000001), 2, 20_000, 0)
    assert sim.rate == pytest.approx(0.25, abs=0.015)


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi and hi - 0.5 == pytest.approx(0.5 - lo)
    assert wilson_interval(100, 100)[1] == 1.0


def test_mean_vs_majority():
    heavy = compare_mean_vs_majority(NoiseChannel(signal=0.2, noise="student_t", nu=2.0), 25, 100_000, 0)
    assert heavy.rate_majority > heavy.rate_mean and heavy.diff_interval[0] > 0
    one = compare_mean_vs_majority(NoiseChannel(signal=0.2, noise="student_t", nu=2.0), 1, 20_000, 0)
    assert one.rate_majority == one.rate_mean and one.diff == 0


def test_bound_grid_csv(tmp_path):
    rows = bound_grid([0.6], [1, 5], 2000, 0)
    write_bound_csv(rows, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "channel,N,trials,empirical,wilson_lo,wilson_hi,exact_binomial,hoeffding"
    assert len(lines) == 3
