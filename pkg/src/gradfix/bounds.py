"""Monte-Carlo checks of majority-vote sign recovery against the Hoeffding bound.

A channel emits ``N`` independent noisy signs of a fixed true sign.  The
majority vote succeeds when strictly more than half the samples agree with the
true sign; an exact tie counts as a failure, matching the ``sign = 0`` outcome
of the vote estimator.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .param_space import atomic_write_bytes

__all__ = [
    "NoiseChannel",
    "hoeffding_bound",
    "normal_cdf",
    "per_sample_alignment_p",
    "exact_binomial_success",
    "wilson_interval",
    "simulate_vote_success",
    "compare_mean_vs_majority",
    "VoteSimulation",
    "PairedComparison",
    "bound_grid",
    "write_bound_csv",
    "CHUNK_TRIALS",
]

# Trials are drawn in fixed-size chunks; chunk k uses the substream (seed, k),
# so any split of chunks across workers reproduces the serial result.
CHUNK_TRIALS = 4096


@dataclass(frozen=True)
class NoiseChannel:
    """Either a direct per-sample correct-sign probability ``p`` or a parametric
    ``signal + noise`` model with ``noise`` in {"gaussian", "student_t"}."""

    true_sign: int = 1
    p: float | None = None
    signal: float | None = None
    noise: str = "gaussian"
    sigma: float = 1.0
    nu: float | None = None

    def __post_init__(self):
        if self.true_sign not in (-1, 1):
            raise ValueError("true_sign must be -1 or +1")
        if self.p is not None:
            if self.signal is not None:
                raise ValueError("give either p or a parametric signal, not both")
            if not (0.5 < self.p <= 1):
                raise ValueError(f"p must lie in (1/2, 1], got {self.p}")
            return
        if self.signal is None:
            raise ValueError("a channel needs p or signal")
        if self.signal == 0:
            raise ValueError("signal must be nonzero: its sign is undefined")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.noise == "student_t":
            if self.nu is None or not self.nu > 0:
                raise ValueError("student_t noise needs nu > 0")
        elif self.noise != "gaussian":
            raise ValueError(f"unknown noise {self.noise!r}")

    @property
    def parametric(self) -> bool:
        return self.p is None

    def alignment_p(self) -> float:
        return self.p if self.p is not None else per_sample_alignment_p(self.signal, self)

    def describe(self) -> str:
        if self.p is not None:
            return f"p={self.p!r}"
        extra = f",nu={self.nu!r}" if self.noise == "student_t" else ""
        return f"{self.noise}(signal={self.signal!r},sigma={self.sigma!r}{extra})"

    def draw(self, rng: np.random.Generator, trials: int, N: int) -> np.ndarray:
        """Per-sample observations, shape ``(trials, N)``, oriented so that a
        positive value agrees with ``true_sign``."""
        if self.p is not None:
            return np.where(rng.random((trials, N)) < self.p, 1.0, -1.0)
        if self.noise == "gaussian":
            eps = rng.standard_normal((trials, N))
        else:
            eps = rng.standard_t(self.nu, size=(trials, N))
        return abs(self.signal) + self.sigma * eps


def hoeffding_bound(p: float, N: int) -> float:
    """``1 - exp(-2 N (p - 1/2)^2)``: lower bound on majority-vote success."""
    if not (0.5 <= p <= 1):
        raise ValueError(f"p must lie in [1/2, 1], got {p}")
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    return -math.expm1(-2.0 * N * (p - 0.5) ** 2)


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def per_sample_alignment_p(g: float, noise: NoiseChannel) -> float:
    """Probability that one noisy sample ``g + eps`` has the sign of ``g``."""
    if g == 0:
        raise ValueError("g = 0 has no sign")
    z = abs(g) / noise.sigma
    if noise.noise == "gaussian":
        return normal_cdf(z)
    return float(stats.t.cdf(z, noise.nu))


def exact_binomial_success(p: float, N: int) -> float:
    """P[Binomial(N, p) > N/2]; ties fail."""
    return float(stats.binom.sf(N // 2, N, p))


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def _chunks(trials):
    full, rest = divmod(trials, CHUNK_TRIALS)
    return [CHUNK_TRIALS] * full + ([rest] if rest else [])


@dataclass(frozen=True)
class VoteSimulation:
    successes: int
    trials: int
    interval: tuple[float, float]

    @property
    def rate(self) -> float:
        return self.successes / self.trials


def simulate_vote_success(channel: NoiseChannel, N: int, trials: int, seed: int) -> VoteSimulation:
    if N < 1 or trials < 1:
        raise ValueError("N and trials must be positive")
    wins = 0
    for k, size in enumerate(_chunks(trials)):
        rng = np.random.default_rng([seed, k])
        obs = channel.draw(rng, size, N)
        wins += int(np.count_nonzero(np.sign(obs).sum(axis=1) > 0))
    return VoteSimulation(wins, trials, wilson_interval(wins, trials))


@dataclass(frozen=True)
class PairedComparison:
    rate_majority: float
    rate_mean: float
    diff: float
    diff_interval: tuple[float, float]
    trials: int


def compare_mean_vs_majority(channel: NoiseChannel, N: int, trials: int, seed: int) -> PairedComparison:
    """Both aggregators on the same draws; the interval is a paired normal
    interval on the per-trial success difference (majority minus mean)."""
    if N < 1 or trials < 2:
        raise ValueError("need N >= 1 and trials >= 2")
    maj = mean = 0
    sq = 0
    for k, size in enumerate(_chunks(trials)):
        rng = np.random.default_rng([seed, k])
        obs = channel.draw(rng, size, N)
        a = np.sign(obs).sum(axis=1) > 0
        b = obs.sum(axis=1) > 0
        maj += int(a.sum())
        mean += int(b.sum())
        sq += int(np.count_nonzero(a != b))
    d = (maj - mean) / trials
    var = (sq / trials - d * d) * trials / (trials - 1)
    half = 1.959963984540054 * math.sqrt(max(var, 0.0) / trials)
    return PairedComparison(maj / trials, mean / trials, d, (d - half, d + half), trials)


def bound_grid(ps, Ns, trials: int, seed: int):
    """Rows for every ``(p, N)`` cell; each cell gets its own seed offset."""
    rows = []
    for i, p in enumerate(ps):
        for j, N in enumerate(Ns):
            sim = simulate_vote_success(NoiseChannel(p=p), N, trials, seed + 1000 * i + j)
            rows.append({
                "channel": f"p={p!r}",
                "N": N,
                "trials": trials,
                "empirical": sim.rate,
                "wilson_lo": sim.interval[0],
                "wilson_hi": sim.interval[1],
                "exact_binomial": exact_binomial_success(p, N),
                "hoeffding": hoeffding_bound(p, N),
            })
    return rows


def write_bound_csv(rows, path) -> None:
    fields = ["channel", "N", "trials", "empirical", "wilson_lo", "wilson_hi", "exact_binomial", "hoeffding"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
