"""Gradient-sign estimation at the target model from a few labeled samples."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .datasets import LabeledDataset
from .errors import EmptyDatasetError
from .model import ModelSpec, per_sample_grads
from .param_space import (
    ParamVector,
    SignVector,
    TaskVector,
    atomic_write_bytes,
    save_signs,
    sign_of,
)

__all__ = ["SignEstimate", "vote_counts", "majority_vote_signs", "mean_signs", "estimate_signs", "oracle_signs", "save_sign_estimate"]


@dataclass(frozen=True, eq=False)
class SignEstimate:
    """Estimated gradient signs plus the raw vote tallies.

    ``vote_sum`` is the per-coordinate sum of per-sample signs and
    ``n_votes`` the number of nonzero per-sample signs; both are zero for the
    ``mean`` aggregation.
    """

    signs: SignVector
    vote_sum: np.ndarray
    n_votes: np.ndarray
    n_samples: int
    aggregation: str

    @property
    def vote_margin(self) -> np.ndarray:
        return np.abs(self.vote_sum)

    def empirical_p(self) -> np.ndarray:
        """Fraction of nonzero votes agreeing with the majority, per coordinate.

        Coordinates with no votes report 0.5.
        """
        agree = (self.n_votes + self.vote_margin) / 2
        return np.divide(agree, self.n_votes, out=np.full(agree.shape, 0.5), where=self.n_votes > 0)

    def margin_histograms(self) -> list[tuple[str, int, int]]:
        """Per-segment ``(segment, margin, count)`` triples, sorted by margin."""
        out = []
        margin = self.vote_margin
        for name in self.signs.names:
            counts = np.bincount(margin[self.signs.segment_slice(name)])
            out.extend((name, int(m), int(c)) for m, c in enumerate(counts) if c)
        return out


def _check_subset(subset):
    if len(subset) == 0:
        raise EmptyDatasetError("sign estimation needs a non-empty subset")


def vote_counts(blocks, d: int, zero_tol: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Sum of per-sample signs and count of nonzero signs per coordinate.

    ``blocks`` yields ``(n_chunk, d)`` arrays of per-sample gradients.
    """
    votes = np.zeros(d, dtype=np.int64)
    nonzero = np.zeros(d, dtype=np.int64)
    for block in blocks:
        s = (block > zero_tol).astype(np.int64) - (block < -zero_tol).astype(np.int64)
        votes += s.sum(axis=0)
        nonzero += np.count_nonzero(s, axis=0)
    return votes, nonzero


def majority_vote_signs(theta_B: ParamVector, subset: LabeledDataset, spec: ModelSpec, zero_tol: float = 0.0, chunk_size: int = 256) -> SignEstimate:
    """Per-coordinate majority vote over per-sample gradient signs.

    Votes are integer counters updated chunk by chunk, so the result does not
    depend on sample order and never holds all N gradients in memory.  Split
    votes give sign 0.
    """
    _check_subset(subset)
    votes, nonzero = vote_counts(per_sample_grads(theta_B, subset, spec, chunk_size=chunk_size), theta_B.size, zero_tol)
    signs = theta_B.like(np.sign(votes).astype(np.int8), cls=SignVector)
    return SignEstimate(signs, votes, nonzero, len(subset), "majority")


def mean_signs(theta_B: ParamVector, subset: LabeledDataset, spec: ModelSpec, zero_tol: float = 0.0, chunk_size: int = 256) -> SignEstimate:
    """Sign of the averaged per-sample gradients (the outlier-sensitive baseline)."""
    _check_subset(subset)
    total = np.zeros(theta_B.size)
    for block in per_sample_grads(theta_B, subset, spec, chunk_size=chunk_size):
        total += block.sum(axis=0)
    mean = theta_B.like(total / len(subset), cls=ParamVector)
    zeros = np.zeros(theta_B.size, dtype=np.int64)
    return SignEstimate(sign_of(mean, zero_tol), zeros, zeros.copy(), len(subset), "mean")


def estimate_signs(theta_B, subset, spec, aggregation="majority", zero_tol=0.0) -> SignEstimate:
    if aggregation == "majority":
        return majority_vote_signs(theta_B, subset, spec, zero_tol)
    if aggregation == "mean":
        return mean_signs(theta_B, subset, spec, zero_tol)
    raise ValueError(f"aggregation must be 'majority' or 'mean', got {aggregation!r}")


def oracle_signs(tau_B: TaskVector, zero_tol: float = 0.0) -> SignVector:
    """Signs of the fine-tuned target task vector."""
    return sign_of(tau_B, zero_tol)


def save_sign_estimate(est: SignEstimate, path) -> str:
    """Write the GFXS sign file and a ``<path>.margins.csv`` sidecar; returns the sidecar path."""
    save_signs(est.signs, path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["segment", "margin", "count"])
    writer.writerows(est.margin_histograms())
    sidecar = f"{path}.margins.csv"
    atomic_write_bytes(sidecar, buf.getvalue().encode("utf-8"))
    return sidecar
