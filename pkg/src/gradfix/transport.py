"""Mask construction and masked task-vector transport onto a target model.

Two application conventions exist and are never inferred:

* ``gradient_signs`` reference: the mask compares ``sign(tau_A)`` with the
  target gradient, which points uphill, so the update is *subtracted*
  (``theta_B - delta``).
* ``oracle_tau_B`` reference: the mask compares with the fine-tuned target
  task vector, which already points downhill, so the update is *added*
  (``theta_B + delta``).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .datasets import LabeledDataset
from .errors import NumericError
from .model import ModelSpec, loss, loss_and_grad
from .param_space import (
    MaskVector,
    ParamVector,
    SignVector,
    TaskVector,
    add_scaled,
    apply_mask,
    atomic_write_bytes,
    check_congruent,
)

__all__ = [
    "MASK_STRATEGIES",
    "REFERENCES",
    "TransportConfig",
    "mask_agreement",
    "mask_force_agreement",
    "mask_random",
    "build_mask",
    "build_delta",
    "transport",
    "transport_direction",
    "descent_check",
    "taylor_probe",
    "write_taylor_csv",
    "DEFAULT_ALPHA_GRID",
]

MASK_STRATEGIES = ("agreement", "force_agreement", "random")
REFERENCES = ("gradient_signs", "oracle_tau_B")
DEFAULT_ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass(frozen=True)
class TransportConfig:
    alpha: float = 1.0
    mask_strategy: str = "agreement"
    reference: str = "gradient_signs"
    aggregation: str = "majority"
    seed: int | None = None

    def __post_init__(self):
        _check_alpha(self.alpha)
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ValueError(f"mask_strategy must be one of {MASK_STRATEGIES}")
        if self.reference not in REFERENCES:
            raise ValueError(f"reference must be one of {REFERENCES}")
        if self.aggregation not in ("majority", "mean"):
            raise ValueError("aggregation must be 'majority' or 'mean'")
        if self.mask_strategy == "random" and self.seed is None:
            raise ValueError("random masks need a seed")


def _check_alpha(alpha):
    try:
        ok = math.isfinite(alpha) and 0 < alpha <= 1
    except TypeError:
        ok = False
    if not ok:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")


def mask_agreement(sign_tau_A: SignVector, ref_signs: SignVector) -> MaskVector:
    """1 where both signs are nonzero and equal, else 0."""
    check_congruent(sign_tau_A, ref_signs)
    a, r = sign_tau_A.values, ref_signs.values
    m = ((a == r) & (a != 0)).astype(np.int8)
    return sign_tau_A.like(m, cls=MaskVector, kind="binary")


def mask_force_agreement(sign_tau_A: SignVector, ref_signs: SignVector) -> MaskVector:
    """``sign(tau_A) * ref``: keeps agreeing entries and flips disagreeing ones."""
    check_congruent(sign_tau_A, ref_signs)
    m = (sign_tau_A.values.astype(np.int16) * ref_signs.values).astype(np.int8)
    return sign_tau_A.like(m, cls=MaskVector, kind="signed")


def mask_random(template: SignVector, seed: int) -> MaskVector:
    """Agreement mask against reference signs drawn uniformly from {-1, +1}."""
    rng = np.random.default_rng(seed)
    ref = (2 * rng.integers(0, 2, size=template.size) - 1).astype(np.int8)
    return mask_agreement(template, template.like(ref, cls=SignVector))


def build_mask(strategy: str, sign_tau_A: SignVector, ref_signs: SignVector | None = None, seed: int | None = None) -> MaskVector:
    if strategy == "agreement":
        return mask_agreement(sign_tau_A, ref_signs)
    if strategy == "force_agreement":
        return mask_force_agreement(sign_tau_A, ref_signs)
    if strategy == "random":
        if seed is None:
            raise ValueError("random masks need a seed")
        return mask_random(sign_tau_A, seed)
    raise ValueError(f"unknown mask strategy {strategy!r}")


def build_delta(mask: MaskVector, tau_A: TaskVector, alpha: float) -> TaskVector:
    """``alpha * (mask * tau_A)``; alpha is applied here and nowhere else."""
    _check_alpha(alpha)
    masked = apply_mask(mask, tau_A)
    return masked.like(float(alpha) * masked.values)


def transport_direction(reference: str) -> float:
    """+1 for the oracle convention, -1 for the gradient convention."""
    if reference == "gradient_signs":
        return -1.0
    if reference == "oracle_tau_B":
        return 1.0
    raise ValueError(f"reference must be one of {REFERENCES}, got {reference!r}")


def transport(theta_B: ParamVector, delta: TaskVector, reference: str) -> ParamVector:
    return add_scaled(theta_B, delta, transport_direction(reference))


def descent_check(g: ParamVector, delta: TaskVector) -> float:
    """Inner product ``<g, delta>``; nonnegative means ``theta - delta`` descends to first order."""
    check_congruent(g, delta)
    return float(np.dot(g.values, delta.values))


def taylor_probe(theta_B: ParamVector, delta: TaskVector, alphas, data: LabeledDataset, spec: ModelSpec):
    """Measured ``L(theta_B - a*delta)`` against ``L(theta_B) - a*<g, delta>``.

    Returns a list of ``(alpha, measured, predicted)`` rows.
    """
    alphas = [float(a) for a in alphas]
    if not alphas or any(a <= 0 or not math.isfinite(a) for a in alphas):
        raise ValueError("alphas must be positive and finite")
    if alphas != sorted(alphas):
        raise ValueError("alphas must be sorted ascending")
    base, g = loss_and_grad(theta_B, data, spec)
    slope = descent_check(g, delta)
    rows = []
    for a in alphas:
        measured = loss(add_scaled(theta_B, delta, -a), data, spec)
        predicted = base - a * slope
        if not (math.isfinite(measured) and math.isfinite(predicted)):
            raise NumericError(f"non-finite loss in taylor probe at alpha={a}")
        rows.append((a, measured, predicted))
    return rows


def write_taylor_csv(rows, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "measured", "predicted"])
    for a, m, p in rows:
        writer.writerow([repr(a), repr(m), repr(p)])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
