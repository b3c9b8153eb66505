"""Poisson encapsulation statistics and the analytic post-sort oracle.

Everything here is closed-form: occupancy probabilities for droplet
loading, throughput planning, and the expected purity/enrichment of a
sort characterised by (prevalence, sensitivity, false-accept rate).
The sorter module's Monte-Carlo runs are cross-checked against these
formulas in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class OccupancyModel:
    """Mean number of objects per droplet for one object type."""

    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    def pmf(self, k: int) -> float:
        return poisson_pmf(k, self.lam)


@dataclass(frozen=True)
class JointOccupancy:
    """Independent mean occupancies for two co-encapsulated object types."""

    lambda_a: float
    lambda_b: float

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_b < 0:
            raise ValueError("both occupancies must be >= 0")


@dataclass(frozen=True)
class SortOutcomeModel:
    """Rates defining a binary sort over a droplet stream.

    prevalence: fraction of droplets that truly belong to the target class.
    sensitivity: P(accept | target droplet).
    false_accept: P(accept | non-target droplet).
    """

    prevalence: float
    sensitivity: float
    false_accept: float

    def __post_init__(self):
        for name in ("prevalence", "sensitivity", "false_accept"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class EnrichmentReport:
    purity_before: float
    purity_after: float
    factor: float
    accept_fraction: float
    fp_of_sorted: float


def poisson_pmf(k: int, lam: float) -> float:
    """P(K = k) for K ~ Poisson(lam).

    Computed in log space (k*ln(lam) - lam - lgamma(k+1)) so large k
    cannot overflow the lam**k / k! form.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0.0:
        return 1.0 if k == 0 else 0.0
    return math.exp(k * math.log(lam) - lam - math.lgamma(k + 1))


def joint_single_probability(j: JointOccupancy) -> float:
    """Probability that a droplet holds exactly one object of each type."""
    return poisson_pmf(1, j.lambda_a) * poisson_pmf(1, j.lambda_b)


def effective_throughput(physical_rate_hz: float, target_prob: float) -> float:
    """Rate of usable (target) droplets given the physical droplet rate."""
    if physical_rate_hz < 0:
        raise ValueError(f"rate must be >= 0, got {physical_rate_hz}")
    if not 0.0 <= target_prob <= 1.0:
        raise ValueError(f"probability must be in [0, 1], got {target_prob}")
    return physical_rate_hz * target_prob


def expected_post_sort(model: SortOutcomeModel) -> EnrichmentReport:
    """Analytic purity and enrichment after sorting with the given rates.

    accept_fraction = p*s + (1-p)*f and purity_after = p*s / accept_fraction;
    raises ValueError when nothing is ever accepted (purity undefined).
    """
    p, s, f = model.prevalence, model.sensitivity, model.false_accept
    accept_fraction = p * s + (1.0 - p) * f
    if accept_fraction == 0.0:
        raise ValueError("accept fraction is 0; post-sort purity is undefined")
    purity_after = p * s / accept_fraction
    factor = purity_after / p if p > 0 else float("inf")
    return EnrichmentReport(
        purity_before=p,
        purity_after=purity_after,
        factor=factor,
        accept_fraction=accept_fraction,
        fp_of_sorted=1.0 - purity_after,
    )


def enrichment_factor(before: float, after: float) -> float:
    """Target purity after sorting divided by purity before sorting."""
    if before <= 0.0:
        raise ValueError(f"purity before sorting must be > 0, got {before}")
    return after / before
