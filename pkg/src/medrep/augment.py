"""Neighbor-replacement trajectory augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .neighbors import NeighborSets
from .trajectory import PatientTrajectory
from .vocab import NUM_SPECIALS, Domain

log = logging.getLogger(__name__)

SWEEP_FACTORS = (1, 2, 3, 5, 10, 15, 20)


@dataclass(frozen=True)
class AugmentConfig:
    replace_prob: float = 0.15
    factor: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.replace_prob <= 1.0:
            raise ValueError(f"replace_prob must lie in [0, 1], got {self.replace_prob}")
        if int(self.factor) != self.factor or self.factor < 1:
            raise ValueError(f"factor must be a positive integer, got {self.factor}")


def eligible_positions(t: PatientTrajectory, domains: Optional[np.ndarray] = None) -> np.ndarray:
    """Positions holding real concepts ([PAD]/[CLS]/[SEP]/[UNK] excluded)."""
    mask = t.concept >= NUM_SPECIALS
    if domains is not None:
        mask &= domains[np.minimum(t.concept, len(domains) - 1)] != Domain.SPECIAL
    return mask


def augment_trajectory(
    t: PatientTrajectory,
    sets: NeighborSets,
    config: AugmentConfig,
    rng: np.random.Generator,
    domains: Optional[np.ndarray] = None,
) -> PatientTrajectory:
    """Replace each eligible position with probability p by a uniform draw from its neighbor row.

    ``domains`` maps dense index to domain; when given, the domain stream
    follows the replacement concept.
    """
    n = len(t)
    picks = rng.random(n) < config.replace_prob
    slots = rng.integers(0, sets.M, size=n)
    selected = np.flatnonzero(picks & eligible_positions(t, domains))
    concept = t.concept.copy()
    domain = t.domain.copy()
    if len(selected):
        src = concept[selected]
        rows = sets.table[src]
        indexed = rows[:, 0] >= 0
        if not np.all(indexed):
            log.info("no neighbor row for %d selected concept(s); left unchanged", int(np.sum(~indexed)))
        selected = selected[indexed]
        concept[selected] = rows[indexed, slots[selected]]
        if domains is not None:
            domain[selected] = domains[concept[selected]]
    return replace(t, concept=concept, domain=domain, age=t.age.copy(), visit=t.visit.copy(),
                   record=t.record.copy(), labels=dict(t.labels))


def copy_rng(seed: int, index: int, copy: int) -> np.random.Generator:
    """Independent stream for augmented copy ``copy`` of trajectory ``index``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, copy)))


def augment_dataset(
    trajectories: Sequence[PatientTrajectory],
    sets: NeighborSets,
    config: AugmentConfig,
    domains: Optional[np.ndarray] = None,
) -> list[PatientTrajectory]:
    """Each original followed by ``factor - 1`` augmented copies; labels are copied unchanged."""
    out = []
    for i, t in enumerate(trajectories):
        out.append(t)
        for c in range(1, config.factor):
            out.append(augment_trajectory(t, sets, config, copy_rng(config.seed, i, c), domains))
    return out
