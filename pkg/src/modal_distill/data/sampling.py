"""Sequence and bag sampling from region patches."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .segmentation import Patches

SUBTYPES = ("ABC", "GCB")


def subtype_index(label: str) -> int:
    try:
        return SUBTYPES.index(label)
    except ValueError:
        raise ValueError(f"unknown subtype {label!r}, expected one of {SUBTYPES}") from None


@dataclass(frozen=True)
class Sequence:
    """``S`` patches drawn from one region of one modality."""

    pixels: np.ndarray  # (S, p, p, 3) uint8
    grid: np.ndarray  # (S, 2) grid positions inside the region
    modality: str
    region_id: str = ""
    patient_id: str = ""
    alignment_group: str = ""
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class Bag:
    """One sequence per modality from the same aligned region."""

    sequences: dict[str, Sequence]
    label: str
    patient_id: str = ""
    alignment_group: str = ""

    @property
    def modalities(self) -> list[str]:
        return list(self.sequences)


def sample_sequences(
    patches: Patches,
    S: int,
    rng: np.random.Generator,
    *,
    modality: str = "",
    patient_id: str = "",
    alignment_group: str = "",
) -> list[Sequence]:
    """Split a region's patches into ``floor(N / S)`` disjoint random sequences.

    Patches are drawn uniformly without replacement until fewer than ``S``
    remain; the remainder is discarded.
    """
    if S < 1:
        raise ValueError("sequence length S must be >= 1")
    n = len(patches)
    count = n // S
    if count == 0:
        return []
    order = rng.permutation(n)
    sequences = []
    for i in range(count):
        idx = np.sort(order[i * S : (i + 1) * S])
        sequences.append(
            Sequence(
                pixels=patches.pixels[idx],
                grid=patches.grid[idx],
                modality=modality,
                region_id=patches.region_id,
                patient_id=patient_id,
                alignment_group=alignment_group,
                indices=idx,
            )
        )
    return sequences


def form_bags(
    sequences_by_modality: Mapping[str, list[Sequence]],
    rng: np.random.Generator,
    label: str,
    *,
    patient_id: str = "",
    alignment_group: str = "",
) -> list[Bag]:
    """Pair sequences across modalities without replacement.

    The bag count is the smallest per-modality sequence count: once one
    modality runs out no further bag can be formed.
    """
    if not sequences_by_modality:
        return []
    subtype_index(label)
    count = min(len(seqs) for seqs in sequences_by_modality.values())
    if count == 0:
        return []
    picks = {
        m: rng.permutation(len(seqs))[:count] for m, seqs in sequences_by_modality.items()
    }
    return [
        Bag(
            sequences={m: sequences_by_modality[m][picks[m][i]] for m in sequences_by_modality},
            label=label,
            patient_id=patient_id,
            alignment_group=alignment_group,
        )
        for i in range(count)
    ]
