"""Loading a corpus from disk into per-region patch banks, and epoch sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..seeding import substream
from .records import PatientRecord, read_manifest
from .sampling import Bag, Sequence, form_bags, sample_sequences, subtype_index
from .segmentation import (
    DEFAULT_BLUR_RADIUS,
    DEFAULT_MIN_COVERAGE,
    Patches,
    extract_patches,
    segment_tissue,
)
from .synthetic import DESCRIPTOR_NAME, MANIFEST_NAME


@dataclass
class DataConfig:
    """Patch geometry and preprocessing applied when a corpus is loaded."""

    S: int = 256
    p: int = 32
    blur_radius: float = DEFAULT_BLUR_RADIUS
    min_coverage: float = DEFAULT_MIN_COVERAGE
    split_ratio: float = 0.8
    balance: bool = True

    def __post_init__(self):
        if self.S < 1 or self.p < 1:
            raise ValueError("S and p must be positive")
        if not 0.0 <= self.min_coverage <= 1.0:
            raise ValueError("min_coverage must lie in [0, 1]")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")


@dataclass
class Corpus:
    root: Path
    patients: list[PatientRecord]
    descriptor: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root: str | Path, manifest: str | Path | None = None) -> "Corpus":
        root = Path(root)
        manifest = Path(manifest) if manifest is not None else root / MANIFEST_NAME
        descriptor_path = root / DESCRIPTOR_NAME
        descriptor = json.loads(descriptor_path.read_text()) if descriptor_path.exists() else {}
        return cls(root, read_manifest(manifest), descriptor)

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(f"unknown patient {patient_id!r}")

    def split(self, name: str) -> list[PatientRecord]:
        return [p for p in self.patients if p.split == name]

    def read_image(self, slide_path: str) -> np.ndarray:
        with Image.open(self.root / slide_path) as im:
            return np.asarray(im.convert("RGB"))


class PatchBank:
    """Segmented, tiled patches for every region of a set of patients.

    Keys are ``(patient_id, alignment_group, modality)``.
    """

    def __init__(self, corpus: Corpus, patients: list[PatientRecord], cfg: DataConfig):
        self.cfg = cfg
        self.patients = {p.patient_id: p for p in patients}
        self.patches: dict[tuple[str, str, str], Patches] = {}
        for patient in patients:
            for region in patient.regions:
                image = corpus.read_image(region.slide_path)
                mask = segment_tissue(image, cfg.blur_radius)
                self.patches[(patient.patient_id, region.alignment_group, region.modality)] = (
                    extract_patches(image, mask, cfg.p, cfg.min_coverage, region.region_id)
                )

    def groups(self, patient_id: str) -> dict[str, dict[str, Patches]]:
        out: dict[str, dict[str, Patches]] = {}
        for (pid, group, modality), patches in self.patches.items():
            if pid == patient_id:
                out.setdefault(group, {})[modality] = patches
        return dict(sorted(out.items()))

    def bags(self, rng: np.random.Generator, modalities: tuple[str, ...]) -> list[Bag]:
        """Re-sample sequences and bags for every aligned region, in sorted
        patient/group order so the draws depend only on ``rng``."""
        bags: list[Bag] = []
        for pid in sorted(self.patients):
            label = self.patients[pid].subtype
            for group, by_modality in self.groups(pid).items():
                if any(m not in by_modality for m in modalities):
                    continue
                seqs = {
                    m: sample_sequences(
                        by_modality[m], self.cfg.S, rng, modality=m, patient_id=pid,
                        alignment_group=group,
                    )
                    for m in modalities
                }
                bags.extend(form_bags(seqs, rng, label, patient_id=pid, alignment_group=group))
        return bags

    def sequences(self, rng: np.random.Generator, modality: str = "HES") -> dict[str, list[Sequence]]:
        """All sequences of one modality per patient."""
        out: dict[str, list[Sequence]] = {}
        for pid in sorted(self.patients):
            seqs: list[Sequence] = []
            for group, by_modality in self.groups(pid).items():
                if modality in by_modality:
                    seqs.extend(
                        sample_sequences(
                            by_modality[modality], self.cfg.S, rng, modality=modality,
                            patient_id=pid, alignment_group=group,
                        )
                    )
            out[pid] = seqs
        return out


def epoch_bags(bank: PatchBank, seed: int, epoch: int, modalities: tuple[str, ...]) -> list[Bag]:
    return bank.bags(substream(seed, "bags", epoch), modalities)


def stack_bags(bags: list[Bag], modalities: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
    """``(B, M, S, p, p, 3)`` uint8 pixels and ``(B,)`` integer labels."""
    x = np.stack([np.stack([b.sequences[m].pixels for m in modalities]) for b in bags])
    y = np.array([subtype_index(b.label) for b in bags], dtype=np.int64)
    return x, y


def stack_sequences(seqs: list[Sequence]) -> np.ndarray:
    return np.stack([s.pixels for s in seqs])
