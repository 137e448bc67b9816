"""Patient records, the slide manifest, class balancing and splits."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .sampling import SUBTYPES, subtype_index

MANIFEST_COLUMNS = (
    "patient_id",
    "subtype",
    "modality",
    "slide_path",
    "region_id",
    "alignment_group",
    "x",
    "y",
    "width",
    "height",
    "split",
)
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Region:
    region_id: str
    slide_path: str
    modality: str
    alignment_group: str
    x: int
    y: int
    width: int
    height: int


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    subtype: str
    regions: tuple[Region, ...] = field(default_factory=tuple)
    split: str = "train"

    def __post_init__(self):
        subtype_index(self.subtype)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def modalities(self) -> set[str]:
        return {r.modality for r in self.regions}

    def regions_for(self, modality: str) -> list[Region]:
        return [r for r in self.regions if r.modality == modality]

    def alignment_groups(self) -> dict[str, dict[str, Region]]:
        groups: dict[str, dict[str, Region]] = defaultdict(dict)
        for r in self.regions:
            groups[r.alignment_group][r.modality] = r
        return dict(sorted(groups.items()))


def read_manifest(path: str | Path) -> list[PatientRecord]:
    """Parse a slide manifest CSV into patient records (file order kept)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(
                f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}, "
                f"got {','.join(reader.fieldnames or [])}"
            )
        rows = list(reader)

    patients: dict[str, dict] = {}
    for line, row in enumerate(rows, start=2):
        pid = row["patient_id"]
        entry = patients.setdefault(
            pid, {"subtype": row["subtype"], "split": row["split"], "regions": []}
        )
        if entry["subtype"] != row["subtype"] or entry["split"] != row["split"]:
            raise ValueError(f"{path}:{line}: inconsistent subtype/split for patient {pid}")
        entry["regions"].append(
            Region(
                region_id=row["region_id"],
                slide_path=row["slide_path"],
                modality=row["modality"],
                alignment_group=row["alignment_group"],
                x=int(row["x"]),
                y=int(row["y"]),
                width=int(row["width"]),
                height=int(row["height"]),
            )
        )

    records = []
    for pid, entry in patients.items():
        records.append(PatientRecord(pid, entry["subtype"], tuple(entry["regions"]), entry["split"]))
        check_alignment(records[-1])
    return records


def write_manifest(path: str | Path, patients: list[PatientRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for patient in patients:
            for r in patient.regions:
                writer.writerow(
                    [
                        patient.patient_id,
                        patient.subtype,
                        r.modality,
                        r.slide_path,
                        r.region_id,
                        r.alignment_group,
                        r.x,
                        r.y,
                        r.width,
                        r.height,
                        patient.split,
                    ]
                )


def check_alignment(patient: PatientRecord) -> None:
    for group, regions in patient.alignment_groups().items():
        sizes = {(r.width, r.height) for r in regions.values()}
        if len(sizes) > 1:
            raise ValueError(
                f"patient {patient.patient_id}: alignment group {group} has mismatched sizes {sizes}"
            )


def _by_class(patients: list[PatientRecord]) -> dict[str, list[PatientRecord]]:
    groups: dict[str, list[PatientRecord]] = {s: [] for s in SUBTYPES}
    for p in patients:
        groups[p.subtype].append(p)
    return groups


def balance_classes(patients: list[PatientRecord], rng: np.random.Generator) -> list[PatientRecord]:
    """Trim the dominant class to the size of the minority class.

    The retained patients of the dominant class are a uniform random subset;
    input order is preserved in the output.
    """
    groups = _by_class(patients)
    counts = {s: len(g) for s, g in groups.items()}
    if min(counts.values()) == 0:
        raise ValueError(f"class balancing needs both subtypes, got counts {counts}")
    target = min(counts.values())
    keep: set[str] = set()
    for subtype in SUBTYPES:
        members = groups[subtype]
        chosen = rng.choice(len(members), size=target, replace=False) if len(members) > target else range(target)
        keep.update(members[i].patient_id for i in chosen)
    return [p for p in patients if p.patient_id in keep]


def train_count(n: int, ratio: float) -> int:
    """Patients of one class sent to train: nearest integer to ``n * ratio``,
    halves going to train, with at least one patient left on each side."""
    # epsilon absorbs binary representation error of ratios such as 0.8
    k = math.floor(n * ratio + 0.5 + 1e-9)
    return min(max(k, 1), n - 1)


def split_patients(
    patients: list[PatientRecord], ratio: float, rng: np.random.Generator
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Stratified random train/val split; returned records carry the new split tag."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    train_ids: set[str] = set()
    for subtype, members in _by_class(patients).items():
        if len(members) < 2:
            raise ValueError(f"need at least 2 {subtype} patients to split, got {len(members)}")
        chosen = rng.permutation(len(members))[: train_count(len(members), ratio)]
        train_ids.update(members[i].patient_id for i in chosen)
    train = [replace(p, split="train") for p in patients if p.patient_id in train_ids]
    val = [replace(p, split="val") for p in patients if p.patient_id not in train_ids]
    return train, val
