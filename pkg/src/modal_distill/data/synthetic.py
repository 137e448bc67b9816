"""Synthetic aligned multi-modal corpus with a controllable class signal.

Each patient gets ``regions_per_patient`` aligned regions. A region carries
a phenotype (ABC-like or GCB-like) that equals the patient label except in a
fixed number of discordant regions. Every modality renders the same tissue
and tumour layout in its own stain colour; inside the tumour area the
phenotype shifts the hue by ``strength * SIGNAL_AMPLITUDE`` along a
direction orthogonal to both luminance and the stain chroma, so the shift is
invisible to Otsu segmentation. ``noise`` scales a smooth hue nuisance
field, a per-region hue offset and per-pixel gaussian noise.

With ``localized_signal`` the tumour is an ellipse inside the tissue and the
surrounding non-tumour tissue carries smooth random-sign hue "decoys" of
comparable amplitude but without the tumour's saturation and texture, so
colour alone is not enough and a model has to find tumour areas.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..seeding import substream
from .records import PatientRecord, Region, write_manifest
from .sampling import SUBTYPES

DEFAULT_MODALITIES = ("HES", "BCL6", "CD10", "MUM1")
DESCRIPTOR_NAME = "corpus.json"
MANIFEST_NAME = "manifest.csv"

STAIN_COLORS = {
    "HES": (196.0, 128.0, 176.0),
    "BCL6": (176.0, 150.0, 120.0),
    "CD10": (150.0, 158.0, 196.0),
    "MUM1": (186.0, 138.0, 118.0),
}
BACKGROUND = 242.0
SIGNAL_AMPLITUDE = 72.0
TUMOUR_SATURATION = 28.0
LUMINANCE_TEXTURE = 12.0
HUE_FIELD = 30.0
REGION_HUE_OFFSET = 12.0
PIXEL_NOISE = 20.0
DECOY_HUE = 80.0


@dataclass
class SyntheticCorpusConfig:
    seed: int
    train_patients: dict[str, int] = field(default_factory=lambda: {"ABC": 20, "GCB": 20})
    test_patients: dict[str, int] = field(default_factory=lambda: {"ABC": 0, "GCB": 0})
    regions_per_patient: int = 5
    region_size: int = 128
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    signal_strength: dict[str, float] = field(default_factory=dict)
    noise: float = 0.5
    discordant_fraction: float = 0.0
    localized_signal: bool = False
    tumour_fraction: float = 0.35

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if not self.modalities or self.modalities[0] != "HES" or self.modalities.count("HES") != 1:
            raise ValueError("modalities: HES must appear exactly once, first")
        if len(self.modalities) < 2:
            raise ValueError("modalities: need at least one IHC modality")
        for name in ("train_patients", "test_patients"):
            counts = getattr(self, name)
            if set(counts) - set(SUBTYPES):
                raise ValueError(f"{name}: unknown subtype in {sorted(counts)}")
            counts = {s: int(counts.get(s, 0)) for s in SUBTYPES}
            if any(c < 0 for c in counts.values()):
                raise ValueError(f"{name}: counts must be non-negative")
            setattr(self, name, counts)
        if min(self.train_patients.values()) == 0:
            raise ValueError("train_patients: every subtype needs at least one patient")
        if self.regions_per_patient < 1:
            raise ValueError("regions_per_patient: must be >= 1")
        if self.region_size < 8:
            raise ValueError("region_size: must be >= 8")
        strengths = {m: 1.0 for m in self.modalities}
        unknown = set(self.signal_strength) - set(self.modalities)
        if unknown:
            raise ValueError(f"signal_strength: unknown modalities {sorted(unknown)}")
        strengths.update({m: float(v) for m, v in self.signal_strength.items()})
        if any(not 0.0 <= v <= 1.0 for v in strengths.values()):
            raise ValueError("signal_strength: values must lie in [0, 1]")
        self.signal_strength = strengths
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise: must lie in [0, 1]")
        if not 0.0 <= self.discordant_fraction < 0.5:
            raise ValueError("discordant_fraction: must lie in [0, 0.5)")
        if not 0.0 < self.tumour_fraction <= 1.0:
            raise ValueError("tumour_fraction: must lie in (0, 1]")

    @property
    def n_discordant(self) -> int:
        return math.floor(self.discordant_fraction * self.regions_per_patient + 1e-9)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def stain_directions(modality: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Base colour plus luminance, saturation and class-signal directions."""
    base = np.asarray(STAIN_COLORS.get(modality, (180.0, 150.0, 160.0)))
    lum = _unit([1.0, 1.0, 1.0])
    sat = _unit(base - base.mean())
    hue = _unit(np.cross(lum, sat))
    return base, lum, sat, hue


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def region_layout(rng: np.random.Generator, size: int, tumour_fraction: float, localized: bool):
    """Tissue and tumour masks shared by every modality of one aligned region."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2.0 - 1.0
    blob = 1.2 * (1.0 - (xx**2 + yy**2)) + 0.5 * _smooth_field(rng, size, size / 10)
    tissue = blob > np.quantile(blob, 0.2)
    if not localized:
        return tissue, tissue.copy()
    cy, cx = rng.uniform(-0.35, 0.35, size=2)
    ry, rx = np.sqrt(tumour_fraction * 4 / np.pi) * rng.uniform(0.8, 1.25, size=2) / 2
    ellipse = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return tissue, ellipse & tissue


def render_region(
    rng: np.random.Generator,
    modality: str,
    tissue: np.ndarray,
    tumour: np.ndarray,
    phenotype_sign: float,
    strength: float,
    noise: float,
    decoys: bool = False,
) -> np.ndarray:
    size = tissue.shape[0]
    base, lum, sat, hue = stain_directions(modality)
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND

    lum_amount = LUMINANCE_TEXTURE * _smooth_field(rng, size, 3.0)
    speckle = rng.standard_normal((size, size)) * np.where(tumour, 14.0, 5.0)
    hue_amount = (
        noise * HUE_FIELD * _smooth_field(rng, size, 6.0)
        + noise * REGION_HUE_OFFSET * rng.standard_normal()
        + np.where(tumour, phenotype_sign * strength * SIGNAL_AMPLITUDE, 0.0)
    )
    if decoys:
        # drawn only for localized regions so other corpora keep their streams
        hue_amount = hue_amount + np.where(
            tumour, 0.0, noise * DECOY_HUE * _smooth_field(rng, size, size / 16)
        )
    tissue_px = (
        base
        + (lum_amount + speckle)[..., None] * lum
        + (TUMOUR_SATURATION * tumour)[..., None] * sat
        + hue_amount[..., None] * hue
    )
    img[tissue] = tissue_px[tissue]
    img += rng.standard_normal(img.shape) * (noise * PIXEL_NOISE + 2.0)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _save_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def _phenotypes(rng: np.random.Generator, label: int, cfg: SyntheticCorpusConfig) -> list[int]:
    flips = np.zeros(cfg.regions_per_patient, dtype=bool)
    flips[rng.choice(cfg.regions_per_patient, size=cfg.n_discordant, replace=False)] = True
    return [1 - label if f else label for f in flips]


def content_hash(root: str | Path) -> str:
    """SHA-256 over every corpus file except the descriptor and run records,
    in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    files = (
        p for p in root.rglob("*")
        if p.is_file() and p.name != DESCRIPTOR_NAME and p.relative_to(root).parts[0] != "runs"
    )
    for path in sorted(files):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def generate_synthetic_corpus(cfg: SyntheticCorpusConfig, root: str | Path) -> dict:
    """Write region PNGs, ground-truth masks, ``manifest.csv`` and ``corpus.json``.

    The corpus is a pure function of ``cfg``: each region draws from its own
    substream keyed by patient and region index.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    size = cfg.region_size
    patients: list[PatientRecord] = []
    truth: dict[str, dict] = {}

    plan = [("train", s) for s in SUBTYPES for _ in range(cfg.train_patients[s])]
    plan += [("test", s) for s in SUBTYPES for _ in range(cfg.test_patients[s])]
    for index, (split, subtype) in enumerate(plan):
        pid = f"P{index}"
        label = SUBTYPES.index(subtype)
        modalities = cfg.modalities if split == "train" else ("HES",)
        phenotypes = _phenotypes(substream(cfg.seed, "phenotype", index), label, cfg)
        regions = []
        for j, phenotype in enumerate(phenotypes):
            rng = substream(cfg.seed, "region", index, j)
            group = f"{pid}-g{j}"
            tissue, tumour = region_layout(rng, size, cfg.tumour_fraction, cfg.localized_signal)
            _save_png(root / "truth" / pid / f"{group}_tissue.png", tissue.astype(np.uint8) * 255)
            _save_png(root / "truth" / pid / f"{group}_signal.png", tumour.astype(np.uint8) * 255)
            sign = 1.0 if phenotype == 0 else -1.0
            for m in cfg.modalities:
                # render every modality so HES pixels do not depend on the split
                img = render_region(
                    rng, m, tissue, tumour, sign, cfg.signal_strength[m], cfg.noise,
                    decoys=cfg.localized_signal,
                )
                if m not in modalities:
                    continue
                rel = f"images/{pid}/{m}_{group}.png"
                _save_png(root / rel, img)
                regions.append(
                    Region(
                        region_id=f"{group}-{m}",
                        slide_path=rel,
                        modality=m,
                        alignment_group=group,
                        x=j * (size + 64),
                        y=0,
                        width=size,
                        height=size,
                    )
                )
            truth[group] = {"phenotype": SUBTYPES[phenotype], "tumour_pixels": int(tumour.sum())}
        patients.append(PatientRecord(pid, subtype, tuple(regions), split))

    write_manifest(root / MANIFEST_NAME, patients)
    counts = {
        split: {s: sum(1 for p in patients if p.split == split and p.subtype == s) for s in SUBTYPES}
        for split in ("train", "test")
    }
    descriptor = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "counts": counts,
        "regions": truth,
        "content_hash": content_hash(root),
    }
    (root / DESCRIPTOR_NAME).write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
    return descriptor
