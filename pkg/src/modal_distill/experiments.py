"""End-to-end runs: teacher, student, patient-level test evaluation,
ablations and the data-scaling study."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data.corpus import Corpus, DataConfig, PatchBank, stack_sequences
from .data.records import PatientRecord
from .data.sampling import SUBTYPES, Sequence
from .evaluation import MetricsReport, PatientPrediction, compute_metrics, predict_patient
from .model import ModelConfig, SubtypeClassifier
from .seeding import substream
from .training import (
    RunData,
    StudentTrainConfig,
    TeacherTrainConfig,
    TrainResult,
    prepare_data,
    select_patients,
    train_student,
    train_teacher,
)

log = logging.getLogger(__name__)

ABLATIONS = ("no_softmax", "no_class_balance", "dot_product_attention", "no_kd")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    student: StudentTrainConfig = field(default_factory=StudentTrainConfig)
    eval_batch_size: int = 64

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self, teacher=replace(self.teacher, seed=seed), student=replace(self.student, seed=seed)
        )


def test_sequences(corpus: Corpus, data_cfg: DataConfig, seed: int,
                   patients: list[PatientRecord] | None = None) -> dict[str, list[Sequence]]:
    patients = corpus.split("test") if patients is None else patients
    bank = PatchBank(corpus, patients, data_cfg)
    return bank.sequences(substream(seed, "eval"), "HES")


@torch.no_grad()
def sequence_probs(model: SubtypeClassifier, seqs: list[Sequence], batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(seqs), batch_size):
        x = torch.from_numpy(stack_sequences(seqs[start : start + batch_size]))
        out.append(model.forward_sequences(x).probs.double())
    return torch.cat(out).numpy() if out else np.zeros((0, 2))


def predict_patients(
    model: SubtypeClassifier,
    sequences: dict[str, list[Sequence]],
    labels: dict[str, str],
    batch_size: int = 64,
) -> list[PatientPrediction]:
    preds = []
    for pid, seqs in sequences.items():
        if not seqs:
            warnings.warn(f"patient {pid} has no complete sequence; skipped", RuntimeWarning)
            continue
        preds.append(predict_patient(pid, sequence_probs(model, seqs, batch_size), labels.get(pid)))
    return preds


def metrics_for(predictions: list[PatientPrediction]) -> MetricsReport:
    return compute_metrics(
        [p.label for p in predictions], [SUBTYPES.index(p.true_subtype) for p in predictions]
    )


@dataclass
class PipelineResult:
    teacher: TrainResult | None
    student: TrainResult
    predictions: list[PatientPrediction]
    metrics: MetricsReport


def run_pipeline(
    corpus: Corpus,
    exp: ExperimentConfig,
    *,
    data: RunData | None = None,
    teacher: TrainResult | None = None,
    use_teacher: bool = True,
    tests: dict[str, list[Sequence]] | None = None,
    init_seed: int | None = None,
) -> PipelineResult:
    """Train teacher (unless given or disabled), distil the student, and
    evaluate it patient by patient on the test split."""
    seed = exp.student.seed
    if data is None:
        data = prepare_data(corpus, exp.data, seed, exp.model.modalities)
    if use_teacher and teacher is None:
        teacher = train_teacher(data, exp.model, exp.teacher, init_seed=init_seed)
    student = train_student(
        data, teacher.model if use_teacher else None, exp.model, exp.student, init_seed=init_seed
    )
    if tests is None:
        tests = test_sequences(corpus, exp.data, seed)
    labels = {p.patient_id: p.subtype for p in corpus.patients}
    preds = predict_patients(student.model, tests, labels, exp.eval_batch_size)
    return PipelineResult(teacher if use_teacher else None, student, preds, metrics_for(preds))


def ablation_config(exp: ExperimentConfig, variant: str) -> tuple[ExperimentConfig, bool]:
    """Config with exactly one toggle flipped, and whether a teacher is used."""
    if variant == "no_softmax":
        return replace(exp, model=replace(exp.model, softmax_mlp=False)), True
    if variant == "no_class_balance":
        return replace(exp, data=replace(exp.data, balance=False)), True
    if variant == "dot_product_attention":
        return replace(exp, model=replace(exp.model, fusion_mode="dot_product")), True
    if variant == "no_kd":
        return replace(exp, student=replace(exp.student, beta=1.0, gamma=0.0)), False
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


@dataclass
class AblationResult:
    variant: str
    base: PipelineResult
    ablated: PipelineResult


def run_ablation(corpus: Corpus, exp: ExperimentConfig, variant: str, seed: int,
                 base: PipelineResult | None = None) -> AblationResult:
    """Unmodified run and single-toggle variant from the same initial parameters."""
    exp = exp.with_seed(seed)
    variant_exp, use_teacher = ablation_config(exp, variant)
    tests = test_sequences(corpus, exp.data, seed)
    if base is None:
        base = run_pipeline(corpus, exp, tests=tests)
    ablated = run_pipeline(corpus, variant_exp, use_teacher=use_teacher, tests=tests)
    return AblationResult(variant, base, ablated)


@dataclass
class ScalingPoint:
    fraction: float
    n_patients: int
    accuracy: float
    seed: int
    patients: list[str] = field(default_factory=list)


def cumulative_subsets(patients: list[PatientRecord], fractions, seed: int) -> list[list[str]]:
    """Nested, class-stratified patient subsets, one per fraction.

    Each class is put in a seeded random order once; a fraction keeps the
    first ``round(fraction * n_class)`` patients of every class, so larger
    fractions extend smaller ones.
    """
    fractions = list(fractions)
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be sorted ascending")
    rng = substream(seed, "scaling")
    orders = {}
    for subtype in SUBTYPES:
        members = [p.patient_id for p in patients if p.subtype == subtype]
        orders[subtype] = [members[i] for i in rng.permutation(len(members))]
    subsets = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
        chosen = []
        for subtype in SUBTYPES:
            k = int(np.floor(f * len(orders[subtype]) + 0.5 + 1e-9))
            chosen.extend(orders[subtype][:k])
        subsets.append(chosen)
    return subsets


def scaling_study(corpus: Corpus, exp: ExperimentConfig, fractions, seed: int) -> list[ScalingPoint]:
    """Teacher+student per cumulative training fraction, same initial
    parameters and hyperparameters, evaluated on the fixed test split."""
    exp = exp.with_seed(seed)
    train, _ = select_patients(corpus, exp.data, seed)
    subsets = cumulative_subsets(train, fractions, seed)
    tests = test_sequences(corpus, exp.data, seed)
    points = []
    for fraction, subset in zip(fractions, subsets):
        per_class = [sum(1 for p in train if p.patient_id in subset and p.subtype == s) for s in SUBTYPES]
        if min(per_class) < 2:
            warnings.warn(f"fraction {fraction}: fewer than 2 patients in a class, skipped", RuntimeWarning)
            continue
        data = prepare_data(corpus, exp.data, seed, exp.model.modalities, train_subset=subset)
        result = run_pipeline(corpus, exp, data=data, tests=tests, init_seed=seed)
        points.append(ScalingPoint(fraction, len(subset), result.metrics.accuracy, seed, sorted(subset)))
        log.info("scaling fraction %.2f (%d patients): acc %.3f", fraction, len(subset),
                 result.metrics.accuracy)
    return points


@dataclass
class RegionAttention:
    region_id: str
    grid: np.ndarray  # (N, 2) patch row/col
    scores: np.ndarray  # (N,) S * attention, 1.0 = uniform; NaN when unscored
    sequence: np.ndarray  # (N,) index of the sequence a patch fell into, -1 if none
    image: np.ndarray
    p: int


def region_attention(model: SubtypeClassifier, corpus: Corpus, patient_id: str, data_cfg: DataConfig,
                     seed: int) -> list[RegionAttention]:
    """Class-token attention for every HES region of one patient.

    Patches are cut into disjoint sequences as at inference time; scores are
    multiplied by S so that 1.0 means uniform attention and values are
    comparable across sequences. Leftover patches (fewer than S) stay NaN.
    """
    from .data.sampling import sample_sequences
    from .data.segmentation import extract_patches, segment_tissue
    from .model import attention_scores

    patient = corpus.patient(patient_id)
    rng = substream(seed, "attention")
    out = []
    for region in sorted(patient.regions, key=lambda r: r.alignment_group):
        if region.modality != "HES":
            continue
        image = corpus.read_image(region.slide_path)
        patches = extract_patches(image, segment_tissue(image, data_cfg.blur_radius), data_cfg.p,
                                  data_cfg.min_coverage, region.region_id)
        n = len(patches.pixels)
        scores = np.full(n, np.nan)
        which = np.full(n, -1)
        seqs = sample_sequences(patches, data_cfg.S, rng, modality="HES", patient_id=patient_id,
                                alignment_group=region.alignment_group)
        if seqs:
            att = attention_scores(stack_sequences(seqs), model) * data_cfg.S
            for k, seq in enumerate(seqs):
                scores[seq.indices] = att[k]
                which[seq.indices] = k
        out.append(RegionAttention(region.region_id, patches.grid, scores, which, image, data_cfg.p))
    return out
