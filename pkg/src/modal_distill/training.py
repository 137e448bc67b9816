"""Teacher training and hard-distillation student training."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data.corpus import Corpus, DataConfig, PatchBank, epoch_bags, stack_bags
from .data.records import PatientRecord, balance_classes, split_patients
from .data.sampling import Bag, subtype_index
from .evaluation import majority_vote
from .losses import cross_entropy, distill_loss, one_hot, smooth_labels
from .model import ModelConfig, SubtypeClassifier, build_model
from .seeding import substream, torch_generator

log = logging.getLogger(__name__)


@dataclass
class TeacherTrainConfig:
    batch_size: int = 32
    lr: float = 8e-5
    lr_decay: float = 0.5
    decay_every: int = 5
    epochs: int = 100
    max_grad_norm: float = 3.0
    alpha: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if min(self.batch_size, self.epochs, self.decay_every) < 1:
            raise ValueError("batch_size, epochs and decay_every must be positive")
        if self.lr <= 0 or self.lr_decay <= 0 or self.max_grad_norm <= 0:
            raise ValueError("lr, lr_decay and max_grad_norm must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class StudentTrainConfig:
    batch_size: int = 64
    lr: float = 1e-5
    epochs: int = 100
    max_grad_norm: float = 5.0
    beta: float = 0.5
    gamma: float = 0.5
    alpha: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    teacher: str | None = None

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if min(self.batch_size, self.epochs) < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr <= 0 or self.max_grad_norm <= 0:
            raise ValueError("lr and max_grad_norm must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.lr


def config_hash(*configs) -> str:
    payload = json.dumps(
        [c if isinstance(c, dict) else asdict(c) for c in configs], sort_keys=True, default=str
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def add(self, epoch: int, split: str, loss: float, accuracy: float, lr: float, seconds: float):
        self.rows.append(
            {"epoch": epoch, "split": split, "loss": loss, "accuracy": accuracy, "lr": lr,
             "seconds": seconds}
        )

    def losses(self, split: str) -> list[float]:
        return [r["loss"] for r in self.rows if r["split"] == split]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh, ["epoch", "split", "loss", "accuracy", "lr", "seconds"], lineterminator="\n"
            )
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**row, "loss": repr(row["loss"]), "accuracy": repr(row["accuracy"])})

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "git_revision": git_revision(),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "epochs": max((r["epoch"] for r in self.rows), default=-1) + 1,
        }


@dataclass
class RunData:
    """Balanced, split patients with their loaded patch banks."""

    train: PatchBank
    val: PatchBank
    modalities: tuple[str, ...]
    train_patients: list[PatientRecord]
    val_patients: list[PatientRecord]


def select_patients(corpus: Corpus, data_cfg: DataConfig, seed: int
                    ) -> tuple[list[PatientRecord], list[PatientRecord]]:
    pool = corpus.split("train") + corpus.split("val")
    if data_cfg.balance:
        pool = balance_classes(pool, substream(seed, "balance"))
    return split_patients(pool, data_cfg.split_ratio, substream(seed, "split"))


def prepare_data(
    corpus: Corpus,
    data_cfg: DataConfig,
    seed: int,
    modalities: tuple[str, ...],
    train_subset: list[str] | None = None,
) -> RunData:
    train, val = select_patients(corpus, data_cfg, seed)
    if train_subset is not None:
        keep = set(train_subset)
        train = [p for p in train if p.patient_id in keep]
    return RunData(
        train=PatchBank(corpus, train, data_cfg),
        val=PatchBank(corpus, val, data_cfg),
        modalities=tuple(modalities),
        train_patients=train,
        val_patients=val,
    )


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start : start + size]


def clip_gradients(model: torch.nn.Module, max_norm: float) -> float:
    """Rescale gradients to global norm ``max_norm``; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _bag_tensors(bags: list[Bag], modalities, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x, y = stack_bags(bags, modalities)
    return torch.from_numpy(x), one_hot(torch.from_numpy(y), 2, dtype)


def _patient_accuracy(bags: list[Bag], probs: np.ndarray) -> float:
    by_patient: dict[str, list[int]] = {}
    for i, bag in enumerate(bags):
        by_patient.setdefault(bag.patient_id, []).append(i)
    correct = 0
    for pid, idx in by_patient.items():
        winner, _, _ = majority_vote(probs[idx])
        correct += winner == subtype_index(bags[idx[0]].label)
    return correct / max(len(by_patient), 1)


@torch.no_grad()
def predict_bags(model: SubtypeClassifier, bags: list[Bag], modalities, batch_size: int,
                 student: bool = False) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(bags), batch_size):
        x, _ = _bag_tensors(bags[start : start + batch_size], modalities, model.cls_token.dtype)
        out.append(model.forward_sequences(x[:, 0]).probs if student else model.forward_bags(x).probs)
    return torch.cat(out).double().numpy() if out else np.zeros((0, 2))


def _check_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")


@dataclass
class TrainResult:
    model: SubtypeClassifier
    log: TrainLog
    best_state: dict


def train_teacher(
    data: RunData,
    model_cfg: ModelConfig,
    cfg: TeacherTrainConfig,
    *,
    dtype: torch.dtype = torch.float32,
    init_seed: int | None = None,
) -> TrainResult:
    """Adam on bag batches with per-epoch re-formed bags and step LR decay;
    the state with the lowest validation loss is kept."""
    torch.use_deterministic_algorithms(True)
    seed = cfg.seed
    model = build_model(model_cfg, "teacher",
                        torch_generator(seed if init_seed is None else init_seed, "init", 0), dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    mods = data.modalities
    val_bags = data.val.bags(substream(seed, "val-bags"), mods)
    log_ = TrainLog(seed, config_hash(model_cfg, cfg))
    best_state = copy.deepcopy(model.state_dict())
    start_time = time.perf_counter()

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(optimizer, lr)
        bags = epoch_bags(data.train, seed, epoch, mods)
        if not bags:
            raise ValueError("no training bags could be formed")
        order = substream(seed, "batch", epoch).permutation(len(bags))
        model.train()
        total, seen, correct = 0.0, 0, 0
        for step, idx in enumerate(_batches(len(bags), cfg.batch_size, order)):
            x, y = _bag_tensors([bags[i] for i in idx], mods, dtype)
            probs = model.forward_bags(x).probs
            loss = cross_entropy(probs, smooth_labels(y, cfg.alpha)).mean()
            _check_finite(loss, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            clip_gradients(model, cfg.max_grad_norm)
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
            correct += int((probs.argmax(-1) == y.argmax(-1)).sum())
        log_.add(epoch, "train", total / seen, correct / seen, lr, time.perf_counter() - start_time)

        val_loss, val_acc = evaluate_teacher(model, val_bags, mods, cfg.batch_size, cfg.alpha)
        log_.add(epoch, "val", val_loss, val_acc, lr, time.perf_counter() - start_time)
        if val_loss < log_.best_val_loss:
            log_.best_val_loss, log_.best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("teacher epoch %d: train %.4f val %.4f acc %.3f", epoch, total / seen, val_loss, val_acc)

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log_, best_state)


@torch.no_grad()
def evaluate_teacher(model, bags, modalities, batch_size, alpha) -> tuple[float, float]:
    """Mean smoothed-label loss over ``bags`` and patient-level vote accuracy."""
    if not bags:
        return float("nan"), float("nan")
    probs = predict_bags(model, bags, modalities, batch_size)
    y = one_hot(torch.tensor([subtype_index(b.label) for b in bags]), 2, torch.float64)
    losses = cross_entropy(torch.from_numpy(probs), smooth_labels(y, alpha))
    return float(losses.mean()), _patient_accuracy(bags, probs)


def check_compatible(teacher_cfg: ModelConfig, student_cfg: ModelConfig) -> None:
    for name in ("d", "S", "p"):
        a, b = getattr(teacher_cfg, name), getattr(student_cfg, name)
        if a != b:
            raise ValueError(f"teacher/student mismatch on {name}: {a} != {b}")


def train_student(
    data: RunData,
    teacher: SubtypeClassifier | None,
    model_cfg: ModelConfig,
    cfg: StudentTrainConfig,
    *,
    dtype: torch.dtype = torch.float32,
    init_seed: int | None = None,
) -> TrainResult:
    """Hard distillation: the frozen teacher reads whole bags, the student
    their HES sequences. ``teacher=None`` trains on ground truth only."""
    torch.use_deterministic_algorithms(True)
    if teacher is not None:
        check_compatible(teacher.cfg, model_cfg)
        teacher.eval()
        for param in teacher.parameters():
            param.requires_grad_(False)
    seed = cfg.seed
    model = build_model(model_cfg, "student",
                        torch_generator(seed if init_seed is None else init_seed, "init", 1), dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    mods = data.modalities
    val_bags = data.val.bags(substream(seed, "val-bags"), mods)
    val_teacher = (
        predict_bags(teacher, val_bags, mods, cfg.batch_size) if teacher is not None else None
    )
    log_ = TrainLog(seed, config_hash(model_cfg, cfg))
    best_state = copy.deepcopy(model.state_dict())
    start_time = time.perf_counter()

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(optimizer, lr)
        bags = epoch_bags(data.train, seed, epoch, mods)
        if not bags:
            raise ValueError("no training bags could be formed")
        order = substream(seed, "batch", epoch).permutation(len(bags))
        model.train()
        total, seen, correct = 0.0, 0, 0
        for step, idx in enumerate(_batches(len(bags), cfg.batch_size, order)):
            x, y = _bag_tensors([bags[i] for i in idx], mods, dtype)
            teacher_p = None
            if teacher is not None:
                with torch.no_grad():
                    teacher_p = teacher.forward_bags(x.to(torch.uint8)).probs.to(dtype)
            probs = model.forward_sequences(x[:, 0]).probs
            loss = distill_loss(probs, y, teacher_p, cfg.beta, cfg.gamma, cfg.alpha).mean()
            _check_finite(loss, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            clip_gradients(model, cfg.max_grad_norm)
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
            correct += int((probs.argmax(-1) == y.argmax(-1)).sum())
        log_.add(epoch, "train", total / seen, correct / seen, lr, time.perf_counter() - start_time)

        val_loss, val_acc = evaluate_student(model, val_bags, val_teacher, mods, cfg)
        log_.add(epoch, "val", val_loss, val_acc, lr, time.perf_counter() - start_time)
        if val_loss < log_.best_val_loss:
            log_.best_val_loss, log_.best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("student epoch %d: train %.4f val %.4f acc %.3f", epoch, total / seen, val_loss, val_acc)

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log_, best_state)


@torch.no_grad()
def evaluate_student(model, bags, teacher_probs, modalities, cfg: StudentTrainConfig):
    if not bags:
        return float("nan"), float("nan")
    probs = predict_bags(model, bags, modalities, cfg.batch_size, student=True)
    y = one_hot(torch.tensor([subtype_index(b.label) for b in bags]), 2, torch.float64)
    t = torch.from_numpy(teacher_probs) if teacher_probs is not None else None
    losses = distill_loss(torch.from_numpy(probs), y, t, cfg.beta, cfg.gamma, cfg.alpha)
    return float(losses.mean()), _patient_accuracy(bags, probs)
