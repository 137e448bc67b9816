"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (collected again in the terminal
summary) and then asserts. Tolerances are the ones the criteria pin down.
Criteria 5, 6 and 10 train real models on synthetic corpora and take a few
minutes on a laptop CPU.
"""

import math
import re
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner
from PIL import Image

from modal_distill.cli import main
from modal_distill.data.corpus import Corpus, DataConfig
from modal_distill.data.sampling import form_bags, sample_sequences
from modal_distill.data.segmentation import Patches, tile_coverage
from modal_distill.data.synthetic import SyntheticCorpusConfig, generate_synthetic_corpus
from modal_distill.evaluation import binomial_sign_test, fit_power_law, metrics_from_confusion
from modal_distill.experiments import (
    ExperimentConfig,
    ablation_config,
    region_attention,
    run_pipeline,
    test_sequences as make_test_sequences,
)
from modal_distill.losses import cross_entropy, distill_loss, smooth_labels
from modal_distill.model import ModelConfig, SubtypeClassifier
from modal_distill.seeding import SEED_ENV, torch_generator
from modal_distill.training import StudentTrainConfig, TeacherTrainConfig, prepare_data, train_teacher

from .conftest import record_criterion
from .oracles import (
    brute_force_power_law_data,
    eq4_scalar_loop,
    group_relative_errors,
    micro_batch,
    micro_models,
    student_loss,
    teacher_loss,
)

# micro scale shared by the training criteria
MICRO_MODEL = ModelConfig(d=64, S=32, p=16)
MICRO_DATA = DataConfig(S=32, p=16)
MICRO_EPOCHS = 20
MICRO_LR = 1e-3


def micro_experiment(epochs=MICRO_EPOCHS) -> ExperimentConfig:
    return ExperimentConfig(
        data=MICRO_DATA,
        model=MICRO_MODEL,
        teacher=TeacherTrainConfig(epochs=epochs, lr=MICRO_LR),
        student=StudentTrainConfig(epochs=epochs, lr=MICRO_LR),
    )


# --------------------------------------------------------------------------- 1


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    cfg, teacher, student = micro_models(seed=0)
    x, y = micro_batch(cfg)
    errors = {f"teacher/{k}": v for k, v in group_relative_errors(teacher, lambda: teacher_loss(teacher, x, y)).items()}
    with torch.no_grad():
        teacher_p = teacher.forward_bags(x).probs
    errors.update({f"student/{k}": v for k, v in
                   group_relative_errors(student, lambda: student_loss(student, teacher_p, x, y)).items()})
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-3 and elapsed < 60 and len(errors) == 11
    record_criterion(1, "gradient oracle", ok,
                     f"max rel err {errors[worst]:.2e} ({worst}) over {len(errors)} groups, {elapsed:.1f}s")
    assert ok, errors


# --------------------------------------------------------------------------- 2


def _model(seed=0, **kw) -> SubtypeClassifier:
    cfg = ModelConfig(**{**dict(d=16, S=6, p=4, n=2, h=2, k=3), **kw})
    return SubtypeClassifier(cfg, "teacher", torch_generator(seed, "init", 0)).double()


def _bag_pixels(seed, b=4, k=3, S=6, p=4):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 256, (b, k + 1, S, p, p, 3), generator=g, dtype=torch.uint8)


def test_criterion_02_fusion_algebra():
    checks = {}
    # lambda = 1: IHC content cannot change the output
    model = _model(fusion_lambda=1.0)
    with torch.no_grad():
        model.fusion.A.normal_(0, 0.5, generator=torch.Generator().manual_seed(1))
        model.fusion.b.fill_(0.7)
    a, b = _bag_pixels(1), _bag_pixels(2)
    b[:, 0] = a[:, 0]
    ref = model.forward_bags(a)
    free = model.forward_bags(b)
    frozen = model.forward_bags(b, stats=ref.stats)
    checks["lambda1_argmax"] = bool(torch.equal(ref.probs.argmax(-1), free.probs.argmax(-1)))
    checks["lambda1_frozen_exact"] = float((ref.probs - frozen.probs).abs().max().detach()) <= 1e-6

    # lambda = 0, k = 1, w = 1: bag embedding is the IHC embedding
    model = _model(fusion_lambda=0.0, k=1, modalities=("HES", "BCL6"))
    with torch.no_grad():
        model.fusion.A.zero_()
        model.fusion.b.fill_(1.0)
    z_hes = torch.randn(5, 16, dtype=torch.float64)
    z_ihc = torch.randn(5, 1, 16, dtype=torch.float64)
    with torch.no_grad():
        out, _ = model.fuse(z_hes, z_ihc)
    checks["lambda0_passthrough"] = (out - z_ihc[:, 0]).abs().max().item() <= 1e-6

    # recomputation oracle
    model = _model(fusion_lambda=0.3)
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        model.fusion.A.copy_(torch.randn(3, 16, generator=g, dtype=torch.float64) * 0.2)
        model.fusion.b.copy_(torch.randn(3, generator=g, dtype=torch.float64))
    worst = 0.0
    for _ in range(10):
        zh = torch.randn(16, generator=g, dtype=torch.float64)
        zi = torch.randn(3, 16, generator=g, dtype=torch.float64)
        got, _ = model.fuse(zh[None], zi[None])
        ref_vec = eq4_scalar_loop(0.3, zh.tolist(), zi.tolist(), model.fusion.A.tolist(), model.fusion.b.tolist())
        worst = max(worst, float(np.abs(got[0].detach().numpy() - ref_vec).max()))
    checks["recompute_oracle"] = worst <= 1e-6

    # dot-product variant on the simplex
    model = _model(fusion_mode="dot_product")
    _, w = model.fuse(torch.randn(20, 16, dtype=torch.float64) * 3, torch.randn(20, 3, 16, dtype=torch.float64) * 3)
    checks["dot_product_simplex"] = bool((w >= 0).all()) and float((w.sum(-1) - 1).abs().max()) <= 1e-6

    ok = all(checks.values())
    record_criterion(2, "fusion algebra", ok,
                     ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()) + f", oracle err {worst:.1e}")
    assert ok, checks


# --------------------------------------------------------------------------- 3


def test_criterion_03_loss_laws():
    g = torch.Generator().manual_seed(0)
    bitwise = True
    for _ in range(20):
        logits = torch.randn(16, 2, generator=g, dtype=torch.float64)
        s = torch.softmax(logits, -1)
        y = torch.nn.functional.one_hot(torch.randint(0, 2, (16,), generator=g), 2).double()
        t = torch.softmax(torch.randn(16, 2, generator=g, dtype=torch.float64), -1)
        lhs = distill_loss(s, y, t, 1.0, 0.0, 0.1)
        rhs = cross_entropy(s, smooth_labels(y, 0.1))
        bitwise &= bool(torch.equal(lhs, rhs))
    smooth_exact = smooth_labels([1.0, 0.0], 0.1).tolist() == [0.95, 0.05]
    ce = cross_entropy([0.5, 0.5], [1.0, 0.0]).item()
    ln2_ok = abs(ce - math.log(2)) <= 1e-9
    ok = bitwise and smooth_exact and ln2_ok
    record_criterion(3, "loss reduction laws", ok,
                     f"(1,0) bitwise={bitwise}, smooth exact={smooth_exact}, |CE-ln2|={abs(ce - math.log(2)):.1e}")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_04_sampling_combinatorics():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(1000):
        S = int(rng.integers(1, 40))
        counts = rng.integers(0, 200, size=int(rng.integers(1, 5)))
        seqs = {}
        for m, n in enumerate(counts):
            patches = Patches(np.zeros((n, 1, 1, 3), np.uint8), np.zeros((n, 2), np.int64), f"r{m}")
            seqs[f"M{m}"] = sample_sequences(patches, S, rng, modality=f"M{m}")
            idx = np.concatenate([s.indices for s in seqs[f"M{m}"]]) if seqs[f"M{m}"] else np.zeros(0, int)
            if len(seqs[f"M{m}"]) != n // S or len(set(idx.tolist())) != len(idx):
                failures += 1
            if any(len(s.indices) != S for s in seqs[f"M{m}"]):
                failures += 1
        bags = form_bags(seqs, rng, "ABC")
        if len(bags) != min(len(v) for v in seqs.values()):
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 60
    record_criterion(4, "sampling combinatorics", ok, f"1000 draws, {failures} violations, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 5 + 6

KD_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def kd_study(tmp_path_factory):
    """Paired KD / no-KD runs on the discordant-region corpus, one teacher per seed."""
    root = tmp_path_factory.mktemp("kd_corpus")
    generate_synthetic_corpus(
        SyntheticCorpusConfig(
            seed=11,
            train_patients={"ABC": 25, "GCB": 25},
            test_patients={"ABC": 20, "GCB": 20},
            regions_per_patient=5,
            region_size=160,
            signal_strength={"HES": 0.3, "BCL6": 0.9, "CD10": 0.9, "MUM1": 0.9},
            noise=0.5,
            discordant_fraction=0.4,
        ),
        root,
    )
    corpus = Corpus.open(root)
    start = time.perf_counter()
    rows = []
    for seed in KD_SEEDS:
        exp = micro_experiment().with_seed(seed)
        data = prepare_data(corpus, exp.data, seed, exp.model.modalities)
        tests = make_test_sequences(corpus, exp.data, seed)
        teacher = train_teacher(data, exp.model, exp.teacher)
        val = [r for r in teacher.log.rows if r["split"] == "val"]
        kd = run_pipeline(corpus, exp, data=data, teacher=teacher, tests=tests)
        no_kd_exp, _ = ablation_config(exp, "no_kd")
        no_kd = run_pipeline(corpus, no_kd_exp, data=data, use_teacher=False, tests=tests)
        rows.append({
            "seed": seed,
            "n_train": len(data.train_patients),
            "teacher_val_acc": val[teacher.log.best_epoch]["accuracy"],
            "kd": kd.metrics.accuracy,
            "no_kd": no_kd.metrics.accuracy,
        })
    return rows, time.perf_counter() - start


def test_criterion_05_kd_benefit(kd_study):
    rows, elapsed = kd_study
    diffs = [r["kd"] - r["no_kd"] for r in rows]
    median = float(np.median(diffs))
    ok = median >= 0.05 and elapsed < 30 * 60
    per_seed = " ".join(f"s{r['seed']}:{r['kd']:.2f}/{r['no_kd']:.2f}" for r in rows)
    record_criterion(5, "KD benefit", ok,
                     f"median(KD - noKD) = {median:.3f} over {len(rows)} seeds [{per_seed}], "
                     f"{rows[0]['n_train']} train patients, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_06_teacher_sanity(kd_study):
    rows, _ = kd_study
    accs = [r["teacher_val_acc"] for r in rows]
    ok = min(accs) >= 0.9
    record_criterion(6, "teacher sanity", ok, f"teacher val acc per seed {accs}")
    assert ok


# --------------------------------------------------------------------------- 7


def test_criterion_07_power_law_oracle():
    a, b, c = 0.95, 0.8, 0.5
    ns = np.arange(10, 101, 10, dtype=float)
    fit = fit_power_law(ns, brute_force_power_law_data(a, b, c, ns))
    rel = max(abs(fit.a - a) / a, abs(fit.b - b) / b, abs(fit.c - c) / c)
    target = 0.9
    n_star = fit.project(target)
    back = float(fit.predict(n_star))
    ok = rel < 0.01 and abs(back - target) <= 1e-6
    record_criterion(7, "power-law fit oracle", ok,
                     f"max rel param err {rel:.1e}; n*={n_star:.2f}, acc(n*)-target={back - target:.1e}")
    assert ok


# --------------------------------------------------------------------------- 8


def test_criterion_08_metrics_oracle():
    m = metrics_from_confusion([[28, 5], [11, 20]])
    reported = {
        "ABC PRE": (m.precision["ABC"], 0.72),
        "ABC REC": (m.recall["ABC"], 0.85),
        "GCB PRE": (m.precision["GCB"], 0.80),
        "GCB REC": (m.recall["GCB"], 0.65),
        "ACC": (m.accuracy, 0.75),
    }
    ok = all(abs(got - want) <= 0.005 for got, want in reported.values())
    record_criterion(8, "metrics oracle", ok, ", ".join(f"{k} {v[0]:.3f}" for k, v in reported.items()))
    assert ok


# --------------------------------------------------------------------------- 9

DETERMINISM_CONFIG = """
seed = 13

[data.synthetic]
seed = 13
train_patients = {ABC = 4, GCB = 4}
test_patients = {ABC = 3, GCB = 3}
regions_per_patient = 2
region_size = 64
signal_strength = {HES = 0.6, BCL6 = 0.9, CD10 = 0.9, MUM1 = 0.9}

[model]
d = 16
n = 1
h = 2
S = 4
p = 8

[teacher]
epochs = 3
batch_size = 8
lr = 1e-3

[student]
epochs = 3
batch_size = 8
lr = 1e-3
"""


def _pipeline_run(root: Path) -> Path:
    runner = CliRunner()
    env = {SEED_ENV: ""}
    root.mkdir(parents=True)
    cfg = root / "run.toml"
    cfg.write_text(DETERMINISM_CONFIG)
    steps = [
        ["generate-data", "--config", cfg, "--out", root / "corpus"],
        ["train", "teacher", "--config", cfg, "--corpus", root / "corpus", "--out", root / "teacher"],
        ["train", "student", "--config", cfg, "--corpus", root / "corpus",
         "--teacher", root / "teacher" / "teacher.safetensors", "--out", root / "student"],
        ["evaluate", "--checkpoint", root / "student" / "student.safetensors", "--corpus", root / "corpus",
         "--roc", "--out", root / "eval"],
    ]
    for step in steps:
        res = runner.invoke(main, [str(s) for s in step], env=env, catch_exceptions=False)
        assert res.exit_code == 0, res.output
    return root / "eval"


def test_criterion_09_determinism(tmp_path):
    a = _pipeline_run(tmp_path / "a")
    b = _pipeline_run(tmp_path / "b")
    files = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".json"))
    same = {f: (a / f).read_bytes() == (b / f).read_bytes() for f in files}
    ckpt_same = ((tmp_path / "a" / "student" / "student.safetensors").read_bytes()
                 == (tmp_path / "b" / "student" / "student.safetensors").read_bytes())
    ok = all(same.values()) and "confusion.csv" in same and "roc.csv" in same and ckpt_same
    record_criterion(9, "determinism", ok,
                     f"{sum(same.values())}/{len(same)} metrics files byte-identical ({', '.join(files)}); "
                     f"student checkpoint identical={ckpt_same}")
    assert ok, same


# --------------------------------------------------------------------------- 10


def test_criterion_10_attention_sanity(tmp_path):
    root = tmp_path / "localized"
    generate_synthetic_corpus(
        SyntheticCorpusConfig(
            seed=21,
            train_patients={"ABC": 20, "GCB": 20},
            test_patients={"ABC": 5, "GCB": 5},
            regions_per_patient=4,
            region_size=160,
            signal_strength={"HES": 0.9, "BCL6": 0.9, "CD10": 0.9, "MUM1": 0.9},
            noise=0.6,
            localized_signal=True,
        ),
        root,
    )
    corpus = Corpus.open(root)
    exp = micro_experiment(epochs=40).with_seed(0)
    result = run_pipeline(corpus, exp)
    wins, regions = 0, 0
    for patient in corpus.split("test"):
        for ra in region_attention(result.student.model, corpus, patient.patient_id, exp.data, 0)[:2]:
            group = ra.region_id.rsplit("-", 1)[0]
            signal = np.asarray(Image.open(root / "truth" / patient.patient_id / f"{group}_signal.png")) > 0
            cover = tile_coverage(signal, exp.data.p)
            c = np.array([cover[r, col] for r, col in ra.grid])
            scored = np.isfinite(ra.scores)
            sig, bg = ra.scores[scored & (c >= 0.5)], ra.scores[scored & (c == 0)]
            regions += 1
            wins += bool(sig.size and bg.size and sig.mean() > bg.mean())
    p = binomial_sign_test(wins, regions)
    ok = regions == 20 and p < 0.05
    record_criterion(10, "attention sanity", ok,
                     f"signal > background in {wins}/{regions} regions, one-sided sign test p={p:.4f}; "
                     f"student test acc {result.metrics.accuracy:.2f}")
    assert ok


# --------------------------------------------------------------------------- 11


def test_criterion_11_parameter_budget():
    res = CliRunner().invoke(main, ["params", "--role", "student"], catch_exceptions=False)
    match = re.search(r"student parameters: (\d+)", res.output)
    n = int(match.group(1)) if match else -1
    ok = res.exit_code == 0 and n < 1_000_000 and abs(n - 890_000) <= 0.1 * 890_000
    record_criterion(11, "parameter budget", ok, f"CLI reports {n} student parameters (target 0.89M +/-10%)")
    assert ok
