"""Command-line entry point.

One declarative TOML/JSON config per run with sections ``[data]``,
``[model]``, ``[teacher]``, ``[student]`` and ``[eval]``; a top-level
``seed`` is the root of every random substream. Seed precedence is
``--seed`` flag > ``MODAL_DISTILL_SEED`` > config file.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import csv
import datetime as _dt
import functools
import json
import logging
import math
import uuid
from dataclasses import asdict, fields
from pathlib import Path

import click
import numpy as np

from .checkpoint import file_hash, load_checkpoint, read_header, save_checkpoint
from .data.corpus import Corpus, DataConfig
from .data.sampling import SUBTYPES
from .data.synthetic import SyntheticCorpusConfig, content_hash, generate_synthetic_corpus
from .model import ModelConfig, build_model, count_parameters
from .seeding import resolve_seed
from .training import StudentTrainConfig, TeacherTrainConfig, config_hash, git_revision

log = logging.getLogger("modal_distill")

SECTIONS = ("seed", "data", "model", "teacher", "student", "eval")


class ConfigError(click.UsageError):
    """Invalid or inconsistent configuration; exits with code 2."""


# --------------------------------------------------------------------------- config


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            import tomli

            raw = tomli.loads(text.decode("utf-8"))
    except Exception as exc:  # parse errors of either format
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown config section(s) {sorted(unknown)}")
    return raw


def _build(cls, section: str, values: dict, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}]: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**{**values, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


class RunConfig:
    """Typed view of a config file after seed resolution."""

    def __init__(self, raw: dict, cli_seed: int | None = None):
        self.raw = raw
        try:
            self.seed = resolve_seed(raw.get("seed"), cli_seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        data = dict(raw.get("data", {}))
        self.corpus_root = data.pop("root", None)
        self.manifest = data.pop("manifest", None)
        self.synthetic = data.pop("synthetic", None)
        model = dict(raw.get("model", {}))
        if "modalities" in model:
            model["modalities"] = tuple(model["modalities"])
        self.model = _build(ModelConfig, "model", model)
        data.setdefault("S", self.model.S)
        data.setdefault("p", self.model.p)
        self.data = _build(DataConfig, "data", data)
        for name in ("S", "p"):
            if getattr(self.data, name) != getattr(self.model, name):
                raise ConfigError(f"[data].{name} and [model].{name} disagree")
        seed = {} if self.seed is None else {"seed": self.seed}
        teacher = dict(raw.get("teacher", {}))
        student = dict(raw.get("student", {}))
        self.teacher = _build(TeacherTrainConfig, "teacher", teacher, **seed)
        self.student = _build(StudentTrainConfig, "student", student, **seed)
        ev = dict(raw.get("eval", {}))
        self.eval_batch_size = int(ev.pop("batch_size", 64))
        self.roc = bool(ev.pop("roc", False))
        self.target_accuracy = float(ev.pop("target_accuracy", 0.9))
        if ev:
            raise ConfigError(f"[eval]: unknown field(s) {sorted(ev)}")

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("seed: no seed given (config `seed`, MODAL_DISTILL_SEED or --seed)")
        return self.seed

    def experiment(self):
        from .experiments import ExperimentConfig

        return ExperimentConfig(self.data, self.model, self.teacher, self.student, self.eval_batch_size)

    def hash(self) -> str:
        return config_hash(
            {"seed": self.seed}, self.data, self.model, self.teacher, self.student,
            {"eval_batch_size": self.eval_batch_size},
        )


def _open_corpus(corpus: str | None, cfg: RunConfig | None = None, manifest: str | None = None) -> Corpus:
    root = corpus or (cfg.corpus_root if cfg else None)
    if root is None:
        raise ConfigError("no corpus given (--corpus or [data].root)")
    manifest = manifest or (cfg.manifest if cfg else None)
    if not Path(root).is_dir():
        raise ConfigError(f"corpus root {root} does not exist")
    try:
        return Corpus.open(root, manifest)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------- run manifest


class RunManifest:
    """Provenance record written once per invocation under ``<out>/runs/``."""

    def __init__(self, command: str, out_dir: Path, cfg_hash: str | None = None, seed=None):
        self.run_id = uuid.uuid4().hex[:12]
        self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        self.command = command
        self.out_dir = Path(out_dir)
        self.config_hash = cfg_hash
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []

    def add_input(self, name: str, digest: str) -> None:
        self.inputs[name] = digest

    def add_artifact(self, path: Path) -> Path:
        self.artifacts.append(str(Path(path).relative_to(self.out_dir)))
        return path

    def write(self, status: int, error: str | None = None) -> Path:
        runs = self.out_dir / "runs"
        runs.mkdir(parents=True, exist_ok=True)
        path = runs / f"{self.timestamp.replace(':', '')}-{self.run_id}.json"
        payload = {
            "run_id": self.run_id,
            "timestamp": self.timestamp,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "git_revision": git_revision(),
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "exit_status": status,
        }
        if error:
            payload["error"] = error
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path


def run_command(fn):
    """Turn unexpected exceptions into exit code 1 and always write the manifest."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        ctx.obj = ctx.obj or {}
        try:
            fn(*args, **kwargs)
        except click.ClickException:
            manifest = ctx.obj.get("manifest")
            if manifest is not None:
                manifest.write(2, "usage error")
            raise
        except Exception as exc:
            log.error("%s failed: %s", ctx.command_path, exc)
            manifest = ctx.obj.get("manifest")
            if manifest is not None:
                manifest.write(1, f"{type(exc).__name__}: {exc}")
            ctx.exit(1)
        else:
            manifest = ctx.obj.get("manifest")
            if manifest is not None:
                manifest.write(0)

    return wrapper


def _start(command: str, out: Path, cfg: RunConfig | None = None) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command, out, cfg.hash() if cfg else None, cfg.seed if cfg else None)
    click.get_current_context().obj["manifest"] = manifest
    return manifest


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(x) -> str:
    if isinstance(x, float):
        return "inf" if math.isinf(x) else repr(x)
    return str(x)


def _corpus_inputs(manifest: RunManifest, corpus: Corpus) -> None:
    digest = corpus.descriptor.get("content_hash") or content_hash(corpus.root)
    manifest.add_input(f"corpus:{corpus.root}", digest)


# --------------------------------------------------------------------------- commands


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
@click.pass_context
def main(ctx, verbose):
    """Multi-modal teacher / HES student distillation for WSI subtyping."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    ctx.obj = {}


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML or JSON config."
)
seed_option = click.option("--seed", type=int, default=None, help="Root seed (beats env and config).")
out_option = click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
corpus_option = click.option("--corpus", type=click.Path(), default=None, help="Corpus root directory.")


@main.command("generate-data")
@config_option
@seed_option
@out_option
@run_command
def generate_data(config_path, seed, out):
    """Write a synthetic aligned multi-modal corpus to OUT."""
    raw = load_config_file(config_path)
    section = dict(raw.get("data", {}).get("synthetic", {}))
    resolved = resolve_seed(section.get("seed", raw.get("seed")), seed)
    if resolved is None:
        raise ConfigError("seed: [data.synthetic] needs a `seed` field (or MODAL_DISTILL_SEED / --seed)")
    section["seed"] = resolved
    if "modalities" in section:
        section["modalities"] = tuple(section["modalities"])
    cfg = _build(SyntheticCorpusConfig, "data.synthetic", section)
    out = Path(out)
    manifest = _start("generate-data", out)
    manifest.seed = cfg.seed
    manifest.config_hash = config_hash(cfg.to_dict())
    descriptor = generate_synthetic_corpus(cfg, out)
    manifest.add_artifact(out / "manifest.csv")
    manifest.add_artifact(out / "corpus.json")
    click.echo(f"{'split':<6} {'ABC':>5} {'GCB':>5}")
    for split, counts in descriptor["counts"].items():
        click.echo(f"{split:<6} {counts['ABC']:>5} {counts['GCB']:>5}")
    click.echo(f"content hash {descriptor['content_hash']}")


@main.group()
def train():
    """Train the multi-modal teacher or the HES student."""


def _train_header(cfg: RunConfig, result, corpus: Corpus, role_cfg, extra=None) -> dict:
    return {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "data": asdict(cfg.data),
        "train": asdict(role_cfg),
        "best_epoch": result.log.best_epoch,
        "best_val_loss": result.log.best_val_loss,
        "corpus_hash": corpus.descriptor.get("content_hash"),
        **(extra or {}),
    }


def _write_train_artifacts(manifest: RunManifest, out: Path, name: str, result, header, model) -> None:
    save_checkpoint(out / f"{name}.safetensors", model, header)
    manifest.add_artifact(out / f"{name}.safetensors")
    result.log.write_csv(out / f"{name}_log.csv")
    manifest.add_artifact(out / f"{name}_log.csv")
    summary = {**result.log.summary(), "config_hash": header["config_hash"],
               "train_config_hash": result.log.config_hash}
    _write_json(out / f"{name}_summary.json", summary)
    manifest.add_artifact(out / f"{name}_summary.json")


@train.command("teacher")
@config_option
@seed_option
@corpus_option
@out_option
@run_command
def train_teacher_cmd(config_path, seed, corpus, out):
    """Train the teacher on aligned HES+IHC bags."""
    from .training import prepare_data, train_teacher

    cfg = RunConfig(load_config_file(config_path), seed)
    run_seed = cfg.require_seed()
    corpus = _open_corpus(corpus, cfg)
    out = Path(out)
    manifest = _start("train teacher", out, cfg)
    _corpus_inputs(manifest, corpus)
    data = prepare_data(corpus, cfg.data, run_seed, cfg.model.modalities)
    result = train_teacher(data, cfg.model, cfg.teacher)
    header = _train_header(cfg, result, corpus, cfg.teacher)
    _write_train_artifacts(manifest, out, "teacher", result, header, result.model)
    click.echo(f"teacher: {count_parameters(result.model)} parameters, best epoch {result.log.best_epoch}, "
               f"val loss {result.log.best_val_loss:.4f}")


@train.command("student")
@config_option
@seed_option
@corpus_option
@click.option("--teacher", "teacher_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Teacher checkpoint (required unless [student].teacher is set).")
@out_option
@run_command
def train_student_cmd(config_path, seed, corpus, teacher_path, out):
    """Distil a HES-only student from a trained teacher."""
    from .training import check_compatible, prepare_data, train_student

    cfg = RunConfig(load_config_file(config_path), seed)
    teacher_path = teacher_path or cfg.student.teacher
    if teacher_path is None:
        raise click.UsageError("train student needs --teacher CHECKPOINT")
    if not Path(teacher_path).is_file():
        raise click.UsageError(f"teacher checkpoint {teacher_path} does not exist")
    run_seed = cfg.require_seed()
    try:
        header = read_header(teacher_path)
        teacher_cfg = ModelConfig(**header["model"])
        check_compatible(teacher_cfg, cfg.model)
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"teacher checkpoint: {exc}") from None
    if header.get("role") != "teacher":
        raise ConfigError(f"{teacher_path} is not a teacher checkpoint")
    corpus = _open_corpus(corpus, cfg)
    out = Path(out)
    manifest = _start("train student", out, cfg)
    _corpus_inputs(manifest, corpus)
    manifest.add_input(f"teacher:{teacher_path}", file_hash(teacher_path))
    teacher, _ = load_checkpoint(teacher_path)
    data = prepare_data(corpus, cfg.data, run_seed, teacher_cfg.modalities)
    result = train_student(data, teacher, cfg.model, cfg.student)
    header = _train_header(cfg, result, corpus, cfg.student, {"teacher_hash": file_hash(teacher_path)})
    _write_train_artifacts(manifest, out, "student", result, header, result.model)
    click.echo(f"student: {count_parameters(result.model)} parameters, best epoch {result.log.best_epoch}, "
               f"val loss {result.log.best_val_loss:.4f}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@corpus_option
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@click.option("--roc", is_flag=True, help="Also write the ABC ROC curve (CSV and PNG).")
@click.option("--batch-size", type=int, default=64)
@seed_option
@out_option
@run_command
def evaluate(checkpoint, corpus, manifest_path, split, roc, batch_size, seed, out):
    """Patient-level majority-vote evaluation of a student checkpoint."""
    from .evaluation import roc_points, warn_single_class
    from .experiments import metrics_for, predict_patients, test_sequences

    header = read_header(checkpoint)
    if header.get("role") != "student":
        raise ConfigError("evaluate expects a student checkpoint")
    corpus = _open_corpus(corpus, None, manifest_path)
    patients = corpus.split(split)
    if not patients:
        raise ConfigError(f"split {split!r} has no patients")
    run_seed = resolve_seed(header.get("seed", 0), seed)
    data_cfg = DataConfig(**header["data"])
    out = Path(out)
    manifest = _start("evaluate", out)
    manifest.seed, manifest.config_hash = run_seed, header.get("config_hash")
    _corpus_inputs(manifest, corpus)
    manifest.add_input(f"checkpoint:{checkpoint}", file_hash(checkpoint))

    model, _ = load_checkpoint(checkpoint)
    seqs = test_sequences(corpus, data_cfg, run_seed, patients)
    labels = {p.patient_id: p.subtype for p in patients}
    preds = predict_patients(model, seqs, labels, batch_size)
    truth = [SUBTYPES.index(p.true_subtype) for p in preds]
    single = warn_single_class(truth)
    metrics = metrics_for(preds)

    payload = {**metrics.to_dict(), "config_hash": header.get("config_hash"), "split": split,
               "seed": run_seed}
    manifest.add_artifact(_write_json(out / "metrics.json", payload))
    cm = metrics.confusion
    manifest.add_artifact(_write_csv(out / "confusion.csv", ["true\\pred", *SUBTYPES],
                                     [[s, *cm[i].tolist()] for i, s in enumerate(SUBTYPES)]))
    rows = [
        [p.patient_id, p.true_subtype, p.subtype, p.votes["ABC"], p.votes["GCB"], repr(p.abc_fraction)]
        for p in preds
    ]
    manifest.add_artifact(_write_csv(out / "predictions.csv",
                                     ["patient_id", "true", "predicted", "abc_votes", "gcb_votes", "abc_score"],
                                     rows))
    if roc:
        if single:
            log.warning("ROC skipped: the split contains a single class")
        else:
            curve = roc_points([p.abc_fraction for p in preds], truth, positive=0)
            scores = np.array([p.abc_fraction for p in preds])
            called = [((scores >= t) == (np.array(truth) == 0)).mean() for t in curve.thresholds]
            manifest.add_artifact(_write_csv(
                out / "roc.csv", ["threshold", "fpr", "tpr", "accuracy"],
                [[_fmt(float(t)), repr(float(f)), repr(float(r)), repr(float(a))]
                 for t, f, r, a in zip(curve.thresholds, curve.fpr, curve.tpr, called)],
            ))
            manifest.add_artifact(_write_csv(
                out / "roc_accuracy.csv", ["threshold", "accuracy"],
                [[repr(float(t)), repr(float(a))] for t, a in zip(curve.accuracy_thresholds, curve.accuracy)],
            ))
            manifest.add_artifact(_plot_roc(out / "roc.png", curve))
            payload["auc_abc"] = curve.auc
            _write_json(out / "metrics.json", payload)
    click.echo(f"accuracy {metrics.accuracy:.4f} on {metrics.total} patients"
               + (f", ABC AUC {payload['auc_abc']:.4f}" if "auc_abc" in payload else ""))


def _plot_roc(path: Path, curve) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 4))
    ax1.plot(curve.fpr, curve.tpr, drawstyle="steps-post")
    ax1.plot([0, 1], [0, 1], "--", color="grey")
    ax1.set(xlabel="FPR", ylabel="TPR", title=f"ABC ROC (AUC {curve.auc:.3f})")
    ax2.plot(curve.accuracy_thresholds, curve.accuracy, marker="o")
    ax2.set(xlabel="threshold", ylabel="accuracy", ylim=(0, 1.02))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _float_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers") from None


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers") from None


@main.command("scaling-study")
@config_option
@corpus_option
@click.option("--fractions", callback=_float_list, default="0.1,0.25,0.5,0.75,1.0",
              help="Ascending training fractions, comma-separated.")
@click.option("--seeds", callback=_int_list, default=None, help="Comma-separated seeds (default: run seed).")
@click.option("--target", type=float, default=None, help="Accuracy to project the training-set size for.")
@seed_option
@out_option
@run_command
def scaling_study_cmd(config_path, corpus, fractions, seeds, target, seed, out):
    """Teacher+student on nested training subsets, with a power-law fit."""
    from .evaluation import fit_power_law
    from .experiments import scaling_study

    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise click.BadParameter("fractions must be strictly ascending", param_hint="--fractions")
    cfg = RunConfig(load_config_file(config_path), seed)
    seeds = seeds or [cfg.require_seed()]
    corpus = _open_corpus(corpus, cfg)
    out = Path(out)
    manifest = _start("scaling-study", out, cfg)
    _corpus_inputs(manifest, corpus)
    points = []
    for s in seeds:
        points.extend(scaling_study(corpus, cfg.experiment(), fractions, s))
    manifest.add_artifact(_write_csv(
        out / "scaling.csv", ["fraction", "n_patients", "accuracy", "seed"],
        [[repr(p.fraction), p.n_patients, repr(p.accuracy), p.seed] for p in points],
    ))
    by_n: dict[int, list[float]] = {}
    for p in points:
        by_n.setdefault(p.n_patients, []).append(p.accuracy)
    ns = sorted(by_n)
    acc = [float(np.mean(by_n[n])) for n in ns]
    target = cfg.target_accuracy if target is None else target
    fit_payload: dict = {"config_hash": cfg.hash(), "n": ns, "mean_accuracy": acc, "target": target}
    try:
        fit = fit_power_law(ns, acc)
    except ValueError as exc:
        fit_payload.update({"fit": None, "error": str(exc)})
    else:
        projected = fit.project(target)
        fit_payload.update({"fit": fit.to_dict(), "projected_n": projected,
                            "reachable": projected is not None})
    manifest.add_artifact(_write_json(out / "scaling_fit.json", fit_payload))
    for p in points:
        click.echo(f"seed {p.seed} fraction {p.fraction:.2f} n={p.n_patients:<4d} acc {p.accuracy:.3f}")


@main.command()
@config_option
@corpus_option
@click.option("--variant", "variants", multiple=True, required=True,
              type=click.Choice(["no_softmax", "no_class_balance", "dot_product_attention", "no_kd"]))
@click.option("--seeds", callback=_int_list, default=None, help="Comma-separated seeds (default: run seed).")
@seed_option
@out_option
@run_command
def ablate(config_path, corpus, variants, seeds, seed, out):
    """Compare the full method against single-toggle variants."""
    from .experiments import run_ablation

    cfg = RunConfig(load_config_file(config_path), seed)
    seeds = seeds or [cfg.require_seed()]
    corpus = _open_corpus(corpus, cfg)
    out = Path(out)
    manifest = _start("ablate", out, cfg)
    _corpus_inputs(manifest, corpus)
    rows = []
    for s in seeds:
        base = None
        for variant in variants:
            res = run_ablation(corpus, cfg.experiment(), variant, s, base=base)
            base = res.base
            for run, r in (("base", res.base), (variant, res.ablated)):
                m = r.metrics
                rows.append([variant, run, s, repr(m.accuracy), repr(m.precision["ABC"]), repr(m.recall["ABC"]),
                             repr(m.precision["GCB"]), repr(m.recall["GCB"])])
    header = ["variant", "run", "seed", "accuracy", "abc_precision", "abc_recall", "gcb_precision", "gcb_recall"]
    manifest.add_artifact(_write_csv(out / "ablation.csv", header, rows))
    click.echo(f"{'variant':<22} {'run':<22} {'seed':>4} {'acc':>6}")
    for r in rows:
        click.echo(f"{r[0]:<22} {r[1]:<22} {r[2]:>4} {float(r[3]):>6.3f}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@corpus_option
@click.option("--patient", "patient_id", required=True)
@seed_option
@out_option
@run_command
def attention(checkpoint, corpus, patient_id, seed, out):
    """Per-patch class-token attention overlays for every HES region of a patient."""
    from .experiments import region_attention

    header = read_header(checkpoint)
    corpus = _open_corpus(corpus)
    try:
        corpus.patient(patient_id)
    except KeyError as exc:
        raise click.BadParameter(str(exc), param_hint="--patient") from None
    data_cfg = DataConfig(**header["data"]) if "data" in header else DataConfig(
        S=header["model"]["S"], p=header["model"]["p"])
    run_seed = resolve_seed(header.get("seed", 0), seed)
    out = Path(out)
    manifest = _start("attention", out)
    manifest.seed, manifest.config_hash = run_seed, header.get("config_hash")
    manifest.add_input(f"checkpoint:{checkpoint}", file_hash(checkpoint))
    model, _ = load_checkpoint(checkpoint)
    maps = region_attention(model, corpus, patient_id, data_cfg, run_seed)
    for ra in maps:
        stem = f"{patient_id}_{ra.region_id}_attention"
        manifest.add_artifact(_write_csv(
            out / f"{stem}.csv", ["patch_row", "patch_col", "sequence", "score"],
            [[int(r), int(c), int(k), repr(float(s))] for (r, c), k, s in zip(ra.grid, ra.sequence, ra.scores)],
        ))
        manifest.add_artifact(_plot_attention(out / f"{stem}.png", ra))
    click.echo(f"{len(maps)} attention overlays written for {patient_id}")


def _plot_attention(path: Path, ra) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import colormaps
    from PIL import Image

    h, w = ra.image.shape[:2]
    heat = np.full((h, w), np.nan)
    finite = ra.scores[np.isfinite(ra.scores)]
    if finite.size:
        lo, hi = finite.min(), finite.max()
        for (r, c), s in zip(ra.grid, ra.scores):
            if np.isfinite(s):
                heat[r * ra.p:(r + 1) * ra.p, c * ra.p:(c + 1) * ra.p] = (s - lo) / (hi - lo + 1e-12)
    rgba = colormaps["jet"](np.nan_to_num(heat))[..., :3] * 255
    alpha = np.where(np.isfinite(heat), 0.45, 0.0)[..., None]
    blend = (1 - alpha) * ra.image + alpha * rgba
    Image.fromarray(np.clip(np.rint(blend), 0, 255).astype(np.uint8)).save(path)
    return path


@main.command()
@config_option
@click.option("--role", type=click.Choice(["student", "teacher"]), default="student")
def params(config_path, role):
    """Print the trainable parameter count of a model configuration."""
    cfg = RunConfig(load_config_file(config_path))
    n = count_parameters(build_model(cfg.model, role))
    click.echo(f"{role} parameters: {n} ({n / 1e6:.2f}M)")


if __name__ == "__main__":
    main()
