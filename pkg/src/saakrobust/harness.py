"""End-to-end robustness experiment: Saak classifier vs. a pixel-space MLP
protected by pre-processing defenses, under FGSM / BIM / DeepFool.

Artifacts written to the output directory (names shared with the CLI)::

    pipeline.saak  masks.txt  entropy.csv  head.smax  target.smlp
    report.csv  diagnostics.csv  config.cfg  metadata.json  manifest.txt
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets
from .attacks import AttackConfig, attack_set
from .config import DataConfig, ExperimentConfig, SelectConfig
from .datasets import LabeledSet
from .defenses import DefenseSpec, apply_defense
from .models import SoftmaxClassifier, TargetMLP, TrainConfig, evaluate_accuracy, train_mlp, train_softmax
from .saak import SaakPipeline, fit_pipeline, signed_coefficients
from .selection import (EntropyMap, SelectionMask, assemble_features, compute_entropy_map, default_keep,
                        fit_mask, load_masks, save_masks, write_entropy_csv)

log = logging.getLogger(__name__)

PIPELINE_FILE = "pipeline.saak"
MASKS_FILE = "masks.txt"
ENTROPY_FILE = "entropy.csv"
HEAD_FILE = "head.smax"
TARGET_FILE = "target.smlp"
REPORT_FILE = "report.csv"
DIAG_FILE = "diagnostics.csv"
CONFIG_FILE = "config.cfg"
METADATA_FILE = "metadata.json"
MANIFEST_FILE = "manifest.txt"

REPORT_HEADER = ("defense", "attack", "epsilon", "c_clean", "c_attack", "drop_pp")
DIAG_HEADER = ("stage", "spectral_dim", "rmse", "normalized_rmse", "q25_clean", "q50_clean",
               "q75_clean", "q25_adv", "q50_adv", "q75_adv")
SAAK_ROW = "saak"
ASYMMETRY_NOTE = ("defense rows: the target MLP classifies defended images; saak rows: the Saak "
                  "classifier classifies the attacked images directly, without pre-processing; "
                  "attacks are always crafted against the target MLP")
RMS_FLOOR = 1e-12


class ExperimentError(RuntimeError):
    """A run failed; the message starts with the name of the failing stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc


# ---------------------------------------------------------------------------
# data


def load_data(dc: DataConfig) -> tuple[LabeledSet, LabeledSet]:
    """Train and test sets described by a DataConfig.

    ``n_train``/``n_test`` (0 keeps everything) take either a seeded uniform
    sample in file order (``subset = random``) or the leading samples
    (``subset = first``). The MNIST test file is not shuffled, so its leading
    block is not representative of the whole test set.
    """
    pad = dc.pad or None
    if dc.kind == "mnist":
        train = datasets.load_idx(dc.path(dc.train_images), dc.path(dc.train_labels), dc.num_classes, pad)
        test = datasets.load_idx(dc.path(dc.test_images), dc.path(dc.test_labels), dc.num_classes, pad)
    elif dc.kind == "cifar10":
        train = datasets.load_cifar10(_paths(dc, dc.train_batches))
        test = datasets.load_cifar10(_paths(dc, dc.test_batches))
        if pad:
            train = train.with_images(datasets.pad_images(train.images, pad))
            test = test.with_images(datasets.pad_images(test.images, pad))
    else:
        full = datasets.synth_blobs(dc.n_per_class, dc.num_classes, dc.side, dc.seed)
        if pad:
            full = full.with_images(datasets.pad_images(full.images, pad))
        train, test = datasets.split(full, dc.train_fraction, dc.seed)
    return _take(train, dc.n_train, dc), _take(test, dc.n_test, dc)


def _paths(dc: DataConfig, text: str) -> list[Path]:
    return [dc.path(p.strip()) for p in text.split(",") if p.strip()]


def _take(ds: LabeledSet, n: int, dc: DataConfig) -> LabeledSet:
    if not n or n >= len(ds):
        return ds
    if dc.subset == "first":
        return ds.subset(np.arange(n))
    rng = np.random.default_rng(dc.seed)
    return ds.subset(np.sort(rng.choice(len(ds), size=n, replace=False)))


# ---------------------------------------------------------------------------
# Saak classifier


@dataclass(eq=False)
class SaakClassifier:
    """Saak transform -> entropy-selected features -> softmax head."""

    pipeline: SaakPipeline
    masks: list
    head: SoftmaxClassifier

    def features(self, images, batch_size: int = 2000) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            return assemble_features(self.pipeline.transform_all(images), self.masks)
        parts = [assemble_features(self.pipeline.transform_all(images[s:s + batch_size]), self.masks)
                 for s in range(0, images.shape[0], batch_size)]
        return np.concatenate(parts)

    def logits(self, images) -> np.ndarray:
        return self.head.logits(self.features(images))

    def predict(self, images):
        return self.head.predict(self.features(images))

    def save(self, directory) -> None:
        directory = Path(directory)
        self.pipeline.save(directory / PIPELINE_FILE)
        save_masks(self.masks, directory / MASKS_FILE)
        self.head.save(directory / HEAD_FILE)

    @classmethod
    def load(cls, directory) -> "SaakClassifier":
        directory = Path(directory)
        return cls(SaakPipeline.load(directory / PIPELINE_FILE), load_masks(directory / MASKS_FILE),
                   SoftmaxClassifier.load(directory / HEAD_FILE))


def fit_selection(pipeline: SaakPipeline, train: LabeledSet, select: SelectConfig
                  ) -> tuple[list[EntropyMap], list[SelectionMask]]:
    """Entropy maps of every stage on the training set and the masks they induce."""
    blocks = pipeline.transform_all(train.images)
    maps, masks = [], []
    for p, block in enumerate(blocks):
        emap = compute_entropy_map(block, train.labels, train.num_classes, select.bins,
                                   select.variant, stage_index=p)
        r, k = default_keep(emap, select.spatial_fraction, select.spectral_fraction)
        maps.append(emap)
        masks.append(fit_mask(emap, r, k))
    return maps, masks


def train_head(pipeline: SaakPipeline, masks, train: LabeledSet, cfg: TrainConfig) -> SaakClassifier:
    model = SaakClassifier(pipeline, list(masks), None)
    model.head = train_softmax(model.features(train.images), train.labels, cfg, train.num_classes)
    return model


def fit_saak_classifier(train: LabeledSet, cfg: ExperimentConfig):
    """Pipeline, selection and head fitted on clean training data.

    Returns (classifier, entropy maps).
    """
    pipeline = fit_pipeline(train, cfg.stages, seed=cfg.seed)
    maps, masks = fit_selection(pipeline, train, cfg.select)
    return train_head(pipeline, masks, train, cfg.head), maps


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class ReportRow:
    defense: str
    attack: str
    epsilon: float | None
    c_clean: float  # percent
    c_attack: float  # percent

    @property
    def drop(self) -> float:
        return self.c_clean - self.c_attack


@dataclass
class RobustnessReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self, defense: str, attack: str, epsilon=None) -> ReportRow:
        for r in self.rows:
            if r.defense == defense and r.attack == attack and r.epsilon == epsilon:
                return r
        raise KeyError((defense, attack, epsilon))


def _pct(fraction: float) -> float:
    return round(100.0 * fraction, 4)


def _fmt_eps(eps) -> str:
    return "" if eps is None else f"{eps:.4f}"


def write_report(report: RobustnessReport, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in report.rows:
                w.writerow([r.defense, r.attack, _fmt_eps(r.epsilon), f"{r.c_clean:.4f}",
                            f"{r.c_attack:.4f}", f"{r.drop:.4f}"])
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def read_report(path) -> RobustnessReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header {header}")
        rows = [ReportRow(d, a, float(e) if e else None, float(c), float(ca))
                for d, a, e, c, ca, _ in reader]
    return RobustnessReport(rows)


# ---------------------------------------------------------------------------
# spectral diagnostics


@dataclass(frozen=True, eq=False)
class SpectralDiagnostics:
    stage: int
    rmse: np.ndarray
    normalized_rmse: np.ndarray
    quantiles_clean: np.ndarray  # (dims, 3): 25/50/75 %
    quantiles_adv: np.ndarray

    @property
    def num_dims(self) -> int:
        return self.rmse.shape[0]

    def half_means(self) -> tuple[float, float]:
        """Mean normalized RMSE over the lower and the upper half of spectral dims."""
        half = self.num_dims // 2
        return float(self.normalized_rmse[:half].mean()), float(self.normalized_rmse[-half:].mean())


def _stage_input(pipeline: SaakPipeline, images: np.ndarray, stage: int) -> np.ndarray:
    if stage == 0:
        return images
    return pipeline.transform_all(images)[stage - 1]


def spectral_diagnostics(clean: LabeledSet, attacked: LabeledSet, pipeline: SaakPipeline,
                         stage: int = 0) -> SpectralDiagnostics:
    """Per spectral dimension (DC, then AC by decreasing eigenvalue) of stage
    ``stage``, compare signed Saak coefficients of clean and attacked images."""
    if len(clean) != len(attacked) or clean.shape != attacked.shape:
        raise ValueError("clean and attacked sets are not aligned")
    if not np.array_equal(clean.labels, attacked.labels):
        raise ValueError("clean and attacked sets have different labels")
    if not 0 <= stage < len(pipeline.stages):
        raise ValueError(f"stage {stage} out of range")
    st = pipeline.stages[stage]
    a = signed_coefficients(_stage_input(pipeline, clean.images, stage), st)
    b = signed_coefficients(_stage_input(pipeline, attacked.images, stage), st)
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    rmse = np.sqrt(np.mean((a - b) ** 2, axis=0))
    rms = np.maximum(np.sqrt(np.mean(a ** 2, axis=0)), RMS_FLOOR)
    qs = (25, 50, 75)
    return SpectralDiagnostics(stage, rmse, rmse / rms, np.percentile(a, qs, axis=0).T,
                               np.percentile(b, qs, axis=0).T)


def write_diagnostics(diag: SpectralDiagnostics, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DIAG_HEADER)
            for k in range(diag.num_dims):
                vals = [diag.rmse[k], diag.normalized_rmse[k], *diag.quantiles_clean[k],
                        *diag.quantiles_adv[k]]
                w.writerow([diag.stage, k] + [f"{v:.4f}" for v in vals])
    except OSError as exc:
        raise OSError(f"cannot write diagnostics {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# experiment


def attack_grid(cfg: ExperimentConfig) -> list[tuple[str, float | None]]:
    """(method, epsilon) columns in config order; epsilon is None where unused."""
    out = []
    for m in cfg.attacks.methods:
        if m in ("fgsm", "bim"):
            out.extend((m, float(e)) for e in cfg.attacks.epsilons)
        else:
            out.append((m, None))
    return out


def attack_config(cfg: ExperimentConfig, epsilon: float | None) -> AttackConfig:
    a = cfg.attacks
    return AttackConfig(epsilon=epsilon or 0.0, alpha=a.bim_alpha or None, iterations=a.bim_iterations,
                        overshoot=a.overshoot, max_iter_df=a.max_iter)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory) -> Path:
    directory = Path(directory)
    lines = [f"{sha256_file(p)}  {p.name}" for p in sorted(directory.iterdir())
             if p.is_file() and p.name != MANIFEST_FILE]
    path = directory / MANIFEST_FILE
    path.write_text("\n".join(lines) + "\n")
    return path


def run_experiment(cfg: ExperimentConfig, output=None) -> RobustnessReport:
    """Fit everything on clean training data, attack the target MLP, and tabulate
    accuracy drops for every defense row and for the Saak classifier."""
    cfg.validate()
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    report = RobustnessReport(metadata={"config_hash": cfg.hash(), "note": ASYMMETRY_NOTE})
    cfg.save(out / CONFIG_FILE)
    status = "failed"
    try:
        with _stage("data"):
            train, test = load_data(cfg.data)
            report.metadata.update(n_train=len(train), n_test=len(test), image_shape=list(train.shape))
        with _stage("saak"):
            saak, maps = fit_saak_classifier(train, cfg)
            saak.save(out)
            write_entropy_csv(maps, out / ENTROPY_FILE)
        with _stage("target"):
            target = train_mlp(train, cfg.target_hidden, cfg.target)
            target.save(out / TARGET_FILE)
        with _stage("evaluate-clean"):
            saak_clean = _pct(evaluate_accuracy(saak, test))
            mlp_clean = _pct(evaluate_accuracy(target, test))
            log.info("clean accuracy: saak %.2f%%, target %.2f%%", saak_clean, mlp_clean)

        adversarial = {}
        for method, eps in attack_grid(cfg):
            with _stage(f"attack {method} eps={_fmt_eps(eps) or '-'}"):
                adv, alog = attack_set(test, target, method, attack_config(cfg, eps))
                adversarial[(method, eps)] = adv
                log.info("%s eps=%s: success rate %.3f", method, eps, alog.success_rate)

        for spec in cfg.defense_specs():
            with _stage(f"defense {spec}"):
                for (method, eps), adv in adversarial.items():
                    acc = _pct(evaluate_accuracy(target, apply_defense(adv, spec)))
                    report.rows.append(ReportRow(str(spec), method, eps, mlp_clean, acc))
            write_report(report, out / REPORT_FILE)
        with _stage("saak-evaluate"):
            for (method, eps), adv in adversarial.items():
                report.rows.append(ReportRow(SAAK_ROW, method, eps, saak_clean,
                                             _pct(evaluate_accuracy(saak, adv))))
            write_report(report, out / REPORT_FILE)

        with _stage("diagnostics"):
            eps = cfg.diag_epsilon
            adv = adversarial.get(("fgsm", eps))
            if adv is None:
                adv, _ = attack_set(test, target, "fgsm", attack_config(cfg, eps))
            diag = spectral_diagnostics(test, adv, saak.pipeline, cfg.diag_stage)
            write_diagnostics(diag, out / DIAG_FILE)
        status = "complete"
        return report
    finally:
        report.metadata.update(status=status, runtime_seconds=round(time.perf_counter() - started, 3))
        if report.rows:
            write_report(report, out / REPORT_FILE)
        (out / METADATA_FILE).write_text(json.dumps(report.metadata, indent=2, sort_keys=True) + "\n")
        write_manifest(out)
