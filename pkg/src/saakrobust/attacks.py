"""FGSM, BIM and DeepFool against a differentiable classifier on [0, 1] pixels.

The model must provide ``logits``, ``predict``, ``input_gradient`` and
``class_score_gradients`` with batch support (see ``models.TargetMLP``).
Everything here is deterministic given model and input.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .datasets import LabeledSet

METHODS = ("none", "fgsm", "bim", "deepfool")
# added to |f| in each DeepFool step so a point sitting exactly on the boundary still moves
DEEPFOOL_NUDGE = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.25
    alpha: float | None = None  # BIM step; defaults to epsilon / 4
    iterations: int = 10
    overshoot: float = 0.02
    max_iter_df: int = 50

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.iterations < 1 or self.max_iter_df < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.alpha is None else self.alpha


@dataclass(frozen=True, eq=False)
class AdversarialResult:
    image: np.ndarray
    success: bool
    linf_norm: float
    l2_norm: float
    iterations_used: int


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x, x.ndim == 3


def _check_shape(x: np.ndarray, model) -> None:
    shape = getattr(model, "input_shape", None)
    if shape is not None and x.shape[-len(shape):] != tuple(shape):
        raise ValueError(f"input shape {x.shape} does not match model input {shape}")


def fgsm_batch(x: np.ndarray, labels, model, epsilon: float) -> np.ndarray:
    """x' = clip(x + eps * sign(grad_x J)) for a batch; sign(0) = 0."""
    _check_shape(x, model)
    grad = model.input_gradient(x, labels)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def bim_batch(x: np.ndarray, labels, model, epsilon: float, alpha: float, iterations: int) -> np.ndarray:
    """Iterated FGSM; after each step project into the eps-ball around x, then into [0, 1]."""
    _check_shape(x, model)
    if alpha > epsilon:
        warnings.warn(f"BIM step {alpha} exceeds budget {epsilon}", stacklevel=2)
    lo, hi = x - epsilon, x + epsilon
    adv = x
    for _ in range(iterations):
        grad = model.input_gradient(adv, labels)
        adv = np.clip(np.clip(adv + alpha * np.sign(grad), lo, hi), 0.0, 1.0)
    return adv


def deepfool_batch(x: np.ndarray, model, max_iter: int = 50, overshoot: float = 0.02):
    """Multiclass DeepFool on a batch (N, ...).

    Returns (adversarial images, iterations used, aborted flags). A sample is
    aborted when every candidate direction has zero gradient difference.
    """
    _check_shape(x, model)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    orig = model.logits(x).argmax(axis=-1)
    r_tot = np.zeros_like(flat)
    iters = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    aborted = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    for _ in range(max_iter):
        current = np.clip(flat + (1 + overshoot) * r_tot, 0.0, 1.0)
        pred = model.logits(current.reshape(x.shape)).argmax(axis=-1)
        active &= pred == orig
        if not active.any():
            break
        idx = np.flatnonzero(active)
        pts = current[idx].reshape((idx.size,) + x.shape[1:])
        f = model.logits(pts)
        grads = model.class_score_gradients(pts).reshape(idx.size, f.shape[1], -1)
        k0 = orig[idx]
        w = grads - grads[rows[:idx.size], k0][:, None, :]
        f_hat = f - f[rows[:idx.size], k0][:, None]
        w_norm = np.linalg.norm(w, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f_hat) / w_norm
        dist[rows[:idx.size], k0] = np.inf
        dist[w_norm == 0] = np.inf
        target = dist.argmin(axis=-1)
        stuck = ~np.isfinite(dist[rows[:idx.size], target])
        if stuck.any():
            aborted[idx[stuck]] = True
            active[idx[stuck]] = False
        ok = ~stuck
        sel = rows[:idx.size][ok]
        w_l = w[sel, target[ok]]
        scale = (np.abs(f_hat[sel, target[ok]]) + DEEPFOOL_NUDGE) / w_norm[sel, target[ok]] ** 2
        r_tot[idx[ok]] += scale[:, None] * w_l
        iters[idx[ok]] += 1

    adv = np.clip(flat + (1 + overshoot) * r_tot, 0.0, 1.0)
    return adv.reshape(x.shape), iters, aborted


def _result(x, adv, model, label_or_pred, iterations) -> AdversarialResult:
    diff = (adv - x).ravel()
    pred = int(model.logits(adv).argmax())
    return AdversarialResult(adv, pred != int(label_or_pred), float(np.abs(diff).max(initial=0.0)),
                             float(np.linalg.norm(diff)), int(iterations))


def fgsm(x, label: int, model, epsilon: float) -> AdversarialResult:
    """Single-image FGSM. ``success`` means the prediction changed."""
    x, _ = _batch(x)
    adv = fgsm_batch(x[None], np.array([label]), model, epsilon)[0]
    return _result(x, adv, model, model.logits(x).argmax(), 1)


def bim(x, label: int, model, epsilon: float, alpha: float, iterations: int) -> AdversarialResult:
    x, _ = _batch(x)
    adv = bim_batch(x[None], np.array([label]), model, epsilon, alpha, iterations)[0]
    return _result(x, adv, model, model.logits(x).argmax(), iterations)


def deepfool(x, model, max_iter: int = 50, overshoot: float = 0.02) -> AdversarialResult:
    x, _ = _batch(x)
    adv, iters, aborted = deepfool_batch(x[None], model, max_iter, overshoot)
    res = _result(x, adv[0], model, model.logits(x).argmax(), iters[0])
    if aborted[0]:
        return AdversarialResult(res.image, False, res.linf_norm, res.l2_norm, res.iterations_used)
    return res


@dataclass(frozen=True, eq=False)
class AttackLog:
    method: str
    success: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    iterations: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if self.success.size else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "method", "success", "linf", "l2", "iterations"])
            for i in range(self.success.size):
                writer.writerow([i, self.method, int(self.success[i]), f"{self.linf[i]:.6f}",
                                 f"{self.l2[i]:.6f}", int(self.iterations[i])])


def attack_set(dataset: LabeledSet, model, method: str, cfg: AttackConfig = AttackConfig(),
               batch_size: int = 500) -> tuple[LabeledSet, AttackLog]:
    """Attack every image of a set; labels are carried over unchanged."""
    if method not in METHODS:
        raise ValueError(f"unknown attack {method!r}; expected one of {METHODS}")
    outputs, iterations, aborted_all = [], [], []
    for start in range(0, len(dataset), batch_size):
        x = np.asarray(dataset.images[start:start + batch_size])
        y = dataset.labels[start:start + batch_size]
        fails = np.zeros(len(y), dtype=bool)
        if method == "none":
            adv, its = x.copy(), np.zeros(len(y), dtype=np.int64)
        elif method == "fgsm":
            adv, its = fgsm_batch(x, y, model, cfg.epsilon), np.ones(len(y), dtype=np.int64)
        elif method == "bim":
            adv = bim_batch(x, y, model, cfg.epsilon, cfg.step, cfg.iterations)
            its = np.full(len(y), cfg.iterations, dtype=np.int64)
        else:
            adv, its, fails = deepfool_batch(x, model, cfg.max_iter_df, cfg.overshoot)
        outputs.append(adv)
        iterations.append(its)
        aborted_all.append(fails)
    if not outputs:
        return dataset, AttackLog(method, *(np.zeros(0) for _ in range(4)))
    adv = np.concatenate(outputs)
    before = model.logits(np.asarray(dataset.images)).argmax(axis=-1)
    after = model.logits(adv).argmax(axis=-1)
    diff = (adv - dataset.images).reshape(len(dataset), -1)
    success = (before != after) & ~np.concatenate(aborted_all)
    log = AttackLog(method, success, np.abs(diff).max(axis=1), np.linalg.norm(diff, axis=1),
                    np.concatenate(iterations))
    return dataset.with_images(adv), log
