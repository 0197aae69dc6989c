"""Cross-entropy ranking of Saak responses and the resulting feature masks.

For every location (i, j, k) of a stage output, the N training responses are
histogrammed into B equal-width bins, each non-empty bin votes for its
majority class, and the class probabilities derived from those votes give an
entropy H. Low H means the location separates classes well. Positions are then
ranked per spectral dim, and spectral dims by their spatially averaged H.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-8
DEFAULT_BINS = 10
LITERAL = "literal"
PER_BIN = "per_bin"
VARIANTS = (LITERAL, PER_BIN)


def bin_assign(values, num_bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over [min, max]; the maximum lands in the last bin.

    The bin index is ``min(B - 1, floor((v - min) / (max - min) * B))``.
    A constant input puts everything in bin 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if num_bins < 2:
        raise ValueError("need at least 2 bins")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64), np.full(num_bins + 1, lo)
    idx = np.floor((values - lo) / (hi - lo) * num_bins).astype(np.int64)
    return np.minimum(idx, num_bins - 1), np.linspace(lo, hi, num_bins + 1)


def _bin_columns(values: np.ndarray, num_bins: int) -> np.ndarray:
    """Column-wise bin_assign for an (N, L) matrix."""
    lo = values.min(axis=0)
    span = values.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    idx = np.floor((values - lo) / safe * num_bins).astype(np.int64)
    idx = np.minimum(idx, num_bins - 1)
    idx[:, span == 0] = 0
    return idx


def majority_class_per_bin(bins, labels, num_classes: int) -> np.ndarray:
    """Most frequent class of each non-empty bin, in bin order; ties go to the
    lowest class index. Empty bins are skipped."""
    bins = np.asarray(bins)
    labels = np.asarray(labels)
    num_bins = int(bins.max()) + 1 if bins.size else 0
    counts = np.zeros((num_bins, num_classes), dtype=np.int64)
    np.add.at(counts, (bins, labels), 1)
    nonempty = counts.sum(axis=1) > 0
    return counts[nonempty].argmax(axis=1)


def _entropy_from_counts(counts: np.ndarray, class_totals: np.ndarray, variant: str) -> np.ndarray:
    """H for a stack of (bins x classes) count tables, shape (L, B, C) -> (L,)."""
    if variant == LITERAL:
        num_classes = counts.shape[-1]
        population = counts.sum(axis=-1)
        nonempty = population > 0
        mc = counts.argmax(axis=-1)
        votes = np.stack([((mc == c) & nonempty).sum(axis=-1) for c in range(num_classes)], -1)
        p = np.maximum(votes / nonempty.sum(axis=-1, keepdims=True), PROB_FLOOR)
        return (-np.log(p)) @ class_totals
    if variant == PER_BIN:
        population = counts.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.maximum(counts / np.where(population > 0, population, 1), PROB_FLOOR)
        return (counts * -np.log(p)).sum(axis=(-2, -1))
    raise ValueError(f"unknown entropy variant {variant!r}; expected one of {VARIANTS}")


def location_entropy(values, labels, num_bins: int = DEFAULT_BINS, num_classes: int | None = None,
                     variant: str = LITERAL) -> float:
    """Cross-entropy H of one location's N responses.

    ``literal``: p_c is the share of non-empty bins whose majority class is c
    (floored at 1e-8), and H = sum_n -log p_{label(n)}.
    ``per_bin``: p is the share of sample n's own class within its bin.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    bins, _ = bin_assign(values, num_bins)
    counts = np.zeros((num_bins, num_classes), dtype=np.int64)
    np.add.at(counts, (bins, labels), 1)
    totals = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return float(_entropy_from_counts(counts[None], totals, variant)[0])


@dataclass(frozen=True, eq=False)
class EntropyMap:
    stage_index: int
    values: np.ndarray  # (D1, D2, K)

    @property
    def shape(self):
        return self.values.shape


def compute_entropy_map(blocks: np.ndarray, labels, num_classes: int, num_bins: int = DEFAULT_BINS,
                        variant: str = LITERAL, stage_index: int = 0,
                        chunk: int = 256) -> EntropyMap:
    """Entropy at every (i, j, k) of an (N, D1, D2, K) stack of stage outputs."""
    blocks = np.asarray(blocks)
    labels = np.asarray(labels, dtype=np.int64)
    if blocks.ndim != 4 or blocks.shape[0] != labels.shape[0]:
        raise ValueError(f"blocks {blocks.shape} do not align with {labels.shape[0]} labels")
    n = blocks.shape[0]
    flat = blocks.reshape(n, -1)
    totals = np.bincount(labels, minlength=num_classes).astype(np.float64)
    out = np.empty(flat.shape[1])
    for start in range(0, flat.shape[1], chunk):
        cols = flat[:, start:start + chunk]
        width = cols.shape[1]
        bins = _bin_columns(cols, num_bins)
        key = (np.arange(width) * num_bins + bins) * num_classes + labels[:, None]
        counts = np.bincount(key.ravel(), minlength=width * num_bins * num_classes)
        out[start:start + width] = _entropy_from_counts(
            counts.reshape(width, num_bins, num_classes), totals, variant)
    return EntropyMap(stage_index, out.reshape(blocks.shape[1:]))


@dataclass(frozen=True, eq=False)
class SelectionMask:
    stage_index: int
    shape: tuple[int, int, int]  # (D1, D2, K) of the stage output
    spatial_keep: tuple[np.ndarray, ...]  # per spectral dim: sorted flat positions i*D2 + j
    spectral_keep: np.ndarray  # retained spectral dims, lowest mean entropy first

    def __post_init__(self):
        d1, d2, k = self.shape
        if len(self.spatial_keep) != k:
            raise ValueError(f"need spatial positions for all {k} spectral dims")
        spectral = np.asarray(self.spectral_keep, dtype=np.int64)
        if len(set(spectral.tolist())) != spectral.size or (spectral.size and spectral.max() >= k):
            raise ValueError("spectral_keep must hold distinct indices below K")
        object.__setattr__(self, "spectral_keep", spectral)
        object.__setattr__(self, "spatial_keep",
                           tuple(np.asarray(s, dtype=np.int64) for s in self.spatial_keep))

    def positions(self, k: int) -> list[tuple[int, int]]:
        d2 = self.shape[1]
        return [(int(p) // d2, int(p) % d2) for p in self.spatial_keep[k]]

    def flat_indices(self) -> np.ndarray:
        """Indices into a flattened (D1, D2, K) block, in feature-vector order."""
        k_total = self.shape[2]
        return np.concatenate([self.spatial_keep[k] * k_total + k for k in self.spectral_keep])

    @property
    def length(self) -> int:
        return int(sum(self.spatial_keep[k].size for k in self.spectral_keep))


def spatial_select(entropy: EntropyMap, keep: int) -> tuple[np.ndarray, ...]:
    """Per spectral dim, the ``keep`` positions with the lowest H (row-major ties)."""
    d1, d2, k_total = entropy.shape
    if not 1 <= keep <= d1 * d2:
        raise ValueError(f"spatial keep must be in [1, {d1 * d2}]")
    flat = entropy.values.reshape(d1 * d2, k_total)
    order = np.argsort(flat, axis=0, kind="stable")[:keep]
    return tuple(np.sort(order[:, k]) for k in range(k_total))


def spectral_means(entropy: EntropyMap) -> np.ndarray:
    return entropy.values.mean(axis=(0, 1))


def spectral_select(entropy: EntropyMap, keep: int) -> np.ndarray:
    """The ``keep`` spectral dims with lowest spatially averaged H (lowest index on ties)."""
    k_total = entropy.shape[2]
    if not 1 <= keep <= k_total:
        raise ValueError(f"spectral keep must be in [1, {k_total}]")
    return np.argsort(spectral_means(entropy), kind="stable")[:keep]


def default_keep(entropy: EntropyMap, spatial_fraction: float = 0.5,
                 spectral_fraction: float = 0.5) -> tuple[int, int]:
    d1, d2, k_total = entropy.shape
    return (max(1, math.ceil(spatial_fraction * d1 * d2)),
            max(1, math.ceil(spectral_fraction * k_total)))


def fit_mask(entropy: EntropyMap, spatial_keep: int | None = None,
             spectral_keep: int | None = None) -> SelectionMask:
    r_default, k_default = default_keep(entropy)
    spatial = spatial_select(entropy, r_default if spatial_keep is None else spatial_keep)
    spectral = spectral_select(entropy, k_default if spectral_keep is None else spectral_keep)
    return SelectionMask(entropy.stage_index, tuple(entropy.shape), spatial, spectral)


def full_mask(stage_index: int, shape) -> SelectionMask:
    d1, d2, k = shape
    return SelectionMask(stage_index, tuple(shape), tuple(np.arange(d1 * d2) for _ in range(k)),
                         np.arange(k))


def assemble_features(blocks, masks) -> np.ndarray:
    """Concatenate the masked responses of every stage.

    ``blocks`` is the list returned by ``SaakPipeline.transform_all`` (single
    image or batch). Layout: stage, then spectral dims in mask order, then
    retained positions in row-major order.
    """
    if len(blocks) != len(masks):
        raise ValueError(f"{len(blocks)} stage outputs but {len(masks)} masks")
    parts = []
    single = np.asarray(blocks[0]).ndim == 3
    for block, mask in zip(blocks, masks):
        block = np.asarray(block)
        if block.shape[-3:] != tuple(mask.shape):
            raise ValueError(f"stage {mask.stage_index}: block {block.shape[-3:]} vs mask {mask.shape}")
        flat = block.reshape(-1, math.prod(mask.shape))
        parts.append(flat[:, mask.flat_indices()])
    features = np.concatenate(parts, axis=1)
    return features[0] if single else features


# ---------------------------------------------------------------------------
# text / CSV formats


def save_masks(masks, path) -> None:
    """One ``spectral`` line per stage, then one ``spatial`` line per spectral dim
    listing retained positions as i,j pairs."""
    lines = ["SAAKMASK1", f"stages {len(masks)}"]
    for mask in masks:
        d1, d2, k = mask.shape
        lines.append(f"stage {mask.stage_index} shape {d1} {d2} {k}")
        lines.append("spectral " + " ".join(str(int(v)) for v in mask.spectral_keep))
        for dim in range(k):
            pos = " ".join(f"{i},{j}" for i, j in mask.positions(dim))
            lines.append(f"spatial {dim} {pos}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def load_masks(path) -> list[SelectionMask]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "SAAKMASK1":
        raise ValueError(f"{path}: not a SAAKMASK1 file")
    count = int(lines[1].split()[1])
    masks, pos = [], 2
    for _ in range(count):
        head = lines[pos].split()
        stage, (d1, d2, k) = int(head[1]), map(int, head[3:6])
        spectral = [int(v) for v in lines[pos + 1].split()[1:]]
        spatial = []
        for dim in range(k):
            fields = lines[pos + 2 + dim].split()
            if fields[:2] != ["spatial", str(dim)]:
                raise ValueError(f"{path}: malformed line {pos + 3 + dim}")
            spatial.append([int(a) * d2 + int(b) for a, b in (f.split(",") for f in fields[2:])])
        masks.append(SelectionMask(stage, (d1, d2, k), tuple(spatial), spectral))
        pos += 2 + k
    return masks


def write_entropy_csv(maps, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "i", "j", "k", "H"])
        for emap in maps:
            d1, d2, k_total = emap.shape
            for i in range(d1):
                for j in range(d2):
                    for k in range(k_total):
                        writer.writerow([emap.stage_index, i, j, k, f"{emap.values[i, j, k]:.6f}"])
