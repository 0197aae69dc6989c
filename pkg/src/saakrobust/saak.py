"""Multi-stage Saak transform: KLT on non-overlapping local cuboids, with every
AC kernel augmented by its negative and rectified (sign-to-position format).

Blocks are arrays of shape (H, W, K) or batched (N, H, W, K). Stage outputs
put the DC response in channel 0 followed by interleaved (positive, negative)
pairs for each AC kernel, so a stage with K_ac AC kernels emits 1 + 2*K_ac
channels.
"""
from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"SAAK1"
MAX_FIT_ROWS = 2_000_000
ORTHONORMAL_TOL = 1e-6


class ShapeError(ValueError):
    pass


class RankError(ValueError):
    pass


class DegenerateStageWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CuboidSpec:
    kernel_size: int
    input_channels: int

    def __post_init__(self):
        if self.kernel_size < 2:
            raise ValueError("kernel_size must be >= 2")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")

    @property
    def n(self) -> int:
        return self.kernel_size ** 2 * self.input_channels


@dataclass(frozen=True)
class StageConfig:
    kernel_size: int = 2
    energy: float = 1.0
    max_ac: int | None = None  # None: no cap beyond n - 1


@dataclass(frozen=True, eq=False)
class KernelStage:
    spec: CuboidSpec
    ac_kernels: np.ndarray  # (K_ac, n), rows orthonormal and orthogonal to DC
    eigenvalues: np.ndarray  # (K_ac,), non-increasing
    degenerate: bool = False

    def __post_init__(self):
        ac = np.array(self.ac_kernels, dtype=np.float64)
        ev = np.array(self.eigenvalues, dtype=np.float64)
        if ac.ndim != 2 or ac.shape[1] != self.spec.n:
            raise ShapeError(f"AC kernels must be (K_ac, {self.spec.n}), got {ac.shape}")
        if not 1 <= ac.shape[0] <= self.spec.n - 1:
            raise ShapeError(f"K_ac must be in [1, {self.spec.n - 1}], got {ac.shape[0]}")
        if ev.shape != (ac.shape[0],):
            raise ShapeError("one eigenvalue per AC kernel required")
        ac.setflags(write=False)
        ev.setflags(write=False)
        object.__setattr__(self, "ac_kernels", ac)
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def num_ac(self) -> int:
        return self.ac_kernels.shape[0]

    @property
    def output_channels(self) -> int:
        return 1 + 2 * self.num_ac

    @property
    def dc_kernel(self) -> np.ndarray:
        n = self.spec.n
        return np.full(n, 1.0 / np.sqrt(n))

    def basis(self) -> np.ndarray:
        """DC kernel stacked on top of the AC kernels, shape (1 + K_ac, n)."""
        return np.vstack([self.dc_kernel, self.ac_kernels])

    def gram_error(self) -> float:
        b = self.basis()
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.abs(b @ b.T - np.eye(b.shape[0])).max())


# ---------------------------------------------------------------------------
# cuboid tiling


def _as_batch(block: np.ndarray) -> tuple[np.ndarray, bool]:
    block = np.asarray(block)
    if block.ndim == 3:
        return block[None], True
    if block.ndim == 4:
        return block, False
    raise ShapeError(f"expected (H, W, K) or (N, H, W, K) block, got shape {block.shape}")


def _tile(block: np.ndarray, spec: CuboidSpec) -> np.ndarray:
    """(N, H, W, K) -> (N, H/k, W/k, k*k*K), each cuboid flattened in (h, w, c) order."""
    n_img, h, w, c = block.shape
    k = spec.kernel_size
    if h % k or w % k:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by kernel size {k}")
    if c != spec.input_channels:
        raise ShapeError(f"block has {c} channels, stage expects {spec.input_channels}")
    t = block.reshape(n_img, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(n_img, h // k, w // k, spec.n)


def _untile(cuboids: np.ndarray, spec: CuboidSpec) -> np.ndarray:
    n_img, d1, d2, _ = cuboids.shape
    k, c = spec.kernel_size, spec.input_channels
    t = cuboids.reshape(n_img, d1, d2, k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(n_img, d1 * k, d2 * k, c)


def extract_cuboids(block: np.ndarray, spec: CuboidSpec) -> np.ndarray:
    """Non-overlapping k x k x K cuboids as rows of an (M, n) matrix, tiles in
    row-major order (image-major for batched input)."""
    batch, _ = _as_batch(block)
    return _tile(batch, spec).reshape(-1, spec.n)


# ---------------------------------------------------------------------------
# fitting


def _dc_complement(n: int) -> np.ndarray:
    """Orthonormal basis (n, n-1) of the subspace orthogonal to the constant vector.

    Columns 1.. of the Householder reflector that maps e_0 onto the DC kernel.
    """
    dc = np.full(n, 1.0 / np.sqrt(n))
    u = np.zeros(n)
    u[0] = 1.0
    u -= dc
    u /= np.linalg.norm(u)
    reflector = np.eye(n) - 2.0 * np.outer(u, u)
    return reflector[:, 1:]


def canonical_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so that its largest-magnitude entry is positive.

    Entries within a relative 1e-9 of the maximum magnitude count as tied; the
    lowest index among tied entries decides.
    """
    out = np.array(vectors, dtype=np.float64)
    mags = np.abs(out)
    for row, mag in zip(out, mags):
        peak = mag.max()
        if peak == 0:
            continue
        idx = int(np.flatnonzero(mag >= peak * (1 - 1e-9))[0])
        if row[idx] < 0:
            row *= -1
    return out


def select_num_ac(eigenvalues: np.ndarray, energy: float, max_ac: int | None, n: int) -> int:
    """Smallest count whose eigenvalue mass reaches ``energy`` of the total,
    capped by ``max_ac`` and n - 1. ``energy >= 1`` keeps every component."""
    limit = n - 1 if max_ac is None else min(max_ac, n - 1)
    if energy >= 1.0:
        return limit
    total = eigenvalues.sum()
    cumulative = np.cumsum(eigenvalues)
    k = int(np.searchsorted(cumulative, energy * total * (1 - 1e-12))) + 1
    return max(1, min(limit, k))


def fit_stage(samples: np.ndarray, energy: float = 1.0, max_ac: int | None = None,
              kernel_size: int | None = None, input_channels: int | None = None) -> KernelStage:
    """Fit one stage from a matrix of flattened cuboids (rows are samples).

    The DC projection is removed from every sample and the AC kernels are the
    leading eigenvectors of the covariance (divisor M) of what remains. A
    residual with zero variance yields a single arbitrary AC kernel and a
    ``degenerate`` stage, with a warning.
    """
    samples = np.asarray(samples, dtype=np.float64)
    m, n = samples.shape
    if kernel_size is None:
        kernel_size, input_channels = _infer_spec(n)
    spec = CuboidSpec(kernel_size, input_channels)
    if spec.n != n:
        raise ShapeError(f"sample width {n} does not match cuboid size {spec.n}")
    if m < n:
        raise RankError(f"need at least {n} samples to fit a {n}-dim stage, got {m}")
    if not 0.0 < energy <= 1.0:
        raise ValueError("energy fraction must be in (0, 1]")
    if max_ac is not None and not 1 <= max_ac <= n - 1:
        raise ValueError(f"max_ac must be in [1, {n - 1}]")

    # Work in coordinates of the DC complement; this removes the DC projection
    # and keeps every AC kernel exactly orthogonal to DC.
    q = _dc_complement(n)
    coords = samples @ q
    coords = coords - coords.mean(axis=0)
    cov = coords.T @ coords / m
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    scale = max(float(np.mean(samples ** 2)), np.finfo(float).tiny)
    if evals.sum() <= 1e-12 * scale:
        warnings.warn("zero residual variance; stage is degenerate", DegenerateStageWarning,
                      stacklevel=2)
        return KernelStage(spec, canonical_sign(q[:, :1].T), np.zeros(1), degenerate=True)

    k = select_num_ac(evals, energy, max_ac, n)
    ac = canonical_sign((q @ evecs[:, :k]).T)
    return KernelStage(spec, ac, evals[:k])


def _infer_spec(n: int) -> tuple[int, int]:
    k = int(round(np.sqrt(n)))
    if k * k != n:
        raise ShapeError("pass kernel_size/input_channels for non-square cuboid widths")
    return k, 1


# ---------------------------------------------------------------------------
# transforms


def forward_stage(block: np.ndarray, stage: KernelStage) -> np.ndarray:
    """Project every cuboid on the stage kernels and split signs into channels."""
    batch, single = _as_batch(block)
    dtype = batch.dtype if batch.dtype in (np.float32, np.float64) else np.float64
    cuboids = _tile(batch.astype(dtype, copy=False), stage.spec)
    basis = stage.basis().astype(dtype)
    coefs = cuboids @ basis.T
    ac = coefs[..., 1:]
    out = np.empty(coefs.shape[:3] + (stage.output_channels,), dtype=dtype)
    out[..., 0] = np.maximum(coefs[..., 0], 0)
    out[..., 1::2] = np.maximum(ac, 0)
    out[..., 2::2] = np.maximum(-ac, 0)
    return out[0] if single else out


def inverse_stage(features: np.ndarray, stage: KernelStage) -> np.ndarray:
    """Recombine (pos, neg) pairs into signed coefficients and unfold cuboids."""
    batch, single = _as_batch(features)
    if batch.shape[-1] != stage.output_channels:
        raise ShapeError(
            f"features have {batch.shape[-1]} channels, stage emits {stage.output_channels}")
    dtype = batch.dtype if batch.dtype in (np.float32, np.float64) else np.float64
    signed = np.concatenate([batch[..., :1], batch[..., 1::2] - batch[..., 2::2]], axis=-1)
    cuboids = signed @ stage.basis().astype(dtype)
    out = _untile(cuboids, stage.spec)
    return out[0] if single else out


def signed_coefficients(block: np.ndarray, stage: KernelStage) -> np.ndarray:
    """Raw (unrectified) projections [dc, ac_1, ..., ac_K] per cuboid."""
    batch, single = _as_batch(block)
    coefs = _tile(batch.astype(np.float64), stage.spec) @ stage.basis().T
    return coefs[0] if single else coefs


@dataclass(frozen=True, eq=False)
class SaakPipeline:
    stages: tuple[KernelStage, ...]
    input_shape: tuple[int, int, int]
    configs: tuple[StageConfig, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        h, w, c = self.input_shape
        for p, stage in enumerate(self.stages):
            k = stage.spec.kernel_size
            if h % k or w % k:
                raise ShapeError(f"stage {p}: input {h}x{w} not divisible by kernel size {k}")
            if stage.spec.input_channels != c:
                raise ShapeError(f"stage {p}: expects {stage.spec.input_channels} channels, gets {c}")
            h, w, c = h // k, w // k, stage.output_channels

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """Output (D1, D2, K) of every stage."""
        shapes = []
        h, w, _ = self.input_shape
        for stage in self.stages:
            k = stage.spec.kernel_size
            h, w = h // k, w // k
            shapes.append((h, w, stage.output_channels))
        return shapes

    def transform_all(self, images: np.ndarray, batch_size: int = 2000) -> list[np.ndarray]:
        """Outputs of every stage for one image (H, W, C) or a batch (N, H, W, C)."""
        batch, single = _as_batch(images)
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(f"image shape {batch.shape[1:]} != pipeline input {self.input_shape}")
        outputs = [[] for _ in self.stages]
        for start in range(0, batch.shape[0], batch_size):
            block = batch[start:start + batch_size]
            for p, stage in enumerate(self.stages):
                block = forward_stage(block, stage)
                outputs[p].append(block)
        if batch.shape[0] == 0:
            return [np.zeros((0,) + s) for s in self.stage_shapes()]
        blocks = [np.concatenate(o) for o in outputs]
        return [b[0] for b in blocks] if single else blocks

    def forward(self, images: np.ndarray) -> np.ndarray:
        return self.transform_all(images)[-1]

    def inverse(self, features: np.ndarray, from_stage: int | None = None) -> np.ndarray:
        """Map the output of stage ``from_stage`` (default: last) back to images."""
        last = len(self.stages) - 1 if from_stage is None else from_stage
        block = features
        for stage in reversed(self.stages[:last + 1]):
            block = inverse_stage(block, stage)
        return block

    # serialization -------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self.stages)), struct.pack("<3I", *self.input_shape)]
        for stage in self.stages:
            parts.append(struct.pack("<4I", stage.spec.kernel_size, stage.spec.input_channels,
                                     stage.num_ac, stage.spec.n))
            parts.append(stage.ac_kernels.astype("<f8").tobytes())
            parts.append(stage.eigenvalues.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> "SaakPipeline":
        return cls.from_bytes(Path(path).read_bytes(), source=str(path))

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "SaakPipeline":
        if data[:5] != MAGIC:
            raise ValueError(f"{source}: not a SAAK1 pipeline file")
        pos = 5
        (count,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from("<3I", data, pos + 4)
        pos += 16
        stages = []
        for p in range(count):
            k, k_in, k_ac, n = struct.unpack_from("<4I", data, pos)
            pos += 16
            ac = np.frombuffer(data, "<f8", k_ac * n, pos).reshape(k_ac, n)
            pos += 8 * k_ac * n
            ev = np.frombuffer(data, "<f8", k_ac, pos)
            pos += 8 * k_ac
            stage = KernelStage(CuboidSpec(k, k_in), ac, ev, degenerate=not ev.any())
            if not stage.gram_error() <= ORTHONORMAL_TOL:  # also rejects NaN
                raise ValueError(f"{source}: stage {p} kernels are not orthonormal")
            stages.append(stage)
        if pos != len(data):
            raise ValueError(f"{source}: {len(data) - pos} trailing bytes")
        return cls(tuple(stages), shape)


def _subsample(rows: np.ndarray, limit: int, seed: int) -> np.ndarray:
    if rows.shape[0] <= limit:
        return rows
    keep = np.sort(np.random.default_rng(seed).choice(rows.shape[0], size=limit, replace=False))
    return rows[keep]


def fit_pipeline(images, configs, max_rows: int = MAX_FIT_ROWS, seed: int = 0) -> SaakPipeline:
    """Fit stage after stage on clean training images.

    ``images`` is an (N, H, W, C) array or anything with an ``images``
    attribute (a LabeledSet). Stage p is fitted on cuboids of the stage p-1
    outputs over the whole set; above ``max_rows`` cuboids a fixed-seed
    uniform subsample is used.
    """
    images = np.asarray(getattr(images, "images", images), dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError("fit_pipeline expects an (N, H, W, C) batch")
    configs = tuple(c if isinstance(c, StageConfig) else StageConfig(*c) for c in configs)
    block = images
    stages = []
    for p, cfg in enumerate(configs):
        spec = CuboidSpec(cfg.kernel_size, block.shape[-1])
        rows = _subsample(extract_cuboids(block, spec), max_rows, seed + p)
        stage = fit_stage(rows, cfg.energy, cfg.max_ac, spec.kernel_size, spec.input_channels)
        log.info("stage %d: k=%d n=%d K_ac=%d (%d cuboids)", p, spec.kernel_size, spec.n,
                 stage.num_ac, rows.shape[0])
        stages.append(stage)
        if p + 1 < len(configs):
            block = forward_stage(block, stage)
    return SaakPipeline(tuple(stages), images.shape[1:], configs)


MNIST_STAGES = (StageConfig(2, 1.0, 3), StageConfig(2, 0.99, 8), StageConfig(2, 0.99, 16))
CIFAR_STAGES = (StageConfig(3, 1.0, None), StageConfig(2, 0.99, 16), StageConfig(2, 0.99, 16))
