"""Input-transformation defenses applied before a classifier.

Each transform maps an (H, W, C) image or an (N, H, W, C) batch with values in
[0, 1] to an array of the same shape and range. Channels are processed
independently except in pixel deflection, which moves whole pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn, idctn

from .datasets import LabeledSet

METHODS = ("none", "jpeg", "bitdepth", "median", "nlmeans", "tvm", "deflect")

# Annex K luminance quantization table
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

TV_SMOOTHING = 1e-6


class DivergenceError(RuntimeError):
    pass


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (N, H, W, C), got {x.shape}")


def _unbatch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[0] if single else x


# ---------------------------------------------------------------------------


def bit_depth_reduce(x, bits: int) -> np.ndarray:
    """Quantize to 2**bits levels, rounding halves up."""
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in [1, 8]")
    q = 2 ** bits - 1
    return np.floor(np.asarray(x, dtype=np.float64) * q + 0.5) / q


def median_filter(x, window: int) -> np.ndarray:
    """3x3: centred window, edge replication. 2x2: window covers (i..i+1, j..j+1)
    with the far edges replicated; the median of 4 is the mean of the middle two."""
    batch, single = _as_batch(x)
    if window == 3:
        padded = np.pad(batch, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    elif window == 2:
        padded = np.pad(batch, ((0, 0), (0, 1), (0, 1), (0, 0)), mode="edge")
    else:
        raise ValueError("median window must be 2 or 3")
    windows = sliding_window_view(padded, (window, window), axis=(1, 2))
    out = np.median(windows.reshape(windows.shape[:4] + (-1,)), axis=-1)
    return _unbatch(out, single)


def nl_means(x, h: float = 0.1, patch: int = 3, search: int = 7, sigma: float = 0.0) -> np.ndarray:
    """Non-local means with weights exp(-max(d2 - 2 sigma^2, 0) / h^2), where d2
    is the mean squared difference of patch x patch neighbourhoods. The search
    window runs over the edge-replicated image."""
    if patch % 2 == 0 or search % 2 == 0:
        raise ValueError("patch and search sizes must be odd")
    if h <= 0:
        raise ValueError("h must be positive")
    batch, single = _as_batch(x)
    n, height, width, c = batch.shape
    ps, ss = patch // 2, search // 2
    pad = ps + ss
    padded = np.pad(batch, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    # reference patches live at offset (ss, ss) inside the padded grid
    ref = padded[:, ss:ss + height + 2 * ps, ss:ss + width + 2 * ps]
    num = np.zeros_like(batch)
    den = np.zeros_like(batch)
    for dy in range(-ss, ss + 1):
        for dx in range(-ss, ss + 1):
            shifted = padded[:, ss + dy:ss + dy + height + 2 * ps, ss + dx:ss + dx + width + 2 * ps]
            diff2 = (ref - shifted) ** 2
            d2 = sliding_window_view(diff2, (patch, patch), axis=(1, 2)).mean(axis=(-2, -1))
            weight = np.exp(-np.maximum(d2 - 2 * sigma ** 2, 0.0) / h ** 2)
            centre = shifted[:, ps:ps + height, ps:ps + width]
            num += weight * centre
            den += weight
    return _unbatch(np.clip(num / den, 0.0, 1.0), single)


def _forward_diff(u: np.ndarray):
    dy = np.zeros_like(u)
    dx = np.zeros_like(u)
    dy[:, :-1] = u[:, 1:] - u[:, :-1]
    dx[:, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return dy, dx


def total_variation(x) -> float:
    """Smoothed isotropic TV, sum of sqrt(dy^2 + dx^2 + eps^2) per channel."""
    batch, _ = _as_batch(x)
    dy, dx = _forward_diff(batch)
    return float(np.sqrt(dy ** 2 + dx ** 2 + TV_SMOOTHING ** 2).sum())


def tv_energy(u, x, lam: float) -> float:
    return float(((np.asarray(u) - np.asarray(x)) ** 2).sum() + lam * total_variation(u))


def _tv_grad(u: np.ndarray) -> np.ndarray:
    dy, dx = _forward_diff(u)
    mag = np.sqrt(dy ** 2 + dx ** 2 + TV_SMOOTHING ** 2)
    py, px = dy / mag, dx / mag
    # gradient of sum |grad u| is minus the divergence of (py, px)
    div = np.zeros_like(u)
    div[:, :-1] += py[:, :-1]
    div[:, 1:] -= py[:, :-1]
    div[:, :, :-1] += px[:, :, :-1]
    div[:, :, 1:] -= px[:, :, :-1]
    return -div


def tvm(x, lam: float = 0.1, iters: int = 100) -> np.ndarray:
    """Minimize ||u - x||^2 + lam * TV(u) by gradient descent with step
    0.1 / (1 + 4 lam), then clip to [0, 1].

    Each image keeps its lowest-energy iterate (the start, u = x, included),
    so the returned energy never exceeds that of the input.
    """
    if lam <= 0 or iters < 1:
        raise ValueError("lambda must be > 0 and iters >= 1")
    batch, single = _as_batch(x)
    step = 0.1 / (1 + 4 * lam)

    def energies(u):
        dy, dx = _forward_diff(u)
        tv = np.sqrt(dy ** 2 + dx ** 2 + TV_SMOOTHING ** 2).sum(axis=(1, 2, 3))
        return ((u - batch) ** 2).sum(axis=(1, 2, 3)) + lam * tv

    u = batch.copy()
    best, best_e = u.copy(), energies(u)
    for _ in range(iters):
        u = u - step * (2 * (u - batch) + lam * _tv_grad(u))
        e = energies(u)
        if not np.isfinite(e).all():
            raise DivergenceError("TV minimization produced a non-finite energy")
        better = e < best_e
        best[better] = u[better]
        best_e = np.where(better, e, best_e)
    return _unbatch(np.clip(best, 0.0, 1.0), single)


def pixel_deflect(x, count: int = 200, window: int = 5, seed=0) -> np.ndarray:
    """Replace ``count`` random pixels (all channels) by a random other pixel
    from the window around them, clipped to the image.

    ``seed`` is an int or a ``numpy.random.Generator``. Batches are deflected
    with one draw sequence, each step touching every image.
    """
    if count < 1 or window < 3 or window % 2 == 0:
        raise ValueError("count must be >= 1 and window odd >= 3")
    batch, single = _as_batch(x)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = batch.copy()
    n, h, w, _ = out.shape
    r = window // 2
    rows = np.arange(n)
    for _ in range(count):
        pi = rng.integers(0, h, size=n)
        pj = rng.integers(0, w, size=n)
        i0, i1 = np.maximum(pi - r, 0), np.minimum(pi + r, h - 1)
        j0, j1 = np.maximum(pj - r, 0), np.minimum(pj + r, w - 1)
        span_j = j1 - j0 + 1
        cells = (i1 - i0 + 1) * span_j - 1  # every neighbour except p itself
        pick = np.floor(rng.random(n) * cells).astype(np.int64)
        own = (pi - i0) * span_j + (pj - j0)
        pick += pick >= own
        qi, qj = i0 + pick // span_j, j0 + pick % span_j
        out[rows, pi, pj] = out[rows, qi, qj]
    return _unbatch(out, single)


def jpeg_quant_table(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError("JPEG quality must be in [1, 100]")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.maximum(1.0, np.floor(JPEG_LUMA * scale / 100 + 0.5))


def jpeg_approx(x, quality: int = 90) -> np.ndarray:
    """JPEG lossiness without entropy coding: level shift, 8x8 orthonormal DCT-II,
    quantize/dequantize with the quality-scaled luminance table, inverse DCT.
    Every channel uses the same table; edge blocks are padded by replication."""
    table = jpeg_quant_table(quality)
    batch, single = _as_batch(x)
    n, h, w, c = batch.shape
    ph, pw = -h % 8, -w % 8
    shifted = np.pad(batch, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge") * 255.0 - 128.0
    hb, wb = (h + ph) // 8, (w + pw) // 8
    blocks = shifted.reshape(n, hb, 8, wb, 8, c).transpose(0, 1, 3, 5, 2, 4)
    coefs = dctn(blocks, axes=(-2, -1), norm="ortho")
    coefs = np.round(coefs / table) * table
    restored = idctn(coefs, axes=(-2, -1), norm="ortho")
    restored = restored.transpose(0, 1, 4, 2, 5, 3).reshape(n, h + ph, w + pw, c)
    out = np.clip((restored[:, :h, :w] + 128.0) / 255.0, 0.0, 1.0)
    return _unbatch(out, single)


# ---------------------------------------------------------------------------


_PARAM_DEFAULTS = {
    "none": {},
    "jpeg": {"q": 90},
    "bitdepth": {"bits": 4},
    "median": {"w": 3},
    "nlmeans": {"h": 0.1, "patch": 3, "search": 7},
    "tvm": {"lambda": 0.1, "iters": 100},
    "deflect": {"count": 200, "window": 5, "seed": 7},
}
_INT_PARAMS = {"q", "bits", "w", "patch", "search", "iters", "count", "window", "seed"}


@dataclass(frozen=True)
class DefenseSpec:
    method: str = "none"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown defense {self.method!r}; expected one of {METHODS}")
        merged = dict(_PARAM_DEFAULTS[self.method])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"{self.method}: unknown parameters {sorted(unknown)}")
        merged.update(self.params)
        merged = {k: int(v) if k in _INT_PARAMS else float(v) for k, v in merged.items()}
        object.__setattr__(self, "params", merged)
        p = merged
        bad = ((self.method == "jpeg" and not 1 <= p["q"] <= 100)
               or (self.method == "bitdepth" and not 1 <= p["bits"] <= 8)
               or (self.method == "median" and p["w"] not in (2, 3))
               or (self.method == "nlmeans" and (p["h"] <= 0 or p["patch"] % 2 == 0 or p["search"] % 2 == 0))
               or (self.method == "tvm" and (p["lambda"] <= 0 or p["iters"] < 1))
               or (self.method == "deflect" and (p["count"] < 1 or p["window"] < 3 or p["window"] % 2 == 0)))
        if bad:
            raise ValueError(f"invalid parameters for {self.method}: {merged}")

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        """Parse ``method`` or ``method:key=value,key=value``."""
        method, _, rest = text.strip().partition(":")
        params = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"malformed defense parameter {item!r} in {text!r}")
            params[key.strip()] = value.strip()
        return cls(method.strip(), params)

    def __str__(self) -> str:
        if not self.params:
            return self.method
        return self.method + ":" + ",".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                                            for k, v in self.params.items())

    @property
    def label(self) -> str:
        p = self.params
        return {"none": "none", "jpeg": f"jpeg-q{p.get('q')}", "bitdepth": f"bitdepth-{p.get('bits')}",
                "median": f"median-{p.get('w')}x{p.get('w')}", "nlmeans": "nlmeans", "tvm": "tvm",
                "deflect": "deflect"}[self.method]

    def apply(self, images) -> np.ndarray:
        p = self.params
        if self.method == "none":
            return np.array(images, dtype=np.float64)
        if self.method == "jpeg":
            return jpeg_approx(images, p["q"])
        if self.method == "bitdepth":
            return bit_depth_reduce(images, p["bits"])
        if self.method == "median":
            return median_filter(images, p["w"])
        if self.method == "nlmeans":
            return nl_means(images, p["h"], p["patch"], p["search"])
        if self.method == "tvm":
            return tvm(images, p["lambda"], p["iters"])
        return pixel_deflect(images, p["count"], p["window"], p["seed"])


def apply_defense(dataset: LabeledSet, spec: DefenseSpec, batch_size: int = 500) -> LabeledSet:
    """Apply a defense to every image; labels unchanged."""
    if spec.method == "none":
        return dataset
    if spec.method == "deflect":
        # one generator for the whole set keeps the result independent of batching
        p = spec.params
        return dataset.with_images(pixel_deflect(dataset.images, p["count"], p["window"], p["seed"]))
    parts = [spec.apply(dataset.images[s:s + batch_size]) for s in range(0, len(dataset), batch_size)]
    if not parts:
        return dataset
    return dataset.with_images(np.concatenate(parts))
