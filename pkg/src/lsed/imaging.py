"""Grayscale images, region/patch decomposition and DCT texture features.

Images are plain 2-D float arrays indexed ``[row, col]`` with intensities in
``[0, 1]``. The helpers here cover everything between a cropped face image and
the per-patch feature vectors that the sparse encoders consume.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage
from scipy.fft import dctn

VARIANCE_FLOOR = 1e-8
N_DCT_FEATURES = 15

PERTURBATION_KINDS = ("shift_x", "shift_y", "rotate", "scale", "blur")

# Alignment-error and sharpness grids used by the robustness experiment.
SHIFT_GRID = (-8, -6, -4, -2, 2, 4, 6, 8)
ROTATION_GRID = (-30, -20, -10, 10, 20, 30)
SCALE_GRID = (0.7, 0.8, 0.9, 1.1, 1.2, 1.3)
BLUR_GRID = (48, 32, 16)


class ConfigurationError(ValueError):
    """Raised when a patch/region geometry cannot be applied to an image."""


def as_image(pixels) -> np.ndarray:
    """Validate and return ``pixels`` as a float64 image array."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"image must be a non-empty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    return img


@dataclass(frozen=True)
class PatchGridConfig:
    regions_x: int = 3
    regions_y: int = 3
    patch_size: int = 8
    overlap_fraction: float = 0.75

    def __post_init__(self):
        if self.patch_size < 2:
            raise ConfigurationError("patch_size must be >= 2")
        if self.regions_x < 1 or self.regions_y < 1:
            raise ConfigurationError("region counts must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigurationError("overlap_fraction must lie in [0, 1)")
        step = self.patch_size * (1.0 - self.overlap_fraction)
        if abs(step - round(step)) > 1e-9 or round(step) < 1:
            raise ConfigurationError(
                f"stride {step} implied by patch_size/overlap is not a positive integer"
            )

    @property
    def stride(self) -> int:
        return int(round(self.patch_size * (1.0 - self.overlap_fraction)))

    @property
    def n_regions(self) -> int:
        return self.regions_x * self.regions_y


def region_bounds(length: int, n_blocks: int) -> list[tuple[int, int]]:
    """Split ``length`` pixels into ``n_blocks`` contiguous near-equal blocks.

    Every block gets ``length // n_blocks`` pixels and the remainder is
    appended to the last block, e.g. 64 -> 21, 21, 22.
    """
    base = length // n_blocks
    if base == 0:
        raise ConfigurationError(f"cannot split {length} pixels into {n_blocks} blocks")
    edges = [i * base for i in range(n_blocks)] + [length]
    return [(edges[i], edges[i + 1]) for i in range(n_blocks)]


def patch_count(height: int, width: int, patch_size: int, stride: int) -> int:
    """Closed-form number of patches enumerated in a ``height x width`` block."""
    if height < patch_size or width < patch_size:
        return 0
    return ((height - patch_size) // stride + 1) * ((width - patch_size) // stride + 1)


def extract_patches(image, cfg: PatchGridConfig = PatchGridConfig()) -> list[np.ndarray]:
    """Cut an image into regions and each region into overlapping patches.

    Returns one array per region (row-major region order), each of shape
    ``(n_patches, patch_size, patch_size)`` with patches enumerated row-major
    at the configured stride. Patches never straddle a region boundary.
    """
    img = as_image(image)
    p, s = cfg.patch_size, cfg.stride
    rows = region_bounds(img.shape[0], cfg.regions_y)
    cols = region_bounds(img.shape[1], cfg.regions_x)
    out = []
    for r0, r1 in rows:
        for c0, c1 in cols:
            block = img[r0:r1, c0:c1]
            if block.shape[0] < p or block.shape[1] < p:
                raise ConfigurationError(
                    f"region of size {block.shape} is smaller than the {p}x{p} patch"
                )
            windows = np.lib.stride_tricks.sliding_window_view(block, (p, p))[::s, ::s]
            out.append(windows.reshape(-1, p, p).copy())
    return out


def normalize_patch(patch, variance_floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """Zero-mean, unit sample-std normalisation; flat patches map to zeros."""
    x = np.asarray(patch, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty patch")
    centred = x - x.mean()
    if x.size < 2:
        return np.zeros_like(x)
    var = centred.ravel() @ centred.ravel() / (x.size - 1)
    if var < variance_floor:
        return np.zeros_like(x)
    out = centred / np.sqrt(var)
    # one more centring pass keeps the mean at round-off level
    return out - out.mean()


def normalize_patches(patches, variance_floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """Vectorised :func:`normalize_patch` over a stack ``(n, h, w)``."""
    x = np.asarray(patches, dtype=np.float64)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    centred = flat - flat.mean(axis=1, keepdims=True)
    m = flat.shape[1]
    var = np.einsum("ij,ij->i", centred, centred) / max(m - 1, 1)
    ok = var >= variance_floor
    out = np.zeros_like(centred)
    out[ok] = centred[ok] / np.sqrt(var[ok])[:, None]
    out[ok] -= out[ok].mean(axis=1, keepdims=True)
    return out.reshape(x.shape)


@lru_cache(maxsize=None)
def zigzag_indices(n: int) -> tuple[tuple[int, int], ...]:
    """JPEG zig-zag scan order of an ``n x n`` block as (row, col) pairs."""
    order = []
    for s in range(2 * n - 1):
        diag = [(i, s - i) for i in range(n) if 0 <= s - i < n]
        # even anti-diagonals run bottom-left to top-right
        if s % 2 == 0:
            diag.reverse()
        order.extend(diag)
    return tuple(order)


def dct2(block) -> np.ndarray:
    """Orthonormal 2-D DCT-II."""
    return dctn(np.asarray(block, dtype=np.float64), type=2, norm="ortho")


def dct_features(patch, n_features: int = N_DCT_FEATURES) -> np.ndarray:
    """Low-frequency DCT texture descriptor of a normalised square patch.

    The DC coefficient is dropped; the next ``n_features`` coefficients in
    zig-zag order are returned.
    """
    x = np.asarray(patch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"DCT features need a square patch, got shape {x.shape}")
    zz = zigzag_indices(x.shape[0])[1 : n_features + 1]
    coeffs = dct2(x)
    return np.array([coeffs[i, j] for i, j in zz])


def patch_features(patches, n_features: int = N_DCT_FEATURES) -> np.ndarray:
    """Normalise a stack of patches and return their DCT features ``(n, n_features)``."""
    x = normalize_patches(patches)
    if x.shape[0] == 0:
        return np.zeros((0, n_features))
    if x.shape[1] != x.shape[2]:
        raise ValueError("DCT features need square patches")
    coeffs = dctn(x, type=2, norm="ortho", axes=(1, 2))
    zz = np.array(zigzag_indices(x.shape[1])[1 : n_features + 1])
    return coeffs[:, zz[:, 0], zz[:, 1]]


def image_features(image, cfg: PatchGridConfig = PatchGridConfig()) -> list[np.ndarray]:
    """Per-region DCT feature matrices for one image."""
    return [patch_features(p) for p in extract_patches(image, cfg)]


# --- perturbations ---------------------------------------------------------


@dataclass(frozen=True)
class Perturbation:
    """An alignment error or blur.

    ``magnitude`` is in pixels for shifts, degrees (clockwise on screen) for
    rotations, a zoom factor for scaling and the intermediate resolution in
    pixels for blur.
    """

    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unsupported perturbation kind {self.kind!r}")
        if not np.isfinite(self.magnitude):
            raise ValueError("perturbation magnitude must be finite")


def robustness_grid() -> list[Perturbation]:
    """Every non-identity cell of the alignment/blur experiment."""
    cells = [Perturbation("shift_x", m) for m in SHIFT_GRID]
    cells += [Perturbation("shift_y", m) for m in SHIFT_GRID]
    cells += [Perturbation("rotate", m) for m in ROTATION_GRID]
    cells += [Perturbation("scale", m) for m in SCALE_GRID]
    cells += [Perturbation("blur", m) for m in BLUR_GRID]
    return cells


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img.copy()
    padded = np.pad(img, pad, mode="edge")
    r0 = pad - dy
    c0 = pad - dx
    return padded[r0 : r0 + h, c0 : c0 + w].copy()


def _affine_about_centre(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # ``matrix`` maps output (row, col) offsets to input offsets
    centre = (np.array(img.shape, dtype=np.float64) - 1.0) / 2.0
    offset = centre - matrix @ centre
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="nearest")


def resize_bilinear(img, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge replication."""
    src = np.asarray(img, dtype=np.float64)
    h, w = shape
    rows = (np.arange(h) + 0.5) * src.shape[0] / h - 0.5
    cols = (np.arange(w) + 0.5) * src.shape[1] / w - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(src, [rr, cc], order=1, mode="nearest")


def perturb(image, p: Perturbation) -> np.ndarray:
    img = as_image(image)
    if p.kind == "shift_x":
        if p.magnitude != int(p.magnitude):
            raise ValueError("shifts are whole pixels")
        return _shift(img, 0, int(p.magnitude))
    if p.kind == "shift_y":
        if p.magnitude != int(p.magnitude):
            raise ValueError("shifts are whole pixels")
        return _shift(img, int(p.magnitude), 0)
    if p.kind == "rotate":
        if p.magnitude == 0:
            return img.copy()
        t = np.deg2rad(p.magnitude)
        # positive angles turn clockwise on screen (rows grow downwards)
        rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
        return _affine_about_centre(img, rot.T)
    if p.kind == "scale":
        if p.magnitude <= 0:
            raise ValueError("scale factor must be positive")
        if p.magnitude == 1:
            return img.copy()
        return _affine_about_centre(img, np.eye(2) / p.magnitude)
    # blur
    target = int(p.magnitude)
    if target != p.magnitude or target < 1:
        raise ValueError("blur target resolution must be a positive integer")
    if target >= max(img.shape):
        return img.copy()
    small = resize_bilinear(img, (target, target))
    return resize_bilinear(small, img.shape)


# --- synthetic identity images --------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the stand-in face generator."""

    size: int = 64
    n_blobs: int = 6
    n_textures: int = 8
    texture_amplitude: float = 0.25
    noise_std: float = 0.02
    shift_jitter: int = 1
    contrast_jitter: float = 0.1
    brightness_jitter: float = 0.05


def _identity_base(identity_seed: int, params: SynthParams) -> np.ndarray:
    rng = np.random.default_rng([0x1D, identity_seed])
    n = params.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / (n - 1)
    img = 0.5 + 0.2 * (rng.uniform(-1, 1) * (xx - 0.5) + rng.uniform(-1, 1) * (yy - 0.5))
    for _ in range(params.n_blobs):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        sy, sx = rng.uniform(0.06, 0.2, size=2)
        amp = rng.uniform(-0.35, 0.35)
        img += amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    for _ in range(params.n_textures):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.08, 0.18)
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 8.0) / n
        phase = rng.uniform(0, 2 * np.pi)
        window = np.exp(-0.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2)
        wave = np.cos(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
        img += params.texture_amplitude * window * wave
    return img


def synth_identity_image(
    identity_seed: int, variation_seed: int, params: SynthParams = SynthParams()
) -> np.ndarray:
    """Deterministic synthetic "face" of one identity under one variation.

    The identity seed fixes a composition of smooth blobs, a gradient and
    localised oriented gratings; the variation seed draws a small whole-pixel
    shift, contrast/brightness jitter and pixel noise.
    """
    base = _identity_base(identity_seed, params)
    rng = np.random.default_rng([0x7A, identity_seed, variation_seed])
    img = base
    j = params.shift_jitter
    if j > 0:
        dy, dx = rng.integers(-j, j + 1, size=2)
        img = _shift(img, int(dy), int(dx))
    gain = 1.0 + params.contrast_jitter * rng.uniform(-1, 1)
    offset = params.brightness_jitter * rng.uniform(-1, 1)
    img = 0.5 + gain * (img - 0.5) + offset
    if params.noise_std > 0:
        img = img + rng.normal(0.0, params.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)
