"""Face descriptors: the locally pooled sparse-code descriptor and holistic baselines."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dictionary import AtomDictionary
from .encoding import KIND_L1, Encoder, L1EncoderConfig, SparseCode, encode_l1
from .imaging import PatchGridConfig, as_image, extract_patches, patch_features

ENCODER_TAGS = {"l1": 1, "sann": 2, "gmm": 3, "holistic": 4}


@dataclass(frozen=True)
class FaceDescriptor:
    """``R`` pooled region vectors stored as an ``(R, N)`` array."""

    regions: np.ndarray
    encoder_kind: str
    config_hash: bytes

    def __post_init__(self):
        h = np.asarray(self.regions, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError("regions must be an (R, N) array")
        if not np.all(np.isfinite(h)):
            raise ValueError("descriptor contains non-finite values")
        if len(self.config_hash) != 8:
            raise ValueError("config hash must be 8 bytes")
        object.__setattr__(self, "regions", h)

    @property
    def n_regions(self) -> int:
        return self.regions.shape[0]

    @property
    def n_codes(self) -> int:
        return self.regions.shape[1]

    @property
    def vector(self) -> np.ndarray:
        """Concatenated descriptor of length ``R * N``."""
        return self.regions.ravel()

    def __len__(self):
        return self.regions.size

    def compatible_with(self, other: "FaceDescriptor") -> bool:
        return (
            self.regions.shape == other.regions.shape
            and self.encoder_kind == other.encoder_kind
            and self.config_hash == other.config_hash
        )


def config_hash(encoder: Encoder, cfg: PatchGridConfig) -> bytes:
    """8-byte digest binding a descriptor to its model and patch geometry."""
    h = hashlib.blake2b(digest_size=8)
    h.update(encoder.kind.encode())
    h.update(encoder.model_id.encode())
    h.update(repr((cfg.regions_x, cfg.regions_y, cfg.patch_size, cfg.overlap_fraction)).encode())
    return h.digest()


def pool_codes(codes, absolute: bool = False) -> np.ndarray:
    """Average a region's patch codes into one vector."""
    codes = np.asarray(codes, dtype=np.float64)
    if absolute:
        codes = np.abs(codes)
    return codes.mean(axis=0)


def _encode_chunks(encoder: Encoder, feats: np.ndarray, threads: int) -> np.ndarray:
    if threads <= 1 or feats.shape[0] < 2 * threads:
        return encoder.encode_batch(feats)
    chunks = np.array_split(feats, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(encoder.encode_batch, chunks))
    # results reassembled in chunk order, independent of completion order
    return np.vstack(parts)


def lsed_descriptor(
    image, encoder: Encoder, cfg: PatchGridConfig = PatchGridConfig(), threads: int = 1
) -> FaceDescriptor:
    """Locally sparse encoded descriptor of one image.

    Each region's patches are normalised, turned into DCT features, encoded,
    and average-pooled. l1 codes are passed through ``abs`` before pooling.
    """
    img = as_image(image)
    regions = extract_patches(img, cfg)
    feats = [patch_features(p) for p in regions]
    if feats[0].shape[1] != encoder.dim:
        raise ValueError(
            f"encoder expects {encoder.dim}-dim features, patches give {feats[0].shape[1]}"
        )
    counts = [f.shape[0] for f in feats]
    codes = _encode_chunks(encoder, np.vstack(feats), threads)
    pooled = []
    start = 0
    for n in counts:
        pooled.append(pool_codes(codes[start : start + n], absolute=encoder.kind == KIND_L1))
        start += n
    return FaceDescriptor(np.array(pooled), encoder.kind, config_hash(encoder, cfg))


def mean_set_descriptor(descriptors) -> FaceDescriptor:
    """Element-wise mean of a set of homogeneous descriptors."""
    descriptors = list(descriptors)
    if not descriptors:
        raise ValueError("cannot average an empty descriptor set")
    first = descriptors[0]
    for d in descriptors[1:]:
        if not first.compatible_with(d):
            raise ValueError("descriptors in a set must share encoder, config and shape")
    mean = np.mean([d.regions for d in descriptors], axis=0)
    return FaceDescriptor(mean, first.encoder_kind, first.config_hash)


# --- holistic baselines -----------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (n_pixels, k), orthonormal columns
    eigenvalues: np.ndarray  # all non-negative eigenvalues, descending
    energy: float = 0.99

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    @property
    def retained_energy(self) -> float:
        total = self.eigenvalues.sum()
        return float(self.eigenvalues[: self.n_components].sum() / total) if total > 0 else 1.0


def _vectorise(images) -> np.ndarray:
    return np.array([as_image(im).ravel() for im in images])


def pca_train(images, energy: float = 0.99) -> PcaModel:
    """PCA basis keeping the fewest components whose eigenvalues reach ``energy`` of the total.

    Vectors may be images or already-flat feature vectors.
    """
    X = np.array([np.asarray(im, dtype=np.float64).ravel() for im in images])
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least two training samples")
    if not 0 < energy <= 1:
        raise ValueError("energy fraction must lie in (0, 1]")
    mean = X.mean(axis=0)
    # covariance eigen-decomposition via SVD of the centred data
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    eig = s**2 / (X.shape[0] - 1)
    total = eig.sum()
    if total == 0:
        k = 1
    else:
        frac = np.cumsum(eig) / total
        k = int(np.searchsorted(frac, energy - 1e-12) + 1)
        k = min(k, eig.size)
    return PcaModel(mean, Vt[:k].T.copy(), eig, energy)


def pca_project(model: PcaModel, image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64).ravel()
    if x.shape != model.mean.shape:
        raise ValueError("input size does not match the PCA model")
    return (x - model.mean) @ model.basis


def holistic_dictionary(features) -> AtomDictionary:
    """Dictionary whose atoms are the normalised holistic training features (rows)."""
    return AtomDictionary.from_columns(np.asarray(features, dtype=np.float64).T)


def holistic_sr_descriptor(dictionary: AtomDictionary, x, cfg: L1EncoderConfig = L1EncoderConfig()) -> SparseCode:
    """Raw (signed) l1 code of a holistic feature vector."""
    return encode_l1(dictionary, x, cfg)
